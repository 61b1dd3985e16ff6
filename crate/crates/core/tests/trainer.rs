mod common;

use common::fixtures::{randomize_trainable, small_config};
use posegen_core::codec::{Codec, CodecConfig};
use posegen_core::dit::params::Group;
use posegen_core::dit::DitModel;
use posegen_core::numerics::{Rng, Tape, Tensor};
use posegen_core::synth::{make_dataset, Sample, SynthConfig};
use posegen_core::trainer::{
    apply_condition_dropout, loss_weights, prepare_examples, train, training_bundle, training_loss, Checkpoint,
    DropoutDraw, Draw, Example, Role, TrainConfig,
};
use posegen_core::Error;
use std::sync::OnceLock;

fn codec() -> Codec {
    Codec::new(CodecConfig {
        channels: 4,
        ..Default::default()
    })
    .unwrap()
}

fn samples() -> &'static [Sample] {
    static S: OnceLock<Vec<Sample>> = OnceLock::new();
    S.get_or_init(|| {
        make_dataset(
            3,
            SynthConfig {
                frames: 17,
                height: 32,
                width: 32,
            },
            4,
        )
        .unwrap()
    })
}

fn examples(role: Role) -> Vec<Example> {
    prepare_examples(samples(), &codec(), role, 0.25).unwrap()
}

fn quick(role: Role, steps: usize) -> TrainConfig {
    TrainConfig {
        role,
        steps,
        batch_size: 2,
        seed: 5,
        ..Default::default()
    }
}

fn loss_value(model: &DitModel, ex: &Example, draw: &Draw) -> f64 {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, false);
    let l = training_loss(model, &mut tape, &w, ex, draw).unwrap();
    tape.value(l).data()[0] as f64
}

#[test]
fn zero_output_model_loss_is_masked_target_energy() {
    let mut model = DitModel::new(small_config()).unwrap();
    let out: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.name == "out/w" || p.name == "out/b" || p.name.starts_with("lora/out/"))
        .map(|(id, _)| id)
        .collect();
    assert!(out.len() >= 2);
    for id in out {
        let z = Tensor::zeros(model.store().get(id).shape());
        model.store_mut().set(id, z).unwrap();
    }
    for role in [Role::Base, Role::Stitch] {
        let ex = &examples(role)[0];
        let draw = Draw::sample(ex, 0.0, &mut Rng::new(1));
        let keep = ex.mask.preserved_latent_frames();
        let [c, f, h, w] = *ex.x0.shape() else { panic!() };
        let (mut sum, mut n) = (0.0f64, 0usize);
        for ch in 0..c {
            for j in (0..f).filter(|&j| !keep[j]) {
                for i in 0..h * w {
                    let at = (ch * f + j) * h * w + i;
                    let d = draw.eps.data()[at] as f64 - ex.x0.data()[at] as f64;
                    sum += d * d;
                    n += 1;
                }
            }
        }
        let want = sum / n as f64;
        let got = loss_value(&model, ex, &draw);
        assert!((got - want).abs() < 1e-5 * want, "{role}: {got} vs {want}");
    }
}

#[test]
fn stitch_loss_ignores_preserved_latents() {
    let ex = &examples(Role::Stitch)[0];
    let keep = ex.mask.preserved_latent_frames();
    assert_eq!(keep, vec![true, true, false, false, true]);
    let wt = loss_weights(ex).unwrap();
    let [c, f, h, w] = *ex.x0.shape() else { panic!() };
    let free = 2 * c * h * w;
    for ch in 0..c {
        for j in 0..f {
            let at = (ch * f + j) * h * w;
            let want = if keep[j] { 0.0 } else { 1.0 / free as f32 };
            assert!(wt.data()[at..at + h * w].iter().all(|&x| x == want));
        }
    }
    let total: f64 = wt.data().iter().map(|&x| x as f64).sum();
    assert!((total - 1.0).abs() < 1e-5);
    // Preserved positions of the noisy input carry the noised ground truth.
    let draw = Draw::sample(ex, 0.0, &mut Rng::new(2));
    let b = training_bundle(ex, &draw).unwrap();
    assert_eq!(b.mask, ex.mask.latent_mask);
}

#[test]
fn base_examples_preserve_nothing() {
    for ex in examples(Role::Base) {
        assert!(ex.mask.preserved_latent_frames().iter().all(|&k| !k));
        assert!(ex.mask.latent_mask.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn dropout_rate_matches_probability() {
    let ex = &examples(Role::Base)[0];
    let bundle = training_bundle(ex, &Draw::sample(ex, 0.0, &mut Rng::new(3))).unwrap();
    let mut rng = Rng::new(4);
    let (mut hands, mut keys, mut both) = (0usize, 0usize, 0usize);
    let n = 10_000;
    for i in 0..n {
        let (out, d) = if i < 50 {
            apply_condition_dropout(&bundle, &ex.z_pose_no_hands, 0.1, &mut rng).unwrap()
        } else {
            (bundle.clone(), DropoutDraw::draw(0.1, &mut rng))
        };
        if i < 50 {
            assert_eq!(out.z_hand.data().iter().all(|&x| x == 0.0), d.hand);
            assert_eq!(out.z_pose.bit_eq(&ex.z_pose_no_hands), d.keypoints);
        }
        hands += d.hand as usize;
        keys += d.keypoints as usize;
        both += (d.hand && d.keypoints) as usize;
    }
    for count in [hands, keys] {
        let rate = count as f64 / n as f64;
        assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
    }
    // Independent draws: joint rate near p².
    assert!((both as f64 / n as f64 - 0.01).abs() < 0.005);
    assert!(apply_condition_dropout(&bundle, &ex.z_pose_no_hands, 1.5, &mut rng).is_err());
}

#[test]
fn zero_steps_keep_the_initialisation() {
    let mut model = DitModel::new(small_config()).unwrap();
    let before = Checkpoint::from_model(&model, Role::Base, 0);
    let rows = train(&mut model, &examples(Role::Base), &quick(Role::Base, 0)).unwrap();
    assert!(rows.is_empty());
    assert_eq!(Checkpoint::from_model(&model, Role::Base, 0), before);
}

#[test]
fn training_touches_only_trainable_parameters() {
    let mut model = DitModel::new(small_config()).unwrap();
    let base = model.store().group_digest(Group::Base);
    let before = model.store().clone();
    let rows = train(&mut model, &examples(Role::Base), &quick(Role::Base, 3)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.loss.is_finite()));
    assert_eq!(model.store().group_digest(Group::Base), base);
    let mut changed = 0;
    for ((_, a), (_, b)) in before.iter().zip(model.store().iter()) {
        if a.group == Group::Base {
            assert!(a.value.bit_eq(&b.value), "{} moved", a.name);
        } else if !a.value.bit_eq(&b.value) {
            changed += 1;
        }
    }
    assert!(changed > 0);
    // Every adapter up-projection leaves zero after one update.
    let lora_b_moved = model
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with("lora/") && p.name.ends_with("/b"))
        .all(|(_, p)| p.value.data().iter().any(|&x| x != 0.0));
    assert!(lora_b_moved);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let run = |role| {
        let mut model = DitModel::new(small_config()).unwrap();
        let rows = train(&mut model, &examples(role), &quick(role, 2)).unwrap();
        (Checkpoint::from_model(&model, role, 2), rows)
    };
    let (a, ra) = run(Role::Stitch);
    let (b, rb) = run(Role::Stitch);
    assert_eq!(ra, rb);
    assert_eq!(a.to_container().to_bytes(), b.to_container().to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stitch.ckpt");
    a.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.role, Role::Stitch);
    let m = back.instantiate().unwrap();
    assert_eq!(Checkpoint::from_model(&m, Role::Stitch, 2), a);

    let mut other = DitModel::new(posegen_core::dit::DitConfig {
        lora_rank: 3,
        ..small_config()
    })
    .unwrap();
    assert!(matches!(a.apply_to(&mut other), Err(Error::Config(_))));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut model = DitModel::new(small_config()).unwrap();
    randomize_trainable(&mut model, 9);
    let ex = &examples(Role::Stitch)[1];
    let draw = Draw::sample(ex, 0.0, &mut Rng::new(6));

    let mut tape = Tape::new();
    let (w, vars) = model.bind_vars(&mut tape, true);
    let loss = training_loss(&model, &mut tape, &w, ex, &draw).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut rng = Rng::new(7);
    let ids = model.store().trainable_ids();
    let mut checked = 0;
    for _ in 0..12 {
        let id = ids[rng.below(ids.len())];
        let g = grads.get_or_zeros(vars[id.0]);
        // Probe the entry with the largest gradient for a clean signal.
        let (k, &gk) = g
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        if gk.abs() < 1e-3 {
            continue;
        }
        let h = 1e-2f32;
        let probe = |delta: f32| {
            let mut m = model.clone();
            m.store_mut().get_mut(id).data_mut()[k] += delta;
            loss_value(&m, ex, &draw)
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h as f64);
        let rel = (fd - gk as f64).abs() / fd.abs().max(gk.abs() as f64);
        assert!(rel < 2e-2, "{}[{k}]: autodiff {gk} vs fd {fd}", model.store().param(id).name);
        checked += 1;
    }
    assert!(checked >= 6);
}

#[test]
fn empty_dataset_and_bad_configs_are_rejected() {
    assert!(matches!(prepare_examples(&[], &codec(), Role::Base, 0.25), Err(Error::Usage(_))));
    let mut model = DitModel::new(small_config()).unwrap();
    assert!(matches!(train(&mut model, &[], &quick(Role::Base, 1)), Err(Error::Usage(_))));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick(Role::Base, 1)
    };
    assert!(matches!(train(&mut model, &examples(Role::Base), &bad), Err(Error::Config(_))));
}
