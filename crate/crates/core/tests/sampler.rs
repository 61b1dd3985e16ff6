mod common;

use common::fixtures::{randomize_trainable, random_bundle, small_config};
use posegen_core::dit::{DitModel, NoHook};
use posegen_core::numerics::Rng;
use posegen_core::sampler::{
    build_frame_mask, lead_stitch_flags, noise, sample, FrameMask, MaskKind, SamplerConfig, ZeroVelocity,
};
use posegen_core::Error;
use proptest::prelude::*;

#[test]
fn zero_model_returns_initial_noise() {
    let cfg = small_config();
    let b = random_bundle(&cfg, 2, 4, 4, 1);
    let mask = FrameMask::build(MaskKind::Base, 5, 0.25, 4, 4, 4).unwrap();
    for steps in [1, 7] {
        let s = SamplerConfig { steps, seed: 9 };
        let out = sample(&ZeroVelocity, &b, &mask, None, &s, &mut NoHook).unwrap();
        let eps = Rng::new(9).normal_tensor(b.z_vid.shape(), 1.0);
        assert!(out.bit_eq(&eps));
    }
}

#[test]
fn midpoint_noise_matches_average() {
    let mut rng = Rng::new(2);
    let (a, b) = (rng.normal_tensor(&[3, 4], 1.0), rng.normal_tensor(&[3, 4], 1.0));
    let m = noise(&a, &b, 0.5).unwrap();
    for i in 0..12 {
        assert!((m.data()[i] - (a.data()[i] + b.data()[i]) / 2.0).abs() < 1e-7);
    }
}

#[test]
fn stitch_sampling_returns_preserved_latents_exactly() {
    let cfg = small_config();
    let mut model = DitModel::new(cfg).unwrap();
    randomize_trainable(&mut model, 3);
    let b = random_bundle(&cfg, 5, 2, 2, 4);
    let preserved = Rng::new(5).normal_tensor(b.z_vid.shape(), 1.0);
    for flags in [
        build_frame_mask(MaskKind::Stitch, 17, 0.25).unwrap(),
        lead_stitch_flags(16, 0.25).unwrap(),
    ] {
        let mask = FrameMask::pack(&flags, 4, 2, 2).unwrap();
        let s = SamplerConfig { steps: 5, seed: 6 };
        let out = sample(&model, &b, &mask, Some(&preserved), &s, &mut NoHook).unwrap();
        let keep = mask.preserved_latent_frames();
        let plane = 4;
        for ch in 0..cfg.channels {
            for (j, &k) in keep.iter().enumerate() {
                let at = (ch * 5 + j) * plane;
                let (o, p) = (&out.data()[at..at + plane], &preserved.data()[at..at + plane]);
                if k {
                    assert!(o.iter().zip(p).all(|(x, y)| x.to_bits() == y.to_bits()));
                } else {
                    assert_ne!(o, p);
                }
            }
        }
        let again = sample(&model, &b, &mask, Some(&preserved), &s, &mut NoHook).unwrap();
        assert!(again.bit_eq(&out));
    }
}

#[test]
fn stitch_without_preserved_latents_is_a_usage_error() {
    let cfg = small_config();
    let b = random_bundle(&cfg, 5, 2, 2, 7);
    let mask = FrameMask::build(MaskKind::Stitch, 17, 0.25, 4, 2, 2).unwrap();
    let err = sample(&ZeroVelocity, &b, &mask, None, &SamplerConfig::default(), &mut NoHook).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

proptest! {
    #[test]
    fn packing_round_trips(blocks in 0usize..5, bits in any::<u32>()) {
        let frames = 1 + 4 * blocks;
        let flags: Vec<bool> = (0..frames).map(|i| bits >> i & 1 == 1).collect();
        let m = FrameMask::pack(&flags, 4, 2, 2).unwrap();
        prop_assert_eq!(FrameMask::unpack(&m.latent_mask).unwrap(), flags);
    }

    #[test]
    fn preservation_holds_for_any_flags(bits in any::<u16>(), seed in any::<u64>()) {
        let frames = 9;
        let flags: Vec<bool> = (0..frames).map(|i| bits >> i & 1 == 1).collect();
        let cfg = small_config();
        let b = random_bundle(&cfg, 3, 2, 2, seed);
        let mask = FrameMask::pack(&flags, 4, 2, 2).unwrap();
        let p = Rng::new(seed ^ 1).normal_tensor(b.z_vid.shape(), 1.0);
        let out = sample(&ZeroVelocity, &b, &mask, Some(&p), &SamplerConfig { steps: 3, seed }, &mut NoHook).unwrap();
        for (j, &k) in mask.preserved_latent_frames().iter().enumerate() {
            if k {
                for ch in 0..cfg.channels {
                    let at = (ch * 3 + j) * 4;
                    prop_assert_eq!(&out.data()[at..at + 4], &p.data()[at..at + 4]);
                }
            }
        }
    }
}
