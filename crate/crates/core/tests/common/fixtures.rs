use posegen_core::dit::{ConditionBundle, DitConfig, DitModel};
use posegen_core::numerics::{Rng, Tensor};

pub fn small_config() -> DitConfig {
    DitConfig {
        layers: 2,
        dim: 24,
        heads: 2,
        channels: 4,
        mask_slots: 4,
        text_dim: 8,
        lora_rank: 2,
        lora_alpha: 2.0,
        ..Default::default()
    }
}

pub fn random_bundle(cfg: &DitConfig, f: usize, h: usize, w: usize, seed: u64) -> ConditionBundle {
    let mut rng = Rng::new(seed);
    let c = cfg.channels;
    ConditionBundle {
        z_vid: rng.normal_tensor(&[c, f, h, w], 1.0),
        mask: Tensor::zeros(&[cfg.mask_slots, f, h, w]),
        z_pose: rng.normal_tensor(&[c, f, h, w], 1.0),
        z_hand: rng.normal_tensor(&[c, f, h, w], 1.0),
        z_img: rng.normal_tensor(&[c, 1, h, w], 1.0),
        caption: (0..4).map(|_| rng.below(cfg.vocab)).collect(),
    }
}

/// Replaces every trainable tensor (adapters, patchifiers, hand
/// projection) with random values so no path is trivially zero.
pub fn randomize_trainable(model: &mut DitModel, seed: u64) {
    let mut rng = Rng::new(seed);
    for id in model.store().trainable_ids() {
        let shape = model.store().get(id).shape().to_vec();
        let t = rng.normal_tensor(&shape, 0.3);
        model.store_mut().set(id, t).unwrap();
    }
}
