//! Attention hooks that capture a source segment's keys and values and
//! substitute them into later segments.

use std::collections::BTreeMap;

use crate::dit::{AttentionHook, CrossAttnView, SelfAttnView};
use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

use super::attend::{fuse, shared_attention, SuppressMode};
use super::cache::{Gate, KvCache, KvEntry};
use super::mask::{layer_mask, subject_attn_map, threshold_map, AttnMask};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShareSettings {
    /// Caption positions naming the subject.
    pub subject_indices: Vec<usize>,
    pub mode: SuppressMode,
    /// Softmax each caption row over video tokens before averaging.
    pub softmax_map: bool,
    /// Use an all-ones current mask (for testing the fusion identity).
    pub force_ones: bool,
}

/// How often each pathway ran, keyed by `(layer, timestep)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    pub captured: BTreeMap<(usize, usize), usize>,
    pub shared: BTreeMap<(usize, usize), usize>,
    /// Attention maps that were constant and produced an empty mask.
    pub degenerate_maps: usize,
}

enum Role<'a> {
    Observe,
    Capture(BTreeMap<(usize, usize), KvEntry>),
    Consume(&'a KvCache),
}

/// Hook driving background sharing for one sampling trajectory.
///
/// Every role also records the subject mask from all layers at the first
/// denoising step, used for evaluation.
pub struct SharingHook<'a> {
    gate: Gate,
    settings: ShareSettings,
    role: Role<'a>,
    timestep: usize,
    maps: Vec<Vec<f32>>,
    observed: Option<AttnMask>,
    counters: Counters,
}

impl<'a> SharingHook<'a> {
    fn with_role(gate: Gate, settings: ShareSettings, role: Role<'a>) -> Self {
        Self {
            gate,
            settings,
            role,
            timestep: 0,
            maps: Vec::new(),
            observed: None,
            counters: Counters::default(),
        }
    }

    /// Records masks only; the forward pass is unchanged.
    pub fn observe(gate: Gate, settings: ShareSettings) -> Self {
        Self::with_role(gate, settings, Role::Observe)
    }

    /// Stores keys, values and masks at every gated pair.
    pub fn capture(gate: Gate, settings: ShareSettings) -> Self {
        Self::with_role(gate, settings, Role::Capture(BTreeMap::new()))
    }

    /// Replaces background attention at gated pairs with attention over
    /// the cached source keys and values.
    pub fn consume(cache: &'a KvCache, settings: ShareSettings) -> Self {
        Self::with_role(*cache.gate(), settings, Role::Consume(cache))
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Subject mask over all layers at the first denoising step.
    pub fn observed_mask(&self) -> Option<&AttnMask> {
        self.observed.as_ref()
    }

    /// Finishes a capture run, checking every gated pair was filled.
    pub fn into_cache(self) -> Result<KvCache> {
        match self.role {
            Role::Capture(entries) => KvCache::new(self.gate, entries),
            _ => Err(Error::Internal("hook was not capturing".into())),
        }
    }

    fn wants_maps(&self) -> bool {
        self.timestep == self.gate.steps || self.gate.has_timestep(self.timestep)
    }

    fn current_mask(&self, layer: usize, n: usize) -> Result<AttnMask> {
        if self.settings.force_ones || self.maps.is_empty() {
            Ok(AttnMask::ones(n, layer))
        } else {
            layer_mask(&self.maps, layer)
        }
    }
}

impl AttentionHook for SharingHook<'_> {
    fn active(&self) -> bool {
        true
    }

    fn begin_pass(&mut self, timestep: usize, steps: usize) -> Result<()> {
        if steps != self.gate.steps {
            return Err(config_err!(
                "gate was built for {} denoising steps, sampler runs {steps}",
                self.gate.steps
            ));
        }
        self.timestep = timestep;
        self.maps.clear();
        Ok(())
    }

    fn self_attention(&mut self, view: SelfAttnView<'_>) -> Result<Option<Tensor>> {
        let key = (view.layer, self.timestep);
        if !self.gate.contains(view.layer, self.timestep) {
            return Ok(None);
        }
        let n = view.out.shape()[0];
        let m = self.current_mask(view.layer, n)?;
        match &mut self.role {
            Role::Observe => Ok(None),
            Role::Capture(entries) => {
                if entries.contains_key(&key) {
                    return Err(Error::Internal(format!("cache entry {key:?} written twice")));
                }
                entries.insert(
                    key,
                    KvEntry {
                        k: view.k.to_vec(),
                        v: view.v.to_vec(),
                        mask: m,
                    },
                );
                *self.counters.captured.entry(key).or_default() += 1;
                Ok(None)
            }
            Role::Consume(cache) => {
                let e = cache.get(key.0, key.1)?;
                let src = shared_attention(view.q, &e.k, &e.v, &e.mask, self.settings.mode)?;
                let fused = fuse(view.out, &src, &m, &e.mask)?;
                *self.counters.shared.entry(key).or_default() += 1;
                Ok(Some(fused))
            }
        }
    }

    fn cross_attention(&mut self, view: CrossAttnView<'_>) -> Result<()> {
        if !self.wants_maps() {
            return Ok(());
        }
        let a = subject_attn_map(view.q_text, view.k_vid, &self.settings.subject_indices, self.settings.softmax_map)?;
        let (bin, otsu) = threshold_map(&a)?;
        if otsu.degenerate {
            self.counters.degenerate_maps += 1;
        }
        self.maps.push(bin);
        if self.timestep == self.gate.steps && view.layer == self.gate.layers {
            self.observed = Some(layer_mask(&self.maps, view.layer)?);
        }
        Ok(())
    }
}
