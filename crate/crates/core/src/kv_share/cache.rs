//! Timestep/layer gating and the source-segment key/value cache.

use std::collections::BTreeMap;

use crate::checkpoint::Container;
use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

use super::mask::AttnMask;

/// Which `(layer, timestep)` pairs run the sharing pathway: the first
/// `k_t` denoising steps (timestep indices `T, T-1, ...`) and the last
/// `k_l` transformer layers. `k_t = 0` or `k_l = 0` disables sharing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gate {
    pub k_t: usize,
    pub k_l: usize,
    pub steps: usize,
    pub layers: usize,
}

impl Gate {
    pub fn new(k_t: usize, k_l: usize, steps: usize, layers: usize) -> Result<Self> {
        if steps == 0 || layers == 0 {
            return Err(config_err!("gate needs at least one step and one layer"));
        }
        if k_t > steps {
            return Err(config_err!("gate covers {k_t} timesteps but sampling runs only {steps}"));
        }
        if k_l > layers {
            return Err(config_err!("gate covers {k_l} layers but the model has only {layers}"));
        }
        Ok(Self { k_t, k_l, steps, layers })
    }

    /// `max(1, ceil(T/4))` earliest timesteps and `ceil(L/2)` deepest layers.
    pub fn default_for(steps: usize, layers: usize) -> Result<Self> {
        Self::new(steps.div_ceil(4).max(1), layers.div_ceil(2), steps, layers)
    }

    pub fn empty(steps: usize, layers: usize) -> Result<Self> {
        Self::new(0, 0, steps, layers)
    }

    pub fn all(steps: usize, layers: usize) -> Result<Self> {
        Self::new(steps, layers, steps, layers)
    }

    pub fn is_empty(&self) -> bool {
        self.k_t == 0 || self.k_l == 0
    }

    pub fn has_timestep(&self, timestep: usize) -> bool {
        !self.is_empty() && timestep <= self.steps && timestep > self.steps - self.k_t
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        !self.is_empty() && layer <= self.layers && layer > self.layers - self.k_l
    }

    pub fn contains(&self, layer: usize, timestep: usize) -> bool {
        self.has_timestep(timestep) && self.has_layer(layer)
    }

    /// Gated pairs as `(layer, timestep)`, in cache order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.is_empty() {
            return out;
        }
        for l in self.layers - self.k_l + 1..=self.layers {
            for t in self.steps - self.k_t + 1..=self.steps {
                out.push((l, t));
            }
        }
        out
    }
}

/// Parses `"k_t,k_l"`.
pub fn parse_gate_spec(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(config_err!("gate {s:?} must be two non-negative integers k_t,k_l")),
        },
        _ => Err(config_err!("gate {s:?} must have the form k_t,k_l")),
    }
}

/// Source keys, values and subject mask for one `(layer, timestep)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    /// Per head, `n_vid × d_head`, rotated.
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub mask: AttnMask,
}

/// Write-once cache filled while the source segment is denoised.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    gate: Gate,
    entries: BTreeMap<(usize, usize), KvEntry>,
}

impl KvCache {
    /// Checks that `entries` cover exactly the gated pairs.
    pub fn new(gate: Gate, entries: BTreeMap<(usize, usize), KvEntry>) -> Result<Self> {
        let want = gate.pairs();
        if entries.len() != want.len() || want.iter().any(|p| !entries.contains_key(p)) {
            return Err(Error::Internal(format!(
                "cache holds {} entries, gate expects {}",
                entries.len(),
                want.len()
            )));
        }
        Ok(Self { gate, entries })
    }

    pub fn empty(gate: Gate) -> Result<Self> {
        Self::new(gate, BTreeMap::new())
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: usize, timestep: usize) -> Result<&KvEntry> {
        self.entries.get(&(layer, timestep)).ok_or_else(|| {
            Error::Internal(format!("no cached keys/values for layer {layer}, timestep {timestep}"))
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &KvEntry)> {
        self.entries.iter()
    }

    /// Bytes held by cached tensors.
    pub fn bytes(&self) -> usize {
        self.entries
            .values()
            .map(|e| {
                let kv: usize = e.k.iter().chain(&e.v).map(Tensor::len).sum();
                4 * (kv + e.mask.len())
            })
            .sum()
    }

    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for ((l, t), e) in &self.entries {
            for x in [*l as u64, *t as u64, e.mask.values.digest()]
                .into_iter()
                .chain(e.k.iter().chain(&e.v).map(Tensor::digest))
            {
                h = (h ^ x).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Entries `kv/<l>/<t>/{k,v,mask}` with heads stacked as `H × n × d_head`,
    /// plus the gate under `kv/gate`.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let g = &self.gate;
        c.insert_text("kv/gate", format!("{},{},{},{}", g.k_t, g.k_l, g.steps, g.layers));
        for ((l, t), e) in &self.entries {
            c.insert_tensor(format!("kv/{l}/{t}/k"), stack(&e.k));
            c.insert_tensor(format!("kv/{l}/{t}/v"), stack(&e.v));
            c.insert_tensor(format!("kv/{l}/{t}/mask"), e.mask.values.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let g: Vec<usize> = c
            .text("kv/gate")?
            .split(',')
            .map(|x| x.parse().map_err(|_| Error::Format(format!("bad kv/gate entry {x:?}"))))
            .collect::<Result<_>>()?;
        let [k_t, k_l, steps, layers] = g[..] else {
            return Err(Error::Format("kv/gate must hold four integers".into()));
        };
        let gate = Gate::new(k_t, k_l, steps, layers)?;
        let mut entries = BTreeMap::new();
        for (l, t) in gate.pairs() {
            let mask = c.tensor(&format!("kv/{l}/{t}/mask"))?.clone();
            let degenerate = mask.data().iter().all(|&m| m == 0.0);
            entries.insert(
                (l, t),
                KvEntry {
                    k: unstack(c.tensor(&format!("kv/{l}/{t}/k"))?)?,
                    v: unstack(c.tensor(&format!("kv/{l}/{t}/v"))?)?,
                    mask: AttnMask {
                        values: mask,
                        layer: l,
                        degenerate,
                    },
                },
            );
        }
        Self::new(gate, entries).map_err(|_| Error::Format("cache entries do not match its gate".into()))
    }
}

fn stack(heads: &[Tensor]) -> Tensor {
    let (n, d) = heads[0].dims2().expect("head matrix");
    let data = heads.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![heads.len(), n, d], data).expect("stacked heads")
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let [h, n, d] = *t.shape() else {
        return Err(Error::Format(format!("cached heads must be H×n×d, got {:?}", t.shape())));
    };
    (0..h)
        .map(|i| Tensor::new(vec![n, d], t.data()[i * n * d..(i + 1) * n * d].to_vec()))
        .collect()
}
