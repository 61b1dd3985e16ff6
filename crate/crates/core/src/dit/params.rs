//! Flat named parameter storage and the typed views over it.
//!
//! The model's weight structure is written once, generic over the handle
//! type: `ParamId` when describing storage, `Var` once bound to a tape.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Frozen pretrained weights, never stored in checkpoints.
    Base,
    /// Patchifier and hand-projection weights, trained.
    Patchifier,
    /// Low-rank adapter factors, trained.
    Lora,
}

impl Group {
    pub fn trainable(self) -> bool {
        self != Group::Base
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {} expects shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Digest over every parameter of a group, in storage order.
    pub fn group_digest(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            h = (h ^ p.value.digest()).wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    /// Puts every parameter on the tape. With `train`, trainable groups
    /// become differentiable leaves; everything else is constant.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if train && p.group.trainable() {
                    tape.leaf(p.value.clone().with_grad())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }
}

/// `x W (+ b) + s · (x Aᵀ) Bᵀ` with `W: in×out`, `A: r×in`, `B: out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearW<T> {
    pub w: T,
    pub b: Option<T>,
    pub lora: Option<LoraW<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraW<T> {
    pub a: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnW<T> {
    pub q: LinearW<T>,
    pub k: LinearW<T>,
    pub v: LinearW<T>,
    pub o: LinearW<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockW<T> {
    pub norm1: T,
    pub attn: AttnW<T>,
    pub norm2: T,
    pub cross: AttnW<T>,
    pub norm3: T,
    pub ff1: LinearW<T>,
    pub ff2: LinearW<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitW<T> {
    pub time: LinearW<T>,
    pub text_embed: T,
    pub text_proj: T,
    pub patch_vid: LinearW<T>,
    pub patch_ref: LinearW<T>,
    pub patch_hand: Option<LinearW<T>>,
    pub hand_proj: Option<LinearW<T>>,
    pub blocks: Vec<BlockW<T>>,
    pub out_norm: T,
    pub out: LinearW<T>,
}

impl<T: Copy> LinearW<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> LinearW<U> {
        LinearW {
            w: f(self.w),
            b: self.b.map(f),
            lora: self.lora.as_ref().map(|l| LoraW { a: f(l.a), b: f(l.b) }),
        }
    }
}

impl<T: Copy> AttnW<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> AttnW<U> {
        AttnW {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
        }
    }

    pub fn linears(&self) -> [&LinearW<T>; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

impl<T: Copy> BlockW<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> BlockW<U> {
        BlockW {
            norm1: f(self.norm1),
            attn: self.attn.map(f),
            norm2: f(self.norm2),
            cross: self.cross.map(f),
            norm3: f(self.norm3),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }

    /// Every adapted linear layer of the block, with its name.
    pub fn adapted(&self) -> Vec<(&'static str, &LinearW<T>)> {
        let [q, k, v, o] = self.attn.linears();
        let [cq, ck, cv, co] = self.cross.linears();
        vec![
            ("self_q", q),
            ("self_k", k),
            ("self_v", v),
            ("self_o", o),
            ("cross_q", cq),
            ("cross_k", ck),
            ("cross_v", cv),
            ("cross_o", co),
            ("ff1", &self.ff1),
            ("ff2", &self.ff2),
        ]
    }
}

impl<T: Copy> DitW<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> DitW<U> {
        DitW {
            time: self.time.map(f),
            text_embed: f(self.text_embed),
            text_proj: f(self.text_proj),
            patch_vid: self.patch_vid.map(f),
            patch_ref: self.patch_ref.map(f),
            patch_hand: self.patch_hand.as_ref().map(|l| l.map(f)),
            hand_proj: self.hand_proj.as_ref().map(|l| l.map(f)),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            out_norm: f(self.out_norm),
            out: self.out.map(f),
        }
    }
}

/// Applies a possibly adapted linear layer on the tape. `lora_scale` of
/// `None` skips the adapter branch entirely.
pub fn linear(tape: &mut Tape, x: Var, l: &LinearW<Var>, lora_scale: Option<f32>) -> Result<Var> {
    let mut y = tape.matmul(x, l.w)?;
    if let (Some(ad), Some(s)) = (&l.lora, lora_scale) {
        let at = tape.transpose(ad.a)?;
        let bt = tape.transpose(ad.b)?;
        let xa = tape.matmul(x, at)?;
        let u = tape.matmul(xa, bt)?;
        let u = tape.scale(u, s);
        y = tape.add(y, u)?;
    }
    if let Some(b) = l.b {
        y = tape.add_row(y, b)?;
    }
    Ok(y)
}
