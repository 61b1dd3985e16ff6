use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::numerics::{Position, Rng, Tape, Tensor, Var};

use super::attention::{cross_attention, multi_head, split_heads};
use super::config::{DitConfig, PatchMode};
use super::hook::{AttentionHook, CrossAttnView, SelfAttnView};
use super::params::{linear, AttnW, BlockW, DitW, Group, LinearW, LoraW, ParamId, ParamStore};
use super::patch::{
    image_positions, patch_matrix, token_count, unpatchify_index, video_positions, PATCH_AREA,
};

/// Everything the denoiser sees for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Noisy video latents, `c×f×h×w`.
    pub z_vid: Tensor,
    /// Packed frame-retention mask, `s×f×h×w`.
    pub mask: Tensor,
    pub z_pose: Tensor,
    pub z_hand: Tensor,
    /// Reference-image latents, `c×1×h×w`.
    pub z_img: Tensor,
    pub caption: Vec<usize>,
}

impl ConditionBundle {
    /// Latent grid `(f, h, w)` after checking every input against `cfg`.
    pub fn grid(&self, cfg: &DitConfig) -> Result<(usize, usize, usize)> {
        let (c, s) = (cfg.channels, cfg.mask_slots);
        let [vc, f, h, w] = *self.z_vid.shape() else {
            return Err(shape_err!("z_vid must be c×f×h×w, got {:?}", self.z_vid.shape()));
        };
        if vc != c {
            return Err(crate::error::config_err!(
                "z_vid has {vc} channels, model expects {c}"
            ));
        }
        for (name, t, want) in [
            ("z_pose", &self.z_pose, [c, f, h, w]),
            ("z_hand", &self.z_hand, [c, f, h, w]),
            ("mask", &self.mask, [s, f, h, w]),
            ("z_img", &self.z_img, [c, 1, h, w]),
        ] {
            if t.shape() != want {
                return Err(shape_err!("{name} has shape {:?}, expected {want:?}", t.shape()));
            }
        }
        if self.caption.is_empty() {
            return Err(shape_err!("caption is empty"));
        }
        if let Some(&bad) = self.caption.iter().find(|&&t| t >= cfg.vocab) {
            return Err(shape_err!("caption token {bad} outside vocabulary {}", cfg.vocab));
        }
        token_count(f, h, w)?;
        Ok((f, h, w))
    }
}

/// Embedded inputs of one forward pass.
pub struct Tokens {
    pub vid: Var,
    pub img: Var,
    pub vid_pos: Vec<Position>,
    pub img_pos: Vec<Position>,
    /// Caption embeddings, `n_text × d`.
    pub text: Var,
    /// Caption embeddings followed by the pooled reference token.
    pub ctx: Var,
    pub grid: (usize, usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Evaluate the adapter branches; `false` gives the base forward.
    pub lora: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { lora: true }
    }
}

/// Sinusoidal features of the diffusion time, `1 × d`.
pub fn time_features(t: f32, d: usize) -> Tensor {
    let half = d / 2;
    let mut v = vec![0.0f32; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t as f64 * freq;
        v[i] = arg.sin() as f32;
        v[half + i] = arg.cos() as f32;
    }
    Tensor::new(vec![1, d], v).expect("time features")
}

#[derive(Clone, Debug)]
pub struct DitModel {
    cfg: DitConfig,
    store: ParamStore,
    ids: DitW<ParamId>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    base: Rng,
    adapter: Rng,
    rank: usize,
}

impl Init<'_> {
    fn normal(&mut self, group: Group, shape: &[usize], std: f32) -> Tensor {
        let rng = if group == Group::Base {
            &mut self.base
        } else {
            &mut self.adapter
        };
        rng.normal_tensor(shape, std)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool, group: Group) -> LinearW<ParamId> {
        let w = self.normal(group, &[din, dout], 1.0 / (din as f32).sqrt());
        LinearW {
            w: self.store.add(format!("{name}/w"), group, w),
            b: bias.then(|| self.store.add(format!("{name}/b"), group, Tensor::zeros(&[dout]))),
            lora: None,
        }
    }

    /// Frozen linear layer with a zero-initialised adapter.
    fn adapted(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> LinearW<ParamId> {
        let mut l = self.linear(name, din, dout, bias, Group::Base);
        let a = self.normal(Group::Lora, &[self.rank, din], 1.0 / (din as f32).sqrt());
        l.lora = Some(LoraW {
            a: self.store.add(format!("lora/{name}/a"), Group::Lora, a),
            b: self
                .store
                .add(format!("lora/{name}/b"), Group::Lora, Tensor::zeros(&[dout, self.rank])),
        });
        l
    }

    fn gain(&mut self, name: &str, d: usize) -> ParamId {
        self.store.add(name, Group::Base, Tensor::full(&[d], 1.0))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnW<ParamId> {
        AttnW {
            q: self.adapted(&format!("{prefix}_q"), d, d, false),
            k: self.adapted(&format!("{prefix}_k"), d, d, false),
            v: self.adapted(&format!("{prefix}_v"), d, d, false),
            o: self.adapted(&format!("{prefix}_o"), d, d, false),
        }
    }
}

impl DitModel {
    pub fn new(cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            base: Rng::new(cfg.base_seed),
            adapter: Rng::new(cfg.adapter_seed),
            rank: cfg.lora_rank,
        };
        let (d, c) = (cfg.dim, cfg.channels);
        let time = init.linear("time", d, d, true, Group::Base);
        let text_embed = {
            let t = init.normal(Group::Base, &[cfg.vocab, cfg.text_dim], 1.0);
            init.store.add("text/embed", Group::Base, t)
        };
        let text_proj = {
            let t = init.normal(Group::Base, &[cfg.text_dim, d], 1.0 / (cfg.text_dim as f32).sqrt());
            init.store.add("text/proj", Group::Base, t)
        };
        // The video patchifier starts from the base model's seed stream; the
        // reference patchifier copies its rows for the video channels.
        let vid_rows = cfg.video_in_channels() * PATCH_AREA;
        let vid_w = init.normal(Group::Base, &[vid_rows, d], 1.0 / (vid_rows as f32).sqrt());
        let ref_w = Tensor::new(vec![c * PATCH_AREA, d], vid_w.data()[..c * PATCH_AREA * d].to_vec())?;
        let patch_vid = LinearW {
            w: init.store.add("patch/video/w", Group::Patchifier, vid_w),
            b: Some(init.store.add("patch/video/b", Group::Patchifier, Tensor::zeros(&[d]))),
            lora: None,
        };
        let patch_ref = LinearW {
            w: init.store.add("patch/ref/w", Group::Patchifier, ref_w),
            b: Some(init.store.add("patch/ref/b", Group::Patchifier, Tensor::zeros(&[d]))),
            lora: None,
        };
        let (patch_hand, hand_proj) = match cfg.patch_mode {
            PatchMode::Split => {
                let ph = init.linear("patch/hand", c * PATCH_AREA, d, true, Group::Patchifier);
                let proj = LinearW {
                    w: init.store.add("patch/hand_proj/w", Group::Patchifier, Tensor::zeros(&[d, d])),
                    b: Some(init.store.add("patch/hand_proj/b", Group::Patchifier, Tensor::zeros(&[d]))),
                    lora: None,
                };
                (Some(ph), Some(proj))
            }
            PatchMode::Literal => (None, None),
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("block{l}");
                BlockW {
                    norm1: init.gain(&format!("{p}/norm1"), d),
                    attn: init.attn(&format!("{p}/self"), d),
                    norm2: init.gain(&format!("{p}/norm2"), d),
                    cross: init.attn(&format!("{p}/cross"), d),
                    norm3: init.gain(&format!("{p}/norm3"), d),
                    ff1: init.adapted(&format!("{p}/ff1"), d, cfg.ffn_dim(), true),
                    ff2: init.adapted(&format!("{p}/ff2"), cfg.ffn_dim(), d, true),
                }
            })
            .collect();
        let out_norm = init.gain("out/norm", d);
        let out = init.linear("out", d, c * PATCH_AREA, true, Group::Base);
        let ids = DitW {
            time,
            text_embed,
            text_proj,
            patch_vid,
            patch_ref,
            patch_hand,
            hand_proj,
            blocks,
            out_norm,
            out,
        };
        Ok(Self { cfg, store, ids })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ids(&self) -> &DitW<ParamId> {
        &self.ids
    }

    /// Digest of the frozen base weights.
    pub fn base_digest(&self) -> u64 {
        self.store.group_digest(Group::Base)
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> DitW<Var> {
        self.bind_vars(tape, train).0
    }

    /// Like `bind`, also returning the variable of every parameter indexed
    /// by `ParamId`.
    pub fn bind_vars(&self, tape: &mut Tape, train: bool) -> (DitW<Var>, Vec<Var>) {
        let vars = self.store.bind(tape, train);
        (self.ids.map(&|id: ParamId| vars[id.0]), vars)
    }

    /// Video tokens from the motion conditions (`n_vid × d`).
    pub fn patchify_video(&self, tape: &mut Tape, w: &DitW<Var>, b: &ConditionBundle) -> Result<Var> {
        match (&w.patch_hand, &w.hand_proj) {
            (Some(ph), Some(hp)) => {
                let pm = tape.constant(patch_matrix(&[&b.z_vid, &b.mask, &b.z_pose])?);
                let tokens = linear(tape, pm, &w.patch_vid, None)?;
                let hm = tape.constant(patch_matrix(&[&b.z_hand])?);
                let hand = linear(tape, hm, ph, None)?;
                let hand = linear(tape, hand, hp, None)?;
                tape.add(tokens, hand)
            }
            _ => {
                let pm = tape.constant(patch_matrix(&[&b.z_vid, &b.mask, &b.z_pose, &b.z_hand])?);
                linear(tape, pm, &w.patch_vid, None)
            }
        }
    }

    /// Reference-image tokens (`n_img × d`).
    pub fn patchify_ref(&self, tape: &mut Tape, w: &DitW<Var>, z_img: &Tensor) -> Result<Var> {
        let pm = tape.constant(patch_matrix(&[z_img])?);
        linear(tape, pm, &w.patch_ref, None)
    }

    /// Positions of the video tokens followed by the image tokens.
    pub fn positions(&self, f: usize, h: usize, w: usize) -> (Vec<Position>, Vec<Position>) {
        (
            video_positions(f, h, w),
            image_positions(f, h, w, self.cfg.image_shift),
        )
    }

    /// Token embedding: patchified video and reference tokens with the
    /// time embedding added, their positions, and the cross-attention context.
    pub fn embed(&self, tape: &mut Tape, w: &DitW<Var>, bundle: &ConditionBundle, t: f32) -> Result<Tokens> {
        let cfg = &self.cfg;
        let (f, h, wd) = bundle.grid(cfg)?;
        let d = cfg.dim;
        let tv = self.patchify_video(tape, w, bundle)?;
        let ti = self.patchify_ref(tape, w, &bundle.z_img)?;

        let n_text = bundle.caption.len();
        let text_idx: Arc<[usize]> = bundle
            .caption
            .iter()
            .flat_map(|&tok| (0..cfg.text_dim).map(move |j| tok * cfg.text_dim + j))
            .collect();
        let text = tape.gather(w.text_embed, text_idx, vec![n_text, cfg.text_dim])?;
        let text = tape.matmul(text, w.text_proj)?;
        let pooled = tape.mean_rows(ti)?;
        let pooled = tape.gather(pooled, (0..d).collect(), vec![1, d])?;
        let ctx = tape.concat_rows(&[text, pooled])?;

        let tf = tape.constant(time_features(t, d));
        let temb = linear(tape, tf, &w.time, None)?;
        let temb = tape.gather(temb, (0..d).collect(), vec![d])?;
        let vid = tape.add_row(tv, temb)?;
        let img = tape.add_row(ti, temb)?;
        let (vid_pos, img_pos) = self.positions(f, h, wd);
        Ok(Tokens {
            vid,
            img,
            vid_pos,
            img_pos,
            text,
            ctx,
            grid: (f, h, wd),
        })
    }

    /// Runs every block over `[video; image]` and returns the final video
    /// tokens. Image tokens share all block weights and are dropped here.
    pub fn transformer(
        &self,
        tape: &mut Tape,
        w: &DitW<Var>,
        tokens: &Tokens,
        opts: ForwardOptions,
        hook: &mut dyn AttentionHook,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (d, heads) = (cfg.dim, cfg.heads);
        let lora = opts.lora.then(|| cfg.lora_scale());
        let active = hook.active();
        let n_vid = tape.shape(tokens.vid)[0];
        let n_img = tape.shape(tokens.img)[0];
        if tokens.vid_pos.len() != n_vid || tokens.img_pos.len() != n_img {
            return Err(shape_err!("token positions do not match token counts"));
        }
        let positions: Arc<[Position]> = tokens
            .vid_pos
            .iter()
            .chain(&tokens.img_pos)
            .copied()
            .collect();
        let mut x = tape.concat_rows(&[tokens.vid, tokens.img])?;

        for (li, b) in w.blocks.iter().enumerate() {
            let layer = li + 1;
            let hn = tape.rms_norm(x, b.norm1)?;
            let q = linear(tape, hn, &b.attn.q, lora)?;
            let k = linear(tape, hn, &b.attn.k, lora)?;
            let v = linear(tape, hn, &b.attn.v, lora)?;
            let hs = multi_head(tape, q, k, v, heads, Some((&positions, &positions)))?;
            let mut concat = hs.concat;
            if active {
                let rows = |tape: &Tape, vs: &[Var]| -> Vec<Tensor> {
                    vs.iter().map(|&v| tape.value(v).rows(0, n_vid)).collect()
                };
                let (qv, kv, vv) = (rows(tape, &hs.q), rows(tape, &hs.k), rows(tape, &hs.v));
                let out = tape.value(concat).rows(0, n_vid);
                let view = SelfAttnView {
                    layer,
                    q: &qv,
                    k: &kv,
                    v: &vv,
                    out: &out,
                };
                if let Some(rep) = hook.self_attention(view)? {
                    if rep.shape() != [n_vid, d] {
                        return Err(shape_err!(
                            "replacement attention output {:?}, expected [{n_vid}, {d}]",
                            rep.shape()
                        ));
                    }
                    let rv = tape.constant(rep);
                    let ri = tape.slice_rows(concat, n_vid, n_img)?;
                    concat = tape.concat_rows(&[rv, ri])?;
                }
            }
            let o = linear(tape, concat, &b.attn.o, lora)?;
            x = tape.add(x, o)?;

            let xv = tape.slice_rows(x, 0, n_vid)?;
            let xi = tape.slice_rows(x, n_vid, n_img)?;
            let hv = tape.rms_norm(xv, b.norm2)?;
            let (co, _) = cross_attention(tape, hv, tokens.ctx, &b.cross, heads, lora)?;
            if active {
                let qt = linear(tape, tokens.text, &b.cross.q, lora)?;
                let kv = linear(tape, hv, &b.cross.k, lora)?;
                let q_text = split_heads(tape.value(qt), heads);
                let k_vid = split_heads(tape.value(kv), heads);
                hook.cross_attention(CrossAttnView {
                    layer,
                    q_text: &q_text,
                    k_vid: &k_vid,
                })?;
            }
            let xv = tape.add(xv, co)?;
            x = tape.concat_rows(&[xv, xi])?;

            let hn = tape.rms_norm(x, b.norm3)?;
            let f1 = linear(tape, hn, &b.ff1, lora)?;
            let f1 = tape.gelu(f1);
            let f2 = linear(tape, f1, &b.ff2, lora)?;
            x = tape.add(x, f2)?;
        }
        tape.slice_rows(x, 0, n_vid)
    }

    /// Output head: final video tokens to a `c×f×h×w` velocity.
    pub fn head(&self, tape: &mut Tape, w: &DitW<Var>, xv: Var, grid: (usize, usize, usize)) -> Result<Var> {
        let (f, h, wd) = grid;
        let c = self.cfg.channels;
        let hn = tape.rms_norm(xv, w.out_norm)?;
        let y = linear(tape, hn, &w.out, None)?;
        let idx: Arc<[usize]> = unpatchify_index(c, f, h, wd)?.into();
        tape.gather(y, idx, vec![c, f, h, wd])
    }

    /// Velocity prediction on the tape, shaped like `bundle.z_vid`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &DitW<Var>,
        bundle: &ConditionBundle,
        t: f32,
        opts: ForwardOptions,
        hook: &mut dyn AttentionHook,
    ) -> Result<Var> {
        let tokens = self.embed(tape, w, bundle, t)?;
        let xv = self.transformer(tape, w, &tokens, opts, hook)?;
        self.head(tape, w, xv, tokens.grid)
    }

    /// Inference-only forward returning the velocity tensor.
    pub fn predict(
        &self,
        bundle: &ConditionBundle,
        t: f32,
        opts: ForwardOptions,
        hook: &mut dyn AttentionHook,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &w, bundle, t, opts, hook)?;
        Ok(tape.value(out).clone())
    }
}
