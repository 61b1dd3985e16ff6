use crate::error::{config_err, Result};
use crate::numerics::{matmul, transpose, Tensor};

use super::model::DitModel;

/// `W + (alpha / rank) · Aᵀ Bᵀ` for `W: in×out`, `A: rank×in`, `B: out×rank`.
pub fn lora_merge(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f32, rank: usize) -> Result<Tensor> {
    let (din, dout) = w.dims2()?;
    let (ra, ain) = a.dims2()?;
    let (bout, rb) = b.dims2()?;
    if ra != rank || rb != rank {
        return Err(config_err!(
            "adapter rank mismatch: A has {ra} rows, B has {rb} columns, expected {rank}"
        ));
    }
    if ain != din || bout != dout {
        return Err(config_err!(
            "adapter factors {:?} and {:?} do not fit a {din}x{dout} weight",
            a.shape(),
            b.shape()
        ));
    }
    let delta = matmul(&transpose(a)?, &transpose(b)?)?;
    let s = alpha / rank as f32;
    w.zip_map(&delta, |x, y| x + s * y)
}

impl DitModel {
    /// Copy with every adapter folded into its base weight. Evaluate the
    /// result with adapters disabled.
    pub fn merged(&self) -> Result<DitModel> {
        let mut out = self.clone();
        let cfg = *self.config();
        for block in &self.ids().blocks {
            for (_, lin) in block.adapted() {
                if let Some(ad) = &lin.lora {
                    let merged = lora_merge(
                        self.store().get(lin.w),
                        self.store().get(ad.a),
                        self.store().get(ad.b),
                        cfg.lora_alpha,
                        cfg.lora_rank,
                    )?;
                    out.store_mut().set(lin.w, merged)?;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_b_is_identity_and_rank_checked() {
        let mut rng = Rng::new(1);
        let w = rng.normal_tensor(&[5, 3], 1.0);
        let a = rng.normal_tensor(&[2, 5], 1.0);
        let merged = lora_merge(&w, &a, &Tensor::zeros(&[3, 2]), 2.0, 2).unwrap();
        assert!(merged.bit_eq(&w));
        assert!(lora_merge(&w, &a, &Tensor::zeros(&[3, 2]), 2.0, 3).is_err());
    }
}
