//! Multi-scale fusion with per-scale soft attention.

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Real, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub d_k: usize,
    pub token_limit: usize,
    /// Common width `C_f` every scale is projected to.
    pub channels: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            d_k: 8,
            token_limit: 4096,
            channels: 32,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_k == 0 || self.token_limit == 0 || self.channels == 0 {
            return Err("d_k, token_limit and channels must be positive".into());
        }
        Ok(())
    }
}

/// Parameter handles for one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleWeights {
    /// `[C_l, d_k]`
    pub query: Var,
    /// `[C_l, d_k]`
    pub key: Var,
    /// `[C_l, C_l]`
    pub value: Var,
    /// `[C_l, C_f]`
    pub proj: Var,
    /// `[1]`
    pub alpha: Var,
}

/// `softmax(Q Kᵀ / √d_k) V` over the `H·W` spatial tokens of `f`.
pub fn soft_attention<T: Real>(
    g: &mut Graph<T>,
    f: Var,
    w: &ScaleWeights,
    token_limit: usize,
) -> Result<Var, TensorError> {
    let shape = g.shape(f).to_vec();
    let [h, wd, c] = match shape.as_slice() {
        [a, b, c] => [*a, *b, *c],
        _ => {
            return Err(TensorError::Rank {
                op: "soft_attention",
                expected: 3,
                shape,
            })
        }
    };
    let tokens = h * wd;
    if tokens > token_limit {
        return Err(TensorError::Invalid(format!(
            "attention over {tokens} tokens exceeds token_limit {token_limit}"
        )));
    }
    let dk = g.shape(w.query)[1];
    let x = g.reshape(f, &[tokens, c])?;
    let q = g.matmul(x, w.query)?;
    let k = g.matmul(x, w.key)?;
    let v = g.matmul(x, w.value)?;
    let out = g.attention(q, k, v, T::lit(1.0 / (dk as f64).sqrt()))?;
    g.reshape(out, &[h, wd, c])
}

/// `Σ_l α_l · Proj_l(Up(F̃_l) ⊙ Up(SoftAttn(F̃_l)))` at the finest extent,
/// summed finest to coarsest.
pub fn fuse_scales<T: Real>(
    g: &mut Graph<T>,
    masked: &[Var],
    weights: &[ScaleWeights],
    token_limit: usize,
) -> Result<Var, TensorError> {
    if masked.is_empty() || masked.len() != weights.len() {
        return Err(TensorError::Invalid(format!(
            "fusion needs one weight set per scale, got {} maps and {} sets",
            masked.len(),
            weights.len()
        )));
    }
    let finest = g.shape(masked[0])[..2].to_vec();
    let mut fused: Option<Var> = None;
    for (&f, w) in masked.iter().zip(weights) {
        let [h, wd] = [g.shape(f)[0], g.shape(f)[1]];
        if finest[0] % h != 0 || finest[1] % wd != 0 || finest[0] / h != finest[1] / wd {
            return Err(TensorError::Invalid(format!(
                "scale {h}x{wd} does not divide the finest scale {}x{}",
                finest[0], finest[1]
            )));
        }
        let factor = finest[0] / h;
        let s = soft_attention(g, f, w, token_limit)?;
        let uf = g.upsample_nearest(f, factor)?;
        let us = g.upsample_nearest(s, factor)?;
        let a = g.mul(uf, us)?;
        let c = g.shape(a)[2];
        let rows = g.reshape(a, &[finest[0] * finest[1], c])?;
        let projected = g.matmul(rows, w.proj)?;
        let term = g.mul(projected, w.alpha)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let fused = fused.expect("at least one scale");
    let cf = g.shape(fused)[1];
    g.reshape(fused, &[finest[0], finest[1], cf])
}
