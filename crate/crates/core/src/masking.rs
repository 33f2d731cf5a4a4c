//! Heuristic object mask: `M = σ(α·Edge(F) + β·ColorVar(F) + γ·Prior)` and
//! the boost `F̃ = F ⊙ (1 + M)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Padding, Real, Tensor, TensorError, Var};
use crate::data::{read_pgm, DataError};

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
pub const EDGE_EPS: f64 = 1e-12;
/// Mask pre-activations are clamped to `±MASK_LOGIT_LIMIT`, which keeps
/// `M` strictly inside (0, 1) in 32-bit as well as 64-bit arithmetic.
pub const MASK_LOGIT_LIMIT: f64 = 15.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    #[default]
    UniformZero,
    File,
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    /// When false the features pass through unboosted.
    pub enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learnable: bool,
    pub variance_window: usize,
    pub prior_mode: PriorMode,
    /// PGM prior used with [`PriorMode::File`].
    pub prior_path: Option<PathBuf>,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            learnable: false,
            variance_window: 3,
            prior_mode: PriorMode::UniformZero,
            prior_path: None,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.variance_window < 3 || self.variance_window % 2 == 0 {
            return Err(format!(
                "variance_window must be odd and >= 3, got {}",
                self.variance_window
            ));
        }
        if ![self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            return Err("mask coefficients must be finite".into());
        }
        if self.prior_mode == PriorMode::File && self.prior_path.is_none() {
            return Err("prior_mode file needs prior_path".into());
        }
        Ok(())
    }
}

/// Per-scale prior maps, each `[H_l, W_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPrior {
    pub maps: Vec<Tensor<f64>>,
}

impl ContextPrior {
    pub fn zeros(extents: &[usize]) -> Self {
        Self {
            maps: extents.iter().map(|&n| Tensor::zeros([n, n])).collect(),
        }
    }

    /// Loads a grayscale prior and nearest-resizes it to every scale.
    pub fn from_pgm(path: &Path, extents: &[usize]) -> Result<Self, DataError> {
        let img = read_pgm(path)?;
        let maps = extents
            .iter()
            .map(|&n| {
                let r = img.resize_nearest(n, n);
                let data: Vec<f64> = r.data.iter().map(|&v| v as f64).collect();
                Tensor::new([n, n], data).expect("resized prior")
            })
            .collect();
        Ok(Self { maps })
    }
}

/// Mean over channels of the per-channel Sobel magnitude `sqrt(Gx² + Gy² + ε)`.
pub fn edge_density<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var, TensorError> {
    let kx: Vec<T> = SOBEL_X.iter().map(|&v| T::lit(v)).collect();
    let ky: Vec<T> = SOBEL_Y.iter().map(|&v| T::lit(v)).collect();
    let gx = g.filter2d(f, &kx, 3, Padding::Replicate)?;
    let gy = g.filter2d(f, &ky, 3, Padding::Replicate)?;
    let gx2 = g.square(gx);
    let gy2 = g.square(gy);
    let s = g.add(gx2, gy2)?;
    let s = g.add_scalar(s, T::lit(EDGE_EPS));
    let mag = g.sqrt(s)?;
    Ok(g.mean_last_axis(mag))
}

/// Mean over channels of the local population variance in a `k×k` window.
pub fn color_variance<T: Real>(g: &mut Graph<T>, f: Var, k: usize) -> Result<Var, TensorError> {
    let v = g.local_variance(f, k)?;
    Ok(g.mean_last_axis(v))
}

/// Coefficient handles; constants in hand-tuned mode, parameters otherwise.
#[derive(Clone, Copy, Debug)]
pub struct MaskCoeffs {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
}

impl MaskCoeffs {
    pub fn constants<T: Real>(g: &mut Graph<T>, p: &MaskParams) -> Self {
        Self {
            alpha: g.constant(Tensor::scalar(T::lit(p.alpha))),
            beta: g.constant(Tensor::scalar(T::lit(p.beta))),
            gamma: g.constant(Tensor::scalar(T::lit(p.gamma))),
        }
    }
}

pub fn compute_mask<T: Real>(
    g: &mut Graph<T>,
    f: Var,
    coeffs: MaskCoeffs,
    prior: Var,
    window: usize,
) -> Result<Var, TensorError> {
    let spatial = &g.shape(f)[..2];
    if g.shape(prior) != spatial {
        return Err(TensorError::ShapeMismatch {
            op: "compute_mask",
            lhs: spatial.to_vec(),
            rhs: g.shape(prior).to_vec(),
        });
    }
    let e = edge_density(g, f)?;
    let v = color_variance(g, f, window)?;
    let ae = g.mul(e, coeffs.alpha)?;
    let bv = g.mul(v, coeffs.beta)?;
    let gp = g.mul(prior, coeffs.gamma)?;
    let pre = g.add(ae, bv)?;
    let pre = g.add(pre, gp)?;
    let pre = g.clamp(pre, T::lit(-MASK_LOGIT_LIMIT), T::lit(MASK_LOGIT_LIMIT));
    Ok(g.sigmoid(pre))
}

/// `F̃ = F ⊙ (1 + M)`, with `M` broadcast over channels.
pub fn apply_mask<T: Real>(g: &mut Graph<T>, f: Var, m: Var) -> Result<Var, TensorError> {
    let boost = g.add_scalar(m, T::one());
    g.mul_leading(f, boost)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<F>(x: Tensor<f64>, f: F) -> Tensor<f64>
    where
        F: FnOnce(&mut Graph<f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = f(&mut g, v);
        g.value(out).clone()
    }

    #[test]
    fn lone_center_pixel_has_zero_edge_at_center() {
        let mut d = vec![0.0; 9];
        d[4] = 1.0;
        let x = Tensor::new([3, 3, 1], d).unwrap();
        let e = run(x, |g, v| edge_density(g, v).unwrap());
        assert!(e.data()[4].abs() < 1e-5, "{}", e.data()[4]);
        assert!(e.data()[1] > 1.0);
    }

    #[test]
    fn center_variance_fixture() {
        let mut d = vec![0.0; 9];
        d[4] = 1.0;
        let x = Tensor::new([3, 3, 1], d).unwrap();
        let v = run(x, |g, v| color_variance(g, v, 3).unwrap());
        assert!((v.data()[4] - 8.0 / 81.0).abs() < 1e-12);
    }

    #[test]
    fn even_window_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([4, 4, 1]));
        assert!(color_variance(&mut g, x, 4).is_err());
        assert!(MaskParams {
            variance_window: 4,
            ..MaskParams::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_coefficients_give_half() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..4 * 4 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = g.constant(Tensor::new([4, 4, 2], data).unwrap());
        let prior = g.constant(Tensor::full([4, 4], 3.0));
        let p = MaskParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..MaskParams::default()
        };
        let c = MaskCoeffs::constants(&mut g, &p);
        let m = compute_mask(&mut g, f, c, prior, 3).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn prior_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros([4, 4, 2]));
        let prior = g.constant(Tensor::zeros([2, 2]));
        let c = MaskCoeffs::constants(&mut g, &MaskParams::default());
        assert!(compute_mask(&mut g, f, c, prior, 3).is_err());
    }
}
