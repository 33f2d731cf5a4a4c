//! HOMEY-mini: tiny convolutional backbone, per-scale masking, attention
//! fusion and a one-object-per-cell grid head.

mod assign;
mod checkpoint;
mod decode;

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Padding, Real, Tensor, TensorError, Var};
use crate::data::SplitMix64;
use crate::error::{Error, Result};
use crate::fusion::{fuse_scales, FusionParams, ScaleWeights};
use crate::masking::{apply_mask, compute_mask, ContextPrior, MaskCoeffs, MaskParams, PriorMode};

pub use assign::{assign_targets, AssignmentTargets};
pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{decode_boxes, decode_cell, decode_cells, encode_box, BoxVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Channel count of each backbone stage, finest first.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub mask: MaskParams,
    pub fusion: FusionParams,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            channels: vec![8, 16, 32],
            num_classes: 6,
            mask: MaskParams::default(),
            fusion: FusionParams::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    /// Grid extent `S`: the finest feature map, half the input.
    pub fn grid(&self) -> usize {
        self.input_size / 2
    }

    /// Side length of each scale's feature map.
    pub fn extents(&self) -> Vec<usize> {
        (0..self.scales())
            .map(|l| self.input_size >> (l + 1))
            .collect()
    }

    /// Head width: four box logits, `C` foreground and one background logit.
    pub fn head_width(&self) -> usize {
        4 + self.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.scales();
        let fail = |m: String| Err(Error::Config(m));
        if l == 0 {
            return fail("at least one backbone scale is required".into());
        }
        if self.channels.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        let unit = 1usize << l;
        if self.input_size < unit || self.input_size % unit != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of 2^L = {unit}",
                self.input_size
            ));
        }
        self.mask.validate().map_err(Error::Config)?;
        self.fusion.validate().map_err(Error::Config)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Const(f64),
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter indices, resolved once from the config.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    /// conv.weight, conv.bias, down.weight, down.bias
    backbone: Vec<[usize; 4]>,
    /// query, key, value, proj, alpha
    fusion: Vec<[usize; 5]>,
    head: [usize; 2],
    mask_coeffs: Option<[usize; 3]>,
    priors: Option<Vec<usize>>,
}

fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init });
        specs.len() - 1
    };
    let mut backbone = Vec::new();
    let mut cin = 3;
    for (l, &c) in cfg.channels.iter().enumerate() {
        let conv = push(
            format!("backbone.{l}.conv.weight"),
            vec![3, 3, cin, c],
            Init::Glorot {
                fan_in: 9 * cin,
                fan_out: 9 * c,
            },
        );
        let conv_b = push(format!("backbone.{l}.conv.bias"), vec![c], Init::Const(0.0));
        let down = push(
            format!("backbone.{l}.down.weight"),
            vec![3, 3, c, c],
            Init::Glorot {
                fan_in: 9 * c,
                fan_out: 9 * c,
            },
        );
        let down_b = push(format!("backbone.{l}.down.bias"), vec![c], Init::Const(0.0));
        backbone.push([conv, conv_b, down, down_b]);
        cin = c;
    }
    let (dk, cf) = (cfg.fusion.d_k, cfg.fusion.channels);
    let inv_l = 1.0 / cfg.scales() as f64;
    let mut fusion = Vec::new();
    for (l, &c) in cfg.channels.iter().enumerate() {
        let lin = |fan_out| Init::Glorot { fan_in: c, fan_out };
        let q = push(format!("fusion.{l}.query"), vec![c, dk], lin(dk));
        let k = push(format!("fusion.{l}.key"), vec![c, dk], lin(dk));
        let v = push(format!("fusion.{l}.value"), vec![c, c], lin(c));
        let p = push(format!("fusion.{l}.proj"), vec![c, cf], lin(cf));
        let a = push(format!("fusion.{l}.alpha"), vec![1], Init::Const(inv_l));
        fusion.push([q, k, v, p, a]);
    }
    let hw = cfg.head_width();
    let head = [
        push(
            "head.weight".into(),
            vec![cf, hw],
            Init::Glorot {
                fan_in: cf,
                fan_out: hw,
            },
        ),
        push("head.bias".into(), vec![hw], Init::Const(0.0)),
    ];
    let mask_on = cfg.mask.enabled;
    let mask_coeffs = (mask_on && cfg.mask.learnable).then(|| {
        [
            push("mask.alpha".into(), vec![1], Init::Const(cfg.mask.alpha)),
            push("mask.beta".into(), vec![1], Init::Const(cfg.mask.beta)),
            push("mask.gamma".into(), vec![1], Init::Const(cfg.mask.gamma)),
        ]
    });
    let priors = (mask_on && cfg.mask.prior_mode == PriorMode::Learnable).then(|| {
        cfg.extents()
            .iter()
            .enumerate()
            .map(|(l, &n)| push(format!("mask.{l}.prior"), vec![n, n], Init::Const(0.0)))
            .collect()
    });
    (
        specs,
        Layout {
            backbone,
            fusion,
            head,
            mask_coeffs,
            priors,
        },
    )
}

/// Named, ordered parameters plus the fixed context prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    prior: ContextPrior,
    layout: Layout,
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[S·S, 4 + C + 1]`; row `i·S + j` is cell `(i, j)`.
    pub preds: Var,
    pub feats: Vec<Var>,
    pub masked: Vec<Var>,
    pub masks: Vec<Var>,
    pub fused: Var,
    /// One handle per model parameter, in [`Model::names`] order.
    pub params: Vec<Var>,
}

impl<T: Real> Model<T> {
    /// Deterministic initialisation from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (specs, layout) = layout(cfg);
        let mut rng = SplitMix64::new(cfg.seed);
        let params = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Glorot { fan_in, fan_out } => {
                        let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.uniform(-b, b))).collect()
                    }
                    Init::Const(v) => vec![T::lit(v); n],
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape")
            })
            .collect();
        let prior = load_prior(cfg)?;
        Ok(Self {
            config: cfg.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            prior,
            layout,
        })
    }

    /// Rebuilds a model from named tensors; extra names are ignored.
    pub fn from_named(cfg: &ModelConfig, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Whether weight decay applies: kernels and projections only.
    pub fn decays(&self, index: usize) -> bool {
        let n = &self.names[index];
        n.ends_with(".weight")
            || n.ends_with(".query")
            || n.ends_with(".key")
            || n.ends_with(".value")
            || n.ends_with(".proj")
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            prior: self.prior.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Same model with parameter values replaced (shapes must agree).
    pub fn with_params(&self, params: Vec<Tensor<T>>) -> Self {
        assert_eq!(params.len(), self.params.len(), "parameter count");
        Self {
            params,
            ..self.clone()
        }
    }

    /// Records the full forward pass on `g`. With `trainable` the parameters
    /// are gradient leaves, otherwise constants.
    pub fn forward(&self, g: &mut Graph<T>, image: &Tensor<T>, trainable: bool) -> Result<Forward> {
        let cfg = &self.config;
        let n = cfg.input_size;
        if image.shape() != [n, n, 3] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match the configured input {n}x{n}x3",
                image.shape()
            )));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let lay = &self.layout;
        let mut x = g.constant(image.clone());
        let mut feats = Vec::new();
        for idx in &lay.backbone {
            let h = g.conv2d(x, params[idx[0]], 1, Padding::Replicate)?;
            let h = g.add(h, params[idx[1]])?;
            let h = g.relu(h);
            let f = g.conv2d(h, params[idx[2]], 2, Padding::Replicate)?;
            let f = g.add(f, params[idx[3]])?;
            feats.push(f);
            x = f;
        }

        let mut masked = Vec::new();
        let mut masks = Vec::new();
        if cfg.mask.enabled {
            let coeffs = match lay.mask_coeffs {
                Some([a, b, c]) => MaskCoeffs {
                    alpha: params[a],
                    beta: params[b],
                    gamma: params[c],
                },
                None => MaskCoeffs::constants(g, &cfg.mask),
            };
            for (l, &f) in feats.iter().enumerate() {
                let prior = match &lay.priors {
                    Some(idx) => params[idx[l]],
                    None => g.constant(self.prior.maps[l].cast()),
                };
                let m = compute_mask(g, f, coeffs, prior, cfg.mask.variance_window)?;
                masked.push(apply_mask(g, f, m)?);
                masks.push(m);
            }
        } else {
            masked = feats.clone();
        }

        let weights: Vec<ScaleWeights> = lay
            .fusion
            .iter()
            .map(|i| ScaleWeights {
                query: params[i[0]],
                key: params[i[1]],
                value: params[i[2]],
                proj: params[i[3]],
                alpha: params[i[4]],
            })
            .collect();
        let fused = fuse_scales(g, &masked, &weights, cfg.fusion.token_limit)?;
        let s = cfg.grid();
        let rows = g.reshape(fused, &[s * s, cfg.fusion.channels])?;
        let preds = g.matmul(rows, params[lay.head[0]])?;
        let preds = g.add(preds, params[lay.head[1]])?;
        if !g.value(preds).is_finite() {
            return Err(TensorError::NonFinite { op: "forward" }.into());
        }
        Ok(Forward {
            preds,
            feats,
            masked,
            masks,
            fused,
            params,
        })
    }

    /// Grid predictions `[S·S, 4 + C + 1]` without gradient bookkeeping.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, false)?;
        Ok(g.value(out.preds).clone())
    }
}

fn load_prior(cfg: &ModelConfig) -> Result<ContextPrior> {
    let extents = cfg.extents();
    match (&cfg.mask.prior_mode, &cfg.mask.prior_path) {
        (PriorMode::File, Some(path)) if cfg.mask.enabled => {
            Ok(ContextPrior::from_pgm(path, &extents)?)
        }
        _ => Ok(ContextPrior::zeros(&extents)),
    }
}
