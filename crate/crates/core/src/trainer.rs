//! Optimisation loop: cosine schedule, clipping, SGD-momentum / AdamW, epoch
//! orchestration, curve logging and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compute::{finite_diff_check, FdReport, Graph, Probe, Real, Tensor, TensorError};
use crate::data::{generate_synthetic, ClassTable, Dataset, SplitMix64, SynthConfig};
use crate::detector::{assign_targets, AssignmentTargets, Checkpoint, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::fusion::FusionParams;
use crate::losses::{image_loss, total_loss, LossBreakdown, LossConfig, LossParts, Normalizer};
use crate::masking::{MaskParams, PriorMode};
use crate::metrics::{build_report, EvalConfig, EvalImage, EvalReport};
use crate::postprocess::{postprocess, rank_order};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            lr0: 1e-3,
            lr_min: 1e-5,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 5e-4,
            epochs: 40,
            batch_size: 8,
            clip_norm: 10.0,
            seed: 0,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return bad("lr0 must exceed lr_min and lr_min must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.betas.0)
            || !(0.0..1.0).contains(&self.betas.1)
        {
            return bad("momentum and betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        Ok(())
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(πt/T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Invalid(format!("cosine step {t} outside [0, {total}]")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the factor applied.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], names: &[String], clip_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= clip_norm {
        return Ok(1.0);
    }
    let factor = clip_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v = T::lit(v.as_f64() * factor);
        }
    }
    Ok(factor)
}

/// Optimizer with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Velocity (SGD) or first moment (AdamW).
    pub m: Vec<Tensor<T>>,
    /// Second moment; empty for SGD.
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: match cfg.optimizer {
                OptimizerKind::Adamw => zeros(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
        }
    }

    /// One update; `decays[i]` selects parameters that get weight decay
    /// (AdamW only).
    pub fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], decays: &[bool], lr: f64) -> Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let vel = self.momentum * vv.as_f64() + gv.as_f64();
                        *vv = T::lit(vel);
                        *pv = T::lit(pv.as_f64() - lr * vel);
                    }
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2) = self.betas;
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let wd = if decays[i] { self.weight_decay } else { 0.0 };
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gf = gv.as_f64();
                        let m1 = b1 * mv.as_f64() + (1.0 - b1) * gf;
                        let v1 = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
                        *mv = T::lit(m1);
                        *vv = T::lit(v1);
                        let theta = pv.as_f64();
                        let update = (m1 / c1) / ((v1 / c2).sqrt() + self.eps) + wd * theta;
                        *pv = T::lit(theta - lr * update);
                    }
                }
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after optimizer step {}", self.step)));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: usize,
    pub total: f64,
    pub box_loss: f64,
    pub cls: f64,
    pub mask: f64,
    pub risk: f64,
    pub lr: f64,
    pub val_map50: Option<f64>,
    pub val_map5095: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

pub const CURVES_HEADER: &str = "epoch,total,box,cls,mask,risk,lr,val_map50,val_map5095";

impl TrainLog {
    pub fn push(&mut self, row: TrainRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::Invalid(format!(
                    "log epoch {} does not follow {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVES_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.epoch,
                r.total,
                r.box_loss,
                r.cls,
                r.mask,
                r.risk,
                r.lr,
                opt(r.val_map50),
                opt(r.val_map5095)
            )
            .expect("write to string");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CURVES_HEADER) {
            return Err(Error::Invalid("curves CSV header mismatch".into()));
        }
        let mut log = TrainLog::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Invalid(format!("curves CSV line {}: malformed", n + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            log.push(TrainRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                total: num(f[1])?,
                box_loss: num(f[2])?,
                cls: num(f[3])?,
                mask: num(f[4])?,
                risk: num(f[5])?,
                lr: num(f[6])?,
                val_map50: opt(f[7])?,
                val_map5095: opt(f[8])?,
            })?;
        }
        Ok(log)
    }
}

/// Training-time progress stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub epoch: usize,
    pub step: u64,
    pub completed: bool,
    pub best_map50: Option<f64>,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    pub train: TrainConfig,
    pub losses: LossConfig,
    pub log: TrainLog,
}

pub struct FitOutcome {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub last_report: Option<EvalReport>,
}

/// Everything needed to run `fit`.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub train: TrainConfig,
    pub losses: LossConfig,
    pub eval: EvalConfig,
    pub parallelism: Parallelism,
    /// Where `last.ckpt`, `best.ckpt` and `curves.csv` go; `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Return after this epoch, leaving a resumable `last.ckpt`.
    pub stop_after: Option<usize>,
}

struct Prepared {
    images: Vec<Tensor<f32>>,
    targets: Vec<AssignmentTargets>,
}

fn prepare(ds: &Dataset, cfg: &ModelConfig, par: Parallelism) -> Prepared {
    let n = cfg.input_size;
    let grid = cfg.grid();
    let images = exec::map(par, &ds.samples, |s| {
        if s.image.width() == n && s.image.height() == n {
            s.image.to_tensor()
        } else {
            s.image.resize_nearest(n, n).to_tensor()
        }
    });
    let targets = exec::map(par, &ds.samples, |s| assign_targets(&s.boxes, grid, &ds.classes));
    Prepared { images, targets }
}

/// Predicts, post-processes and scores every sample of `ds`. The returned
/// images hold every ranked candidate down to `eval.ap_conf_floor`; see
/// [`crate::postprocess::above_class_thresholds`] for the operating-point detections.
pub fn evaluate(
    model: &Model<f32>,
    ds: &Dataset,
    eval: &EvalConfig,
    par: Parallelism,
) -> Result<(EvalReport, Vec<EvalImage>)> {
    let n = model.config().input_size;
    let grid = model.config().grid();
    let mut floor_table = ds.classes.clone();
    for spec in floor_table.specs_mut() {
        spec.conf_threshold = spec.conf_threshold.min(eval.ap_conf_floor);
    }
    let images = exec::try_map(par, &ds.samples, |s| -> Result<EvalImage> {
        let img = if s.image.width() == n && s.image.height() == n {
            s.image.to_tensor()
        } else {
            s.image.resize_nearest(n, n).to_tensor()
        };
        let preds = model.predict(&img)?;
        let mut dets = postprocess(&preds, grid, &floor_table, &s.name, eval.nms_iou)?;
        dets.sort_by(rank_order);
        dets.truncate(eval.max_det);
        Ok(EvalImage {
            dets,
            gts: s.boxes.clone(),
        })
    })?;
    Ok((build_report(&images, &ds.classes, eval), images))
}

fn add_into(acc: &mut [Tensor<f32>], grads: &[Tensor<f32>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
}

fn image_step(
    model: &Model<f32>,
    image: &Tensor<f32>,
    targets: &AssignmentTargets,
    losses: &LossConfig,
    norm: &Normalizer,
) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, image, true)?;
    let il = image_loss(&mut g, &fwd, targets, losses, norm)?;
    let parts = il.part_values(&g);
    let mut grads = g.backward(il.total)?;
    let out = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((parts, out))
}

impl Trainer {
    fn checkpoint(&self, model: &Model<f32>, opt: &Optimizer<f32>, state: &RunState) -> Checkpoint {
        let mut ck = Checkpoint::from_model(model);
        for (name, m) in model.names().iter().zip(&opt.m) {
            ck.tensors.push((format!("optim.m.{name}"), m.clone()));
        }
        for (name, v) in model.names().iter().zip(&opt.v) {
            ck.tensors.push((format!("optim.v.{name}"), v.clone()));
        }
        ck.meta = serde_json::to_value(state).expect("serializable run state");
        ck
    }

    fn write(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            ck.save(&dir.join(name))?;
        }
        Ok(())
    }

    fn write_curves(&self, log: &TrainLog) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let p = dir.join("curves.csv");
            std::fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Trains from a freshly initialised (or given) model.
    pub fn fit(&self, model: Model<f32>, train: &Dataset, val: Option<&Dataset>) -> Result<FitOutcome> {
        self.train.validate()?;
        self.losses.weights.validate()?;
        let opt = Optimizer::new(&self.train, model.params());
        let state = RunState {
            epoch: 0,
            step: 0,
            completed: false,
            best_map50: None,
            optimizer: self.train.optimizer,
            optimizer_step: 0,
            train: self.train.clone(),
            losses: self.losses.clone(),
            log: TrainLog::default(),
        };
        self.run(model, opt, state, train, val)
    }

    /// Continues the run saved in `ck` (normally `last.ckpt`).
    pub fn resume(&self, ck: &Checkpoint, train: &Dataset, val: Option<&Dataset>) -> Result<FitOutcome> {
        let state: RunState = serde_json::from_value(ck.meta.clone()).map_err(|e| {
            Error::Config(format!("checkpoint has no resumable training state: {e}"))
        })?;
        if state.train != self.train || state.losses != self.losses {
            return Err(Error::Config(
                "training configuration differs from the checkpointed run".into(),
            ));
        }
        let model = ck.model()?;
        let mut opt = Optimizer::new(&self.train, model.params());
        opt.step = state.optimizer_step;
        for (i, name) in model.names().iter().enumerate() {
            let fetch = |prefix: &str| {
                ck.tensor(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {prefix}{name}")))
            };
            opt.m[i] = fetch("optim.m.")?;
            if !opt.v.is_empty() {
                opt.v[i] = fetch("optim.v.")?;
            }
        }
        self.run(model, opt, state, train, val)
    }

    fn run(
        &self,
        mut model: Model<f32>,
        mut opt: Optimizer<f32>,
        mut state: RunState,
        train: &Dataset,
        val: Option<&Dataset>,
    ) -> Result<FitOutcome> {
        let cfg = &self.train;
        if cfg.epochs == 0 {
            return Ok(FitOutcome {
                model,
                log: state.log,
                last_report: None,
            });
        }
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(v) = val {
            if v.classes != train.classes {
                return Err(Error::Config("train and val class tables differ".into()));
            }
        }
        let data = prepare(train, model.config(), self.parallelism);
        let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * batches_per_epoch;
        let decays: Vec<bool> = (0..model.params().len()).map(|i| model.decays(i)).collect();
        let mut last_report = None;

        for epoch in state.epoch + 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            SplitMix64::new(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).shuffle(&mut order);
            let mut sums = [0.0f64; 5];
            let mut lr = cfg.lr0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let tgts: Vec<&AssignmentTargets> = batch.iter().map(|&i| &data.targets[i]).collect();
                let norm = Normalizer::for_batch(&tgts);
                let results = exec::try_map(self.parallelism, batch, |&i| {
                    image_step(&model, &data.images[i], &data.targets[i], &self.losses, &norm)
                })
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
                let mut parts = LossParts::default();
                let mut grads: Vec<Tensor<f32>> =
                    model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
                for (p, g) in &results {
                    parts.box_loss += p.box_loss;
                    parts.cls += p.cls;
                    parts.mask += p.mask;
                    parts.risk += p.risk;
                    add_into(&mut grads, g);
                }
                let positives = tgts.iter().map(|t| t.positives()).sum();
                let bd: LossBreakdown = total_loss(parts, &self.losses.weights, positives)
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
                clip_gradients(&mut grads, model.names(), cfg.clip_norm)
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
                lr = cosine_lr(state.step as usize, total_steps, cfg.lr0, cfg.lr_min)?;
                opt.apply(model.params_mut(), &grads, &decays, lr)
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
                state.step += 1;
                for (s, v) in sums.iter_mut().zip([bd.total, bd.box_loss, bd.cls, bd.mask, bd.risk]) {
                    *s += v;
                }
            }
            let nb = batches_per_epoch as f64;
            let evaluate_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
            let (mut map50, mut map5095) = (None, None);
            if let (true, Some(v)) = (evaluate_now, val) {
                let (report, _) = evaluate(&model, v, &self.eval, self.parallelism)?;
                if let Some(m) = report.means {
                    map50 = Some(m.map50);
                    map5095 = Some(m.map50_95);
                }
                last_report = Some(report);
            }
            state.log.push(TrainRow {
                epoch,
                total: sums[0] / nb,
                box_loss: sums[1] / nb,
                cls: sums[2] / nb,
                mask: sums[3] / nb,
                risk: sums[4] / nb,
                lr,
                val_map50: map50,
                val_map5095: map5095,
            })?;
            log::info!(
                "epoch {epoch}/{} total {:.4} lr {:.2e}{}",
                cfg.epochs,
                sums[0] / nb,
                lr,
                map50.map(|m| format!(" val mAP50 {m:.4}")).unwrap_or_default()
            );
            state.epoch = epoch;
            state.optimizer_step = opt.step;
            state.completed = epoch == cfg.epochs;
            let improved = map50.is_some_and(|m| state.best_map50.is_none_or(|b| m > b));
            if improved {
                state.best_map50 = map50;
            }
            let ck = self.checkpoint(&model, &opt, &state);
            if improved {
                self.write("best.ckpt", &ck)?;
            }
            self.write("last.ckpt", &ck)?;
            self.write_curves(&state.log)?;
            if self.stop_after == Some(epoch) && !state.completed {
                break;
            }
        }
        Ok(FitOutcome {
            model,
            log: state.log,
            last_report,
        })
    }
}

/// Whether `dir/last.ckpt` records a finished run.
pub fn run_completed(dir: &Path) -> Result<bool> {
    let p = dir.join("last.ckpt");
    if !p.exists() {
        return Ok(false);
    }
    let ck = Checkpoint::load(&p)?;
    Ok(ck
        .meta
        .get("completed")
        .and_then(serde_json::Value::as_bool)
        .unwrap_or(false))
}

pub const GRADCHECK_TERMS: [&str; 5] = ["box", "cls", "mask", "risk", "total"];

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub terms: Vec<(String, FdReport)>,
    pub params: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|(_, r)| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:>12} {:>8} {:>7}  status\n", "term", "max_rel_err", "probed", "kinked");
        for (name, r) in &self.terms {
            writeln!(
                s,
                "{:<6} {:>12.3e} {:>8} {:>7}  {}",
                name,
                r.max_rel_error,
                r.probed,
                r.kinked,
                if r.passed { "ok" } else { "FAIL" }
            )
            .expect("write to string");
        }
        s
    }
}

/// The miniature 64-bit model checked by [`gradcheck_command`].
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        channels: vec![4, 8],
        num_classes: 3,
        mask: MaskParams {
            learnable: true,
            prior_mode: PriorMode::Learnable,
            ..MaskParams::default()
        },
        fusion: FusionParams {
            d_k: 4,
            token_limit: 4096,
            channels: 8,
        },
        seed: 11,
    }
}

/// Central-difference check of every loss term and the total over all
/// parameters of the miniature model on one synthetic sample.
pub fn gradcheck_command(tol: f64, h: f64, losses: &LossConfig) -> Result<GradcheckReport> {
    let cfg = gradcheck_model_config();
    let synth = SynthConfig {
        image_size: 32,
        classes: cfg.num_classes,
        min_objects: 2,
        max_objects: 3,
        min_extent: 0.2,
        max_extent: 0.4,
        seed: 5,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&synth, 1)?;
    let sample = &ds.samples[0];
    let image: Tensor<f64> = sample.image.resize_nearest(16, 16).to_tensor();
    let table: ClassTable = ds.classes.clone();
    let targets = assign_targets(&sample.boxes, cfg.grid(), &table);
    let norm = Normalizer::for_batch(&[&targets]);
    let base = Model::<f64>::init(&cfg)?;
    let params = base.params().to_vec();

    let eval = |ps: &[Tensor<f64>], term: usize| -> Result<(Graph<f64>, Option<crate::compute::Var>)> {
        let model = base.with_params(ps.to_vec());
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &image, true)?;
        let il = image_loss(&mut g, &fwd, &targets, losses, &norm)?;
        let v = if term == 4 { Some(il.total) } else { il.parts[term] };
        Ok((g, v))
    };
    let mut terms = Vec::new();
    for (ti, name) in GRADCHECK_TERMS.iter().enumerate() {
        let analytic: Vec<Tensor<f64>> = {
            let model = base.with_params(params.clone());
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &image, true)?;
            let il = image_loss(&mut g, &fwd, &targets, losses, &norm)?;
            let v = if ti == 4 { Some(il.total) } else { il.parts[ti] };
            match v {
                Some(v) => {
                    let mut grads = g.backward(v)?;
                    fwd.params
                        .iter()
                        .zip(&params)
                        .map(|(pv, p)| grads.take(*pv).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                        .collect()
                }
                None => params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            }
        };
        let report = finite_diff_check(
            |ps: &[Tensor<f64>]| -> Result<Probe, TensorError> {
                let (g, v) = eval(ps, ti).map_err(|e| TensorError::Invalid(e.to_string()))?;
                Ok(Probe {
                    value: v.map(|v| g.scalar_value(v)).unwrap_or(0.0),
                    signature: Some(g.branch_signature()),
                })
            },
            &params,
            &analytic,
            h,
            tol,
        )?;
        terms.push((name.to_string(), report));
    }
    Ok(GradcheckReport {
        terms,
        params: base.param_count(),
    })
}
