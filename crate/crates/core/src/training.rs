//! Self-supervised training: patch sampling, speckle augmentation, AdamW
//! updates under the curriculum objective, per-epoch logging and checkpoints,
//! plus the target-variance and structural-weight sweeps.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::evalkit::{self, EvalError, MScoreConfig};
use crate::objective::{self, LossBreakdown, LossConfig, LossInputs, ObjectiveError};
use crate::optim::{adamw_step, AdamW, AdamWState, OptimError};
use crate::rpn::{self, RpnError, RpnParams};
use crate::speckle::{self, SpeckleError, SpeckleSpec};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite values at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: u32, step: usize, detail: String, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] RpnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Speckle(#[from] SpeckleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Optimization and data settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub optimizer: AdamW,
    /// Probability that a sample receives extra speckle.
    pub augment_prob: f64,
    /// Looks drawn uniformly for augmentation speckle.
    pub augment_looks: Vec<u32>,
    /// Seeds initialization, patch sampling and augmentation.
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: u32,
    /// Fixed-order execution. All reductions in this crate already run in a
    /// fixed order, so this is recorded for the run but changes no code path.
    pub deterministic: bool,
    pub mscore: MScoreConfig,
    /// Nominal looks for validation M-scores (default: the target looks).
    pub mscore_looks: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            batch_size: 8,
            epochs: 50,
            optimizer: AdamW::default(),
            augment_prob: 0.5,
            augment_looks: vec![1, 2, 3, 4],
            seed: 0,
            checkpoint_every: 5,
            deterministic: true,
            mscore: MScoreConfig::default(),
            mscore_looks: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.patch_size < rpn::DW_KERNEL {
            return bad(format!("patch_size must be >= {}", rpn::DW_KERNEL));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad("augment_prob must lie in [0, 1]".into());
        }
        if self.augment_looks.is_empty() || self.augment_looks.contains(&0) {
            return bad("augment_looks must be a non-empty set of positive integers".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        self.mscore.validate()?;
        Ok(())
    }
}

/// Draws `n` random `patch × patch` windows (uniform image, uniform top-left).
pub fn sample_patches(corpus: &[Tensor<f32>], n: usize, patch: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    check_corpus(corpus, patch)?;
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let img = &corpus[rng.random_range(0..corpus.len())];
        let s = img.shape();
        let y = rng.random_range(0..=s.h - patch);
        let x = rng.random_range(0..=s.w - patch);
        items.push(img.window(0, y, x, patch, patch)?);
    }
    Ok(Tensor::stack(&items)?)
}

fn check_corpus(corpus: &[Tensor<f32>], patch: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(TrainError::Config("empty corpus".into()));
    }
    for (i, t) in corpus.iter().enumerate() {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(TrainError::Config(format!("corpus image {i} has shape {s}; expected single-channel images")));
        }
        if s.h < patch || s.w < patch {
            return Err(TrainError::Config(format!("corpus image {i} ({}x{}) is smaller than patch_size {patch}", s.h, s.w)));
        }
    }
    Ok(())
}

/// Multiplies each sample, independently with probability `prob`, by fresh
/// `Γ(L, 1/L)` speckle with `L` uniform over `looks`.
pub fn augment_speckle(batch: &Tensor<f32>, prob: f64, looks: &[u32], rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let s = batch.shape();
    let mut out = batch.clone();
    let per = s.c * s.h * s.w;
    for n in 0..s.n {
        if !rng.random_bool(prob) {
            continue;
        }
        let l = looks[rng.random_range(0..looks.len())];
        let noise = speckle::sample_speckle_with([1, s.c, s.h, s.w], l as f64, rng)?;
        for (v, m) in out.data_mut()[n * per..(n + 1) * per].iter_mut().zip(noise.data()) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Loss terms, residual statistics and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Mean over patches of the per-patch variance of `r`.
    pub var_r: f64,
    pub grads: Vec<Tensor<f32>>,
}

/// Forward, objective and backward pass on intensity patches `y`.
pub fn loss_and_grads(params: &RpnParams<f32>, y: &Tensor<f32>, loss: &LossConfig, sigma2_tgt: f64, epoch: u32) -> Result<StepOutput> {
    let z = speckle::to_log(y, loss.eps)?;
    let target = objective::median_target(y, loss.median_window, loss.eps)?;
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let dv = rpn::despeckle_graph(&mut g, &vars, z)?;
    let inputs = LossInputs { z_hat: dv.z_hat, x_hat: dv.x_hat, r: dv.r };
    let (root, breakdown) = objective::loss_total(&mut g, inputs, target, loss, sigma2_tgt, epoch)?;
    let var_r = mean_patch_variance(g.value(dv.r));
    if !breakdown.total.is_finite() {
        return Err(TensorError::NonFinite { op: "loss_total" }.into());
    }
    g.backward(root)?;
    let grads = vars.iter().zip(params.tensors()).map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();
    Ok(StepOutput { breakdown, var_r, grads })
}

/// Mean over samples of each sample's population variance.
pub fn mean_patch_variance(t: &Tensor<f32>) -> f64 {
    let s = t.shape();
    (0..s.n)
        .map(|n| {
            let d = t.sample(n);
            let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64
        })
        .sum::<f64>()
        / s.n as f64
}

/// Whether `e` reports a non-finite loss, gradient or activation.
pub fn is_non_finite(e: &TrainError) -> bool {
    let t = match e {
        TrainError::Tensor(t) | TrainError::Model(RpnError::Tensor(t)) | TrainError::Objective(ObjectiveError::Tensor(t)) => t,
        _ => return false,
    };
    matches!(t, TensorError::NonFinite { .. })
}

/// One row of the metrics log. Row 0 describes the initial network.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub beta: f64,
    pub l_med: f64,
    pub l_stat: f64,
    pub l_str: f64,
    pub total: f64,
    pub var_r: f64,
    pub val_mscore: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,beta,l_med,l_stat,l_str,total,var_r,val_mscore";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_mscore.map(|m| m.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{},{},{}", self.epoch, self.beta, self.l_med, self.l_stat, self.l_str, self.total, self.var_r, val)
    }
}

pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in log {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// What the epoch observer sees after every epoch (and once for the initial state).
#[derive(Debug)]
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub checkpoint: &'a Checkpoint,
    /// The checkpoint schedule asks for this epoch to be saved.
    pub scheduled: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Mean validation M-score of `params` over noisy `images`, blocks pooled.
pub fn validation_mscore(params: &RpnParams<f32>, images: &[Tensor<f32>], looks: f64, cfg: &MScoreConfig) -> Result<f64> {
    let mut outs = Vec::with_capacity(images.len());
    for y in images {
        outs.push(rpn::despeckle(params, y, crate::speckle::DEFAULT_LOG_EPS)?.x_hat);
    }
    let pairs: Vec<_> = images.iter().zip(&outs).collect();
    Ok(evalkit::mscore_pooled(&pairs, looks, cfg)?.m_value)
}

/// Stream offsets of the training RNG; initialization uses `build_rpn(seed)`.
const PATCH_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

/// Trains a fresh network on the noisy intensity images of `corpus`.
///
/// `observer` is called with the initial state (epoch 0) and after every
/// epoch; returning an error stops training. On a non-finite loss or gradient
/// the run aborts with [`TrainError::NonFinite`], carrying the checkpoint of
/// the last completed epoch.
pub fn train(
    corpus: &[Tensor<f32>],
    validation: &[Tensor<f32>],
    cfg: &TrainConfig,
    loss: &LossConfig,
    spec: SpeckleSpec,
    observer: &mut dyn FnMut(&EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    check_corpus(corpus, cfg.patch_size)?;
    let looks = cfg.mscore_looks.unwrap_or(spec.looks);
    let val_m = |p: &RpnParams<f32>| -> Result<Option<f64>> {
        if validation.is_empty() {
            Ok(None)
        } else {
            validation_mscore(p, validation, looks, &cfg.mscore).map(Some)
        }
    };

    let mut params = rpn::build_rpn(cfg.seed);
    let mut adam = AdamWState::new(params.tensors());
    let mut ckpt = Checkpoint { params: params.clone(), epoch: 0, loss: *loss, speckle: spec, optimizer: Some(adam.clone()) };

    // Epoch 0: loss terms of the initial network on a probe batch drawn from its own stream.
    let probe = sample_patches(corpus, cfg.batch_size, cfg.patch_size, &mut speckle::stream_rng(cfg.seed, PROBE_STREAM))?;
    let init = loss_and_grads(&params, &probe, loss, spec.sigma2_tgt, 0)?;
    let b = init.breakdown;
    let mut log = vec![EpochRecord {
        epoch: 0,
        beta: b.beta_t,
        l_med: b.l_med,
        l_stat: b.l_stat,
        l_str: b.l_str,
        total: b.total,
        var_r: init.var_r,
        val_mscore: val_m(&params)?,
    }];
    observer(&EpochEvent { record: &log[0], checkpoint: &ckpt, scheduled: false })?;

    let steps = corpus.len().div_ceil(cfg.batch_size);
    let mut rng = speckle::stream_rng(cfg.seed, PATCH_STREAM);
    for t in 0..cfg.epochs {
        let mut acc = [0.0f64; 5];
        let mut beta = 0.0;
        for step in 0..steps {
            let abort = |detail: String| TrainError::NonFinite { epoch: t, step, detail, last_good: Box::new(ckpt.clone()) };
            let batch = sample_patches(corpus, cfg.batch_size, cfg.patch_size, &mut rng)?;
            let batch = augment_speckle(&batch, cfg.augment_prob, &cfg.augment_looks, &mut rng)?;
            let out = match loss_and_grads(&params, &batch, loss, spec.sigma2_tgt, t) {
                Ok(o) => o,
                Err(e) if is_non_finite(&e) => return Err(abort(e.to_string())),
                Err(e) => return Err(e),
            };
            match adamw_step(params.tensors_mut(), &out.grads, &mut adam, &cfg.optimizer) {
                Ok(()) => {}
                Err(e @ OptimError::NonFiniteGradient { .. }) => return Err(abort(e.to_string())),
                Err(e) => return Err(TrainError::Config(e.to_string())),
            }
            if !params.is_finite() {
                return Err(abort("parameters became non-finite".into()));
            }
            let b = out.breakdown;
            beta = b.beta_t;
            for (a, v) in acc.iter_mut().zip([b.l_med, b.l_stat, b.l_str, b.total, out.var_r]) {
                *a += v / steps as f64;
            }
        }
        let epoch = t + 1;
        ckpt = Checkpoint { params: params.clone(), epoch, loss: *loss, speckle: spec, optimizer: Some(adam.clone()) };
        log.push(EpochRecord {
            epoch,
            beta,
            l_med: acc[0],
            l_stat: acc[1],
            l_str: acc[2],
            total: acc[3],
            var_r: acc[4],
            val_mscore: val_m(&params)?,
        });
        let scheduled = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        observer(&EpochEvent { record: log.last().expect("pushed"), checkpoint: &ckpt, scheduled })?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// [`train`] writing `metrics.csv` (flushed every epoch), scheduled
/// `epoch_NNNN.ckpt` files and `final.ckpt` into `out_dir`. After a
/// non-finite abort the last good state is saved as `last_good.ckpt`.
pub fn train_to_dir(
    out_dir: &Path,
    corpus: &[Tensor<f32>],
    validation: &[Tensor<f32>],
    cfg: &TrainConfig,
    loss: &LossConfig,
    spec: SpeckleSpec,
    observer: &mut dyn FnMut(&EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let mut sink = |ev: &EpochEvent<'_>| -> Result<()> {
        writeln!(csv, "{}", ev.record.csv_row())?;
        csv.flush()?;
        if ev.scheduled {
            ev.checkpoint.save(out_dir.join(format!("epoch_{:04}.ckpt", ev.record.epoch)))?;
        }
        observer(ev)
    };
    match train(corpus, validation, cfg, loss, spec, &mut sink) {
        Ok(out) => {
            out.checkpoint.save(out_dir.join("final.ckpt"))?;
            Ok(out)
        }
        Err(TrainError::NonFinite { epoch, step, detail, last_good }) => {
            last_good.save(out_dir.join("last_good.ckpt"))?;
            Err(TrainError::NonFinite { epoch, step, detail, last_good })
        }
        Err(e) => Err(e),
    }
}

/// Settings shared by the sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Epochs per candidate run.
    pub epochs: u32,
    /// Fraction of the corpus held out for scoring (taken from the end).
    pub val_fraction: f64,
    pub looks_min: u32,
    pub looks_max: u32,
    /// Nominal looks for scoring; estimated from the held-out noisy images when unset.
    pub nominal_looks: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { epochs: 10, val_fraction: 0.1, looks_min: 4, looks_max: 20, nominal_looks: None }
    }
}

/// Training and held-out parts of `corpus`.
pub fn split_corpus(corpus: &[Tensor<f32>], val_fraction: f64) -> Result<(&[Tensor<f32>], &[Tensor<f32>])> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(TrainError::Config("val_fraction must lie in [0, 1)".into()));
    }
    let n_val = (corpus.len() as f64 * val_fraction).floor() as usize;
    if n_val == 0 || n_val == corpus.len() {
        return Err(TrainError::Config(format!("a {val_fraction} split of {} images leaves an empty part", corpus.len())));
    }
    Ok(corpus.split_at(corpus.len() - n_val))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Candidate value: looks for the variance sweep, λ for the structural sweep.
    pub value: f64,
    pub sigma2_tgt: f64,
    pub m_value: f64,
    pub n_selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the lowest M (first on ties).
    pub best: usize,
    /// Looks the held-out M-scores were computed against.
    pub nominal_looks: f64,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    pub fn csv(&self, value_column: &str) -> String {
        let mut out = format!("{value_column},sigma2_tgt,m_value,n_selected\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.value, r.sigma2_tgt, r.m_value, r.n_selected);
        }
        out
    }
}

fn run_sweep(
    corpus: &[Tensor<f32>],
    cfg: &TrainConfig,
    sweep: &SweepConfig,
    candidates: &[(f64, LossConfig, SpeckleSpec)],
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<SweepResult> {
    if candidates.is_empty() {
        return Err(TrainError::Config("empty sweep grid".into()));
    }
    let (train_part, val_part) = split_corpus(corpus, sweep.val_fraction)?;
    let nominal_looks = match sweep.nominal_looks {
        Some(l) => l,
        None => evalkit::estimate_looks(&val_part.iter().collect::<Vec<_>>(), cfg.mscore.block_size)?,
    };
    let run_cfg = TrainConfig { epochs: sweep.epochs, checkpoint_every: 0, ..cfg.clone() };
    let mut rows = Vec::with_capacity(candidates.len());
    for (value, loss, spec) in candidates {
        let out = train(train_part, &[], &run_cfg, loss, *spec, &mut |_| Ok(()))?;
        let mut dens = Vec::with_capacity(val_part.len());
        for y in val_part {
            dens.push(rpn::despeckle(&out.checkpoint.params, y, loss.eps)?.x_hat);
        }
        let pairs: Vec<_> = val_part.iter().zip(&dens).collect();
        let m = evalkit::mscore_pooled(&pairs, nominal_looks, &cfg.mscore)?;
        let row = SweepRow { value: *value, sigma2_tgt: spec.sigma2_tgt, m_value: m.m_value, n_selected: m.n_blocks_selected };
        progress(&row);
        rows.push(row);
    }
    let best = (0..rows.len()).fold(0, |b, i| if rows[i].m_value < rows[b].m_value { i } else { b });
    Ok(SweepResult { rows, best, nominal_looks })
}

/// Short runs with `σ²_tgt = ψ₁(L)` for each integer `L` in the looks range,
/// scored by pooled M on the held-out split; the best row holds the chosen looks.
pub fn select_target_variance(
    corpus: &[Tensor<f32>],
    cfg: &TrainConfig,
    loss: &LossConfig,
    sweep: &SweepConfig,
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<SweepResult> {
    if sweep.looks_min < 1 || sweep.looks_min > sweep.looks_max {
        return Err(TrainError::Config(format!("invalid looks range [{}, {}]", sweep.looks_min, sweep.looks_max)));
    }
    let candidates = (sweep.looks_min..=sweep.looks_max)
        .map(|l| Ok((l as f64, *loss, SpeckleSpec::from_looks(l as f64)?)))
        .collect::<Result<Vec<_>>>()?;
    run_sweep(corpus, cfg, sweep, &candidates, progress)
}

/// Short runs over a grid of structural weights `λ` at a fixed target variance.
pub fn sweep_lambda(
    corpus: &[Tensor<f32>],
    cfg: &TrainConfig,
    loss: &LossConfig,
    spec: SpeckleSpec,
    lambdas: &[f64],
    sweep: &SweepConfig,
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<SweepResult> {
    let candidates = lambdas
        .iter()
        .map(|&lambda| {
            let l = LossConfig { lambda, ..*loss };
            l.validate()?;
            Ok((lambda, l, spec))
        })
        .collect::<Result<Vec<_>>>()?;
    run_sweep(corpus, cfg, sweep, &candidates, progress)
}

/// Default checkpoint file for an epoch inside a run directory.
pub fn epoch_checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}
