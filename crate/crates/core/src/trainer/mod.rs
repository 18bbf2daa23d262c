//! Optimization loop: bias-corrected Adam, the step learning-rate schedule,
//! k-fold plans, seeded training with early stopping, and the nine-variant
//! ablation grid.

mod synth;
#[cfg(test)]
mod tests;

pub use synth::synthetic_dataset;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{FixationMap, FixationSet, SaliencyMap};
use crate::loss::{self, LossError, LossKind, LossWeights};
use crate::metrics::{self, evaluate_pair, Metric, MetricReport};
use crate::model::{
    apply_bn_updates, model_backward, model_forward, ModelConfig, ModelError, ModelParams, Phase,
    Variant,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("degenerate loss at epoch {epoch} step {step} on sample `{sample}`: {source}")]
    DegenerateBatch {
        epoch: usize,
        step: u64,
        sample: String,
        source: LossError,
    },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("cannot split {n} items into {k} folds")]
    BadKfold { n: usize, k: usize },
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Splitmix-style derivation of per-(seed, index) streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One training/evaluation pair at model resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub gt_map: SaliencyMap,
    pub gt_fix: FixationMap,
    pub fixations: FixationSet,
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam moment-decay and stability constants (the cited defaults; only the
/// learning rate is pinned by the training protocol).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments shape-matched to the parameters,
/// plus step/epoch counters and early-stop bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: &ModelParams, seed: u64) -> Self {
        Self {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
            epoch: 0,
            best_val: None,
            best_epoch: 0,
            epochs_since_best: 0,
            seed,
        }
    }
}

/// The bias-corrected Adam update on one flat parameter slice; `t` is the
/// 1-based step count.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hyper: &AdamHyper,
) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// One optimizer step over every learnable parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut TrainState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let names = params.learnable_names();
    for name in names {
        let grad = grads.get(&name).ok_or_else(|| TrainError::GradShape {
            name: name.clone(),
            grad: vec![],
            param: params.get(&name).shape().to_vec(),
        })?;
        if grad.shape() != params.get(&name).shape() {
            return Err(TrainError::GradShape {
                name: name.clone(),
                grad: grad.shape().to_vec(),
                param: params.get(&name).shape().to_vec(),
            });
        }
        let m = state.m.get_mut(&name).expect("moment store matches params");
        let v = state.v.get_mut(&name).expect("moment store matches params");
        adam_update(
            params.get_mut(&name).data_mut(),
            grad.data(),
            m.data_mut(),
            v.data_mut(),
            state.step,
            lr,
            hyper,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// learning-rate schedule
// ---------------------------------------------------------------------------

/// Step decay: `base * factor^(epoch / every)`.
pub fn scheduled_lr(epoch: usize, base_lr: f64, factor: f64, every: usize) -> f64 {
    base_lr * factor.powi((epoch / every) as i32)
}

/// The published schedule: base 1e-5, multiplied by 0.1 every 3 epochs.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    scheduled_lr(epoch, base_lr, 0.1, 3)
}

pub const DEFAULT_BASE_LR: f64 = 1e-5;

// ---------------------------------------------------------------------------
// k-fold plans
// ---------------------------------------------------------------------------

/// Disjoint index subsets; fold i tests on subset i, validates on subset
/// (i+1) mod k, and trains on the remaining k-2 subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub subsets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn fold(&self, i: usize) -> FoldAssignment {
        let k = self.k();
        let test = self.subsets[i % k].clone();
        let val = self.subsets[(i + 1) % k].clone();
        let train = (0..k)
            .filter(|&j| j != i % k && j != (i + 1) % k)
            .flat_map(|j| self.subsets[j].iter().copied())
            .collect();
        FoldAssignment { train, val, test }
    }
}

/// Shuffles 0..n_items and chunks into k near-equal subsets.
pub fn kfold_split(n_items: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || n_items < k {
        return Err(TrainError::BadKfold { n: n_items, k });
    }
    let mut indices: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..indices.len()).rev() {
        indices.swap(i, rng.gen_range(0..=i));
    }
    let base = n_items / k;
    let extra = n_items % k;
    let mut subsets = Vec::with_capacity(k);
    let mut cursor = 0;
    for s in 0..k {
        let len = base + usize::from(s < extra);
        subsets.push(indices[cursor..cursor + len].to_vec());
        cursor += len;
    }
    Ok(FoldPlan { subsets })
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weights: LossWeights,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            patience: 5,
            base_lr: DEFAULT_BASE_LR,
            lr_decay_factor: 0.1,
            lr_decay_every: 3,
            weights: LossWeights::default(),
            adam: AdamHyper::default(),
            seed: 0,
        }
    }
}

/// Early-stop bookkeeping: training halts once the validation objective has
/// not strictly improved for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    best: Option<f64>,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records this epoch's validation value; returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = self.best.map_or(true, |b| value < b);
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

/// One history line; metric cells are filled on validation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub cc: Option<f64>,
    pub sim: Option<f64>,
    pub nss: Option<f64>,
    pub kld: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    /// CSV with header `epoch,split,loss,cc,sim,nss,kld`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,cc,sim,nss,kld\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.split,
                r.loss,
                fmt(r.cc),
                fmt(r.sim),
                fmt(r.nss),
                fmt(r.kld)
            );
        }
        out
    }

    pub fn train_loss(&self, epoch: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.split == "train")
            .map(|r| r.loss)
    }
}

pub struct TrainOutcome {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub final_epoch: usize,
}

/// Mean combined loss and mean CC/SIM/NSS/KLD of `params` over `samples`.
pub fn evaluate_split(
    samples: &[Sample],
    config: &ModelConfig,
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<(f64, HistoryRow)> {
    let mut loss_sum = 0.0;
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for sample in samples {
        let out = model_forward(config, params, &sample.image, Phase::Eval)?;
        let pred = out.prediction();
        let gt = sample.gt_map.to_tensor();
        let l = loss::combined_loss(pred, &gt, &sample.gt_fix, weights).map_err(|source| {
            TrainError::DegenerateBatch {
                epoch: 0,
                step: 0,
                sample: sample.name.clone(),
                source,
            }
        })?;
        loss_sum += l.value;
        let pred_map = SaliencyMap::from_tensor(pred).expect("sigmoid output is nonnegative");
        let vals = [
            metrics::cc(&pred_map, &sample.gt_map).ok(),
            metrics::sim(&pred_map, &sample.gt_map).ok(),
            metrics::nss(&pred_map, &sample.gt_fix).ok(),
            metrics::kld(&pred_map, &sample.gt_map).ok(),
        ];
        for (i, v) in vals.iter().enumerate() {
            if let Some(v) = v {
                sums[i] += v;
                counts[i] += 1;
            }
        }
    }
    let n = samples.len() as f64;
    let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
    Ok((
        loss_sum / n,
        HistoryRow {
            epoch: 0,
            split: "val",
            loss: loss_sum / n,
            cc: mean(0),
            sim: mean(1),
            nss: mean(2),
            kld: mean(3),
        },
    ))
}

/// Seeded training with per-epoch shuffling, batch-averaged gradients, the
/// step schedule, and early stopping on the validation combined loss. The
/// returned parameters are the best-validation checkpoint.
pub fn train_loop(
    train: &[Sample],
    val: &[Sample],
    config: &ModelConfig,
    opts: &TrainOptions,
    init: Option<ModelParams>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    config.validate()?;
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(config, opts.seed)?,
    };
    let mut state = TrainState::new(&params, opts.seed);
    let mut history = TrainHistory::default();
    let mut best_params = params.clone();
    let mut stopper = EarlyStop::new(opts.patience);
    let mut final_epoch = 0;

    for epoch in 0..opts.epochs {
        state.epoch = epoch;
        final_epoch = epoch;
        let lr = scheduled_lr(epoch, opts.base_lr, opts.lr_decay_factor, opts.lr_decay_every);

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut grads = params.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &train[idx];
                let out = model_forward(config, &params, &sample.image, Phase::Train)?;
                let gt = sample.gt_map.to_tensor();
                let (value, grad) = loss::training_loss(
                    config.loss_kind,
                    out.prediction(),
                    &gt,
                    &sample.gt_fix,
                    &opts.weights,
                )
                .map_err(|source| TrainError::DegenerateBatch {
                    epoch,
                    step: state.step,
                    sample: sample.name.clone(),
                    source,
                })?;
                batch_loss += value;
                let sample_grads = model_backward(&params, &out, &grad)?;
                for (name, g) in sample_grads {
                    grads.get_mut(&name).expect("zero_grads covers params").add_assign(&g);
                }
                apply_bn_updates(&mut params, &out.bn_stats);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                *g = g.scaled(scale);
            }
            epoch_loss += batch_loss;
            adam_step(&mut params, &grads, &mut state, lr, &opts.adam)?;
        }
        epoch_loss /= train.len() as f64;
        history.rows.push(HistoryRow {
            epoch,
            split: "train",
            loss: epoch_loss,
            cc: None,
            sim: None,
            nss: None,
            kld: None,
        });

        let (val_loss, mut val_row) = evaluate_split(val, config, &params, &opts.weights)?;
        val_row.epoch = epoch;
        history.rows.push(val_row);

        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            state.best_val = Some(val_loss);
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
            best_params = params.clone();
        } else {
            state.epochs_since_best = stopper.since_best;
        }
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        config: config.clone(),
        params: best_params,
        history,
        best_epoch: state.best_epoch,
        final_epoch,
    })
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

pub struct AblationRow {
    pub variant: &'static str,
    pub report: MetricReport,
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Table-shaped CSV: a group annotation line, the column header with
    /// perception-based metrics first, then one row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "group,perception,perception,perception,non-perception,non-perception,non-perception\n",
        );
        out.push_str("variant,CC,SIM,NSS,sAUC,AUC,KLD\n");
        for row in &self.rows {
            let fmt = |m: Metric| {
                row.report
                    .aggregate(m)
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.variant,
                fmt(Metric::Cc),
                fmt(Metric::Sim),
                fmt(Metric::Nss),
                fmt(Metric::Sauc),
                fmt(Metric::Auc),
                fmt(Metric::Kld),
            );
        }
        out
    }
}

/// Trains and evaluates all nine variants on a shared synthetic dataset with
/// shared folds, reporting the six metrics on the held-out test subset.
pub fn ablation_grid(
    samples: &[Sample],
    base: &ModelConfig,
    opts: &TrainOptions,
) -> Result<AblationReport> {
    let k = 5.min(samples.len());
    let plan = kfold_split(samples.len(), k, opts.seed)?;
    let fold = plan.fold(0);
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let train = pick(&fold.train);
    let val = pick(&fold.val);
    let test = pick(&fold.test);

    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let config = variant.configure(base);
        let outcome = train_loop(&train, &val, &config, opts, None)?;
        let mut report = MetricReport::default();
        for (i, sample) in test.iter().enumerate() {
            let out = model_forward(&config, &outcome.params, &sample.image, Phase::Eval)?;
            let pred = SaliencyMap::from_tensor(out.prediction())
                .expect("sigmoid output is nonnegative");
            let pool: Vec<&FixationMap> = test
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| &s.gt_fix)
                .collect();
            report.push(evaluate_pair(
                &sample.name,
                &pred,
                &sample.gt_map,
                &sample.gt_fix,
                &pool,
                derive_seed(opts.seed, i as u64),
                metrics::SAUC_DEFAULT_SPLITS,
            ));
        }
        rows.push(AblationRow {
            variant: variant.name(),
            report,
        });
    }
    Ok(AblationReport { rows })
}
