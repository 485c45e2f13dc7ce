//! Training loop: AdamW with decoupled weight decay, cosine annealing,
//! global-norm clipping, early stopping on validation MSE and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{windows, Dataset, Split, SplitSpec, Splits, TimeSeriesWindow, WindowNorm};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ParamStore};
use crate::tsr::{detect_period, final_loss_on_tape, loss_period, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub loss: LossWeights,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub clip_norm: f64,
    /// Offset between consecutive training windows.
    pub window_stride: usize,
    /// Offset between consecutive evaluation windows.
    pub eval_stride: usize,
    /// Forbid evaluation windows from reading inputs of the previous split.
    pub strict_boundary: bool,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 32,
            patience: 5,
            loss: LossWeights::default(),
            seed: 0,
            clip_norm: 5.0,
            window_stride: 1,
            eval_stride: 1,
            strict_boundary: false,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    /// `lr_max = lr_min = 0` is accepted as a frozen run.
    pub fn validate(&self) -> Result<()> {
        let frozen = self.lr_max == 0.0 && self.lr_min == 0.0;
        if !frozen && !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got lr_min {} lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("eps and clip_norm must be > 0, weight_decay >= 0".into()));
        }
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("window_stride", self.window_stride),
            ("eval_stride", self.eval_stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        self.loss.validate()
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`; steps
/// past `total` stay at `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if step >= total {
        return lr_min;
    }
    let progress = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// One AdamW update. Non-finite gradients leave params and state untouched.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adamw_step", &[params.len()], &[grads.len()]));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for parameter tensor {i}; step rejected"
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((w, &g), m), v) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *w = *w * decay - lr * update;
        }
    }
    Ok(())
}

/// Rescales `grads` to global norm `max_norm` when it is exceeded. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub horizon: usize,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Mean squared and absolute error over every element of every pair.
pub fn error_metrics(predictions: &[Tensor], targets: &[Tensor]) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::dim("error_metrics", &[predictions.len()], &[targets.len()]));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::dim("error_metrics", p.shape(), t.shape()));
        }
        for (a, b) in p.data().iter().zip(t.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        n += p.len();
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Forecasts and errors for a set of windows.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub mse: f64,
    pub mae: f64,
    /// Scale weights averaged over windows.
    pub alpha: Vec<f64>,
}

impl Evaluation {
    pub fn metrics(&self, split: Split) -> SplitMetrics {
        SplitMetrics {
            split,
            horizon: self.targets.first().map_or(0, Tensor::rows),
            windows: self.targets.len(),
            mse: self.mse,
            mae: self.mae,
        }
    }
}

const EVAL_CHUNK: usize = 32;

/// Runs `model` on every window; errors are measured in data units.
pub fn evaluate(model: &Forecaster, data: &Dataset, windows: &[TimeSeriesWindow]) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    let mut alpha = vec![0.0; model.config().j_max as usize];
    for chunk in windows.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false)?;
        for w in chunk {
            let x = w.input(data);
            let norm = WindowNorm::fit(&x)?;
            let xv = tape.constant(norm.normalize(&x)?);
            let out = model.forward_normalized(&mut tape, &bound, xv)?;
            predictions.push(norm.denormalize(tape.value(out.output))?);
            targets.push(w.target(data));
            for (a, v) in alpha.iter_mut().zip(tape.value(out.alpha).data()) {
                *a += v / windows.len() as f64;
            }
        }
    }
    let (mse, mae) = error_metrics(&predictions, &targets)?;
    Ok(Evaluation {
        predictions,
        targets,
        mse,
        mae,
        alpha,
    })
}

/// Errors of an arbitrary forecasting function over `windows`.
pub fn evaluate_with<F>(data: &Dataset, windows: &[TimeSeriesWindow], mut forecast: F) -> Result<(f64, f64)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut predictions = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    for w in windows {
        predictions.push(forecast(&w.input(data))?);
        targets.push(w.target(data));
    }
    error_metrics(&predictions, &targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Batch mean of the full objective.
    pub loss: f64,
    /// Batch mean of the MSE term.
    pub mse: f64,
    /// Batch mean of the unweighted decomposition term.
    pub tsr: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Everything besides tensors needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub config: TrainConfig,
    pub epoch: usize,
    /// Batches already taken in the current epoch.
    pub batch: usize,
    pub step: u64,
    pub adam_t: u64,
    /// Period detected on the training split (or configured).
    pub period: usize,
    pub best_val_mse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub finished: bool,
    pub stopped_early: bool,
    pub clipped_steps: u64,
    pub curve: Vec<EpochRecord>,
    epoch_loss: f64,
    epoch_mse: f64,
    epoch_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon: usize,
    pub splits: Vec<SplitMetrics>,
    pub loss_curve: Vec<EpochRecord>,
    /// Mean scale weights over the test windows.
    pub alpha: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub stopped_early: bool,
    pub clipped_steps: u64,
    pub period: usize,
}

impl MetricsReport {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.splits.iter().find(|m| m.split == split)
    }
}

pub struct TrainOutcome {
    /// Parameters with the best validation MSE.
    pub model: Forecaster,
    pub report: MetricsReport,
}

pub struct Trainer<'a> {
    model: Forecaster,
    data: &'a Dataset,
    splits: Splits,
    train_windows: Vec<TimeSeriesWindow>,
    val_windows: Vec<TimeSeriesWindow>,
    loss_period: Option<usize>,
    adam: AdamState,
    best: Option<ParamStore>,
    progress: Progress,
    order: (usize, Vec<usize>),
    log: Option<Box<dyn Write + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Forecaster, data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let splits = Self::check_data(&model, data, &config)?;
        let period = match model.config().period {
            Some(p) => p,
            None => {
                let train = data.slice(splits.train.clone());
                let max_lag = (model.config().input_len / 2).min(train.rows().saturating_sub(3));
                detect_period(&train, max_lag)?
            }
        };
        let adam = AdamState::zeros(model.params().tensors());
        let progress = Progress {
            config,
            epoch: 0,
            batch: 0,
            step: 0,
            adam_t: 0,
            period,
            best_val_mse: None,
            best_epoch: None,
            bad_epochs: 0,
            finished: false,
            stopped_early: false,
            clipped_steps: 0,
            curve: Vec::new(),
            epoch_loss: 0.0,
            epoch_mse: 0.0,
            epoch_windows: 0,
        };
        Ok(Self::assemble(model, data, splits, adam, None, progress))
    }

    /// Continues a run from [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let progress: Progress = serde_json::from_value(
            checkpoint
                .state
                .get("trainer")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint carries no trainer state".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
        let model = checkpoint.model()?;
        let splits = Self::check_data(&model, data, &progress.config)?;
        let take = |prefix: &str| -> Result<Vec<Tensor>> {
            model
                .params()
                .names()
                .iter()
                .map(|n| checkpoint.extra.get(&format!("{prefix}.{n}")).cloned())
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))
        };
        let adam = AdamState {
            m: take("adam.m")?,
            v: take("adam.v")?,
            t: progress.adam_t,
        };
        let best = if progress.best_val_mse.is_some() {
            let mut store = model.params().clone();
            store.tensors_mut().clone_from_slice(&take("best")?);
            Some(store)
        } else {
            None
        };
        Ok(Self::assemble(model, data, splits, adam, best, progress))
    }

    fn check_data(model: &Forecaster, data: &Dataset, config: &TrainConfig) -> Result<Splits> {
        if data.channels() != model.config().channels {
            return Err(Error::Data(format!(
                "dataset has {} channels, model expects {}",
                data.channels(),
                model.config().channels
            )));
        }
        let splits = Splits::new(data.len(), &config.split)?;
        splits.check_windows(model.config().input_len, model.config().horizon, config.strict_boundary)?;
        Ok(splits)
    }

    fn assemble(
        model: Forecaster,
        data: &'a Dataset,
        splits: Splits,
        adam: AdamState,
        best: Option<ParamStore>,
        progress: Progress,
    ) -> Self {
        let cfg = &progress.config;
        let (ts, tp) = (model.config().input_len, model.config().horizon);
        let train_windows = windows(splits.train.clone(), ts, tp, cfg.window_stride);
        let val_windows = windows(
            splits.window_source(Split::Val, ts, cfg.strict_boundary),
            ts,
            tp,
            cfg.eval_stride,
        );
        let loss_period = (model.config().use_tsr_loss && cfg.loss.beta > 0.0)
            .then(|| loss_period(progress.period, tp))
            .flatten();
        Self {
            model,
            data,
            splits,
            train_windows,
            val_windows,
            loss_period,
            adam,
            best,
            progress,
            order: (usize::MAX, Vec::new()),
            log: None,
        }
    }

    /// Receives one JSON object per step and per epoch.
    pub fn set_log(&mut self, sink: Box<dyn Write + 'a>) {
        self.log = Some(sink);
    }

    pub fn model(&self) -> &Forecaster {
        &self.model
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Decomposition period used by the loss, if any.
    pub fn loss_period(&self) -> Option<usize> {
        self.loss_period
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_windows.len().div_ceil(self.progress.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.progress.config.epochs * self.batches_per_epoch()) as u64
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished
    }

    fn write_log(&mut self, line: LogLine<'_>) -> Result<()> {
        if let Some(sink) = self.log.as_mut() {
            serde_json::to_writer(&mut *sink, &line)?;
            sink.write_all(b"\n")?;
        }
        Ok(())
    }

    fn epoch_order(&mut self) -> &[usize] {
        let epoch = self.progress.epoch;
        if self.order.0 != epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(self.progress.config.seed);
            rng.set_stream(epoch as u64);
            let mut idx: Vec<usize> = (0..self.train_windows.len()).collect();
            idx.shuffle(&mut rng);
            self.order = (epoch, idx);
        }
        &self.order.1
    }

    /// Mean loss over `batch` and its parameter gradients.
    fn batch_gradients(&self, batch: &[usize]) -> Result<(f64, f64, Option<f64>, Vec<Tensor>)> {
        let w = &self.progress.config.loss;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true)?;
        let (mut totals, mut mses, mut tsrs) = (Vec::new(), Vec::new(), Vec::new());
        for &i in batch {
            let win = self.train_windows[i];
            let x = win.input(self.data);
            let norm = WindowNorm::fit(&x)?;
            let xv = tape.constant(norm.normalize(&x)?);
            let yv = tape.constant(norm.normalize(&win.target(self.data))?);
            let out = self.model.forward_normalized(&mut tape, &bound, xv)?;
            let loss = final_loss_on_tape(&mut tape, yv, out.output, w, self.loss_period)?;
            totals.push(loss.total);
            mses.push(loss.mse);
            tsrs.extend(loss.tsr);
        }
        let scale = 1.0 / batch.len() as f64;
        let mean = |tape: &Tape, vars: &[Var]| vars.iter().map(|v| tape.value(*v).item()).sum::<f64>() * scale;
        let mse = mean(&tape, &mses);
        let tsr = (!tsrs.is_empty()).then(|| mean(&tape, &tsrs));
        let sum = tape.add_all(&totals)?;
        let total = tape.scale(sum, scale);
        let value = tape.value(total).item();
        let vars: Vec<Var> = bound.params().iter().map(|(_, v)| *v).collect();
        let grads = tape.backward(total)?;
        Ok((value, mse, tsr, vars.iter().map(|v| grads.wrt(*v)).collect()))
    }

    /// One optimizer step; closes the epoch after its last batch. Returns
    /// `None` once training has finished.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.progress.finished {
            return Ok(None);
        }
        let bs = self.progress.config.batch_size;
        let start = self.progress.batch * bs;
        let batch: Vec<usize> = {
            let order = self.epoch_order();
            order[start..(start + bs).min(order.len())].to_vec()
        };
        let cfg = self.progress.config.clone();
        let lr = cosine_lr(self.progress.step, self.total_steps(), cfg.lr_max, cfg.lr_min);
        let (loss, mse, tsr, mut grads) = self.batch_gradients(&batch)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let clipped = grad_norm > cfg.clip_norm;
        adamw_step(self.model.params_mut().tensors_mut(), &grads, &mut self.adam, lr, &cfg)?;
        let record = StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            lr,
            loss,
            mse,
            tsr,
            grad_norm,
            clipped,
        };
        let p = &mut self.progress;
        p.step += 1;
        p.adam_t = self.adam.t;
        p.batch += 1;
        p.clipped_steps += u64::from(clipped);
        p.epoch_loss += loss * batch.len() as f64;
        p.epoch_mse += mse * batch.len() as f64;
        p.epoch_windows += batch.len();
        self.write_log(LogLine::Step(&record))?;
        if self.progress.batch * bs >= self.train_windows.len() {
            self.end_epoch()?;
        }
        Ok(Some(record))
    }

    fn end_epoch(&mut self) -> Result<()> {
        let val = evaluate(&self.model, self.data, &self.val_windows)?;
        let p = &mut self.progress;
        let n = p.epoch_windows.max(1) as f64;
        let record = EpochRecord {
            epoch: p.epoch,
            train_loss: p.epoch_loss / n,
            train_mse: p.epoch_mse / n,
            val_mse: val.mse,
            val_mae: val.mae,
        };
        if p.best_val_mse.is_none_or(|b| val.mse < b) {
            p.best_val_mse = Some(val.mse);
            p.best_epoch = Some(p.epoch);
            p.bad_epochs = 0;
            self.best = Some(self.model.params().clone());
        } else {
            p.bad_epochs += 1;
        }
        p.curve.push(record.clone());
        p.epoch += 1;
        p.batch = 0;
        p.epoch_loss = 0.0;
        p.epoch_mse = 0.0;
        p.epoch_windows = 0;
        if p.bad_epochs >= p.config.patience {
            p.finished = true;
            p.stopped_early = true;
        } else if p.epoch >= p.config.epochs {
            p.finished = true;
        }
        self.write_log(LogLine::Epoch(&record))
    }

    /// Steps until finished or `max_steps` more steps have been taken.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<()> {
        let mut taken = 0;
        while max_steps.is_none_or(|m| taken < m) && self.step()?.is_some() {
            taken += 1;
        }
        if let Some(sink) = self.log.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    /// Resumable snapshot: current parameters, optimizer moments, best
    /// parameters so far and progress counters.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model, self.progress.step);
        let names = self.model.params().names();
        for (prefix, tensors) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for (n, t) in names.iter().zip(tensors) {
                ck.extra.insert(format!("{prefix}.{n}"), t.clone())?;
            }
        }
        if let Some(best) = &self.best {
            for (n, t) in best.iter() {
                ck.extra.insert(format!("best.{n}"), t.clone())?;
            }
        }
        ck.state = serde_json::json!({ "trainer": self.progress });
        Ok(ck)
    }

    /// Best-validation model and its metrics on every split.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        if let Some(sink) = self.log.as_mut() {
            sink.flush()?;
        }
        let params = self.best.take().unwrap_or_else(|| self.model.params().clone());
        let model = Forecaster::from_params(self.model.config().clone(), params)?;
        let cfg = &self.progress.config;
        let (ts, tp) = (model.config().input_len, model.config().horizon);
        let mut splits = Vec::with_capacity(3);
        let mut alpha = Vec::new();
        for which in Split::ALL {
            let stride = if which == Split::Train {
                cfg.window_stride.max(cfg.eval_stride)
            } else {
                cfg.eval_stride
            };
            let wins = windows(
                self.splits.window_source(which, ts, cfg.strict_boundary),
                ts,
                tp,
                stride,
            );
            let eval = evaluate(&model, self.data, &wins)?;
            if which == Split::Test {
                alpha = eval.alpha.clone();
            }
            splits.push(eval.metrics(which));
        }
        let p = &self.progress;
        let report = MetricsReport {
            horizon: tp,
            splits,
            loss_curve: p.curve.clone(),
            alpha,
            best_epoch: p.best_epoch,
            steps: p.step,
            stopped_early: p.stopped_early,
            clipped_steps: p.clipped_steps,
            period: p.period,
        };
        Ok(TrainOutcome { model, report })
    }
}

/// `100 (value - base) / base`.
pub fn delta_percent(base: f64, value: f64) -> f64 {
    100.0 * (value - base) / base
}

/// One row of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: String,
    pub mse: f64,
    pub mae: f64,
}

/// Plain-text table with the first row as reference and the relative MSE
/// change of every other row in parentheses.
pub fn delta_table(rows: &[VariantRow], column: &str) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .chain(["Model Variant".len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{:<width$}  {column}\n", "Model Variant");
    for (i, r) in rows.iter().enumerate() {
        let cell = if i == 0 {
            format!("{:.4}", r.mse)
        } else {
            format!("{:.4} ({:+.1}%)", r.mse, delta_percent(rows[0].mse, r.mse))
        };
        out.push_str(&format!("{:<width$}  {cell}\n", r.label));
    }
    out
}

/// Trains to completion and returns the best-validation model.
pub fn train(model: Forecaster, data: &Dataset, config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, data, config)?;
    trainer.run(None)?;
    trainer.finish()
}
