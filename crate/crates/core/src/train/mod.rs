//! Objective, optimizer, schedule, training loop, metrics and checkpoints.

mod checkpoint;
mod loss;
mod metrics;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use loss::{weighted_ce, weighted_ce_grad};
pub use metrics::{Confusion, Metrics};
pub use optim::{lr_at, optimizer_step, AdamHyper, AdamState};

use crate::data::{class_weights, Manifest, Sample, Split};
use crate::error::TrainError;
use crate::model::{forward, loss_and_grad, ModelConfig, ModelParams};
use crate::numeric::SeededStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Multiplicative decrement applied once per `decay_every` steps.
    pub decay_rate: f64,
    pub decay_every: u64,
    /// `[w_pos, w_neg]`; inverse-frequency weights when absent.
    pub class_weights: Option<[f64; 2]>,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 300,
            lr: 0.005,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 2000,
            decay_rate: 1e-4,
            decay_every: 10_000,
            class_weights: None,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad(format!("betas must lie in (0, 1), got {:?}", self.betas));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.decay_rate) || self.decay_every == 0 {
            return bad("decay_rate must lie in [0, 1) and decay_every be positive".into());
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for the 1-based update `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        lr_at(t, self.lr, self.warmup_steps, self.decay_rate, self.decay_every)
    }
}

/// The JSON run configuration: model, training and an optional manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: RunConfig =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Metric history as CSV with header `step,split,loss,accuracy,macro_f1`.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,split,loss,accuracy,macro_f1\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:?},{:?},{:?}",
            r.step, r.split, r.loss, r.accuracy, r.macro_f1
        )
        .expect("string write");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub step: u64,
    pub accuracy: f64,
    pub params: ModelParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed updates.
    pub step: u64,
    pub history: Vec<HistoryRow>,
    pub best: Option<BestModel>,
}

/// Predictions, metrics and mean weighted loss over `samples`.
pub fn evaluate_samples(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    weights: [f64; 2],
) -> Result<(Metrics, f64), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let mut labels = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let fwd = forward(params, config, &s.views)?;
        loss += weighted_ce(&fwd.logits, s.label, weights);
        labels.push(s.label);
        preds.push(fwd.prediction());
    }
    Ok((Metrics::from_pairs(&labels, &preds), loss / samples.len() as f64))
}

/// Loads `split` of `manifest` and evaluates `params` on it.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    manifest: &Manifest,
    split: Split,
) -> Result<Metrics, TrainError> {
    let samples = manifest.load_split(split)?;
    if samples.is_empty() {
        return Err(TrainError::EmptySplit(split.to_string()));
    }
    Ok(evaluate_samples(params, config, &samples, [1.0, 1.0])?.0)
}

struct TrainData {
    train: Vec<Sample>,
    dev: Vec<Sample>,
    weights: [f64; 2],
}

impl TrainData {
    fn load(manifest: &Manifest, config: &RunConfig) -> Result<Self, TrainError> {
        let train_records = manifest.split(Split::Train);
        if train_records.is_empty() {
            return Err(TrainError::EmptySplit("train".into()));
        }
        if manifest.split(Split::Dev).is_empty() {
            return Err(TrainError::EmptySplit("dev".into()));
        }
        let weights = class_weights(&train_records, config.train.class_weights)?;
        Ok(TrainData {
            train: manifest.load_split(Split::Train)?,
            dev: manifest.load_split(Split::Dev)?,
            weights,
        })
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub state: TrainState,
    train: Vec<Sample>,
    dev: Vec<Sample>,
    weights: [f64; 2],
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(mut config: RunConfig, manifest: &Manifest) -> Result<Self, TrainError> {
        config.validate()?;
        let data = TrainData::load(manifest, &config)?;
        if config.model.input_dims.is_none() {
            let v = &data.train[0].views;
            config.model.input_dims = Some([v[0].cols(), v[1].cols(), v[2].cols()]);
        }
        let params = ModelParams::init(&config.model, config.train.seed)?;
        let state = TrainState {
            adam: AdamState::new(&params),
            params,
            step: 0,
            history: Vec::new(),
            best: None,
        };
        Ok(Trainer::assemble(config, state, data))
    }

    /// Continues from a saved checkpoint.
    pub fn resume(checkpoint: Checkpoint, manifest: &Manifest) -> Result<Self, TrainError> {
        let data = TrainData::load(manifest, &checkpoint.config)?;
        Ok(Trainer::assemble(checkpoint.config, checkpoint.state, data))
    }

    fn assemble(config: RunConfig, state: TrainState, data: TrainData) -> Self {
        log::info!(
            "training on {} samples, dev {}, class weights {:?}, {} parameters",
            data.train.len(),
            data.dev.len(),
            data.weights,
            state.params.num_values()
        );
        Trainer {
            config,
            state,
            train: data.train,
            dev: data.dev,
            weights: data.weights,
            order: None,
        }
    }

    pub fn class_weights(&self) -> [f64; 2] {
        self.weights
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.train.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let perm = SeededStream::with_stream(self.config.train.seed, epoch).permutation(self.train.len());
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().expect("just set").1;
        let b = self.config.train.batch_size;
        let start = ((step % spe) as usize) * b;
        perm[start..(start + b).min(perm.len())].to_vec()
    }

    /// Runs one update; evaluates on dev when due.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let step = self.state.step;
        let batch = self.batch_indices(step);
        let model = &self.config.model;
        let mut grads = self.state.params.zeros_like();
        let mut loss = 0.0;
        let mut labels = Vec::with_capacity(batch.len());
        let mut preds = Vec::with_capacity(batch.len());
        for &i in &batch {
            let s = &self.train[i];
            let (l, fwd, g) = loss_and_grad(&self.state.params, model, &s.views, s.label, self.weights)?;
            loss += l;
            grads.add_scaled(1.0, &g);
            labels.push(s.label);
            preds.push(fwd.prediction());
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: step + 1 });
        }
        let mut mean = grads.zeros_like();
        mean.add_scaled(1.0 / n, &grads);
        let t = step + 1;
        let lr = self.config.train.lr_at(t);
        optimizer_step(&mut self.state.params, &mean, &mut self.state.adam, self.config.train.hyper(), lr, t)?;
        self.state.step = t;

        if t.is_multiple_of(self.config.train.eval_every) || t == self.total_steps() {
            let m = Metrics::from_pairs(&labels, &preds);
            self.state.history.push(HistoryRow {
                step: t,
                split: Split::Train,
                loss,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
            });
            let (dev, dev_loss) = evaluate_samples(&self.state.params, model, &self.dev, self.weights)?;
            self.state.history.push(HistoryRow {
                step: t,
                split: Split::Dev,
                loss: dev_loss,
                accuracy: dev.accuracy,
                macro_f1: dev.macro_f1,
            });
            log::info!(
                "step {t}: lr {lr:.3e} train loss {loss:.4} dev loss {dev_loss:.4} dev acc {:.4}",
                dev.accuracy
            );
            if self.state.best.as_ref().is_none_or(|b| dev.accuracy > b.accuracy) {
                self.state.best = Some(BestModel {
                    step: t,
                    accuracy: dev.accuracy,
                    params: self.state.params.clone(),
                });
            }
        }
        Ok(())
    }

    /// Trains until done or until `max_steps` more updates have run.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<(), TrainError> {
        let stop = max_steps.map_or(u64::MAX, |n| self.state.step.saturating_add(n));
        while !self.is_done() && self.state.step < stop {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }
}

/// Trains from scratch over the full schedule.
pub fn train(config: RunConfig, manifest: &Manifest) -> Result<Checkpoint, TrainError> {
    let mut t = Trainer::new(config, manifest)?;
    t.run(None)?;
    Ok(t.checkpoint())
}
