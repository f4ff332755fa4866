//! Training loop shared by pre-training, prompt tuning and the ablation
//! modes. Which parameters move is decided by the [`ParameterPartition`]
//! for the configured mode; everything else is only read.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointManifest, RngState, FORMAT_VERSION};
use crate::config::{FlatConfig, TrainConfig};
use crate::data::{make_batch, Batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossReport};
use crate::model::{PromptPath, UniSod};
use crate::optim::{AdamConfig, AdamW};
use crate::params::ParamStore;
use crate::partition::ParameterPartition;

/// Stream reserved for parameter initialisation; data order uses the epoch
/// index as its stream.
const INIT_STREAM: u64 = u64::MAX;

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub bce: f64,
    pub smooth: f64,
    pub dice: f64,
    pub total: f64,
    pub lr: f64,
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train_log.jsonl"))
    }

    pub fn last_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.safetensors"))
    }

    pub fn best_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.safetensors"))
    }
}

pub struct Trainer<'m> {
    model: &'m UniSod,
    config: TrainConfig,
    partition: ParameterPartition,
    params: ParamStore,
    optim: AdamW,
    step: u64,
    best_loss: Option<f64>,
    snapshot: FlatConfig,
}

impl<'m> Trainer<'m> {
    /// Starts from `params`, which must hold exactly the parameters the
    /// configured mode uses.
    pub fn new(model: &'m UniSod, config: TrainConfig, params: ParamStore) -> Result<Self> {
        let specs = model.specs_for(config.mode);
        params.check_against(&specs)?;
        let partition = model.partition(config.mode)?;
        Ok(Self {
            optim: AdamW::new(AdamConfig::new(config.lr, config.weight_decay)),
            model,
            config,
            partition,
            params,
            step: 0,
            best_loss: None,
            snapshot: FlatConfig::default(),
        })
    }

    /// Fresh random initialisation from the configured seed.
    pub fn from_scratch(model: &'m UniSod, config: TrainConfig) -> Result<Self> {
        let params = ParamStore::init(&model.specs_for(config.mode), &mut init_rng(config.seed));
        Self::new(model, config, params)
    }

    /// Takes the pre-trained parameters from `base` and initialises whatever
    /// the mode adds on top of them (the SPG blocks).
    pub fn from_pretrained(model: &'m UniSod, config: TrainConfig, base: &ParamStore) -> Result<Self> {
        let base_specs = model.base_specs();
        let mut params = ParamStore::new();
        for s in &base_specs {
            let t = base
                .get(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("pre-trained checkpoint lacks `{}`", s.name)))?;
            params.insert(s.name.clone(), t.clone());
        }
        params.check_against(&base_specs)?;
        params.init_missing(&model.specs_for(config.mode), &mut init_rng(config.seed));
        Self::new(model, config, params)
    }

    /// Continues a run from a full checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model: &'m UniSod, config: TrainConfig, ck: Checkpoint) -> Result<Self> {
        if ck.manifest.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("cannot resume from a prompt-only checkpoint".into()));
        }
        if ck.manifest.mode != config.mode.to_string() {
            return Err(Error::Config(format!(
                "checkpoint was written in mode {}, run is configured for {}",
                ck.manifest.mode, config.mode
            )));
        }
        let mut t = Self::new(model, config, ck.params)?;
        if let Some(state) = ck.optim {
            t.optim.state = state;
        }
        t.step = ck.manifest.step;
        t.best_loss = ck.manifest.best_loss;
        t.snapshot = ck.manifest.config;
        Ok(t)
    }

    /// Config recorded in every checkpoint this trainer writes.
    pub fn with_snapshot(mut self, snapshot: FlatConfig) -> Self {
        self.snapshot = snapshot;
        self
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn partition(&self) -> &ParameterPartition {
        &self.partition
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    pub fn path(&self) -> PromptPath {
        self.config.mode.into()
    }

    /// Forward, loss, backward and an optimizer update of the trainable
    /// parameters. Modes with nothing to train only evaluate the loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut g = Graph::new();
        let partition = &self.partition;
        let binding = self.params.bind(&mut g, |n| partition.is_trainable(n));
        let rgb = g.input(batch.rgb.clone());
        let aux = g.input(batch.aux.clone());
        let out = self.model.forward(&mut g, &binding, rgb, aux, self.path())?;
        let (report, seed) = batch_loss(g.value(out.logits), &batch.gt, &batch.rgb, &self.config.loss)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                lr: self.config.lr,
                batch_ids: batch.ids.clone(),
            });
        }
        if !self.partition.trainable.is_empty() {
            let mut grads = g.backward(out.logits, seed);
            let mut named = BTreeMap::new();
            for name in self.partition.trainable.keys() {
                let v = binding.var(name);
                let grad = grads
                    .take(v)
                    .unwrap_or_else(|| crate::autograd::Tensor::zeros(g.value(v).raw_dim()));
                named.insert(name.clone(), grad);
            }
            self.optim.step(&mut self.params, &named)?;
        }
        self.step += 1;
        Ok(report)
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.config.batch_size) as u64
    }

    /// Total steps the run aims for on a dataset of `n_samples`.
    pub fn planned_steps(&self, n_samples: usize) -> u64 {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs as u64 * self.steps_per_epoch(n_samples))
    }

    /// Sample indices of the batch taken at global step `step`.
    pub fn batch_indices(&self, step: u64, n_samples: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n_samples);
        let order = epoch_order(self.config.seed, step / spe, n_samples);
        let k = (step % spe) as usize * self.config.batch_size;
        order[k..(k + self.config.batch_size).min(n_samples)].to_vec()
    }

    /// Trains until the planned step count, resuming from the current step.
    /// Returns the loss of every step taken in this call.
    pub fn run(&mut self, samples: &[Sample], output: &RunOutput) -> Result<Vec<LogEntry>> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.modality != self.config.task) {
            return Err(Error::Config(format!(
                "task {} but sample {} has modality {}",
                self.config.task, s.id, s.modality
            )));
        }
        if let Some(d) = &output.dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut log = match output.log_path() {
            Some(p) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
            ),
            None => None,
        };
        let total = self.planned_steps(samples.len());
        let mut entries = Vec::new();
        let mut window = Vec::new();
        while self.step < total {
            let idx = self.batch_indices(self.step, samples.len());
            let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = make_batch(&refs)?;
            let r = self.train_step(&batch)?;
            let entry = LogEntry {
                step: self.step,
                bce: r.bce,
                smooth: r.smooth,
                dice: r.dice,
                total: r.total,
                lr: self.config.lr,
            };
            if let (Some(f), Some(p)) = (log.as_mut(), output.log_path()) {
                let line = serde_json::to_string(&entry).expect("plain numbers");
                writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
            }
            entries.push(entry);
            window.push(r.total);
            let at_boundary = self
                .config
                .checkpoint_every
                .is_some_and(|k| k > 0 && self.step.is_multiple_of(k));
            if at_boundary || self.step == total {
                self.write_checkpoints(output, &window)?;
                window.clear();
            }
        }
        Ok(entries)
    }

    fn write_checkpoints(&mut self, output: &RunOutput, window: &[f64]) -> Result<()> {
        let improved = if window.is_empty() {
            false
        } else {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let better = self.best_loss.is_none_or(|b| mean < b);
            if better {
                self.best_loss = Some(mean);
            }
            better
        };
        if let Some(p) = output.last_path() {
            self.checkpoint().save(&p)?;
        }
        if improved {
            if let Some(p) = output.best_path() {
                self.checkpoint().save(&p)?;
            }
        }
        Ok(())
    }

    fn manifest(&self, kind: CheckpointKind) -> CheckpointManifest {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind,
            mode: self.config.mode.to_string(),
            task: self.config.task.to_string(),
            step: self.step,
            seed: self.config.seed,
            rng: RngState {
                algorithm: "chacha8".into(),
                seed: self.config.seed,
                step: self.step,
            },
            partition: Some(self.partition.clone()),
            config: self.snapshot.clone(),
            best_loss: self.best_loss,
        }
    }

    /// Every parameter plus optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: self.manifest(CheckpointKind::Full),
            params: self.params.clone(),
            optim: Some(self.optim.state.clone()),
        }
    }

    /// Only the prompt-generation parameters, for per-task prompt files.
    pub fn prompt_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: self.manifest(CheckpointKind::Prompts),
            params: self.params.filter_prefix(crate::spg::NAMESPACE),
            optim: None,
        }
    }
}

/// Merges a prompt-only checkpoint over pre-trained parameters.
pub fn attach_prompts(base: &ParamStore, prompts: &Checkpoint) -> Result<ParamStore> {
    if prompts.manifest.kind != CheckpointKind::Prompts {
        return Err(Error::Checkpoint("expected a prompt-only checkpoint".into()));
    }
    let mut merged = base.clone();
    for (k, t) in prompts.params.iter() {
        if !k.starts_with(crate::spg::NAMESPACE) {
            return Err(Error::Checkpoint(format!("prompt checkpoint contains non-prompt tensor `{k}`")));
        }
        merged.insert(k.clone(), t.clone());
    }
    Ok(merged)
}

/// Mean MAE of the model's predictions over `samples`, batched in order.
pub fn evaluate_mae(model: &UniSod, params: &ParamStore, samples: &[Sample], path: PromptPath, batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = make_batch(&refs)?;
        let s = model.predict(params, &b.rgb, &b.aux, path)?;
        total += s.iter().zip(b.gt.iter()).map(|(p, g)| (p - g).abs()).sum::<f64>();
    }
    let (h, w) = samples[0].hw();
    Ok(total / (samples.len() * h * w) as f64)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}
