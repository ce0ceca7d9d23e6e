//! Adversarial training: `n_critic` clipped critic steps, then one generator
//! step, repeated.

mod checkpoint;
mod loss;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{
    critic_loss, critic_objective, d_loss, g_loss, generator_loss, generator_objective, Batch,
    LossOutput,
};
pub use optim::{optimizer_step, RmsProp, RMS_DECAY, RMS_EPS};

use crate::evaluator::{register_once, target_correction, tre};
use crate::geometry::{PerturbationRange, RigidParams2D};
use crate::nets::{build_network, forward_d, NetworkSpec};
use crate::resampler::warp;
use crate::rng::{derive_seed, seeded, stream};
use crate::synthdata::{DataError, Dataset, ImagePair, Split};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the parameter-regression term of the generator loss.
    pub alpha: f64,
    pub clip_c: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Generator learning rate; `lr` when unset.
    pub generator_lr: Option<f64>,
    pub epochs: usize,
    pub perturb: PerturbationRange,
    pub seed: u64,
    /// Convolution width of both networks.
    pub base_filters: usize,
    pub bottleneck_channels: usize,
    pub hidden_units: usize,
    /// Validate every this many iterations, in addition to each epoch end;
    /// 0 validates at epoch ends only.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            clip_c: 0.01,
            n_critic: 2,
            batch_size: 8,
            lr: 5e-5,
            generator_lr: None,
            epochs: 1,
            perturb: PerturbationRange::desk_default(),
            seed: 0,
            base_filters: 128,
            bottleneck_channels: 8,
            hidden_units: 256,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return bad(format!("clip_c must be > 0, got {}", self.clip_c));
        }
        if self.n_critic == 0 || self.batch_size == 0 {
            return bad("n_critic and batch_size must be at least 1".into());
        }
        let lr_ok = |v: f64| v > 0.0 && v.is_finite();
        if !lr_ok(self.lr) || !self.generator_lr.is_none_or(lr_ok) {
            return bad("learning rates must be positive".into());
        }
        self.perturb
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn generator_spec(&self, channels: usize, size: usize) -> NetworkSpec {
        NetworkSpec::generator(2 * channels, 3)
            .with_size(size)
            .with_widths(
                self.base_filters,
                self.bottleneck_channels,
                self.hidden_units,
            )
    }

    pub fn critic_spec(&self, channels: usize, size: usize) -> NetworkSpec {
        NetworkSpec::critic(2 * channels)
            .with_size(size)
            .with_widths(
                self.base_filters,
                self.bottleneck_channels,
                self.hidden_units,
            )
    }

    fn g_lr(&self) -> f32 {
        self.generator_lr.unwrap_or(self.lr) as f32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "non-finite {kind:?} loss or gradient at iteration {iteration}, step {step}; batch seeds {seeds:?}{}",
        dump.as_ref().map(|p| format!("; diagnostics in {}", p.display())).unwrap_or_default()
    )]
    NonFinite {
        iteration: usize,
        step: usize,
        kind: StepKind,
        seeds: Vec<u64>,
        dump: Option<PathBuf>,
    },
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Critic,
    Generator,
}

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global update index.
    pub step: usize,
    pub iteration: usize,
    pub kind: StepKind,
    pub loss: f32,
    /// Largest absolute critic parameter after the update.
    pub max_abs_d: f32,
    pub batch_seed: u64,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    /// Mean of this iteration's critic losses.
    pub d_loss: f32,
    pub g_loss: f32,
    pub val_tre_mm: Option<f64>,
    pub val_dscore: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,d_loss,g_loss,val_tre_mm,val_dscore";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter,
            r.d_loss,
            r.g_loss,
            opt(r.val_tre_mm),
            opt(r.val_dscore)
        ));
    }
    out
}

/// What went into one minibatch, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchInfo {
    pub step: usize,
    pub kind: StepKind,
    pub seed: u64,
    pub pair_ids: Vec<String>,
    pub perturbations: Vec<RigidParams2D>,
}

/// Seed of the minibatch drawn for global update `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    derive_seed(derive_seed(seed, stream::TRAIN_BATCHES), step as u64)
}

/// Training-loop state over in-memory pairs.
pub struct Trainer {
    state: TrainState,
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    val_inits: Vec<RigidParams2D>,
    steps: Vec<StepRecord>,
    metrics: Vec<MetricsRow>,
    batches: Vec<BatchInfo>,
}

impl Trainer {
    /// Fresh networks and optimizers for `config`.
    pub fn new(
        config: TrainConfig,
        train: Vec<ImagePair>,
        val: Vec<ImagePair>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let first = train
            .first()
            .ok_or_else(|| TrainError::Config("training split is empty".into()))?;
        let (channels, size) = (first.channels(), first.size());
        let g = build_network(
            config.generator_spec(channels, size),
            derive_seed(config.seed, stream::GENERATOR_INIT),
        )?;
        let mut d = build_network(
            config.critic_spec(channels, size),
            derive_seed(config.seed, stream::CRITIC_INIT),
        )?;
        d.clip_weights(config.clip_c as f32);
        let state = TrainState {
            opt_g: RmsProp::new(g.params().iter().map(|p| &p.value)),
            opt_d: RmsProp::new(d.params().iter().map(|p| &p.value)),
            g,
            d,
            epoch: 0,
            iteration: 0,
            config,
        };
        Self::from_state(state, train, val)
    }

    /// Resumes from a saved state.
    pub fn from_state(
        state: TrainState,
        train: Vec<ImagePair>,
        val: Vec<ImagePair>,
    ) -> Result<Self, TrainError> {
        state.config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let want = [state.g.spec().in_channels / 2, state.g.spec().input_size];
        for p in train.iter().chain(&val) {
            if [p.channels(), p.size()] != want || p.fixed.shape()[1] != p.fixed.shape()[2] {
                return Err(TrainError::Config(format!(
                    "pair {} is {:?}, networks expect {} channels at {}x{}",
                    p.id,
                    p.fixed.shape(),
                    want[0],
                    want[1],
                    want[1]
                )));
            }
        }
        let val_seed = derive_seed(state.config.seed, stream::VALIDATION);
        let val_inits = (0..val.len())
            .map(|i| {
                state
                    .config
                    .perturb
                    .sample(&mut seeded(derive_seed(val_seed, i as u64)))
            })
            .collect();
        Ok(Self {
            state,
            train,
            val,
            val_inits,
            steps: Vec::new(),
            metrics: Vec::new(),
            batches: Vec::new(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    /// Updates performed since this trainer was created.
    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Batches of the most recent iteration.
    pub fn last_batches(&self) -> &[BatchInfo] {
        &self.batches
    }

    /// `ceil(train pairs / batch size)` iterations make one epoch.
    pub fn iterations_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.state.config.batch_size)
    }

    fn sample_batch(&self, step: usize, kind: StepKind) -> Result<(Batch, BatchInfo), TrainError> {
        let cfg = &self.state.config;
        let seed = batch_seed(cfg.seed, step);
        let mut rng = seeded(seed);
        let n = self.train.len();
        let picks: Vec<usize> = if cfg.batch_size <= n {
            index::sample(&mut rng, n, cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect()
        };
        let pairs: Vec<&ImagePair> = picks.iter().map(|&i| &self.train[i]).collect();
        let perturbations: Vec<RigidParams2D> =
            picks.iter().map(|_| cfg.perturb.sample(&mut rng)).collect();
        let info = BatchInfo {
            step,
            kind,
            seed,
            pair_ids: pairs.iter().map(|p| p.id.clone()).collect(),
            perturbations: perturbations.clone(),
        };
        Ok((Batch::new(&pairs, &perturbations)?, info))
    }

    fn check_finite(&self, out: &LossOutput, info: &BatchInfo) -> Result<(), TrainError> {
        if out.loss.is_finite() && out.grads.iter().all(|g| g.all_finite()) {
            return Ok(());
        }
        Err(TrainError::NonFinite {
            iteration: self.state.iteration,
            step: info.step,
            kind: info.kind,
            seeds: self.batches.iter().map(|b| b.seed).collect(),
            dump: None,
        })
    }

    /// One iteration: `n_critic` critic updates, each followed by clipping,
    /// then one generator update.
    pub fn iteration(&mut self) -> Result<MetricsRow, TrainError> {
        let cfg = self.state.config.clone();
        let per_iter = cfg.n_critic + 1;
        let first_step = self.state.iteration * per_iter;
        self.batches.clear();
        let mut d_total = 0.0f64;
        for k in 0..cfg.n_critic {
            let step = first_step + k;
            let (batch, info) = self.sample_batch(step, StepKind::Critic)?;
            self.batches.push(info.clone());
            let out = critic_loss(&self.state.d, &batch)?;
            self.check_finite(&out, &info)?;
            self.state
                .opt_d
                .step(self.state.d.params_mut(), &out.grads, cfg.lr as f32);
            self.state.d.clip_weights(cfg.clip_c as f32);
            d_total += out.loss as f64;
            self.record(step, StepKind::Critic, out.loss, info.seed);
        }
        let step = first_step + cfg.n_critic;
        let (batch, info) = self.sample_batch(step, StepKind::Generator)?;
        self.batches.push(info.clone());
        let out = generator_loss(&self.state.g, &self.state.d, &batch, cfg.alpha as f32)?;
        self.check_finite(&out, &info)?;
        self.state
            .opt_g
            .step(self.state.g.params_mut(), &out.grads, cfg.g_lr());
        self.record(step, StepKind::Generator, out.loss, info.seed);

        self.state.iteration += 1;
        let mut row = MetricsRow {
            iter: self.state.iteration,
            d_loss: (d_total / cfg.n_critic as f64) as f32,
            g_loss: out.loss,
            val_tre_mm: None,
            val_dscore: None,
        };
        let epoch_end = self
            .state
            .iteration
            .is_multiple_of(self.iterations_per_epoch());
        let periodic = cfg.val_every > 0 && self.state.iteration.is_multiple_of(cfg.val_every);
        if (epoch_end || periodic) && !self.val.is_empty() {
            let (tre_mm, dscore) = self.validate()?;
            row.val_tre_mm = Some(tre_mm);
            row.val_dscore = Some(dscore);
        }
        if epoch_end {
            self.state.epoch += 1;
        }
        self.metrics.push(row.clone());
        Ok(row)
    }

    fn record(&mut self, step: usize, kind: StepKind, loss: f32, batch_seed: u64) {
        self.steps.push(StepRecord {
            step,
            iteration: self.state.iteration,
            kind,
            loss,
            max_abs_d: self.state.d.max_abs_param(),
            batch_seed,
        });
    }

    /// Mean single-pass TRE and critic score on the validation pairs from
    /// their fixed seeded misalignments.
    pub fn validate(&self) -> Result<(f64, f64), TrainError> {
        let (mut tre_sum, mut score_sum) = (0.0, 0.0);
        for (pair, &init) in self.val.iter().zip(&self.val_inits) {
            let est = register_once(&self.state.g, pair, init)?;
            tre_sum += tre(
                est,
                target_correction(pair, init),
                pair.pixel_spacing_mm,
                pair.size(),
            );
            let registered = warp(&pair.moving, init.compose(est))?;
            score_sum += forward_d(&self.state.d, &pair.fixed, &registered)? as f64;
        }
        let n = self.val.len() as f64;
        Ok((tre_sum / n, score_sum / n))
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub steps: Vec<StepRecord>,
    /// Epoch checkpoints in order.
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.airckpt";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.airckpt")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(|e| TrainError::io(path, e))
}

/// Trains on the dataset's train split for `config.epochs` epochs, writing
/// `metrics.csv`, one checkpoint per epoch and `final.airckpt` into `out`.
/// `progress` sees every metrics row as it is produced.
pub fn train(
    config: TrainConfig,
    data: &Dataset,
    out: &Path,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train_pairs = data.load_split(Split::Train)?;
    let val_pairs = data.load_split(Split::Validation)?;
    let mut trainer = Trainer::new(config, train_pairs, val_pairs)?;
    fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut checkpoints = Vec::new();
    let total = trainer.config().epochs * trainer.iterations_per_epoch();
    for _ in 0..total {
        match trainer.iteration() {
            Ok(row) => progress(&row),
            Err(TrainError::NonFinite {
                iteration,
                step,
                kind,
                seeds,
                ..
            }) => {
                let dump = out.join(NAN_DUMP_FILE);
                let text = serde_json::json!({
                    "iteration": iteration,
                    "step": step,
                    "kind": kind,
                    "batches": trainer.last_batches(),
                });
                write(
                    &dump,
                    serde_json::to_string_pretty(&text).expect("dump serializes"),
                )?;
                write(&metrics_path, metrics_csv(trainer.metrics()))?;
                return Err(TrainError::NonFinite {
                    iteration,
                    step,
                    kind,
                    seeds,
                    dump: Some(dump),
                });
            }
            Err(e) => return Err(e),
        }
        let state = trainer.state();
        if state.iteration % trainer.iterations_per_epoch() == 0 {
            let path = out.join(epoch_checkpoint_name(state.epoch));
            save_checkpoint(state, &path)?;
            checkpoints.push(path);
            write(&metrics_path, metrics_csv(trainer.metrics()))?;
        }
    }
    write(&metrics_path, metrics_csv(trainer.metrics()))?;
    save_checkpoint(trainer.state(), &out.join(FINAL_CHECKPOINT))?;
    let metrics = trainer.metrics().to_vec();
    let steps = trainer.steps().to_vec();
    Ok(TrainOutcome {
        state: trainer.into_state(),
        metrics,
        steps,
        checkpoints,
    })
}
