//! Pair-sampling SGD loop with momentum, weight decay and step decay of the
//! learning rate. Runs are deterministic under a fixed seed and resumable
//! from any epoch checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::classifier::{loss_total, read_checkpoint, write_checkpoint, LossTerms, ModelConfig, ModelParams};
use crate::config::KeyValues;
use crate::data::{sample_pair, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::multilabel_f1;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;
const EPOCH_STREAM: u64 = 0xE90C;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    /// Pairs whose gradients are averaged into one update.
    pub batch_pairs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Rescale each update's gradient to at most this global L2 norm; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub terms: LossTerms,
    /// Write `epoch_<e>.ckpt` every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Domains with affinity matrices; empty means "those present in the data".
    pub domains: Vec<String>,
    pub channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            pairs_per_epoch: 500,
            batch_pairs: 1,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0002,
            lr_decay: 0.1,
            lr_decay_every: 12,
            clip_norm: 5.0,
            seed: 0,
            terms: LossTerms::FULL,
            checkpoint_every: 0,
            domains: Vec::new(),
            channels: vec![16, 32, 32],
        }
    }
}

impl TrainConfig {
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.take("epochs", &mut c.epochs)?;
        kv.take("pairs_per_epoch", &mut c.pairs_per_epoch)?;
        kv.take("batch_pairs", &mut c.batch_pairs)?;
        kv.take("lr", &mut c.lr)?;
        kv.take("momentum", &mut c.momentum)?;
        kv.take("weight_decay", &mut c.weight_decay)?;
        kv.take("lr_decay", &mut c.lr_decay)?;
        kv.take("lr_decay_every", &mut c.lr_decay_every)?;
        kv.take("clip_norm", &mut c.clip_norm)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("loss_basic", &mut c.terms.basic)?;
        kv.take("loss_coatt", &mut c.terms.coatt)?;
        kv.take("loss_contrast", &mut c.terms.contrast)?;
        kv.take("checkpoint_every", &mut c.checkpoint_every)?;
        kv.take_list("domains", &mut c.domains)?;
        kv.take_list("channels", &mut c.channels)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "pairs_per_epoch = {}", self.pairs_per_epoch);
        let _ = writeln!(s, "batch_pairs = {}", self.batch_pairs);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "lr_decay_every = {}", self.lr_decay_every);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss_basic = {}", self.terms.basic);
        let _ = writeln!(s, "loss_coatt = {}", self.terms.coatt);
        let _ = writeln!(s, "loss_contrast = {}", self.terms.contrast);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "domains = {}", self.domains.join(","));
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "channels = {}", channels.join(","));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_pairs == 0 {
            return bad("epochs, pairs_per_epoch and batch_pairs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must be in (0, 1] and lr_decay_every positive");
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be non-negative");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths");
        }
        Ok(())
    }

    /// Learning rate used during 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        let domains = if self.domains.is_empty() {
            data.domains()
        } else {
            self.domains.clone()
        };
        ModelConfig {
            channels: self.channels.clone(),
            classes: data.num_classes(),
            domains,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v = μ·v + g + wd·p; p -= lr·v`, elementwise over matching tensors.
pub fn sgd_step(params: Vec<&mut Tensor>, grads: &[Tensor], velocity: &mut [Tensor], hp: SgdHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Contract(format!(
                "tensor {i}: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = hp.momentum * *vi + gi + hp.weight_decay * *pi;
            *pi -= hp.lr * *vi;
        }
    }
    Ok(())
}

/// Scales all gradients by a common factor so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Everything needed to continue a run: parameters, momentum buffers and the
/// number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let velocity = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        TrainState {
            params,
            velocity,
            epoch: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let velocity: Vec<(String, Tensor)> = named
            .iter()
            .zip(&self.velocity)
            .map(|((n, _), v)| (format!("velocity.{n}"), v.clone()))
            .collect();
        named.extend(velocity);
        named.push(("train.epoch".into(), Tensor::scalar(self.epoch as f64)));
        write_checkpoint(path, &named)
    }

    /// Loads a checkpoint; missing optimizer records give a fresh state.
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_checkpoint(path)?;
        let params = ModelParams::from_named(&tensors)?;
        let mut state = TrainState::fresh(params);
        let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, v) in names.iter().zip(state.velocity.iter_mut()) {
            if let Some((_, t)) = tensors.iter().find(|(n, _)| *n == format!("velocity.{name}")) {
                if t.shape() != v.shape() {
                    return Err(Error::Checkpoint(format!("velocity.{name} has wrong shape")));
                }
                *v = t.clone();
            }
        }
        if let Some((_, t)) = tensors.iter().find(|(n, _)| n == "train.epoch") {
            let e = t.item().map_err(|e| Error::Checkpoint(e.to_string()))?;
            if !(e >= 0.0 && e.fract() == 0.0) {
                return Err(Error::Checkpoint(format!("bad epoch record {e}")));
            }
            state.epoch = e as usize;
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss_basic: f64,
    pub loss_coatt: f64,
    pub loss_contrast: f64,
    pub loss_total: f64,
    /// Micro-F1 of the single-image scores of the sampled training pairs.
    pub f1: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_basic,loss_coatt,loss_contrast,loss_total,f1";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss_basic, self.loss_coatt, self.loss_contrast, self.loss_total, self.f1
        )
    }
}

pub fn initial_state(data: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    let mut rng = derive_rng(cfg.seed, &[INIT_STREAM]);
    Ok(TrainState::fresh(ModelParams::init(&cfg.model_config(data), &mut rng)?))
}

/// Runs the next epoch of `state`. On error `state` is left as it was.
pub fn run_epoch(data: &Dataset, cfg: &TrainConfig, state: &mut TrainState) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let mut next = state.clone();
    let mut rng = derive_rng(cfg.seed, &[EPOCH_STREAM, epoch as u64]);
    let hp = SgdHyper {
        lr: cfg.lr_at(epoch),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut sums = [0.0f64; 4];
    let mut scores = Vec::with_capacity(2 * cfg.pairs_per_epoch);
    let mut labels = Vec::with_capacity(2 * cfg.pairs_per_epoch);
    let mut done = 0;
    while done < cfg.pairs_per_epoch {
        let batch = cfg.batch_pairs.min(cfg.pairs_per_epoch - done);
        let mut grads: Option<Vec<Tensor>> = None;
        for _ in 0..batch {
            let (m, n) = sample_pair(&data.samples, &mut rng)?;
            let mut g = Graph::new();
            let fw = loss_total(&mut g, &next.params, m, n, cfg.terms)?;
            let b = &fw.breakdown;
            if ![b.basic, b.coatt, b.contrast, b.total].iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            for (s, v) in sums.iter_mut().zip([b.basic, b.coatt, b.contrast, b.total]) {
                *s += v;
            }
            scores.push(b.s_m.clone());
            scores.push(b.s_n.clone());
            labels.push(m.labels.clone());
            labels.push(n.labels.clone());
            if let Some(total) = fw.total {
                g.backward(total)?;
                let gs = fw.model.grads(&g)?;
                grads = Some(match grads {
                    None => gs,
                    Some(mut acc) => {
                        for (a, x) in acc.iter_mut().zip(&gs) {
                            for (ai, xi) in a.data_mut().iter_mut().zip(x.data()) {
                                *ai += xi;
                            }
                        }
                        acc
                    }
                });
            }
        }
        if let Some(mut gs) = grads {
            if batch > 1 {
                for t in &mut gs {
                    t.data_mut().iter_mut().for_each(|v| *v /= batch as f64);
                }
            }
            if gs.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut gs, cfg.clip_norm);
            }
            sgd_step(next.params.tensors_mut(), &gs, &mut next.velocity, hp)?;
        }
        done += batch;
    }
    let n = cfg.pairs_per_epoch as f64;
    let metrics = EpochMetrics {
        epoch: epoch + 1,
        loss_basic: sums[0] / n,
        loss_coatt: sums[1] / n,
        loss_contrast: sums[2] / n,
        loss_total: sums[3] / n,
        f1: multilabel_f1(&scores, &labels)?,
    };
    next.epoch += 1;
    *state = next;
    Ok(metrics)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `metrics.csv` and checkpoints; nothing is written if `None`.
    pub out: Option<PathBuf>,
    pub resume: Option<TrainState>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics of the epochs run in this call.
    pub metrics: Vec<EpochMetrics>,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains until `cfg.epochs` epochs are complete. When an output directory is
/// given, metrics are appended per epoch and checkpoints written; on
/// divergence the last good state is saved before the error is returned.
pub fn train(data: &Dataset, cfg: &TrainConfig, opts: RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = match opts.resume {
        Some(s) => s,
        None => initial_state(data, cfg)?,
    };
    let mut csv = String::new();
    if let Some(dir) = &opts.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        csv = kept_metrics(&dir.join(METRICS_FILE), state.epoch);
    }
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let m = match run_epoch(data, cfg, &mut state) {
            Ok(m) => m,
            Err(e @ Error::Divergence { .. }) => {
                if let Some(dir) = &opts.out {
                    state.save(&dir.join(FINAL_CHECKPOINT))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  basic {:.4}  coatt {:.4}  contrast {:.4}  total {:.4}  f1 {:.4}",
                m.epoch,
                cfg.lr_at(m.epoch - 1),
                m.loss_basic,
                m.loss_coatt,
                m.loss_contrast,
                m.loss_total,
                m.f1
            );
        }
        if let Some(dir) = &opts.out {
            csv.push_str(&m.csv_row());
            csv.push('\n');
            let path = dir.join(METRICS_FILE);
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            if cfg.checkpoint_every > 0 && m.epoch % cfg.checkpoint_every == 0 {
                state.save(&dir.join(format!("epoch_{}.ckpt", m.epoch)))?;
            }
        }
        metrics.push(m);
    }
    if let Some(dir) = &opts.out {
        state.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { state, metrics })
}

/// Header plus the rows of an existing metrics file up to `epoch`.
fn kept_metrics(path: &Path, epoch: usize) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
            if e.is_some_and(|e| e <= epoch) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

pub const ABLATION_ARMS: [(&str, LossTerms); 3] = [
    ("basic", LossTerms::BASIC),
    ("basic+coatt", LossTerms::BASIC_COATT),
    ("full", LossTerms::FULL),
];

/// Trains the three loss-term arms with otherwise identical settings. With an
/// output directory each arm goes to its own subdirectory.
pub fn ablation_suite(data: &Dataset, cfg: &TrainConfig, out: Option<&Path>, verbose: bool) -> Result<Vec<(String, TrainOutcome)>> {
    ABLATION_ARMS
        .iter()
        .map(|&(name, terms)| {
            let arm = TrainConfig { terms, ..cfg.clone() };
            let opts = RunOptions {
                out: out.map(|d| d.join(name)),
                resume: None,
                verbose,
            };
            Ok((name.to_string(), train(data, &arm, opts)?))
        })
        .collect()
}
