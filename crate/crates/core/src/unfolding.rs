//! The unfolded low-rank/sparse network and its trainer.
//!
//! Each stage performs
//!
//! ```text
//! L = X − r_L · (X − P_r(X − S))
//! S = X − r_S · (X − N(X − L))
//! ```
//!
//! where `P_r` is the rank-`r` truncated t-SVD projection, `N` the sparse
//! network, `X` the noisy input (fixed across stages) and `S` starts at zero.
//! The estimate of stage `k` is the `L` it produces. Stage one has its own
//! parameters; every later stage shares a second parameter set.
//!
//! With the projection disabled (`use_tsvd = false`) `P_r` is the identity.
//! `X − L` then carries no information about the image, so the sparse network
//! is fed the current estimate `L` instead, which turns the model into an
//! iterated residual denoiser `X − r_L · N(·)`.

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, Adam, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::sparse_net::{init_rng, SparseNet, SparseNetConfig};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnfoldingConfig {
    pub stages: usize,
    /// Truncation rank; `None` means `⌈min(n1, n2)/3⌉` of the input.
    pub rank: Option<usize>,
    pub base_channels: usize,
    pub levels: usize,
    pub topk_ratio_init: f64,
    pub use_tsvd: bool,
    pub use_topk: bool,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for UnfoldingConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            rank: None,
            base_channels: 8,
            levels: 2,
            topk_ratio_init: 0.5,
            use_tsvd: true,
            use_topk: true,
            init_seed: 0,
        }
    }
}

impl UnfoldingConfig {
    pub fn net_config(&self) -> SparseNetConfig {
        SparseNetConfig {
            base_channels: self.base_channels,
            levels: self.levels,
            attention_heads: 1,
            topk_ratio_init: self.topk_ratio_init,
            topk_enabled: self.use_topk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.rank == Some(0) {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        self.net_config().validate()
    }
}

/// `⌈min(n1, n2)/3⌉`.
pub fn default_rank(n1: usize, n2: usize) -> usize {
    n1.min(n2).div_ceil(3)
}

/// Parameters of one unfolding stage.
#[derive(Clone, Debug)]
pub struct StageParams {
    pub r_l: ParamId,
    pub r_s: ParamId,
    pub net: SparseNet,
}

impl StageParams {
    fn init(cfg: &UnfoldingConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let r_l = store.add(format!("{prefix}.r_l"), ArrayD::from_elem(IxDyn(&[]), 1.0));
        let r_s = store.add(format!("{prefix}.r_s"), ArrayD::from_elem(IxDyn(&[]), 1.0));
        let net = SparseNet::init(cfg.net_config(), store, &format!("{prefix}.net"), rng)?;
        Ok(Self { r_l, r_s, net })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.r_l, self.r_s];
        ids.extend(self.net.param_ids());
        ids.sort();
        ids
    }
}

/// A noisy/clean pair.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub noisy: Tensor3,
    pub clean: Tensor3,
}

impl TrainingSample {
    pub fn new(noisy: Tensor3, clean: Tensor3) -> Result<Self> {
        if noisy.dims() != clean.dims() {
            return Err(Error::DataShapeMismatch(format!(
                "noisy {:?} vs clean {:?}",
                noisy.dims(),
                clean.dims()
            )));
        }
        Ok(Self { noisy, clean })
    }
}

/// Nodes produced by [`UnfoldingNet::forward`].
#[derive(Clone, Debug)]
pub struct UnfoldingOutput {
    /// Stage estimates in order.
    pub estimates: Vec<Var>,
    /// Sparse components in order.
    pub sparse: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct UnfoldingNet {
    pub config: UnfoldingConfig,
    pub store: ParamStore,
    pub stage0: StageParams,
    pub shared: StageParams,
}

impl UnfoldingNet {
    pub fn new(config: UnfoldingConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(config.init_seed);
        let stage0 = StageParams::init(&config, &mut store, "stage0", &mut rng)?;
        let shared = StageParams::init(&config, &mut store, "shared", &mut rng)?;
        Ok(Self {
            config,
            store,
            stage0,
            shared,
        })
    }

    /// Parameters used by stage `k` (zero-based).
    pub fn stage(&self, k: usize) -> &StageParams {
        if k == 0 {
            &self.stage0
        } else {
            &self.shared
        }
    }

    /// Truncation rank for an input of the given spatial size.
    pub fn rank_for(&self, n1: usize, n2: usize) -> usize {
        self.config.rank.unwrap_or_else(|| default_rank(n1, n2))
    }

    /// `L = x − r_L · (x − P_r(x − s_prev))`.
    pub fn low_rank_update(&self, tape: &mut Tape, x: Var, s_prev: Var, stage: &StageParams) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let diff = tape.sub(x, s_prev)?;
        let projected = if self.config.use_tsvd {
            let r = self.rank_for(shape[0], shape[1]);
            tape.tsvd_project(diff, r)?
        } else {
            diff
        };
        let correction = tape.sub(x, projected)?;
        let r_l = tape.param(&self.store, stage.r_l);
        let weighted = tape.scalar_mul(r_l, correction)?;
        tape.sub(x, weighted)
    }

    /// `S = x − r_S · (x − N(x − l_new))`.
    pub fn sparse_update(&self, tape: &mut Tape, x: Var, l_new: Var, stage: &StageParams) -> Result<Var> {
        let input = if self.config.use_tsvd {
            tape.sub(x, l_new)?
        } else {
            l_new
        };
        let refined = stage.net.forward(tape, &self.store, input)?.output;
        let correction = tape.sub(x, refined)?;
        let r_s = tape.param(&self.store, stage.r_s);
        let weighted = tape.scalar_mul(r_s, correction)?;
        tape.sub(x, weighted)
    }

    /// Runs all stages on the noisy input `y`.
    pub fn forward(&self, tape: &mut Tape, y: Var) -> Result<UnfoldingOutput> {
        let zeros = ArrayD::zeros(tape.value(y).raw_dim());
        let mut s = tape.constant(zeros);
        let mut estimates = Vec::with_capacity(self.config.stages);
        let mut sparse = Vec::with_capacity(self.config.stages);
        for k in 0..self.config.stages {
            let stage = self.stage(k);
            let l = self.low_rank_update(tape, y, s, stage)?;
            s = self.sparse_update(tape, y, l, stage)?;
            estimates.push(l);
            sparse.push(s);
        }
        Ok(UnfoldingOutput { estimates, sparse })
    }

    /// Final-stage estimate for a noisy cube.
    pub fn denoise(&self, y: &Tensor3) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let input = tape.constant_tensor(y);
        let out = self.forward(&mut tape, input)?;
        tape.tensor(*out.estimates.last().expect("at least one stage"))
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }
}

/// `Σ_k ‖clean − X̂^k‖_F²`.
pub fn stage_loss(tape: &mut Tape, outputs: &[Var], clean: &Tensor3) -> Result<Var> {
    let target = tape.constant_tensor(clean);
    let mut total: Option<Var> = None;
    for &out in outputs {
        let diff = tape.sub(target, out)?;
        let sq = tape.sum_squares(diff);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.scalar_constant(0.0)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Seed of the sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            lr_milestones: Vec::new(),
            lr_decay: 0.5,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|m| step >= **m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Model and training settings read from one TOML file with `[model]` and
/// `[train]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: UnfoldingConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// One-based optimizer step.
    pub step: usize,
    /// Mean per-sample loss of the batch.
    pub loss: f64,
    pub lr: f64,
    /// Mean final-stage PSNR on the validation set, logged at epoch ends.
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// CSV with header `step,loss,lr,val_psnr`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss", "lr", "val_psnr"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.records {
            let val = r.val_psnr.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.step.to_string(), r.loss.to_string(), r.lr.to_string(), val])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Loss and gradients of one sample, added into the store's gradients.
fn accumulate_sample(net: &mut UnfoldingNet, sample: &TrainingSample, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant_tensor(&sample.noisy);
    let out = net.forward(&mut tape, y)?;
    let loss = stage_loss(&mut tape, &out.estimates, &sample.clean)?;
    let loss = tape.scale(loss, weight);
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&mut net.store);
    Ok(tape.scalar(loss))
}

/// Mean final-stage PSNR over `samples`.
pub fn evaluate_psnr(net: &UnfoldingNet, samples: &[TrainingSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += psnr(&s.clean, &net.denoise(&s.noisy)?, 1.0)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mini-batch Adam on [`stage_loss`]. The sample order is drawn from
/// `cfg.seed`, so two runs with equal inputs produce identical parameters.
pub fn train(
    net: &mut UnfoldingNet,
    data: &[TrainingSample],
    validation: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::DataShapeMismatch("training set is empty".into()))?;
    let dims = first.noisy.dims();
    for s in data.iter().chain(validation) {
        if s.noisy.dims() != dims || s.clean.dims() != dims {
            return Err(Error::DataShapeMismatch(format!(
                "sample {:?} vs {:?}",
                s.noisy.dims(),
                dims
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog::default();
    let mut step = 0usize;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            net.store.zero_grad();
            let weight = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += accumulate_sample(net, &data[i], weight)?;
            }
            let lr = cfg.lr_at(step);
            adam_step(&mut net.store, &Adam { lr, ..Adam::default() })?;
            step += 1;
            log.records.push(LogRecord {
                step,
                loss,
                lr,
                val_psnr: None,
            });
        }
        if !validation.is_empty() {
            if let Some(last) = log.records.last_mut() {
                last.val_psnr = Some(evaluate_psnr(net, validation)?);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rank_values() {
        assert_eq!(default_rank(8, 8), 3);
        assert_eq!(default_rank(9, 12), 3);
        assert_eq!(default_rank(1, 5), 1);
    }

    #[test]
    fn loss_hand_case() {
        let clean = Tensor3::zeros(2, 2, 2);
        let mut tape = Tape::new();
        let est = tape.constant(ArrayD::ones(IxDyn(&[2, 2, 2])));
        let loss = stage_loss(&mut tape, &[est], &clean).unwrap();
        assert_eq!(tape.scalar(loss), 8.0);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr_milestones: vec![10, 20],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(10), 5e-4);
        assert_eq!(cfg.lr_at(25), 2.5e-4);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut net = UnfoldingNet::new(UnfoldingConfig::default()).unwrap();
        let err = train(&mut net, &[], &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DataShapeMismatch(_)));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let a = Tensor3::zeros(2, 2, 2);
        let b = Tensor3::zeros(2, 2, 3);
        assert!(TrainingSample::new(a, b).is_err());
    }
}
