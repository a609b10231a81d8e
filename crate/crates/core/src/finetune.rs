//! Segmentation fine-tuning on paired foggy/clean images.

use serde::{Deserialize, Serialize};

use crate::curriculum::{defog_all, LabeledSet, Phase, RunContext, SgdGroups, Trained};
use crate::error::{Error, Result};
use crate::fogsim::SceneSample;
use crate::losses::{cross_entropy, finetune_objective, kl_consistency, KlDirection, LossReport};
use crate::nets::{build_segnet, seg_graph, splice_encoder, ArchConfig, Checkpoint, CheckpointMeta, NetKind, ParamSet};
use crate::optim::{clip_grad_norm, collect_grads, poly_lr, Sgd};
use crate::tensor::Graph;
use crate::train::{gather, BatchSampler, TrainLog};

/// Same ceiling as the pre-training loops.
const MAX_GRAD_NORM: f64 = 10.0;

/// Segmentation network whose encoder comes from a pre-trained defogging
/// network and whose decoder is `segnet`'s.
pub fn init_from_pretrain(dfnet: &ParamSet, segnet: &ParamSet) -> Result<ParamSet> {
    splice_encoder(dfnet, segnet)
}

/// `lr0 * (1 - step/total)^0.5`.
pub fn lr_schedule(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if !(lr0 > 0.0) {
        return Err(Error::Domain(format!("lr0 must be positive, got {lr0}")));
    }
    poly_lr(step, total_steps, lr0, 0.5)
}

/// Enabled terms of the fine-tuning objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneLosses {
    pub use_fog: bool,
    pub use_cl: bool,
    pub use_con: bool,
}

impl Default for FinetuneLosses {
    fn default() -> Self {
        FinetuneLosses {
            use_fog: true,
            use_cl: true,
            use_con: true,
        }
    }
}

impl FinetuneLosses {
    pub const FOG_ONLY: FinetuneLosses = FinetuneLosses {
        use_fog: true,
        use_cl: false,
        use_con: false,
    };
    pub const FOG_CLEAN: FinetuneLosses = FinetuneLosses {
        use_fog: true,
        use_cl: true,
        use_con: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.use_fog || self.use_cl || self.use_con) {
            return Err(Error::Config("fine-tuning needs at least one loss flag".into()));
        }
        Ok(())
    }
}

/// What the foggy branch feeds to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneInput {
    /// The foggy image itself.
    #[default]
    Fog,
    /// The foggy image after the pre-trained defogging network.
    Defogged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub sgd: SgdGroups,
    pub lambda_con: f64,
    pub kl_direction: KlDirection,
    pub input: FinetuneInput,
    pub losses: FinetuneLosses,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 3000,
            batch_size: 8,
            sgd: SgdGroups::default(),
            lambda_con: 1e-4,
            kl_direction: KlDirection::default(),
            input: FinetuneInput::default(),
            losses: FinetuneLosses::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        self.sgd.validate()?;
        if !(self.lambda_con >= 0.0 && self.lambda_con.is_finite()) {
            return Err(Error::Config(format!("lambda_con must be >= 0, got {}", self.lambda_con)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// `(encoder, decoder)` learning rates at `step`.
    pub fn group_lrs(&self, step: u64) -> Result<(f64, f64)> {
        Ok((
            lr_schedule(step, self.iterations, self.sgd.encoder_lr)?,
            lr_schedule(step, self.iterations, self.sgd.decoder_lr)?,
        ))
    }
}

/// Fine-tunes `seg` on labeled fog/clean pairs. `dfnet` is required when the
/// foggy branch reads defogged images.
pub fn finetune(
    seg: ParamSet,
    samples: &[SceneSample],
    arch: &ArchConfig,
    cfg: &FinetuneConfig,
    dfnet: Option<&ParamSet>,
    ctx: &RunContext,
) -> Result<Trained> {
    cfg.validate()?;
    let mut data = LabeledSet::from_samples(samples)?;
    if cfg.input == FinetuneInput::Defogged {
        let df = dfnet.ok_or_else(|| Error::Config("finetune input `defogged` needs a defogging network".into()))?;
        let fog: Vec<_> = samples.iter().map(|s| &s.fog).collect();
        data.fog = defog_all(df, arch, &fog)?.iter().map(|r| r.to_tensor()).collect();
    }
    let mut params = seg;
    let mut opt = Sgd::new(cfg.sgd.momentum);
    let mut sampler = BatchSampler::new(data.len(), ctx.phase_seed(Phase::Finetune));
    let mut log = TrainLog::new(Phase::Finetune.name());
    let flags = cfg.losses;
    for step in 0..cfg.iterations {
        let (lr_enc, lr_dec) = cfg.group_lrs(step)?;
        let idx = sampler.next_batch(cfg.batch_size);
        let labels = data.labels(&idx)?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let need_fog = flags.use_fog || flags.use_con;
        let need_clean = flags.use_cl || flags.use_con;
        let s_def = if need_fog {
            let x = g.constant(gather(&data.fog, &idx)?);
            Some(seg_graph(&mut g, &b, arch, x)?.logits)
        } else {
            None
        };
        let s_cl = if need_clean {
            let x = g.constant(gather(&data.clean, &idx)?);
            Some(seg_graph(&mut g, &b, arch, x)?.logits)
        } else {
            None
        };
        let fog_ce = match (flags.use_fog, s_def) {
            (true, Some(s)) => Some(cross_entropy(&mut g, s, &labels)?),
            _ => None,
        };
        let clean_ce = match (flags.use_cl, s_cl) {
            (true, Some(s)) => Some(cross_entropy(&mut g, s, &labels)?),
            _ => None,
        };
        let kl = match (flags.use_con, s_def, s_cl) {
            (true, Some(d), Some(c)) => Some(kl_consistency(&mut g, d, c, cfg.kl_direction)?),
            _ => None,
        };
        let total = finetune_objective(&mut g, fog_ce, clean_ce, kl, cfg.lambda_con as f32)?;
        let report = LossReport {
            fog_ce: fog_ce.map(|v| g.value(v).item()),
            clean_ce: clean_ce.map(|v| g.value(v).item()),
            kl_con: kl.map(|v| g.value(v).item()),
            total: g.value(total).item(),
            ..Default::default()
        };
        let mut grads = collect_grads(&b, g.backward(total)?);
        clip_grad_norm(&mut grads, MAX_GRAD_NORM);
        opt.step(&mut params, &grads, |n| {
            if n.starts_with(crate::nets::ENCODER_PREFIX) {
                lr_enc
            } else {
                lr_dec
            }
        })?;
        if !params.all_finite() {
            return Err(Error::NumericInput(format!("finetune diverged at step {step}")));
        }
        log.push(step as usize, report, lr_dec);
    }
    let meta = CheckpointMeta {
        kind: NetKind::Segnet,
        arch: arch.clone(),
        seed: ctx.seed,
        phase: Phase::Finetune.name().into(),
        tag: None,
        iteration: cfg.iterations,
        frozen: false,
        config: ctx.config.clone(),
    };
    Ok(Trained {
        checkpoint: Checkpoint::new(meta, params),
        log,
    })
}

/// Fresh segmentation network for fine-tuning, optionally with a pre-trained
/// encoder. The decoder seed is derived from the run seed.
pub fn fresh_segnet(arch: &ArchConfig, dfnet: Option<&ParamSet>, ctx: &RunContext) -> Result<ParamSet> {
    let seg = build_segnet(arch, ctx.seed ^ 0x5E6)?;
    match dfnet {
        Some(df) => init_from_pretrain(df, &seg),
        None => Ok(seg),
    }
}
