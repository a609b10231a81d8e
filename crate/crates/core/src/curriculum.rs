//! Pre-training stages: clean baseline, basic defog pre-training, fog domain
//! migration, the joint-training comparison model, and the depth pretext.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogsim::{LabelMap, Raster, SceneSample, FAR_DEPTH};
use crate::losses::{
    cross_entropy, dct_loss, finetune_objective, kl_consistency, l1_pixel_loss, l1_similarity, sed_loss, KlDirection,
    Labels, LossReport,
};
use crate::nets::{
    build_dfnet, build_segnet, dfnet_decoder_graph, dfnet_forward_tensor, dfnet_graph, encoder_graph, params_id,
    seg_decoder_graph, seg_forward_tensor, seg_graph, ArchConfig, Checkpoint, CheckpointMeta, NetKind, ParamSet,
    SegOutput,
};
use crate::optim::{clip_grad_norm, collect_grads, linear_lr, poly_lr, Adam, AdamConfig, Sgd};
use crate::tensor::{Graph, Tensor, TensorOp, Var};
use crate::train::{gather, BatchSampler, TrainLog};

pub const TAG_BASIC: &str = "basic";
pub const TAG_FINAL: &str = "final";
pub const TAG_DEPTH: &str = "depth";

/// Gradient-norm ceiling applied in every loop; guards early steps of
/// unnormalized networks.
const MAX_GRAD_NORM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CleanBaseline,
    PretrainBasic,
    Fdm,
    PretrainDepth,
    Joint,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::CleanBaseline => "clean_baseline",
            Phase::PretrainBasic => "pretrain_basic",
            Phase::Fdm => "fdm",
            Phase::PretrainDepth => "pretrain_depth",
            Phase::Joint => "joint",
            Phase::Finetune => "finetune",
        }
    }

    /// Stream constant mixed into the run seed so phases draw independent
    /// batches.
    pub(crate) fn salt(self) -> u64 {
        match self {
            Phase::CleanBaseline => 0x11,
            Phase::PretrainBasic => 0x22,
            Phase::Fdm => 0x33,
            Phase::PretrainDepth => 0x44,
            Phase::Joint => 0x55,
            Phase::Finetune => 0x66,
        }
    }
}

/// Seed and provenance shared by every phase of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunContext {
    pub seed: u64,
    /// Serialized run configuration, embedded into every checkpoint.
    pub config: serde_json::Value,
}

impl RunContext {
    pub fn new(seed: u64) -> Self {
        RunContext {
            seed,
            config: serde_json::Value::Null,
        }
    }

    pub(crate) fn phase_seed(&self, phase: Phase) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ phase.salt()
    }

    fn meta(&self, kind: NetKind, arch: &ArchConfig, phase: Phase, tag: Option<&str>, iteration: u64) -> CheckpointMeta {
        CheckpointMeta {
            kind,
            arch: arch.clone(),
            seed: self.seed,
            phase: phase.name().into(),
            tag: tag.map(str::to_string),
            iteration,
            frozen: false,
            config: self.config.clone(),
        }
    }
}

/// A phase result: the checkpoint and its per-step log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

// ---- configuration ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            iterations: 1500,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            poly_power: 0.5,
        }
    }
}

/// Which terms the defogging pre-training minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainLosses {
    pub dct: bool,
    pub sed: bool,
    pub l1_pix: bool,
}

impl Default for PretrainLosses {
    fn default() -> Self {
        PretrainLosses {
            dct: true,
            sed: true,
            l1_pix: false,
        }
    }
}

impl PretrainLosses {
    pub const PLAIN_L1: PretrainLosses = PretrainLosses {
        dct: false,
        sed: false,
        l1_pix: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.dct || self.sed || self.l1_pix) {
            return Err(Error::Config("pre-training needs at least one loss term".into()));
        }
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        self.dct || self.sed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub losses: PretrainLosses,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr_start: 5e-5,
            lr_end: 1e-5,
            adam: AdamConfig::default(),
            losses: PretrainLosses::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        check_lr(self.lr_start, "lr_start")?;
        check_lr(self.lr_end, "lr_end")?;
        check_batch(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdmConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Per-step pull toward the basic weights.
    pub gamma: f64,
    /// Pseudo-labelling rounds; each round regenerates pseudo pairs.
    pub rounds: u32,
}

impl Default for FdmConfig {
    fn default() -> Self {
        FdmConfig {
            iterations: 1000,
            batch_size: 8,
            lr_start: 2e-5,
            lr_end: 1e-5,
            gamma: 0.01,
            rounds: 1,
        }
    }
}

impl FdmConfig {
    pub fn validate(&self) -> Result<()> {
        // An out-of-range configured gamma is a configuration error, not a numeric one.
        check_gamma(self.gamma).map_err(|e| Error::Config(format!("fdm: {e}")))?;
        check_lr(self.lr_start, "lr_start")?;
        check_lr(self.lr_end, "lr_end")?;
        check_batch(self.batch_size)?;
        if self.rounds == 0 {
            return Err(Error::Config("fdm rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub use_dct: bool,
    pub use_sed: bool,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            iterations: 2000,
            batch_size: 8,
            lr_start: 5e-5,
            lr_end: 1e-5,
            use_dct: true,
            use_sed: true,
        }
    }
}

/// Optimizer settings of momentum-SGD segmentation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdGroups {
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
}

impl Default for SgdGroups {
    fn default() -> Self {
        SgdGroups {
            encoder_lr: 1e-3,
            decoder_lr: 1e-2,
            momentum: 0.9,
            poly_power: 0.5,
        }
    }
}

impl SgdGroups {
    /// Learning rate of parameter `name` at `step` of `total`.
    pub fn lr(&self, name: &str, step: u64, total: u64) -> Result<f64> {
        let lr0 = if name.starts_with(crate::nets::ENCODER_PREFIX) {
            self.encoder_lr
        } else {
            self.decoder_lr
        };
        poly_lr(step, total, lr0, self.poly_power)
    }

    pub fn validate(&self) -> Result<()> {
        check_lr(self.encoder_lr, "encoder_lr")?;
        check_lr(self.decoder_lr, "decoder_lr")?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Joint model: one shared encoder trained with segmentation and defogging
/// objectives at once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub sgd: SgdGroups,
    pub lambda_con: f64,
    pub kl_direction: KlDirection,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            iterations: 3000,
            batch_size: 8,
            sgd: SgdGroups::default(),
            lambda_con: 1e-4,
            kl_direction: KlDirection::default(),
        }
    }
}

fn check_lr(v: f64, name: &str) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

// ---- data ------------------------------------------------------------------

/// Foggy inputs with their clean (or surrogate clean) references, as
/// `[1, 3, H, W]` tensors.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub ids: Vec<String>,
    pub fog: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
}

impl PairSet {
    /// Pairs from samples whose clean rasters are visible.
    pub fn from_samples(samples: &[SceneSample]) -> Result<Self> {
        let mut out = PairSet::default();
        for s in samples {
            let clean = s
                .clean
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{}: pre-training pair has no clean image", s.id)))?;
            out.push(s.id.clone(), s.fog.to_tensor(), clean.to_tensor());
        }
        Ok(out)
    }

    pub fn from_pseudo(pairs: &[PseudoPair]) -> Self {
        let mut out = PairSet::default();
        for p in pairs {
            out.push(p.id.clone(), p.fog.to_tensor(), p.defogged.to_tensor());
        }
        out
    }

    fn push(&mut self, id: String, fog: Tensor<f32>, clean: Tensor<f32>) {
        self.ids.push(id);
        self.fog.push(fog);
        self.clean.push(clean);
    }

    pub fn extend(&mut self, other: PairSet) {
        self.ids.extend(other.ids);
        self.fog.extend(other.fog);
        self.clean.extend(other.clean);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A real foggy image paired with its machine-defogged version.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub id: String,
    pub fog: Raster,
    pub defogged: Raster,
    /// Id of the checkpoint that produced `defogged`.
    pub source_checkpoint: String,
}

/// Labeled training images, as tensors.
pub(crate) struct LabeledSet {
    pub fog: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
    pub labels: Vec<LabelMap>,
}

impl LabeledSet {
    pub fn from_samples(samples: &[SceneSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut out = LabeledSet {
            fog: Vec::new(),
            clean: Vec::new(),
            labels: Vec::new(),
        };
        for s in samples {
            if !s.labels_visible() {
                return Err(Error::Config(format!("{}: split has no visible labels", s.id)));
            }
            let (Some(clean), Some(label)) = (&s.clean, &s.label) else {
                return Err(Error::Config(format!("{}: sample lacks clean image or labels", s.id)));
            };
            out.fog.push(s.fog.to_tensor());
            out.clean.push(clean.to_tensor());
            out.labels.push(label.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self, idx: &[usize]) -> Result<Labels> {
        let maps: Vec<&LabelMap> = idx.iter().map(|&i| &self.labels[i]).collect();
        LabelMap::batch(&maps)
    }
}

// ---- clean baseline ----------------------------------------------------------

/// Trains the segmentation network on clean images with cross-entropy and
/// returns it marked frozen.
pub fn train_clean_baseline(
    samples: &[SceneSample],
    arch: &ArchConfig,
    cfg: &CleanConfig,
    ctx: &RunContext,
) -> Result<Trained> {
    check_lr(cfg.lr, "lr")?;
    check_batch(cfg.batch_size)?;
    let data = LabeledSet::from_samples(samples)?;
    let mut params = build_segnet(arch, ctx.seed)?;
    let mut opt = Sgd::new(cfg.momentum);
    let mut sampler = BatchSampler::new(data.len(), ctx.phase_seed(Phase::CleanBaseline));
    let mut log = TrainLog::new(Phase::CleanBaseline.name());
    for step in 0..cfg.iterations {
        let lr = poly_lr(step, cfg.iterations, cfg.lr, cfg.poly_power)?;
        let idx = sampler.next_batch(cfg.batch_size);
        let x = gather(&data.clean, &idx)?;
        let labels = data.labels(&idx)?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let xv = g.constant(x);
        let out = seg_graph(&mut g, &b, arch, xv)?;
        let loss = cross_entropy(&mut g, out.logits, &labels)?;
        let ce = g.value(loss).item();
        let mut grads = collect_grads(&b, g.backward(loss)?);
        clip_grad_norm(&mut grads, MAX_GRAD_NORM);
        opt.step(&mut params, &grads, |_| lr)?;
        check_finite(&params, Phase::CleanBaseline, step)?;
        log.push(
            step as usize,
            LossReport {
                clean_ce: Some(ce),
                total: ce,
                ..Default::default()
            },
            lr,
        );
    }
    let mut meta = ctx.meta(NetKind::Segnet, arch, Phase::CleanBaseline, None, cfg.iterations);
    meta.frozen = true;
    Ok(Trained {
        checkpoint: Checkpoint::new(meta, params),
        log,
    })
}

fn check_finite(params: &ParamSet, phase: Phase, step: u64) -> Result<()> {
    if !params.all_finite() {
        return Err(Error::NumericInput(format!(
            "{} diverged at step {step}: non-finite parameters",
            phase.name()
        )));
    }
    Ok(())
}

// ---- defogging pre-training -------------------------------------------------

/// Frozen-network responses on the reference images, computed once.
struct TeacherCache {
    outputs: Vec<SegOutput>,
}

impl TeacherCache {
    fn build(fsnetc: &ParamSet, arch: &ArchConfig, clean: &[Tensor<f32>]) -> Result<Self> {
        let mut outputs = Vec::with_capacity(clean.len());
        for chunk in clean.chunks(16) {
            let out = seg_forward_tensor(fsnetc, arch, &Tensor::stack_batch(chunk)?)?;
            for i in 0..chunk.len() {
                outputs.push(SegOutput {
                    logits: out.logits.batch_item(i)?,
                    encoder_feats: out.encoder_feats.iter().map(|t| t.batch_item(i)).collect::<Result<_>>()?,
                    decoder_feats: out.decoder_feats.iter().map(|t| t.batch_item(i)).collect::<Result<_>>()?,
                });
            }
        }
        Ok(TeacherCache { outputs })
    }

    fn gather(&self, idx: &[usize]) -> Result<SegOutput> {
        let pick = |f: &dyn Fn(&SegOutput) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            Tensor::stack_batch(&idx.iter().map(|&i| f(&self.outputs[i]).clone()).collect::<Vec<_>>())
        };
        let levels = self.outputs[0].encoder_feats.len();
        Ok(SegOutput {
            logits: pick(&|o| &o.logits)?,
            encoder_feats: (0..levels).map(|l| pick(&|o| &o.encoder_feats[l])).collect::<Result<_>>()?,
            decoder_feats: (0..levels).map(|l| pick(&|o| &o.decoder_feats[l])).collect::<Result<_>>()?,
        })
    }
}

fn constants(g: &mut Graph<f32>, ts: &[Tensor<f32>]) -> Vec<Var> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

/// Builds the pre-training objective for one batch on `g`.
fn pretrain_objective(
    g: &mut Graph<f32>,
    dfnet: &crate::nets::Binding,
    fsnetc: &crate::nets::Binding,
    arch: &ArchConfig,
    fog: Tensor<f32>,
    clean: Tensor<f32>,
    teacher: Option<&SegOutput>,
    losses: PretrainLosses,
) -> Result<(Var, LossReport)> {
    let fv = g.constant(fog);
    let d = dfnet_graph(g, dfnet, arch, fv)?;
    let mut terms = Vec::new();
    let mut report = LossReport::default();
    if losses.dct {
        let t = teacher.ok_or_else(|| Error::Contract("DCT needs teacher features".into()))?;
        let e_cl = constants(g, &t.encoder_feats);
        let v = dct_loss(g, &d.encoder, &e_cl)?;
        report.dct = Some(g.value(v).item());
        terms.push(v);
    }
    if losses.sed {
        let t = teacher.ok_or_else(|| Error::Contract("SED needs teacher features".into()))?;
        let s_def = seg_graph(g, fsnetc, arch, d.output)?;
        let d_cl = constants(g, &t.decoder_feats);
        let s_cl = g.constant(t.logits.clone());
        let v = sed_loss(g, &s_def.decoder, &d_cl, s_def.logits, s_cl)?;
        report.sed = Some(g.value(v).item());
        terms.push(v);
    }
    if losses.l1_pix {
        let cv = g.constant(clean);
        let v = l1_pixel_loss(g, d.output, cv)?;
        report.l1_pix = Some(g.value(v).item());
        terms.push(v);
    }
    let total = g.sum(&terms)?;
    report.total = g.value(total).item();
    Ok((total, report))
}

fn require_frozen(fsnetc: &Checkpoint) -> Result<()> {
    if !fsnetc.meta.frozen || fsnetc.meta.kind != NetKind::Segnet {
        return Err(Error::Contract(
            "the teacher segmentation network must be a frozen clean-baseline checkpoint".into(),
        ));
    }
    Ok(())
}

/// Shared Adam loop over a pair set; `after_step` may post-process weights.
#[allow(clippy::too_many_arguments)]
fn run_pretrain_loop(
    mut params: ParamSet,
    fsnetc: &ParamSet,
    arch: &ArchConfig,
    pairs: &PairSet,
    iterations: u64,
    batch_size: usize,
    lr_range: (f64, f64),
    adam: AdamConfig,
    losses: PretrainLosses,
    phase: Phase,
    seed: u64,
    log: &mut TrainLog,
    mut after_step: impl FnMut(&mut ParamSet) -> Result<()>,
) -> Result<ParamSet> {
    if pairs.is_empty() {
        return Err(Error::Config(format!("{}: no training pairs", phase.name())));
    }
    let teacher = if losses.needs_teacher() {
        Some(TeacherCache::build(fsnetc, arch, &pairs.clean)?)
    } else {
        None
    };
    let mut opt = Adam::new(adam);
    let mut sampler = BatchSampler::new(pairs.len(), seed);
    let offset = log.rows.last().map_or(0, |r| r.iteration + 1);
    for step in 0..iterations {
        let lr = linear_lr(step, iterations, lr_range.0, lr_range.1)?;
        let idx = sampler.next_batch(batch_size);
        let t = teacher.as_ref().map(|t| t.gather(&idx)).transpose()?;
        let mut g = Graph::new();
        let bd = params.bind(&mut g, true);
        let bf = fsnetc.bind(&mut g, false);
        let (loss, report) = pretrain_objective(
            &mut g,
            &bd,
            &bf,
            arch,
            gather(&pairs.fog, &idx)?,
            gather(&pairs.clean, &idx)?,
            t.as_ref(),
            losses,
        )?;
        let mut grads = collect_grads(&bd, g.backward(loss)?);
        clip_grad_norm(&mut grads, MAX_GRAD_NORM);
        opt.step(&mut params, &grads, lr)?;
        after_step(&mut params)?;
        check_finite(&params, phase, step)?;
        log.push(offset + step as usize, report, lr);
    }
    Ok(params)
}

/// Basic defogging pre-training on synthetic pairs; tags the result `basic`.
pub fn pretrain_basic(
    dfnet: ParamSet,
    fsnetc: &Checkpoint,
    pairs: &PairSet,
    arch: &ArchConfig,
    cfg: &PretrainConfig,
    ctx: &RunContext,
) -> Result<Trained> {
    cfg.validate()?;
    if cfg.losses.needs_teacher() {
        require_frozen(fsnetc)?;
    }
    let mut log = TrainLog::new(Phase::PretrainBasic.name());
    let params = run_pretrain_loop(
        dfnet,
        &fsnetc.params,
        arch,
        pairs,
        cfg.iterations,
        cfg.batch_size,
        (cfg.lr_start, cfg.lr_end),
        cfg.adam,
        cfg.losses,
        Phase::PretrainBasic,
        ctx.phase_seed(Phase::PretrainBasic),
        &mut log,
        |_| Ok(()),
    )?;
    let meta = ctx.meta(NetKind::Dfnet, arch, Phase::PretrainBasic, Some(TAG_BASIC), cfg.iterations);
    Ok(Trained {
        checkpoint: Checkpoint::new(meta, params),
        log,
    })
}

/// Mean pre-training losses of `dfnet` over `pairs` (no update).
pub fn pretrain_eval(
    dfnet: &ParamSet,
    fsnetc: &ParamSet,
    arch: &ArchConfig,
    pairs: &PairSet,
    losses: PretrainLosses,
) -> Result<LossReport> {
    losses.validate()?;
    if pairs.is_empty() {
        return Err(Error::Degenerate("no pairs to evaluate".into()));
    }
    let teacher = if losses.needs_teacher() {
        Some(TeacherCache::build(fsnetc, arch, &pairs.clean)?)
    } else {
        None
    };
    let mut sums = [0f64; 4];
    let idx_all: Vec<usize> = (0..pairs.len()).collect();
    for idx in idx_all.chunks(16) {
        let t = teacher.as_ref().map(|t| t.gather(idx)).transpose()?;
        let mut g = Graph::new();
        let bd = dfnet.bind(&mut g, false);
        let bf = fsnetc.bind(&mut g, false);
        let (_, r) = pretrain_objective(
            &mut g,
            &bd,
            &bf,
            arch,
            gather(&pairs.fog, idx)?,
            gather(&pairs.clean, idx)?,
            t.as_ref(),
            losses,
        )?;
        let w = idx.len() as f64;
        for (s, v) in sums.iter_mut().zip([r.dct, r.sed, r.l1_pix, Some(r.total)]) {
            *s += w * f64::from(v.unwrap_or(0.0));
        }
    }
    let n = pairs.len() as f64;
    let mean = |i: usize| (sums[i] / n) as f32;
    Ok(LossReport {
        dct: losses.dct.then(|| mean(0)),
        sed: losses.sed.then(|| mean(1)),
        l1_pix: losses.l1_pix.then(|| mean(2)),
        total: mean(3),
        ..Default::default()
    })
}

/// Runs `dfnet` over foggy rasters in chunks.
pub fn defog_all(dfnet: &ParamSet, arch: &ArchConfig, fog: &[&Raster]) -> Result<Vec<Raster>> {
    let mut out = Vec::with_capacity(fog.len());
    for chunk in fog.chunks(16) {
        let x = Tensor::stack_batch(&chunk.iter().map(|r| r.to_tensor()).collect::<Vec<_>>())?;
        let (y, _) = dfnet_forward_tensor(dfnet, arch, &x)?;
        for i in 0..chunk.len() {
            out.push(Raster::from_tensor(&y, i)?);
        }
    }
    Ok(out)
}

/// Defogs every real-fog sample with the basic checkpoint.
pub fn generate_pseudo_pairs(dfnet_basic: &Checkpoint, real_fog: &[SceneSample]) -> Result<Vec<PseudoPair>> {
    if dfnet_basic.meta.kind != NetKind::Dfnet || dfnet_basic.meta.tag.as_deref() != Some(TAG_BASIC) {
        return Err(Error::Contract(format!(
            "pseudo pairs need a defogging checkpoint tagged `{TAG_BASIC}`, got tag {:?}",
            dfnet_basic.meta.tag
        )));
    }
    pseudo_pairs_from(&dfnet_basic.params, &dfnet_basic.meta.arch, &dfnet_basic.id(), real_fog)
}

fn pseudo_pairs_from(params: &ParamSet, arch: &ArchConfig, source: &str, real_fog: &[SceneSample]) -> Result<Vec<PseudoPair>> {
    let fog: Vec<&Raster> = real_fog.iter().map(|s| &s.fog).collect();
    let defogged = defog_all(params, arch, &fog)?;
    Ok(real_fog
        .iter()
        .zip(defogged)
        .map(|(s, d)| PseudoPair {
            id: s.id.clone(),
            fog: s.fog.clone(),
            defogged: d,
            source_checkpoint: source.to_string(),
        })
        .collect())
}

/// `gamma * base + (1 - gamma) * current`, parameter by parameter.
pub fn interpolate_weights(current: &ParamSet, base: &ParamSet, gamma: f64) -> Result<ParamSet> {
    check_gamma(gamma)?;
    base.check_compatible(current)?;
    let mut out = current.clone();
    interpolate_in_place(&mut out, base, gamma);
    Ok(out)
}

fn interpolate_in_place(current: &mut ParamSet, base: &ParamSet, gamma: f64) {
    let keep = 1.0 - gamma;
    for (name, t) in current.iter_mut() {
        let b = base.get(name).expect("compatible sets");
        for (c, &bv) in t.data_mut().iter_mut().zip(b.data()) {
            *c = (gamma * f64::from(bv) + keep * f64::from(*c)) as f32;
        }
    }
}

/// Fog domain migration: continue pre-training on synthetic and pseudo pairs,
/// pulling the weights toward the basic checkpoint after every step.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_fdm(
    dfnet_basic: &Checkpoint,
    fsnetc: &Checkpoint,
    synthetic: &PairSet,
    pseudo: &[PseudoPair],
    real_fog: &[SceneSample],
    cfg: &FdmConfig,
    losses: PretrainLosses,
    adam: AdamConfig,
    ctx: &RunContext,
) -> Result<Trained> {
    cfg.validate()?;
    losses.validate()?;
    if pseudo.is_empty() {
        return Err(Error::Config("fog domain migration needs at least one pseudo pair".into()));
    }
    if losses.needs_teacher() {
        require_frozen(fsnetc)?;
    }
    let base = &dfnet_basic.params;
    let arch = &dfnet_basic.meta.arch;
    let mut params = base.clone();
    let mut pseudo = pseudo.to_vec();
    let mut log = TrainLog::new(Phase::Fdm.name());
    for round in 0..cfg.rounds {
        if round > 0 {
            let id = params_id(&params);
            pseudo = pseudo_pairs_from(&params, arch, &id, real_fog)?;
        }
        let mut mixed = synthetic.clone();
        mixed.extend(PairSet::from_pseudo(&pseudo));
        params = run_pretrain_loop(
            params,
            &fsnetc.params,
            arch,
            &mixed,
            cfg.iterations,
            cfg.batch_size,
            (cfg.lr_start, cfg.lr_end),
            adam,
            losses,
            Phase::Fdm,
            ctx.phase_seed(Phase::Fdm) ^ u64::from(round),
            &mut log,
            |p| {
                interpolate_in_place(p, base, cfg.gamma);
                Ok(())
            },
        )?;
    }
    let meta = ctx.meta(
        NetKind::Dfnet,
        arch,
        Phase::Fdm,
        Some(TAG_FINAL),
        cfg.iterations * u64::from(cfg.rounds),
    );
    Ok(Trained {
        checkpoint: Checkpoint::new(meta, params),
        log,
    })
}

// ---- joint training ------------------------------------------------------------

/// Names of a joint model's segmentation part.
pub fn joint_seg_params(joint: &ParamSet, arch: &ArchConfig) -> Result<ParamSet> {
    let reference = build_segnet(arch, 0)?;
    reference
        .names()
        .map(|n| {
            joint
                .get(n)
                .cloned()
                .map(|t| (n.to_string(), t))
                .ok_or_else(|| Error::Config(format!("joint model lacks `{n}`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(ParamSet::from_iter)
}

/// Trains one shared encoder with segmentation and defogging heads on the
/// sum of cross-entropy (fog and clean), consistency, and the defogging
/// objective. Returns the segmentation part.
pub fn train_joint(
    samples: &[SceneSample],
    fsnetc: &Checkpoint,
    arch: &ArchConfig,
    cfg: &JointConfig,
    losses: PretrainLosses,
    ctx: &RunContext,
) -> Result<Trained> {
    cfg.sgd.validate()?;
    losses.validate()?;
    check_batch(cfg.batch_size)?;
    if losses.needs_teacher() {
        require_frozen(fsnetc)?;
    }
    let data = LabeledSet::from_samples(samples)?;
    let teacher = if losses.needs_teacher() {
        Some(TeacherCache::build(&fsnetc.params, arch, &data.clean)?)
    } else {
        None
    };
    let mut params = build_segnet(arch, ctx.seed)?;
    let df = build_dfnet(arch, ctx.seed ^ 0xDF)?;
    for (n, t) in df.iter().filter(|(n, _)| !n.starts_with(crate::nets::ENCODER_PREFIX)) {
        params.insert(n, t.clone())?;
    }
    let mut opt = Sgd::new(cfg.sgd.momentum);
    let mut sampler = BatchSampler::new(data.len(), ctx.phase_seed(Phase::Joint));
    let mut log = TrainLog::new(Phase::Joint.name());
    for step in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let labels = data.labels(&idx)?;
        let t = teacher.as_ref().map(|t| t.gather(&idx)).transpose()?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let bf = fsnetc.params.bind(&mut g, false);
        let fv = g.constant(gather(&data.fog, &idx)?);
        let cv = g.constant(gather(&data.clean, &idx)?);
        let enc = encoder_graph(&mut g, &b, arch, fv)?;
        let s_fog = seg_decoder_graph(&mut g, &b, arch, enc.clone())?;
        let defog = dfnet_decoder_graph(&mut g, &b, arch, enc)?;
        let s_cl = seg_graph(&mut g, &b, arch, cv)?;
        let fog_ce = cross_entropy(&mut g, s_fog.logits, &labels)?;
        let clean_ce = cross_entropy(&mut g, s_cl.logits, &labels)?;
        let kl = kl_consistency(&mut g, s_fog.logits, s_cl.logits, cfg.kl_direction)?;
        let seg_total = finetune_objective(&mut g, Some(fog_ce), Some(clean_ce), Some(kl), cfg.lambda_con as f32)?;
        let mut report = LossReport {
            fog_ce: Some(g.value(fog_ce).item()),
            clean_ce: Some(g.value(clean_ce).item()),
            kl_con: Some(g.value(kl).item()),
            ..Default::default()
        };
        let mut terms = vec![seg_total];
        if losses.dct {
            let t = t.as_ref().expect("teacher present");
            let e_cl = constants(&mut g, &t.encoder_feats);
            let v = dct_loss(&mut g, &defog.encoder, &e_cl)?;
            report.dct = Some(g.value(v).item());
            terms.push(v);
        }
        if losses.sed {
            let t = t.as_ref().expect("teacher present");
            let s_def = seg_graph(&mut g, &bf, arch, defog.output)?;
            let d_cl = constants(&mut g, &t.decoder_feats);
            let l_cl = g.constant(t.logits.clone());
            let v = sed_loss(&mut g, &s_def.decoder, &d_cl, s_def.logits, l_cl)?;
            report.sed = Some(g.value(v).item());
            terms.push(v);
        }
        if losses.l1_pix {
            let v = l1_similarity(&mut g, defog.output, cv)?;
            report.l1_pix = Some(g.value(v).item());
            terms.push(v);
        }
        let total = g.sum(&terms)?;
        report.total = g.value(total).item();
        let mut grads = collect_grads(&b, g.backward(total)?);
        clip_grad_norm(&mut grads, MAX_GRAD_NORM);
        let sgd = &cfg.sgd;
        let lrs: Result<Vec<f64>> = [crate::nets::ENCODER_PREFIX, "decoder."]
            .iter()
            .map(|p| sgd.lr(p, step, cfg.iterations))
            .collect();
        let lrs = lrs?;
        opt.step(&mut params, &grads, |n| {
            if n.starts_with(crate::nets::ENCODER_PREFIX) {
                lrs[0]
            } else {
                lrs[1]
            }
        })?;
        check_finite(&params, Phase::Joint, step)?;
        log.push(step as usize, report, lrs[1]);
    }
    let seg = joint_seg_params(&params, arch)?;
    let meta = ctx.meta(NetKind::Segnet, arch, Phase::Joint, None, cfg.iterations);
    Ok(Trained {
        checkpoint: Checkpoint::new(meta, seg),
        log,
    })
}

// ---- depth pretext ---------------------------------------------------------------

/// Smallest transmittance used when inverting the scattering model.
const MIN_TRANSMITTANCE: f32 = 0.05;

/// Inverts the scattering model with a predicted normalized depth:
/// `J = (I - A) / t + A`, `t = max(exp(-beta * FAR_DEPTH * p), MIN_T)`.
struct Dehaze {
    beta: Vec<f32>,
    airlight: Vec<f32>,
}

impl Dehaze {
    fn rate(&self, n: usize) -> f32 {
        self.beta[n] * FAR_DEPTH
    }

    fn transmittance(&self, n: usize, p: f32) -> f32 {
        (-self.rate(n) * p).exp().max(MIN_TRANSMITTANCE)
    }

    fn forward(&self, depth: &Tensor<f32>, fog: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, _, h, w) = fog.dims4()?;
        if depth.shape() != [n, 1, h, w] {
            return Err(Error::dim(format!("depth {:?} vs image {:?}", depth.shape(), fog.shape())));
        }
        let p = h * w;
        Ok(Tensor::from_fn(fog.shape().to_vec(), |i| {
            let (b, px) = (i / (3 * p), i % p);
            let t = self.transmittance(b, depth.data()[b * p + px]);
            let a = self.airlight[b];
            (fog.data()[i] - a) / t + a
        }))
    }
}

impl TensorOp<f32> for Dehaze {
    fn backward(
        &self,
        inputs: &[&Tensor<f32>],
        _output: &Tensor<f32>,
        upstream: &Tensor<f32>,
        need: &[bool],
    ) -> Vec<Option<Tensor<f32>>> {
        if !need[0] {
            return vec![None, None];
        }
        let (depth, fog) = (inputs[0], inputs[1]);
        let p = depth.shape()[2] * depth.shape()[3];
        let mut gd = Tensor::zeros(depth.shape().to_vec());
        for (i, &u) in upstream.data().iter().enumerate() {
            let (b, px) = (i / (3 * p), i % p);
            let d = depth.data()[b * p + px];
            let raw = (-self.rate(b) * d).exp();
            if raw > MIN_TRANSMITTANCE {
                // d/dp [(I - A) exp(rate p)] = (I - A) rate / t
                gd.data_mut()[b * p + px] += u * (fog.data()[i] - self.airlight[b]) * self.rate(b) / raw;
            }
        }
        vec![Some(gd), None]
    }
}

/// Depth pretext: the defogging network with a one-channel head regresses
/// normalized depth from the foggy image; DCT aligns its encoder with the
/// teacher, and SED compares teacher responses on the image reconstructed
/// from the predicted depth against those on the clean image.
pub fn pretrain_depth(
    samples: &[SceneSample],
    fsnetc: &Checkpoint,
    arch: &ArchConfig,
    cfg: &DepthConfig,
    ctx: &RunContext,
) -> Result<Trained> {
    if !(cfg.use_dct || cfg.use_sed) {
        return Err(Error::Config("depth pre-training needs DCT, SED, or both".into()));
    }
    check_lr(cfg.lr_start, "lr_start")?;
    check_lr(cfg.lr_end, "lr_end")?;
    check_batch(cfg.batch_size)?;
    require_frozen(fsnetc)?;
    let arch = ArchConfig {
        dfnet_out_channels: 1,
        ..arch.clone()
    };
    let pairs = PairSet::from_samples(samples)?;
    let depth: Vec<Tensor<f32>> = samples.iter().map(|s| s.depth.normalized_tensor(FAR_DEPTH)).collect();
    let teacher = TeacherCache::build(&fsnetc.params, &arch, &pairs.clean)?;
    let mut params = build_dfnet(&arch, ctx.seed)?;
    let mut opt = Adam::new(AdamConfig::default());
    let mut sampler = BatchSampler::new(pairs.len(), ctx.phase_seed(Phase::PretrainDepth));
    let mut log = TrainLog::new(Phase::PretrainDepth.name());
    for step in 0..cfg.iterations {
        let lr = linear_lr(step, cfg.iterations, cfg.lr_start, cfg.lr_end)?;
        let idx = sampler.next_batch(cfg.batch_size);
        let t = teacher.gather(&idx)?;
        let fog = gather(&pairs.fog, &idx)?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let bf = fsnetc.params.bind(&mut g, false);
        let fv = g.constant(fog.clone());
        let d = dfnet_graph(&mut g, &b, &arch, fv)?;
        let target = g.constant(gather(&depth, &idx)?);
        let depth_l1 = l1_similarity(&mut g, d.output, target)?;
        let mut report = LossReport {
            depth_l1: Some(g.value(depth_l1).item()),
            ..Default::default()
        };
        let mut terms = vec![depth_l1];
        if cfg.use_dct {
            let e_cl = constants(&mut g, &t.encoder_feats);
            let v = dct_loss(&mut g, &d.encoder, &e_cl)?;
            report.dct = Some(g.value(v).item());
            terms.push(v);
        }
        if cfg.use_sed {
            let op = Dehaze {
                beta: idx.iter().map(|&i| samples[i].beta).collect(),
                airlight: idx.iter().map(|&i| samples[i].airlight).collect(),
            };
            let recon = op.forward(g.value(d.output), &fog)?;
            let fog_c = g.constant(fog);
            let rv = g.custom_tensor(&[d.output, fog_c], recon, Box::new(op));
            let s_def = seg_graph(&mut g, &bf, &arch, rv)?;
            let d_cl = constants(&mut g, &t.decoder_feats);
            let l_cl = g.constant(t.logits.clone());
            let v = sed_loss(&mut g, &s_def.decoder, &d_cl, s_def.logits, l_cl)?;
            report.sed = Some(g.value(v).item());
            terms.push(v);
        }
        let total = g.sum(&terms)?;
        report.total = g.value(total).item();
        let mut grads = collect_grads(&b, g.backward(total)?);
        clip_grad_norm(&mut grads, MAX_GRAD_NORM);
        opt.step(&mut params, &grads, lr)?;
        check_finite(&params, Phase::PretrainDepth, step)?;
        log.push(step as usize, report, lr);
    }
    let meta = ctx.meta(NetKind::Dfnet, &arch, Phase::PretrainDepth, Some(TAG_DEPTH), cfg.iterations);
    Ok(Trained {
        checkpoint: Checkpoint::new(meta, params),
        log,
    })
}
