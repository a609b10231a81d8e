use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalInput};
use crate::config::RunConfig;
use crate::curriculum::{
    generate_pseudo_pairs, pretrain_basic, pretrain_depth, pretrain_fdm, train_clean_baseline, train_joint, PairSet,
    PretrainLosses, Trained,
};
use crate::error::{Error, Result};
use crate::finetune::{finetune, fresh_segnet, FinetuneLosses};
use crate::fogsim::{generate_split, Access, Dataset, SceneSample, Split};
use crate::nets::{build_dfnet, splice_encoder, ArchConfig, Checkpoint, DecoderDepth, ParamSet};
use crate::train::TrainLog;

/// Metric columns of every ablation row.
pub const METRICS: [&str; 3] = ["fog_test_miou", "clean_test_miou", "synthetic_fog_test_miou"];

/// Version of the ablation CSV layout.
pub const TABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table2,
    Table3,
    Table4,
    Table5,
    Table6,
    Table7,
    Table8,
    Fig1c,
    Fig8,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Table2,
        Preset::Table3,
        Preset::Table4,
        Preset::Table5,
        Preset::Table6,
        Preset::Table7,
        Preset::Table8,
        Preset::Fig1c,
        Preset::Fig8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::Table4 => "table4",
            Preset::Table5 => "table5",
            Preset::Table6 => "table6",
            Preset::Table7 => "table7",
            Preset::Table8 => "table8",
            Preset::Fig1c => "fig1c",
            Preset::Fig8 => "fig8",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Preset::Table2 => "key components",
            Preset::Table3 => "pre-training losses",
            Preset::Table4 => "fine-tuning losses",
            Preset::Table5 => "pre-training data",
            Preset::Table6 => "encoder splicing without fine-tuning",
            Preset::Table7 => "defogging decoder depth",
            Preset::Table8 => "depth-estimation pretext",
            Preset::Fig1c => "joint vs decoupled",
            Preset::Fig8 => "loss curves",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    /// `key.path=value` assignments applied to the base configuration.
    pub overrides: Vec<String>,
}

impl AblationSpec {
    pub fn new(preset: Preset, seeds: Vec<u64>) -> Self {
        AblationSpec {
            preset,
            seeds,
            overrides: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        Ok(())
    }
}

/// One table row: per-seed values for each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// `values[m][s]`: metric `m` for seed `s`.
    pub values: Vec<Vec<f64>>,
}

impl AblationRow {
    pub fn mean(&self, metric: usize) -> f64 {
        let v = &self.values[metric];
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self, metric: usize) -> f64 {
        let v = &self.values[metric];
        if v.len() < 2 {
            return 0.0;
        }
        let m = self.mean(metric);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub preset: Preset,
    pub metrics: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn metric_index(&self, name: &str) -> Result<usize> {
        self.metrics
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::Config(format!("table has no metric `{name}`")))
    }

    pub fn row(&self, label: &str) -> Result<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .ok_or_else(|| Error::Config(format!("table has no row `{label}`")))
    }

    /// Mean of `metric` in row `label`.
    pub fn mean(&self, label: &str, metric: &str) -> Result<f64> {
        Ok(self.row(label)?.mean(self.metric_index(metric)?))
    }

    /// Wide CSV: one line per row with mean and std of each metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("schema,preset,row,n_seeds");
        for m in &self.metrics {
            s.push_str(&format!(",{m}_mean,{m}_std"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{TABLE_SCHEMA_VERSION},{},{},{}", self.preset, r.label, r.seeds.len()));
            for m in 0..self.metrics.len() {
                s.push_str(&format!(",{:.6},{:.6}", r.mean(m), r.std(m)));
            }
            s.push('\n');
        }
        s
    }

    /// Long CSV: one line per row, metric, and seed.
    pub fn to_seed_csv(&self) -> String {
        let mut s = String::from("schema,preset,row,metric,seed,value\n");
        for r in &self.rows {
            for (m, name) in self.metrics.iter().enumerate() {
                for (seed, v) in r.seeds.iter().zip(&r.values[m]) {
                    s.push_str(&format!("{TABLE_SCHEMA_VERSION},{},{},{name},{seed},{v:.6}\n", self.preset, r.label));
                }
            }
        }
        s
    }

    /// Human-readable `mean ± std` table.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
        let mut s = format!("{} ({})\n{:width$}  seeds", self.preset, self.preset.title(), "row");
        for m in &self.metrics {
            s.push_str(&format!("  {m:>24}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:width$}  {:>5}", r.label, r.seeds.len()));
            for m in 0..self.metrics.len() {
                s.push_str(&format!("  {:>24}", format!("{:.2} ± {:.2}", 100.0 * r.mean(m), 100.0 * r.std(m))));
            }
            s.push('\n');
        }
        s
    }
}

/// Everything a report needs from one ablation run.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub table: AblationTable,
    /// Training logs, keyed by `<row>/<phase>`, from the first seed.
    pub curves: Vec<(String, TrainLog)>,
    /// Segmentation network of the last row for the first seed and the
    /// defogging network that fed its encoder, if any.
    pub showcase: Option<Showcase>,
}

#[derive(Clone, Debug)]
pub struct Showcase {
    pub label: String,
    pub seg: ParamSet,
    pub dfnet: Option<ParamSet>,
}

/// The data splits one workbench trains and evaluates on.
pub struct Splits {
    pub train: Vec<SceneSample>,
    /// Real-fog training images with clean rasters and labels removed.
    pub real_fog: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub real_fog_test: Vec<SceneSample>,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(Splits {
            train: generate_split(&cfg.data, Split::Train)?,
            real_fog: generate_split(&cfg.data, Split::RealFog)?
                .iter()
                .map(SceneSample::training_view)
                .collect(),
            test: generate_split(&cfg.data, Split::Test)?,
            real_fog_test: generate_split(&cfg.data, Split::RealFogTest)?,
        })
    }

    pub fn load(ds: &Dataset) -> Result<Self> {
        Ok(Splits {
            train: ds.load_split(Split::Train, Access::Training)?,
            real_fog: ds.load_split(Split::RealFog, Access::Training)?,
            test: ds.load_split(Split::Test, Access::Evaluation)?,
            real_fog_test: ds.load_split(Split::RealFogTest, Access::Evaluation)?,
        })
    }
}

/// Where a fine-tuned network's encoder comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderSource {
    /// Fresh initialization.
    Scratch,
    /// Basic pre-training with the given losses and decoder depth.
    Basic(PretrainLosses, DecoderDepth),
    /// Basic pre-training followed by fog domain migration. The flag keeps
    /// the synthetic pairs in the migration set.
    Fdm(DecoderDepth, bool),
    /// Depth pretext with DCT and SED flags.
    Depth(bool, bool),
}

/// Memoizes every trained artifact by seed and recipe so presets that share
/// stages train them once.
pub struct Workbench {
    cfg: RunConfig,
    data: Splits,
    nets: BTreeMap<String, Trained>,
    metrics: BTreeMap<String, Vec<f64>>,
    progress: Option<Box<dyn FnMut(&str) + Send>>,
}

impl Workbench {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Splits::generate(&cfg)?;
        Ok(Self::with_data(cfg, data))
    }

    pub fn with_data(cfg: RunConfig, data: Splits) -> Self {
        Workbench {
            cfg,
            data,
            nets: BTreeMap::new(),
            metrics: BTreeMap::new(),
            progress: None,
        }
    }

    /// Called with a short message before each training phase.
    pub fn on_progress(&mut self, f: impl FnMut(&str) + Send + 'static) {
        self.progress = Some(Box::new(f));
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Splits {
        &self.data
    }

    fn seeded(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.cfg.clone()
        }
    }

    fn note(&mut self, msg: &str) {
        if let Some(f) = self.progress.as_mut() {
            f(msg);
        }
    }

    fn memo(&mut self, key: String, build: impl FnOnce(&mut Self) -> Result<Trained>) -> Result<&Trained> {
        if !self.nets.contains_key(&key) {
            self.note(&key);
            let t = build(self)?;
            self.nets.insert(key.clone(), t);
        }
        Ok(&self.nets[&key])
    }

    pub fn fsnetc(&mut self, seed: u64) -> Result<Checkpoint> {
        let key = format!("{seed}/clean_baseline");
        Ok(self
            .memo(key, |w| {
                let cfg = w.seeded(seed);
                train_clean_baseline(&w.data.train, &cfg.arch, &cfg.clean, &cfg.context())
            })?
            .checkpoint
            .clone())
    }

    fn arch_for(&self, depth: DecoderDepth) -> ArchConfig {
        ArchConfig {
            decoder_depth: depth,
            ..self.cfg.arch.clone()
        }
    }

    pub fn dfnet_basic(&mut self, seed: u64, losses: PretrainLosses, depth: DecoderDepth) -> Result<Trained> {
        let fsnetc = self.fsnetc(seed)?;
        let key = format!("{seed}/pretrain_basic/{losses:?}/{depth:?}");
        self.memo(key, |w| {
            let cfg = w.seeded(seed);
            let arch = w.arch_for(depth);
            let pairs = PairSet::from_samples(&w.data.train)?;
            let pre = crate::curriculum::PretrainConfig {
                losses,
                ..cfg.pretrain.clone()
            };
            pretrain_basic(build_dfnet(&arch, seed)?, &fsnetc, &pairs, &arch, &pre, &cfg.context())
        })
        .cloned()
    }

    pub fn dfnet_fdm(&mut self, seed: u64, depth: DecoderDepth, with_synthetic: bool) -> Result<Trained> {
        let fsnetc = self.fsnetc(seed)?;
        let losses = self.cfg.pretrain.losses;
        let basic = self.dfnet_basic(seed, losses, depth)?;
        let key = format!("{seed}/fdm/{depth:?}/{with_synthetic}");
        self.memo(key, |w| {
            let cfg = w.seeded(seed);
            let pseudo = generate_pseudo_pairs(&basic.checkpoint, &w.data.real_fog)?;
            let synthetic = if with_synthetic {
                PairSet::from_samples(&w.data.train)?
            } else {
                PairSet::default()
            };
            pretrain_fdm(
                &basic.checkpoint,
                &fsnetc,
                &synthetic,
                &pseudo,
                &w.data.real_fog,
                &cfg.fdm,
                losses,
                cfg.pretrain.adam,
                &cfg.context(),
            )
        })
        .cloned()
    }

    pub fn dfnet_depth(&mut self, seed: u64, use_dct: bool, use_sed: bool) -> Result<Trained> {
        let fsnetc = self.fsnetc(seed)?;
        let key = format!("{seed}/pretrain_depth/{use_dct}/{use_sed}");
        self.memo(key, |w| {
            let cfg = w.seeded(seed);
            let depth = crate::curriculum::DepthConfig {
                use_dct,
                use_sed,
                ..cfg.depth.clone()
            };
            pretrain_depth(&w.data.train, &fsnetc, &cfg.arch, &depth, &cfg.context())
        })
        .cloned()
    }

    /// Pre-trained network behind `source`, if any.
    pub fn encoder_net(&mut self, seed: u64, source: EncoderSource) -> Result<Option<Trained>> {
        Ok(match source {
            EncoderSource::Scratch => None,
            EncoderSource::Basic(l, d) => Some(self.dfnet_basic(seed, l, d)?),
            EncoderSource::Fdm(d, syn) => Some(self.dfnet_fdm(seed, d, syn)?),
            EncoderSource::Depth(dct, sed) => Some(self.dfnet_depth(seed, dct, sed)?),
        })
    }

    pub fn finetuned(&mut self, seed: u64, source: EncoderSource, losses: FinetuneLosses) -> Result<Trained> {
        let pre = self.encoder_net(seed, source)?;
        let key = format!("{seed}/finetune/{source:?}/{losses:?}");
        self.memo(key, |w| {
            let cfg = w.seeded(seed);
            let ctx = cfg.context();
            let df = pre.as_ref().map(|t| &t.checkpoint.params);
            let seg = fresh_segnet(&cfg.arch, df, &ctx)?;
            let ft = crate::finetune::FinetuneConfig {
                losses,
                ..cfg.finetune.clone()
            };
            finetune(seg, &w.data.train, &cfg.arch, &ft, df, &ctx)
        })
        .cloned()
    }

    pub fn joint(&mut self, seed: u64) -> Result<Trained> {
        let fsnetc = self.fsnetc(seed)?;
        let key = format!("{seed}/joint");
        self.memo(key, |w| {
            let cfg = w.seeded(seed);
            train_joint(
                &w.data.train,
                &fsnetc,
                &cfg.arch,
                &cfg.joint,
                cfg.pretrain.losses,
                &cfg.context(),
            )
        })
        .cloned()
    }

    /// Values of [`METRICS`] for a segmentation network, cached by `key`.
    pub fn score(&mut self, key: &str, seg: &ParamSet) -> Result<Vec<f64>> {
        if let Some(v) = self.metrics.get(key) {
            return Ok(v.clone());
        }
        let arch = &self.cfg.arch;
        let v = vec![
            evaluate(seg, arch, &self.data.real_fog_test, EvalInput::Fog)?.miou,
            evaluate(seg, arch, &self.data.test, EvalInput::Clean)?.miou,
            evaluate(seg, arch, &self.data.test, EvalInput::Fog)?.miou,
        ];
        self.metrics.insert(key.to_string(), v.clone());
        Ok(v)
    }
}

/// One row recipe.
enum Recipe {
    Finetuned(EncoderSource, FinetuneLosses),
    Joint,
    /// Encoder spliced into the clean baseline, no fine-tuning.
    Spliced(Option<EncoderSource>),
}

fn recipes(preset: Preset, cfg: &RunConfig) -> Vec<(&'static str, Recipe)> {
    use EncoderSource as E;
    use Recipe as R;
    let full = FinetuneLosses::default();
    let light = DecoderDepth::Light;
    let dctsed = cfg.pretrain.losses;
    let only = |dct, sed| PretrainLosses { dct, sed, l1_pix: false };
    match preset {
        Preset::Table2 => vec![
            ("baseline", R::Finetuned(E::Scratch, full)),
            ("joint", R::Joint),
            ("decoupled", R::Finetuned(E::Basic(dctsed, light), full)),
            ("decoupled+fdm", R::Finetuned(E::Fdm(light, true), full)),
        ],
        Preset::Fig1c => vec![
            ("joint", R::Joint),
            ("decoupled", R::Finetuned(E::Basic(dctsed, light), full)),
        ],
        Preset::Table3 => vec![
            ("l1", R::Finetuned(E::Basic(PretrainLosses::PLAIN_L1, light), full)),
            ("dct", R::Finetuned(E::Basic(only(true, false), light), full)),
            ("sed", R::Finetuned(E::Basic(only(false, true), light), full)),
            ("dct+sed", R::Finetuned(E::Basic(only(true, true), light), full)),
        ],
        Preset::Table4 => vec![
            ("fog", R::Finetuned(E::Fdm(light, true), FinetuneLosses::FOG_ONLY)),
            ("fog+clean", R::Finetuned(E::Fdm(light, true), FinetuneLosses::FOG_CLEAN)),
            ("fog+clean+con", R::Finetuned(E::Fdm(light, true), full)),
        ],
        Preset::Table5 => vec![
            ("synthetic", R::Finetuned(E::Basic(dctsed, light), full)),
            ("real_pseudo", R::Finetuned(E::Fdm(light, false), full)),
            ("synthetic+real_pseudo", R::Finetuned(E::Fdm(light, true), full)),
        ],
        Preset::Table6 => vec![
            ("full_encoder", R::Spliced(Some(E::Fdm(light, true)))),
            ("l1_encoder", R::Spliced(Some(E::Basic(PretrainLosses::PLAIN_L1, light)))),
            ("clean_encoder", R::Spliced(None)),
        ],
        Preset::Table7 => vec![
            ("light", R::Finetuned(E::Fdm(light, true), full)),
            ("heavy", R::Finetuned(E::Fdm(DecoderDepth::Heavy, true), full)),
        ],
        Preset::Table8 => vec![
            ("depth+sed", R::Finetuned(E::Depth(false, true), full)),
            ("depth+dct+sed", R::Finetuned(E::Depth(true, true), full)),
            ("defog+dct+sed", R::Finetuned(E::Basic(dctsed, light), full)),
        ],
        Preset::Fig8 => vec![("decoupled+fdm", R::Finetuned(E::Fdm(light, true), full))],
    }
}

/// Runs a preset on a fresh workbench built from `base` with
/// `spec.overrides` applied.
pub fn run_ablation(spec: &AblationSpec, base: &RunConfig) -> Result<AblationReport> {
    spec.validate()?;
    let mut cfg = base.clone();
    cfg.apply_overrides(&spec.overrides)?;
    let mut wb = Workbench::new(cfg)?;
    run_ablation_on(&mut wb, spec)
}

/// Runs a preset on an existing workbench; overrides in `spec` must be
/// empty because the workbench configuration is fixed.
pub fn run_ablation_on(wb: &mut Workbench, spec: &AblationSpec) -> Result<AblationReport> {
    spec.validate()?;
    if !spec.overrides.is_empty() {
        return Err(Error::Config("overrides must be applied when the workbench is built".into()));
    }
    let rows = recipes(spec.preset, wb.config());
    let mut table = AblationTable {
        preset: spec.preset,
        metrics: METRICS.iter().map(|m| m.to_string()).collect(),
        rows: Vec::new(),
    };
    let mut curves = Vec::new();
    let mut showcase = None;
    for (label, recipe) in &rows {
        let mut values = vec![Vec::new(); METRICS.len()];
        for (si, &seed) in spec.seeds.iter().enumerate() {
            let (key, seg, logs, df) = match recipe {
                Recipe::Finetuned(src, losses) => {
                    let pre = wb.encoder_net(seed, *src)?;
                    let t = wb.finetuned(seed, *src, *losses)?;
                    let mut logs = Vec::new();
                    if let Some(p) = &pre {
                        logs.push(p.log.clone());
                    }
                    logs.push(t.log.clone());
                    (
                        format!("{seed}/ft/{src:?}/{losses:?}"),
                        t.checkpoint.params,
                        logs,
                        pre.map(|p| p.checkpoint.params),
                    )
                }
                Recipe::Joint => {
                    let t = wb.joint(seed)?;
                    (format!("{seed}/joint"), t.checkpoint.params, vec![t.log], None)
                }
                Recipe::Spliced(src) => {
                    let fsnetc = wb.fsnetc(seed)?;
                    let (seg, df) = match src {
                        None => (fsnetc.params.clone(), None),
                        Some(s) => {
                            let pre = wb.encoder_net(seed, *s)?.expect("pre-trained source");
                            (
                                splice_encoder(&pre.checkpoint.params, &fsnetc.params)?,
                                Some(pre.checkpoint.params),
                            )
                        }
                    };
                    (format!("{seed}/splice/{src:?}"), seg, Vec::new(), df)
                }
            };
            let v = wb.score(&key, &seg)?;
            for (m, x) in v.into_iter().enumerate() {
                values[m].push(x);
            }
            if si == 0 {
                for log in logs {
                    curves.push((format!("{label}/{}", log.phase), log));
                }
                showcase = Some(Showcase {
                    label: label.to_string(),
                    seg,
                    dfnet: df,
                });
            }
        }
        table.rows.push(AblationRow {
            label: label.to_string(),
            seeds: spec.seeds.clone(),
            values,
        });
    }
    Ok(AblationReport {
        table,
        curves,
        showcase,
    })
}

/// Parses `1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid seed `{t}` in `{s}`")))
        })
        .collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}
