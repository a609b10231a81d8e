//! Stage orchestration over an output directory. Every stage reads its
//! inputs from disk and writes its outputs atomically, so any stage can be
//! rerun on its own.
//!
//! ```text
//! <root>/data/              dataset (manifest plus per-sample files)
//! <root>/ckpt/<name>.ckpt   checkpoints
//! <root>/logs/<name>.csv    per-step losses (and .json for reloading)
//! <root>/metrics/<name>.csv evaluation results
//! <root>/report/            report files
//! <root>/STATUS             `running` or `complete` for pipeline runs
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::RunConfig;
use crate::curriculum::{generate_pseudo_pairs, pretrain_basic, pretrain_fdm, train_clean_baseline, PairSet, Trained};
use crate::error::{Error, Result};
use crate::evalkit::{
    emit_report, evaluate, AblationReport, AblationRow, AblationTable, EvalInput, Metrics, Preset, Showcase,
};
use crate::finetune::{finetune, fresh_segnet};
use crate::fogsim::{build_dataset, load_dataset, Access, Dataset, Split, CLASS_NAMES, MANIFEST_FILE};
use crate::nets::{build_dfnet, write_atomic, Checkpoint};
use crate::train::TrainLog;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "FOGSEG_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// Version of the metrics CSV layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Output root: explicit flag, then [`OUT_ENV`], then [`DEFAULT_OUT`].
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
    }
}

/// One-line `error kind=<kind> code=<n> msg="<text>"` rendering for stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!(
        "error kind={} code={} msg=\"{}\"",
        e.kind(),
        e.exit_code(),
        msg.replace('\\', "\\\\").replace('"', "\\\"")
    )
}

/// Checkpoint names written by the stages.
pub mod names {
    pub const FSNETC: &str = "fsnetc";
    pub const DFNET_BASIC: &str = "dfnet_basic";
    pub const DFNET_FDM: &str = "dfnet_fdm";
    pub const SEGNET: &str = "segnet";
}

/// Evaluation split and input image pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// Held-out real-fog images.
    FogTest,
    /// Clean images of the synthetic test split.
    CleanTest,
    /// Foggy images of the synthetic test split.
    SyntheticFogTest,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 3] = [EvalSplit::FogTest, EvalSplit::CleanTest, EvalSplit::SyntheticFogTest];

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::FogTest => "fog_test",
            EvalSplit::CleanTest => "clean_test",
            EvalSplit::SyntheticFogTest => "synthetic_fog_test",
        }
    }

    pub fn source(self) -> (Split, EvalInput) {
        match self {
            EvalSplit::FogTest => (Split::RealFogTest, EvalInput::Fog),
            EvalSplit::CleanTest => (Split::Test, EvalInput::Clean),
            EvalSplit::SyntheticFogTest => (Split::Test, EvalInput::Fog),
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalSplit::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown evaluation split `{s}`")))
    }
}

/// Which checkpoint supplies the fine-tuning encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderFrom {
    Scratch,
    Basic,
    #[default]
    Fdm,
}

impl FromStr for EncoderFrom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(EncoderFrom::Scratch),
            "basic" => Ok(EncoderFrom::Basic),
            "fdm" => Ok(EncoderFrom::Fdm),
            _ => Err(Error::Config(format!("unknown encoder source `{s}` (scratch|basic|fdm)"))),
        }
    }
}

/// Metrics CSV with fixed six-decimal formatting.
pub fn metrics_csv(model: &str, rows: &[(EvalSplit, Metrics)]) -> String {
    let mut s = String::from("schema,model,split,images,miou,pixel_accuracy");
    let k = rows.iter().map(|(_, m)| m.class_iou.len()).max().unwrap_or(0);
    for c in 0..k {
        match CLASS_NAMES.get(c) {
            Some(n) => s.push_str(&format!(",iou_{n}")),
            None => s.push_str(&format!(",iou_class{c}")),
        }
    }
    s.push('\n');
    for (split, m) in rows {
        s.push_str(&format!(
            "{METRICS_SCHEMA_VERSION},{model},{split},{},{:.6},{:.6}",
            m.images, m.miou, m.pixel_accuracy
        ));
        for c in 0..k {
            match m.class_iou.get(c).copied().flatten() {
                Some(v) => s.push_str(&format!(",{v:.6}")),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub struct Harness {
    cfg: RunConfig,
    root: PathBuf,
}

impl Harness {
    pub fn new(cfg: RunConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Harness { cfg, root: root.into() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{name}.ckpt"))
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn log_path(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.{ext}"))
    }

    fn ensure_dirs(&self) -> Result<()> {
        for d in ["ckpt", "logs", "metrics"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Writes the dataset unless one with the same configuration exists.
    pub fn gen_data(&self) -> Result<PathBuf> {
        let dir = self.data_dir();
        if dir.join(MANIFEST_FILE).exists() {
            if let Ok(ds) = load_dataset(&dir) {
                if ds.manifest().config == self.cfg.data {
                    return Ok(dir);
                }
            }
        }
        build_dataset(&self.cfg.data, &dir)?;
        Ok(dir)
    }

    /// The dataset on disk; it must match the configured data section.
    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        let ds = load_dataset(&dir)?;
        if ds.manifest().config != self.cfg.data {
            return Err(Error::Config(format!(
                "dataset at {} was generated with a different data configuration; rerun gen-data",
                dir.display()
            )));
        }
        Ok(ds)
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.checkpoint_path(name))
    }

    fn save(&self, name: &str, t: &Trained) -> Result<PathBuf> {
        self.ensure_dirs()?;
        let path = self.checkpoint_path(name);
        t.checkpoint.save(&path)?;
        t.log.write_csv(&self.log_path(name, "csv"))?;
        t.log.save_json(&self.log_path(name, "json"))?;
        Ok(path)
    }

    pub fn train_clean(&self) -> Result<PathBuf> {
        let train = self.dataset()?.load_split(Split::Train, Access::Training)?;
        let t = train_clean_baseline(&train, &self.cfg.arch, &self.cfg.clean, &self.cfg.context())?;
        self.save(names::FSNETC, &t)
    }

    pub fn pretrain_basic(&self) -> Result<PathBuf> {
        let fsnetc = self.load_checkpoint(names::FSNETC)?;
        let train = self.dataset()?.load_split(Split::Train, Access::Training)?;
        let pairs = PairSet::from_samples(&train)?;
        let arch = &self.cfg.arch;
        let t = pretrain_basic(
            build_dfnet(arch, self.cfg.seed)?,
            &fsnetc,
            &pairs,
            arch,
            &self.cfg.pretrain,
            &self.cfg.context(),
        )?;
        self.save(names::DFNET_BASIC, &t)
    }

    pub fn fdm(&self) -> Result<PathBuf> {
        let fsnetc = self.load_checkpoint(names::FSNETC)?;
        let basic = self.load_checkpoint(names::DFNET_BASIC)?;
        let ds = self.dataset()?;
        let synthetic = PairSet::from_samples(&ds.load_split(Split::Train, Access::Training)?)?;
        let real_fog = ds.load_split(Split::RealFog, Access::Training)?;
        let pseudo = generate_pseudo_pairs(&basic, &real_fog)?;
        let t = pretrain_fdm(
            &basic,
            &fsnetc,
            &synthetic,
            &pseudo,
            &real_fog,
            &self.cfg.fdm,
            self.cfg.pretrain.losses,
            self.cfg.pretrain.adam,
            &self.cfg.context(),
        )?;
        self.save(names::DFNET_FDM, &t)
    }

    pub fn finetune(&self, from: EncoderFrom) -> Result<PathBuf> {
        let df = match from {
            EncoderFrom::Scratch => None,
            EncoderFrom::Basic => Some(self.load_checkpoint(names::DFNET_BASIC)?),
            EncoderFrom::Fdm => Some(self.load_checkpoint(names::DFNET_FDM)?),
        };
        let df = df.as_ref().map(|c| &c.params);
        let train = self.dataset()?.load_split(Split::Train, Access::Training)?;
        let ctx = self.cfg.context();
        let seg = fresh_segnet(&self.cfg.arch, df, &ctx)?;
        let t = finetune(seg, &train, &self.cfg.arch, &self.cfg.finetune, df, &ctx)?;
        self.save(names::SEGNET, &t)
    }

    /// Evaluates checkpoint `name` on `splits` and writes
    /// `metrics/<name>_<split>.csv` for a single split or
    /// `metrics/<name>.csv` for several.
    pub fn eval(&self, name: &str, splits: &[EvalSplit]) -> Result<PathBuf> {
        let ckpt = self.load_checkpoint(name)?;
        let ds = self.dataset()?;
        let mut rows = Vec::new();
        for &sp in splits {
            let (split, input) = sp.source();
            let samples = ds.load_split(split, Access::Evaluation)?;
            rows.push((sp, evaluate(&ckpt.params, &ckpt.meta.arch, &samples, input)?));
        }
        self.ensure_dirs()?;
        let path = match splits {
            [one] => self.metrics_path(&format!("{name}_{one}")),
            _ => self.metrics_path(name),
        };
        write_atomic(&path, metrics_csv(name, &rows).as_bytes())?;
        Ok(path)
    }

    /// Report for the pipeline's final model: metrics table, loss curves of
    /// every stage on disk, and overlays on the real-fog test split.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let seg = self.load_checkpoint(names::SEGNET)?;
        let ds = self.dataset()?;
        let mut values = Vec::new();
        for sp in EvalSplit::ALL {
            let (split, input) = sp.source();
            let samples = ds.load_split(split, Access::Evaluation)?;
            values.push(vec![evaluate(&seg.params, &seg.meta.arch, &samples, input)?.miou]);
        }
        let mut curves = Vec::new();
        for n in [names::FSNETC, names::DFNET_BASIC, names::DFNET_FDM, names::SEGNET] {
            let p = self.log_path(n, "json");
            if p.exists() {
                curves.push((n.to_string(), TrainLog::load_json(&p)?));
            }
        }
        let dfnet = [names::DFNET_FDM, names::DFNET_BASIC]
            .iter()
            .map(|n| self.checkpoint_path(n))
            .find(|p| p.exists())
            .map(|p| Checkpoint::load(&p))
            .transpose()?
            .map(|c| c.params);
        let report = AblationReport {
            table: AblationTable {
                preset: Preset::Table2,
                metrics: crate::evalkit::METRICS.iter().map(|m| m.to_string()).collect(),
                rows: vec![AblationRow {
                    label: "pipeline".into(),
                    seeds: vec![self.cfg.seed],
                    values,
                }],
            },
            curves,
            showcase: Some(Showcase {
                label: "pipeline".into(),
                seg: seg.params,
                dfnet,
            }),
        };
        let samples = ds.load_split(Split::RealFogTest, Access::Evaluation)?;
        emit_report(&report, &samples, &self.cfg.arch, &self.cfg.to_json(), &self.report_dir())
    }

    fn status(&self, s: &str) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        write_atomic(&self.root.join("STATUS"), format!("{s}\n").as_bytes())
    }

    /// Runs every stage in order and returns the final metrics CSV path.
    /// `STATUS` stays `running` if a stage fails.
    pub fn pipeline(&self, mut progress: impl FnMut(&str)) -> Result<PathBuf> {
        self.status("running")?;
        let cfg_path = self.root.join("config.toml");
        write_atomic(&cfg_path, self.cfg.to_toml()?.as_bytes())?;
        progress("gen-data");
        self.gen_data()?;
        progress("train-clean");
        self.train_clean()?;
        progress("pretrain-basic");
        self.pretrain_basic()?;
        progress("fdm");
        self.fdm()?;
        progress("finetune");
        self.finetune(EncoderFrom::Fdm)?;
        progress("eval");
        let out = self.eval(names::SEGNET, &EvalSplit::ALL)?;
        self.status("complete")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line() {
        let e = Error::Config("bad\nvalue \"x\"".into());
        let l = error_line(&e);
        assert!(!l.contains('\n'));
        assert!(l.starts_with("error kind=config code=2 msg=\""));
        assert!(l.contains("\\\"x\\\""));
    }

    #[test]
    fn eval_split_names_round_trip() {
        for s in EvalSplit::ALL {
            assert_eq!(s.name().parse::<EvalSplit>().unwrap(), s);
        }
        assert!("nope".parse::<EvalSplit>().is_err());
    }
}
