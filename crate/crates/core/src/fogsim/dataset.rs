use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::raster::{DepthMap, LabelMap, Raster};
use super::scene::{airlight_field, apply_fog, apply_fog_field, gen_scene, SceneConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Dataset partitions. `RealFog*` emulate the unlabeled target domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    RealFog,
    RealFogTest,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Val, Split::Test, Split::RealFog, Split::RealFogTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::RealFog => "real_fog",
            Split::RealFogTest => "real_fog_test",
        }
    }

    pub fn is_real_fog(self) -> bool {
        matches!(self, Split::RealFog | Split::RealFogTest)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub real_fog: usize,
    pub real_fog_test: usize,
    pub synthetic_beta: Range,
    pub real_beta: Range,
    pub synthetic_airlight: Range,
    pub real_airlight: Range,
    /// Half-width of the low-frequency airlight variation in the real-fog domain.
    pub real_airlight_jitter: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            scene: SceneConfig::default(),
            train: 200,
            val: 20,
            test: 50,
            real_fog: 100,
            real_fog_test: 50,
            synthetic_beta: Range::new(0.02, 0.06),
            real_beta: Range::new(0.08, 0.16),
            synthetic_airlight: Range::new(0.8, 0.95),
            real_airlight: Range::new(0.75, 0.9),
            real_airlight_jitter: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::RealFog => self.real_fog,
            Split::RealFogTest => self.real_fog_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for (name, r) in [("synthetic_beta", self.synthetic_beta), ("real_beta", self.real_beta)] {
            if !(r.lo >= 0.0 && r.hi >= r.lo) {
                return Err(Error::Config(format!("{name} range invalid: {r:?}")));
            }
        }
        if self.synthetic_beta.overlaps(&self.real_beta) {
            return Err(Error::Config("synthetic and real-fog beta ranges must be disjoint".into()));
        }
        for (name, r) in [("synthetic_airlight", self.synthetic_airlight), ("real_airlight", self.real_airlight)] {
            if !(0.0 <= r.lo && r.lo <= r.hi && r.hi <= 1.0) {
                return Err(Error::Config(format!("{name} range must lie in [0, 1]: {r:?}")));
            }
        }
        if !(0.0..=0.5).contains(&self.real_airlight_jitter) {
            return Err(Error::Config("real_airlight_jitter must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    fn sample_seed(&self, split: Split, index: usize) -> u64 {
        let mut z = self.seed ^ split.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).rotate_left(17);
        z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        z ^ (z >> 33)
    }
}

/// Low-frequency airlight variation recorded so the fog can be regenerated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AirlightJitter {
    pub seed: u64,
    pub amplitude: f32,
}

/// One paired record.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub split: Split,
    /// Withheld (`None`) for real-fog splits outside evaluation mode.
    pub clean: Option<Raster>,
    pub fog: Raster,
    pub depth: DepthMap,
    pub label: Option<LabelMap>,
    pub beta: f32,
    pub airlight: f32,
    pub jitter: Option<AirlightJitter>,
}

impl SceneSample {
    /// Regenerates a sample from the dataset seed.
    pub fn generate(cfg: &DatasetConfig, split: Split, index: usize) -> Result<Self> {
        let seed = cfg.sample_seed(split, index);
        let (clean, depth, label) = gen_scene(seed, &cfg.scene)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00F0_6F06);
        let (beta_r, air_r) = if split.is_real_fog() {
            (cfg.real_beta, cfg.real_airlight)
        } else {
            (cfg.synthetic_beta, cfg.synthetic_airlight)
        };
        let beta = beta_r.sample(&mut rng);
        let airlight = air_r.sample(&mut rng);
        let jitter = (split.is_real_fog() && cfg.real_airlight_jitter > 0.0).then(|| AirlightJitter {
            seed: rng.random(),
            amplitude: cfg.real_airlight_jitter,
        });
        let mut sample = SceneSample {
            id: format!("{}_{index:05}", split.name()),
            split,
            fog: clean.clone(),
            clean: Some(clean),
            depth,
            label: Some(label),
            beta,
            airlight,
            jitter,
        };
        sample.fog = sample.refog()?;
        Ok(sample)
    }

    /// Recomputes the stored foggy raster from clean/depth/beta/airlight,
    /// quantized to the 8-bit storage levels.
    pub fn refog(&self) -> Result<Raster> {
        let clean = self
            .clean
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{}: clean raster withheld", self.id)))?;
        let fog = match self.jitter {
            None => apply_fog(clean, &self.depth, self.beta, self.airlight)?,
            Some(j) => {
                let field = airlight_field(j.seed, clean.height(), clean.width(), self.airlight, j.amplitude);
                apply_fog_field(clean, &self.depth, self.beta, &field)?
            }
        };
        Ok(fog.quantized())
    }

    pub fn labels_visible(&self) -> bool {
        !self.split.is_real_fog()
    }

    /// The sample as training code may see it: clean raster and labels are
    /// dropped when the split hides them.
    pub fn training_view(&self) -> SceneSample {
        let mut s = self.clone();
        if !s.labels_visible() {
            s.clean = None;
            s.label = None;
        }
        s
    }

    pub fn clean(&self) -> Result<&Raster> {
        self.clean
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{}: clean raster is withheld", self.id)))
    }

    pub fn label(&self) -> Result<&LabelMap> {
        self.label
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{}: labels are withheld", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub clean: String,
    pub fog: String,
    pub label: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub beta: f32,
    pub airlight: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airlight_jitter: Option<AirlightJitter>,
    pub labels_visible: bool,
    pub files: SampleFiles,
    /// SHA-256 of each file, keyed like `files`.
    pub sha256: SampleFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha_hex(bytes))
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Generates every split and writes rasters, depth, labels and the manifest.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut samples = Vec::new();
    for split in Split::ALL {
        let count = cfg.count(split);
        if count == 0 {
            continue;
        }
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..count {
            let s = SceneSample::generate(cfg, split, index)?;
            let files = SampleFiles {
                clean: format!("{}/{}.clean.png", split.name(), s.id),
                fog: format!("{}/{}.fog.png", split.name(), s.id),
                label: format!("{}/{}.label.png", split.name(), s.id),
                depth: format!("{}/{}.depth.f32", split.name(), s.id),
            };
            s.clean()?.save_png(&out_dir.join(&files.clean))?;
            s.fog.save_png(&out_dir.join(&files.fog))?;
            s.label()?.save_png(&out_dir.join(&files.label))?;
            let depth_sha = write_file(&out_dir.join(&files.depth), &s.depth.to_le_bytes())?;
            let sha256 = SampleFiles {
                clean: file_sha(&out_dir.join(&files.clean))?,
                fog: file_sha(&out_dir.join(&files.fog))?,
                label: file_sha(&out_dir.join(&files.label))?,
                depth: depth_sha,
            };
            samples.push(ManifestEntry {
                id: s.id.clone(),
                split,
                beta: s.beta,
                airlight: s.airlight,
                airlight_jitter: s.jitter,
                labels_visible: s.labels_visible(),
                files,
                sha256,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        height: cfg.scene.height,
        width: cfg.scene.width,
        num_classes: cfg.scene.num_classes,
        config: cfg.clone(),
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, manifest.to_json()?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Whether withheld fields may be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    /// Honors `labels_visible = false` by withholding clean rasters and labels.
    Training,
    /// Reads everything (metrics need the ground truth).
    Evaluation,
}

/// A dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

/// Opens a dataset directory and validates its manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Integrity {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Integrity {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Integrity {
            path,
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.entries(split).count()
    }

    fn read_checked(&self, rel: &str, sha: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(Error::Integrity {
                path,
                reason: "file referenced by manifest is missing".into(),
            });
        }
        let actual = file_sha(&path)?;
        if actual != sha {
            return Err(Error::Integrity {
                path,
                reason: "checksum mismatch".into(),
            });
        }
        Ok(path)
    }

    /// Reads one manifest entry.
    pub fn read(&self, entry: &ManifestEntry, access: Access) -> Result<SceneSample> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        let reveal = entry.labels_visible || access == Access::Evaluation;
        let fog = Raster::load_png(&self.read_checked(&entry.files.fog, &entry.sha256.fog)?)?;
        let depth_path = self.read_checked(&entry.files.depth, &entry.sha256.depth)?;
        let depth = DepthMap::from_le_bytes(h, w, &fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?)?;
        let clean = if reveal {
            Some(Raster::load_png(&self.read_checked(&entry.files.clean, &entry.sha256.clean)?)?)
        } else {
            None
        };
        let label = if reveal {
            Some(LabelMap::load_png(&self.read_checked(&entry.files.label, &entry.sha256.label)?)?)
        } else {
            None
        };
        for (name, ok) in [
            ("fog", fog.height() == h && fog.width() == w),
            ("clean", clean.as_ref().is_none_or(|c| c.height() == h && c.width() == w)),
            ("label", label.as_ref().is_none_or(|l| l.height() == h && l.width() == w)),
        ] {
            if !ok {
                return Err(Error::Integrity {
                    path: self.root.join(&entry.files.fog),
                    reason: format!("{name} size differs from manifest {h}x{w}"),
                });
            }
        }
        Ok(SceneSample {
            id: entry.id.clone(),
            split: entry.split,
            clean,
            fog,
            depth,
            label,
            beta: entry.beta,
            airlight: entry.airlight,
            jitter: entry.airlight_jitter,
        })
    }

    /// Samples of a split in manifest order.
    pub fn iter(&self, split: Split, access: Access) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        self.manifest.entries(split).map(move |e| self.read(e, access))
    }

    pub fn load_split(&self, split: Split, access: Access) -> Result<Vec<SceneSample>> {
        self.iter(split, access).collect()
    }
}

/// Builds a split in memory without touching the filesystem.
pub fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    (0..cfg.count(split)).map(|i| SceneSample::generate(cfg, split, i)).collect()
}
