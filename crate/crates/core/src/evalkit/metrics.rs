use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogsim::{LabelMap, Raster, SceneSample};
use crate::losses::IGNORE;
use crate::nets::{argmax_labels, seg_forward_tensor, ArchConfig, ParamSet};
use crate::tensor::Tensor;

/// `K x K` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(format!("confusion sizes {} vs {}", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Accumulates one prediction/ground-truth pair.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k {
                return Err(Error::Range(format!("predicted class {p} >= {}", self.k)));
            }
            if g >= self.k {
                return Err(Error::Range(format!("ground-truth class {g} >= {}", self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class is absent from both.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
                let fp: u64 = (0..self.k).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Degenerate("empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok(cm)
}

/// Mean IoU over classes present in prediction or ground truth.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::Degenerate("empty confusion matrix".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for `[0, 1]` images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// True when the images were identical and `db` is [`PSNR_CAP`].
    pub capped: bool,
}

pub fn psnr(a: &Raster, b: &Raster) -> Result<Psnr> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::dim("psnr needs equal raster sizes"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 {
        Psnr {
            db: PSNR_CAP,
            capped: true,
        }
    } else {
        Psnr {
            db: (10.0 * (1.0 / mse).log10()).min(PSNR_CAP),
            capped: false,
        }
    })
}

/// Which image of each sample a segmentation evaluation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalInput {
    Fog,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub images: usize,
}

/// Segmentation metrics over `samples`; labels must be present.
pub fn evaluate(seg: &ParamSet, arch: &ArchConfig, samples: &[SceneSample], input: EvalInput) -> Result<Metrics> {
    evaluate_with(seg, arch, samples, input, |x| Ok(x.clone()))
}

/// As [`evaluate`], with a preprocessing step applied to each input batch.
pub fn evaluate_with(
    seg: &ParamSet,
    arch: &ArchConfig,
    samples: &[SceneSample],
    input: EvalInput,
    prep: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no samples to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::new(arch.num_classes);
    for chunk in samples.chunks(16) {
        let mut xs = Vec::with_capacity(chunk.len());
        for s in chunk {
            let r = match input {
                EvalInput::Fog => &s.fog,
                EvalInput::Clean => s.clean()?,
            };
            xs.push(r.to_tensor());
        }
        let x = prep(&Tensor::stack_batch(&xs)?)?;
        let out = seg_forward_tensor(seg, arch, &x)?;
        for (i, s) in chunk.iter().enumerate() {
            cm.add(&argmax_labels(&out.logits, i)?, s.label()?)?;
        }
    }
    Ok(Metrics {
        miou: miou(&cm)?,
        class_iou: cm.class_iou(),
        pixel_accuracy: cm.pixel_accuracy()?,
        images: samples.len(),
    })
}
