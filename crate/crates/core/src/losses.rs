//! Training objectives.
//!
//! * `dct_loss` aligns the defogging encoder's per-stage features on a foggy
//!   frame with the frozen clean-weather encoder's features on the paired
//!   clean frame.
//! * `sed_loss` pushes the frozen segmentation network's decoder features and
//!   logits on the defogged frame toward those on the clean frame.
//! * `cross_entropy`, `kl_consistency` and `finetune_total` make up the
//!   fine-tuning objective.
//! * `l1_pixel_loss` is the plain pixel-space defogging baseline.
//!
//! Feature similarity is the element-mean absolute difference; multi-stage
//! losses take the mean per stage and then sum over stages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::log_softmax_channels;
use crate::tensor::{Graph, Real, ScalarOp, Tensor, Var};

/// Label value excluded from supervision and evaluation.
pub const IGNORE: u8 = 255;

/// Probability floor used inside the KL divergence.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel class labels for a batch, laid out `[n, h, w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::dim(format!(
                "labels: {} values for {batch}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Labels {
            batch,
            height,
            width,
            data,
        })
    }
}

/// Which posterior acts as the reference distribution in the consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(p_clean || p_fog): the clean branch is the teacher.
    #[default]
    CleanReference,
    /// KL(p_fog || p_clean).
    FogReference,
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

struct MeanAbsDiff;

impl<T: Real> ScalarOp<T> for MeanAbsDiff {
    fn backward(&self, inputs: &[&Tensor<T>], upstream: T, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let scale = upstream / T::of(a.len() as f64);
        let ga = Tensor::from_fn(a.shape().to_vec(), |i| {
            let d = a.data()[i] - b.data()[i];
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        });
        let gb = need[1].then(|| ga.map(|v| -v));
        vec![need[0].then_some(ga), gb]
    }
}

/// Mean over all elements of `|a - b|`.
pub fn l1_similarity<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "l1_similarity")?;
    let (va, vb) = (g.value(a), g.value(b));
    if va.is_empty() {
        return Err(Error::dim("l1_similarity of empty arrays"));
    }
    let sum: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
    let value = sum / T::of(va.len() as f64);
    Ok(g.custom_scalar(&[a, b], value, Box::new(MeanAbsDiff)))
}

fn pyramid_l1<T: Real>(g: &mut Graph<T>, a: &[Var], b: &[Var], what: &str) -> Result<Vec<Var>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "{what}: pyramids have {} and {} stages",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            same_shape(g, x, y, what)?;
            l1_similarity(g, x, y)
        })
        .collect()
}

/// Encoder feature alignment: `sum_i l1(e_def[i], e_cl[i])`.
///
/// `e_cl` should come from the frozen network so that only the defogging
/// branch receives gradient.
pub fn dct_loss<T: Real>(g: &mut Graph<T>, e_def: &[Var], e_cl: &[Var]) -> Result<Var> {
    let terms = pyramid_l1(g, e_def, e_cl, "dct_loss")?;
    g.sum(&terms)
}

/// Segmentation-enhanced defogging:
/// `sum_i l1(d_def[i], d_cl[i]) + l1(s_def, s_cl)` on raw logits.
pub fn sed_loss<T: Real>(
    g: &mut Graph<T>,
    d_def: &[Var],
    d_cl: &[Var],
    s_def: Var,
    s_cl: Var,
) -> Result<Var> {
    let mut terms = pyramid_l1(g, d_def, d_cl, "sed_loss")?;
    same_shape(g, s_def, s_cl, "sed_loss logits")?;
    terms.push(l1_similarity(g, s_def, s_cl)?);
    g.sum(&terms)
}

/// Mean absolute pixel difference between a defogged and a clean image.
pub fn l1_pixel_loss<T: Real>(g: &mut Graph<T>, defogged: Var, clean: Var) -> Result<Var> {
    same_shape(g, defogged, clean, "l1_pixel_loss")?;
    l1_similarity(g, defogged, clean)
}

struct CrossEntropyOp {
    labels: Vec<u8>,
    valid: usize,
}

impl<T: Real> ScalarOp<T> for CrossEntropyOp {
    fn backward(&self, inputs: &[&Tensor<T>], upstream: T, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !need[0] {
            return vec![None];
        }
        let logits = inputs[0];
        let (n, k, h, w) = logits.dims4().expect("checked in forward");
        let p = h * w;
        let mut grad = log_softmax_channels(logits).expect("checked in forward");
        let scale = upstream / T::of(self.valid as f64);
        let data = grad.data_mut();
        for b in 0..n {
            for px in 0..p {
                let label = self.labels[b * p + px];
                for c in 0..k {
                    let idx = (b * k + c) * p + px;
                    data[idx] = if label == IGNORE {
                        T::zero()
                    } else {
                        let onehot = if c == label as usize { T::one() } else { T::zero() };
                        (data[idx].exp() - onehot) * scale
                    };
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Pixel-wise cross-entropy averaged over non-ignored pixels.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &Labels) -> Result<Var> {
    let (n, k, h, w) = g.value(logits).dims4()?;
    if (labels.batch, labels.height, labels.width) != (n, h, w) {
        return Err(Error::dim(format!(
            "cross_entropy: logits {:?} vs labels {}x{}x{}",
            g.value(logits).shape(),
            labels.batch,
            labels.height,
            labels.width
        )));
    }
    let ls = log_softmax_channels(g.value(logits))?;
    let p = h * w;
    let mut total = T::zero();
    let mut valid = 0usize;
    for b in 0..n {
        for px in 0..p {
            let label = labels.data[b * p + px];
            if label == IGNORE {
                continue;
            }
            if label as usize >= k {
                return Err(Error::Range(format!("label {label} with {k} classes")));
            }
            total = total - ls.data()[(b * k + label as usize) * p + px];
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Degenerate("cross_entropy: every pixel is ignored".into()));
    }
    let value = total / T::of(valid as f64);
    Ok(g.custom_scalar(
        &[logits],
        value,
        Box::new(CrossEntropyOp {
            labels: labels.data.clone(),
            valid,
        }),
    ))
}

/// `KL(p || q)` for two discrete distributions with the probability floor.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence: length mismatch"));
    }
    let floor = T::of(PROB_FLOOR);
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(floor).ln() - qi.max(floor).ln()))
        .sum())
}

struct KlOp;

impl KlOp {
    fn log_probs<T: Real>(t: &Tensor<T>) -> Tensor<T> {
        let floor = T::of(PROB_FLOOR).ln();
        log_softmax_channels(t).expect("checked in forward").map(|v| v.max(floor))
    }
}

impl<T: Real> ScalarOp<T> for KlOp {
    fn backward(&self, inputs: &[&Tensor<T>], upstream: T, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (reference, target) = (inputs[0], inputs[1]);
        let (n, k, h, w) = reference.dims4().expect("checked in forward");
        let p = h * w;
        let lp = Self::log_probs(reference);
        let lq = Self::log_probs(target);
        let scale = upstream / T::of((n * p) as f64);
        let mut g_ref = need[0].then(|| Tensor::zeros(reference.shape().to_vec()));
        let mut g_tgt = need[1].then(|| Tensor::zeros(target.shape().to_vec()));
        for b in 0..n {
            for px in 0..p {
                let at = |c: usize| (b * k + c) * p + px;
                let mut kl = T::zero();
                for c in 0..k {
                    kl = kl + lp.data()[at(c)].exp() * (lp.data()[at(c)] - lq.data()[at(c)]);
                }
                for c in 0..k {
                    let (pc, qc) = (lp.data()[at(c)].exp(), lq.data()[at(c)].exp());
                    if let Some(gr) = g_ref.as_mut() {
                        gr.data_mut()[at(c)] = scale * pc * (lp.data()[at(c)] - lq.data()[at(c)] - kl);
                    }
                    if let Some(gt) = g_tgt.as_mut() {
                        gt.data_mut()[at(c)] = scale * (qc - pc);
                    }
                }
            }
        }
        vec![g_ref, g_tgt]
    }
}

/// Mean over pixels of the KL divergence between the two branches'
/// posteriors. Gradient flows into both logit tensors.
pub fn kl_consistency<T: Real>(g: &mut Graph<T>, s_def: Var, s_cl: Var, direction: KlDirection) -> Result<Var> {
    same_shape(g, s_def, s_cl, "kl_consistency")?;
    let (reference, target) = match direction {
        KlDirection::CleanReference => (s_cl, s_def),
        KlDirection::FogReference => (s_def, s_cl),
    };
    let (n, k, h, w) = g.value(reference).dims4()?;
    let p = h * w;
    let lp = KlOp::log_probs(g.value(reference));
    let lq = KlOp::log_probs(g.value(target));
    let mut total = T::zero();
    for b in 0..n {
        for c in 0..k {
            let base = (b * k + c) * p;
            for px in 0..p {
                let (a, q) = (lp.data()[base + px], lq.data()[base + px]);
                total = total + a.exp() * (a - q);
            }
        }
    }
    let value = total / T::of((n * p) as f64);
    Ok(g.custom_scalar(&[reference, target], value, Box::new(KlOp)))
}

/// `fog_ce + clean_ce + lambda_con * kl`.
pub fn finetune_total(fog_ce: f32, clean_ce: f32, kl: f32, lambda_con: f32) -> Result<f32> {
    if !(lambda_con >= 0.0) {
        return Err(Error::Domain(format!("lambda_con must be >= 0, got {lambda_con}")));
    }
    Ok(fog_ce + clean_ce + lambda_con * kl)
}

/// Graph form of [`finetune_total`] over whichever terms are enabled.
pub fn finetune_objective<T: Real>(
    g: &mut Graph<T>,
    fog_ce: Option<Var>,
    clean_ce: Option<Var>,
    kl: Option<Var>,
    lambda_con: T,
) -> Result<Var> {
    if lambda_con < T::zero() {
        return Err(Error::Domain("lambda_con must be >= 0".into()));
    }
    let mut terms: Vec<(Var, T)> = Vec::new();
    terms.extend(fog_ce.map(|v| (v, T::one())));
    terms.extend(clean_ce.map(|v| (v, T::one())));
    terms.extend(kl.map(|v| (v, lambda_con)));
    if terms.is_empty() {
        return Err(Error::Config("fine-tuning objective has no enabled terms".into()));
    }
    g.combine(&terms)
}

/// Named scalar losses for one optimization step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dct: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sed: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1_pix: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fog_ce: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_ce: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_con: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_l1: Option<f32>,
    pub total: f32,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 8] = ["dct", "sed", "l1_pix", "fog_ce", "clean_ce", "kl_con", "depth_l1", "total"];

    fn values(&self) -> [Option<f32>; 8] {
        [
            self.dct,
            self.sed,
            self.l1_pix,
            self.fog_ce,
            self.clean_ce,
            self.kl_con,
            self.depth_l1,
            Some(self.total),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f32> {
        Self::COLUMNS
            .iter()
            .position(|&c| c == name)
            .and_then(|i| self.values()[i])
    }

    pub fn is_valid(&self) -> bool {
        self.values().iter().flatten().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn csv_header() -> String {
        let mut s = String::from("iteration,phase");
        for c in Self::COLUMNS {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",lr");
        s
    }

    /// One CSV row; absent losses are empty cells.
    pub fn csv_row(&self, iteration: usize, phase: &str, lr: f64) -> String {
        let mut s = format!("{iteration},{phase}");
        for v in self.values() {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v}");
            }
        }
        let _ = write!(s, ",{lr}");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn l1_hand_computed() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t4([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t4([1, 1, 1, 4], vec![1.0; 4]));
        let ab = l1_similarity(&mut g, a, b).unwrap();
        let ba = l1_similarity(&mut g, b, a).unwrap();
        assert_eq!(g.value(ab).item(), 1.5);
        assert_eq!(g.value(ab).item(), g.value(ba).item());
        let aa = l1_similarity(&mut g, a, a).unwrap();
        assert_eq!(g.value(aa).item(), 0.0);
    }

    #[test]
    fn l1_rejects_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 1, 4]));
        let b = g.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(l1_similarity(&mut g, a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn dct_sums_stage_means() {
        let mut g = Graph::<f64>::new();
        let d0 = g.constant(Tensor::full([1, 2, 2, 2], 0.5));
        let c0 = g.constant(Tensor::zeros([1, 2, 2, 2]));
        let d1 = g.constant(Tensor::full([1, 4, 1, 1], 1.25));
        let c1 = g.constant(Tensor::full([1, 4, 1, 1], 1.0));
        let loss = dct_loss(&mut g, &[d0, d1], &[c0, c1]).unwrap();
        assert!((g.value(loss).item() - 0.75).abs() < 1e-12);
        let same = dct_loss(&mut g, &[d0, d1], &[d0, d1]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        assert!(dct_loss(&mut g, &[d0], &[c0, c1]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros([1, 4, 2, 2]));
        let labels = Labels::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let ce = cross_entropy(&mut g, logits, &labels).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_degenerate() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros([1, 3, 1, 2]));
        let labels = Labels::new(1, 1, 2, vec![IGNORE, IGNORE]).unwrap();
        assert!(matches!(cross_entropy(&mut g, logits, &labels), Err(Error::Degenerate(_))));
        let bad = Labels::new(1, 1, 2, vec![0, 7]).unwrap();
        assert!(matches!(cross_entropy(&mut g, logits, &bad), Err(Error::Range(_))));
    }

    #[test]
    fn kl_bernoulli_closed_form() {
        let kl = kl_divergence(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_direction_swaps_arguments() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t4([1, 2, 1, 1], vec![2.0, 0.0]));
        let b = g.constant(t4([1, 2, 1, 1], vec![0.0, 1.0]));
        let fwd = kl_consistency(&mut g, a, b, KlDirection::CleanReference).unwrap();
        let rev = kl_consistency(&mut g, b, a, KlDirection::FogReference).unwrap();
        assert_eq!(g.value(fwd).item(), g.value(rev).item());
    }

    #[test]
    fn finetune_total_arithmetic() {
        assert!((finetune_total(1.0, 2.0, 5.0, 1e-4).unwrap() - 3.0005).abs() < 1e-6);
        assert_eq!(finetune_total(1.0, 2.0, 5.0, 0.0).unwrap(), 3.0);
        assert!(finetune_total(1.0, 2.0, 5.0, -1.0).is_err());
    }

    #[test]
    fn report_csv_leaves_absent_cells_empty() {
        let r = LossReport {
            dct: Some(0.5),
            total: 0.5,
            ..Default::default()
        };
        assert_eq!(LossReport::csv_header(), "iteration,phase,dct,sed,l1_pix,fog_ce,clean_ce,kl_con,depth_l1,total,lr");
        assert_eq!(r.csv_row(3, "basic", 1e-5), "3,basic,0.5,,,,,,,0.5,0.00001");
        assert!(r.is_valid());
        assert_eq!(r.get("dct"), Some(0.5));
        assert_eq!(r.get("sed"), None);
    }
}
