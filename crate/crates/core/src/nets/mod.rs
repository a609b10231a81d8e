//! Miniature segmentation network and defogging network sharing one encoder.
//!
//! Encoder: stride-2 stem, then four stages, each a stride-2 conv followed by
//! a residual block. Stage `i` (1-based) runs at stride `2^(i+1)`.
//!
//! Parameter names under `encoder.` are identical for both networks, which is
//! what makes [`splice_encoder`] total.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogsim::Raster;
use crate::tensor::{Graph, Tensor, Var};

pub use checkpoint::{params_id, write_atomic, Checkpoint, CheckpointMeta, NetKind};
pub use params::{Binding, ParamSet, ENCODER_PREFIX};

use params::{add_conv, add_residual, conv, residual, Init};

/// Init scale of the defogging Out Block relative to He-normal.
const OUT_GAIN: f32 = 0.1;

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderDepth {
    #[default]
    Light,
    Heavy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub n_stages: usize,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub decoder_depth: DecoderDepth,
    /// Output channels of the defogging head: 3 for RGB, 1 for depth.
    pub dfnet_out_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_stages: 4,
            stage_channels: vec![16, 32, 64, 128],
            num_classes: 5,
            decoder_depth: DecoderDepth::Light,
            dfnet_out_channels: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages != 4 {
            return Err(Error::Config(format!("n_stages must be 4, got {}", self.n_stages)));
        }
        if self.stage_channels.len() != self.n_stages {
            return Err(Error::Config(format!(
                "stage_channels has {} entries, expected {}",
                self.stage_channels.len(),
                self.n_stages
            )));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "stage_channels must be positive and strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if !matches!(self.dfnet_out_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "dfnet_out_channels must be 1 or 3, got {}",
                self.dfnet_out_channels
            )));
        }
        Ok(())
    }

    fn stem_channels(&self) -> usize {
        self.stage_channels[0]
    }

    /// Input channels of stage `i` (0-based).
    fn stage_in(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_channels()
        } else {
            self.stage_channels[i - 1]
        }
    }
}

fn stage_name(i: usize) -> String {
    format!("encoder.stage{}", i + 1)
}

fn build_encoder(cfg: &ArchConfig, p: &mut ParamSet, init: &mut Init) -> Result<()> {
    add_conv(p, init, "encoder.stem", cfg.stem_channels(), 3, 3, 1.0)?;
    for i in 0..cfg.n_stages {
        let name = stage_name(i);
        let c = cfg.stage_channels[i];
        add_conv(p, init, &format!("{name}.down"), c, cfg.stage_in(i), 3, 1.0)?;
        add_residual(p, init, &format!("{name}.res"), c)?;
    }
    Ok(())
}

/// Encoder activations: the stride-2 stem and the four stage outputs.
#[derive(Clone)]
pub struct EncoderVars {
    pub input: Var,
    pub stem: Var,
    pub stages: Vec<Var>,
}

fn check_input(g: &Graph<f32>, x: Var, channels: usize) -> Result<()> {
    let t = g.value(x);
    let (_, c, h, w) = t.dims4()?;
    if c != channels {
        return Err(Error::dim(format!("network input needs {channels} channels, got {c}")));
    }
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::dim(format!(
            "input size {h}x{w} must be a nonzero multiple of {INPUT_MULTIPLE}"
        )));
    }
    if !t.all_finite() {
        return Err(Error::NumericInput("network input contains non-finite values".into()));
    }
    Ok(())
}

pub fn encoder_graph(g: &mut Graph<f32>, b: &Binding, cfg: &ArchConfig, x: Var) -> Result<EncoderVars> {
    check_input(g, x, 3)?;
    let stem = conv(g, b, "encoder.stem", x, 2, true)?;
    let mut h = stem;
    let mut stages = Vec::with_capacity(cfg.n_stages);
    for i in 0..cfg.n_stages {
        let name = stage_name(i);
        h = conv(g, b, &format!("{name}.down"), h, 2, true)?;
        h = residual(g, b, &format!("{name}.res"), h)?;
        stages.push(h);
    }
    Ok(EncoderVars { input: x, stem, stages })
}

// ---- segmentation network -------------------------------------------------

/// Fresh segmentation network. The logit head starts at zero, so the initial
/// class posterior is uniform.
pub fn build_segnet(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut p = ParamSet::new();
    build_encoder(cfg, &mut p, &mut init)?;
    build_seg_decoder(cfg, &mut p, &mut init)?;
    Ok(p)
}

/// Decoder parameters only, initialized from `seed`.
pub fn build_seg_decoder_params(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    let full = build_segnet(cfg, seed)?;
    Ok(ParamSet::from_iter(
        full.iter()
            .filter(|(n, _)| !n.starts_with(ENCODER_PREFIX))
            .map(|(n, t)| (n.to_string(), t.clone())),
    ))
}

fn build_seg_decoder(cfg: &ArchConfig, p: &mut ParamSet, init: &mut Init) -> Result<()> {
    let n = cfg.n_stages;
    let top = cfg.stage_channels[n - 1];
    add_conv(p, init, &format!("decoder.fuse{n}"), top, top, 3, 1.0)?;
    for i in (0..n - 1).rev() {
        let c = cfg.stage_channels[i];
        add_conv(p, init, &format!("decoder.proj{}", i + 1), c, cfg.stage_channels[i + 1], 1, 1.0)?;
        add_conv(p, init, &format!("decoder.fuse{}", i + 1), c, c, 3, 1.0)?;
    }
    let c0 = cfg.stem_channels();
    add_conv(p, init, "decoder.proj0", c0, cfg.stage_channels[0], 1, 1.0)?;
    add_conv(p, init, "decoder.fuse0", c0, c0, 3, 1.0)?;
    add_conv(p, init, "decoder.head", cfg.num_classes, c0, 1, 0.0)
}

/// Graph handles of one segmentation forward pass.
pub struct SegVars {
    pub logits: Var,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

/// Top-down fusion: `d_n = conv(e_n)`, `d_i = conv(e_i + up(proj(d_{i+1})))`,
/// then a stride-2 fusion with the stem, a 1x1 head and a final 2x upsample.
/// Decoder level `i` has the same shape as encoder stage `i`.
pub fn seg_graph(g: &mut Graph<f32>, b: &Binding, cfg: &ArchConfig, x: Var) -> Result<SegVars> {
    let enc = encoder_graph(g, b, cfg, x)?;
    seg_decoder_graph(g, b, cfg, enc)
}

/// Segmentation decoder on precomputed encoder activations.
pub fn seg_decoder_graph(g: &mut Graph<f32>, b: &Binding, cfg: &ArchConfig, enc: EncoderVars) -> Result<SegVars> {
    let n = cfg.n_stages;
    let mut decoder = vec![enc.stages[n - 1]; n];
    let mut d = conv(g, b, &format!("decoder.fuse{n}"), enc.stages[n - 1], 1, true)?;
    decoder[n - 1] = d;
    for i in (0..n - 1).rev() {
        let up = topdown(g, b, &format!("decoder.proj{}", i + 1), d)?;
        let s = g.add(enc.stages[i], up)?;
        d = conv(g, b, &format!("decoder.fuse{}", i + 1), s, 1, true)?;
        decoder[i] = d;
    }
    let up = topdown(g, b, "decoder.proj0", d)?;
    let s = g.add(enc.stem, up)?;
    let d0 = conv(g, b, "decoder.fuse0", s, 1, true)?;
    let head = conv(g, b, "decoder.head", d0, 1, false)?;
    let logits = g.upsample_nearest(head, 2)?;
    Ok(SegVars {
        logits,
        encoder: enc.stages,
        decoder,
    })
}

fn topdown(g: &mut Graph<f32>, b: &Binding, name: &str, d: Var) -> Result<Var> {
    let p = conv(g, b, name, d, 1, false)?;
    g.upsample_nearest(p, 2)
}

/// Per-stage activations, shallow to deep.
pub type FeaturePyramid = Vec<Tensor<f32>>;

/// Forward results as plain values; logits are `[N, K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    pub logits: Tensor<f32>,
    pub encoder_feats: FeaturePyramid,
    pub decoder_feats: FeaturePyramid,
}

impl SegOutput {
    /// Argmax class per pixel of batch item `n`.
    pub fn predict(&self, n: usize) -> Result<crate::fogsim::LabelMap> {
        argmax_labels(&self.logits, n)
    }
}

pub fn argmax_labels(logits: &Tensor<f32>, n: usize) -> Result<crate::fogsim::LabelMap> {
    let (bn, k, h, w) = logits.dims4()?;
    if n >= bn {
        return Err(Error::dim(format!("batch index {n} out of {bn}")));
    }
    let p = h * w;
    let base = n * k * p;
    let d = logits.data();
    let labels = (0..p)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * p + px] > d[base + best * p + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    crate::fogsim::LabelMap::new(h, w, labels)
}

/// Segmentation forward on a batch tensor `[N, 3, H, W]`.
pub fn seg_forward_tensor(params: &ParamSet, cfg: &ArchConfig, x: &Tensor<f32>) -> Result<SegOutput> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = seg_graph(&mut g, &b, cfg, xv)?;
    Ok(SegOutput {
        logits: g.value(out.logits).clone(),
        encoder_feats: out.encoder.iter().map(|&v| g.value(v).clone()).collect(),
        decoder_feats: out.decoder.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

pub fn seg_forward(params: &ParamSet, cfg: &ArchConfig, image: &Raster) -> Result<SegOutput> {
    seg_forward_tensor(params, cfg, &image.to_tensor())
}

// ---- defogging network ----------------------------------------------------

/// Fresh defogging network: shared encoder, four Up Blocks mirroring the
/// encoder widths, and a sigmoid-bounded Out Block.
pub fn build_dfnet(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut p = ParamSet::new();
    build_encoder(cfg, &mut p, &mut init)?;
    let n = cfg.n_stages;
    for i in (0..n).rev() {
        let name = format!("decoder.up{}", i + 1);
        let (ci, co) = (cfg.stage_channels[i], cfg.stage_in(i));
        p.insert(format!("{name}.deconv.weight"), init.deconv(ci, co))?;
        p.insert(format!("{name}.deconv.bias"), Tensor::zeros([co]))?;
        add_conv(&mut p, &mut init, &format!("{name}.conv"), co, co, 3, 1.0)?;
        if cfg.decoder_depth == DecoderDepth::Heavy {
            for r in 1..=3 {
                add_residual(&mut p, &mut init, &format!("{name}.res{r}"), co)?;
            }
        }
    }
    add_conv(&mut p, &mut init, "decoder.out", cfg.dfnet_out_channels, cfg.stem_channels(), 3, OUT_GAIN)?;
    Ok(p)
}

/// Graph handles of one defogging forward pass.
pub struct DfnetVars {
    pub output: Var,
    pub encoder: Vec<Var>,
}

/// Up Block `i`: `conv(relu(deconv(h)) + skip)`, where the skip is the
/// encoder activation at the block's output resolution. The RGB Out Block
/// computes `sigmoid(conv(h) + logit(x))`; the input term carries no gradient.
pub fn dfnet_graph(g: &mut Graph<f32>, b: &Binding, cfg: &ArchConfig, x: Var) -> Result<DfnetVars> {
    let enc = encoder_graph(g, b, cfg, x)?;
    dfnet_decoder_graph(g, b, cfg, enc)
}

/// Defogging decoder on precomputed encoder activations.
pub fn dfnet_decoder_graph(g: &mut Graph<f32>, b: &Binding, cfg: &ArchConfig, enc: EncoderVars) -> Result<DfnetVars> {
    let n = cfg.n_stages;
    let mut h = enc.stages[n - 1];
    for i in (0..n).rev() {
        let name = format!("decoder.up{}", i + 1);
        let w = b.var(&format!("{name}.deconv.weight"))?;
        let bias = b.var(&format!("{name}.deconv.bias"))?;
        let up = g.conv_transpose2x2(h, w, Some(bias))?;
        let up = g.relu(up);
        let skip = if i == 0 { enc.stem } else { enc.stages[i - 1] };
        let s = g.add(up, skip)?;
        h = conv(g, b, &format!("{name}.conv"), s, 1, true)?;
        if cfg.decoder_depth == DecoderDepth::Heavy {
            for r in 1..=3 {
                h = residual(g, b, &format!("{name}.res{r}"), h)?;
            }
        }
    }
    let h = g.upsample_nearest(h, 2)?;
    let mut out = conv(g, b, "decoder.out", h, 1, false)?;
    if cfg.dfnet_out_channels == 3 {
        // The RGB head predicts a correction to the input in logit space.
        let base = g.value(enc.input).map(logit);
        let base = g.constant(base);
        out = g.add(out, base)?;
    }
    let output = g.sigmoid(out);
    Ok(DfnetVars {
        output,
        encoder: enc.stages,
    })
}

fn logit(v: f32) -> f32 {
    let v = v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (v / (1.0 - v)).ln()
}

const LOGIT_EPS: f32 = 1.0 / 512.0;

/// Defogging forward on a batch tensor; returns the `[N, C, H, W]` output.
pub fn dfnet_forward_tensor(
    params: &ParamSet,
    cfg: &ArchConfig,
    x: &Tensor<f32>,
) -> Result<(Tensor<f32>, FeaturePyramid)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = dfnet_graph(&mut g, &b, cfg, xv)?;
    let feats = out.encoder.iter().map(|&v| g.value(v).clone()).collect();
    Ok((g.value(out.output).clone(), feats))
}

pub fn dfnet_forward(params: &ParamSet, cfg: &ArchConfig, foggy: &Raster) -> Result<(Raster, FeaturePyramid)> {
    if cfg.dfnet_out_channels != 3 {
        return Err(Error::Config("dfnet_forward needs an RGB output head".into()));
    }
    let (out, feats) = dfnet_forward_tensor(params, cfg, &foggy.to_tensor())?;
    Ok((Raster::from_tensor(&out, 0)?, feats))
}

/// `target` with every `encoder.` parameter taken from `source`.
pub fn splice_encoder(source: &ParamSet, target: &ParamSet) -> Result<ParamSet> {
    let mut out = target.clone();
    for name in target.encoder_names() {
        let want = target.get(name).expect("name from target");
        let src = source.get(name).ok_or_else(|| Error::Splice {
            name: name.to_string(),
            reason: "missing from source".into(),
        })?;
        if src.shape() != want.shape() {
            return Err(Error::Splice {
                name: name.to_string(),
                reason: format!("source shape {:?} vs target {:?}", src.shape(), want.shape()),
            });
        }
        *out.get_mut(name).expect("name from target") = src.clone();
    }
    Ok(out)
}

impl FromIterator<(String, Tensor<f32>)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<f32>)>>(iter: I) -> Self {
        let mut p = ParamSet::new();
        for (k, v) in iter {
            p.insert(k, v).expect("unique names");
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |i| ((i * 37 % 101) as f32) / 101.0)
    }

    #[test]
    fn segnet_shapes() {
        let cfg = ArchConfig::default();
        let p = build_segnet(&cfg, 1).unwrap();
        let out = seg_forward_tensor(&p, &cfg, &input(64, 64)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 5, 64, 64]);
        for (i, (e, d)) in out.encoder_feats.iter().zip(&out.decoder_feats).enumerate() {
            let s = 64 >> (i + 2);
            assert_eq!(e.shape(), &[1, cfg.stage_channels[i], s, s]);
            assert_eq!(d.shape(), e.shape());
        }
        // Zero head: every class gets the same logit.
        assert!(out.logits.data().iter().all(|&v| v == out.logits.data()[0]));
    }

    #[test]
    fn dfnet_shapes_and_names() {
        let cfg = ArchConfig::default();
        let seg = build_segnet(&cfg, 1).unwrap();
        let df = build_dfnet(&cfg, 2).unwrap();
        let a: Vec<_> = seg.encoder_names().collect();
        let b: Vec<_> = df.encoder_names().collect();
        assert_eq!(a, b);
        let (out, feats) = dfnet_forward_tensor(&df, &cfg, &input(64, 32)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 32]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(feats.len(), 4);
        let heavy = build_dfnet(
            &ArchConfig {
                decoder_depth: DecoderDepth::Heavy,
                ..cfg
            },
            2,
        )
        .unwrap();
        assert!(heavy.num_scalars() > df.num_scalars());
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = ArchConfig::default();
        let p = build_segnet(&cfg, 1).unwrap();
        assert!(matches!(seg_forward_tensor(&p, &cfg, &input(48, 64)), Err(Error::Dimension(_))));
        let mut x = input(32, 32);
        x.data_mut()[5] = f32::NAN;
        assert!(matches!(seg_forward_tensor(&p, &cfg, &x), Err(Error::NumericInput(_))));
    }

    #[test]
    fn splice_errors_name_parameter() {
        let cfg = ArchConfig::default();
        let seg = build_segnet(&cfg, 1).unwrap();
        let small = build_segnet(
            &ArchConfig {
                stage_channels: vec![8, 16, 32, 64],
                ..cfg
            },
            1,
        )
        .unwrap();
        match splice_encoder(&small, &seg) {
            Err(Error::Splice { name, .. }) => assert!(name.starts_with("encoder.")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
