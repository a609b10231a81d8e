use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{Labels, IGNORE};
use crate::tensor::Tensor;

/// RGB image, `H x W x 3` interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Raster { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Raster {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Raster {
        let data = self.to_bytes().iter().map(|&b| f32::from(b) / 255.0).collect();
        Raster {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Raster::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let p = self.height * self.width;
        Tensor::from_fn([1, 3, self.height, self.width], |i| {
            let (c, px) = (i / p, i % p);
            self.data[px * 3 + c]
        })
    }

    /// Inverse of [`Raster::to_tensor`] for batch item `n`; values are clamped
    /// into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::dim(format!("raster needs 3 channels, got {c}")));
        }
        let item = t.batch_item(n)?;
        let p = h * w;
        let mut data = vec![0.0; p * 3];
        for ch in 0..3 {
            for px in 0..p {
                data[px * 3 + ch] = item.data()[ch * p + px].clamp(0.0, 1.0);
            }
        }
        Raster::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.to_bytes())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, color, bytes) = read_png(path)?;
        if color != png::ColorType::Rgb {
            return Err(Error::Integrity {
                path: path.into(),
                reason: format!("expected RGB image, found {color:?}"),
            });
        }
        Raster::from_bytes(h, w, &bytes)
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel scene distance.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!("depth map {height}x{width} got {} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("depth values must be finite and >= 0, found {bad}")));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Depth scaled into `[0, 1]` by `max_depth`, as a `[1, 1, H, W]` tensor.
    pub fn normalized_tensor(&self, max_depth: f32) -> Tensor<f32> {
        Tensor::from_fn([1, 1, self.height, self.width], |i| (self.data[i] / max_depth).clamp(0.0, 1.0))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 4 {
            return Err(Error::dim(format!("depth payload of {} bytes for {height}x{width}", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        DepthMap::new(height, width, data)
    }
}

/// Per-pixel class indices; [`IGNORE`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!("label map {height}x{width} got {} values", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// True when every non-ignore value is below `num_classes`.
    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.data.iter().all(|&v| v == IGNORE || (v as usize) < num_classes)
    }

    pub fn distinct_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| v != IGNORE && seen[v as usize]).collect()
    }

    pub fn batch(maps: &[&LabelMap]) -> Result<Labels> {
        let first = maps.first().ok_or_else(|| Error::dim("empty label batch"))?;
        let mut data = Vec::with_capacity(first.data.len() * maps.len());
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::dim("label maps in a batch differ in size"));
            }
            data.extend_from_slice(&m.data);
        }
        Labels::new(maps.len(), first.height, first.width, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, color, bytes) = read_png(path)?;
        if color != png::ColorType::Grayscale {
            return Err(Error::Integrity {
                path: path.into(),
                reason: format!("expected grayscale label image, found {color:?}"),
            });
        }
        LabelMap::new(h, w, bytes)
    }
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(to_fmt)?;
    writer.write_image_data(bytes).map_err(to_fmt)?;
    writer.finish().map_err(to_fmt)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::Integrity {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let corrupt = |e: png::DecodingError| Error::Integrity {
        path: path.into(),
        reason: e.to_string(),
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(corrupt)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Integrity {
        path: path.into(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Integrity {
            path: path.into(),
            reason: "expected 8-bit samples".into(),
        });
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}
