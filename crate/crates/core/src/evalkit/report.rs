//! Report files: CSV tables, bar and line plots, overlays, and image strips.
//!
//! Layout under the output directory:
//! `tables/<preset>.csv`, `tables/<preset>_seeds.csv`, `tables/<preset>_curves.csv`,
//! `plots/<preset>_miou.png`, `plots/<preset>_loss_<n>.png`,
//! `overlays/<preset>_<i>.png`, `strips/<preset>_<i>.png`, and `config.json`.

use std::path::{Path, PathBuf};

use super::ablation::{AblationReport, METRICS};
use crate::curriculum::defog_all;
use crate::error::{Error, Result};
use crate::fogsim::{LabelMap, Raster, SceneSample};
use crate::nets::{argmax_labels, seg_forward_tensor, write_atomic, ArchConfig};
use crate::tensor::Tensor;
use crate::train::TrainLog;

/// Class colors in label order: sky, ground, building, vehicle, vegetation.
pub const PALETTE: [[u8; 3]; 5] = [[70, 130, 180], [128, 64, 128], [70, 70, 70], [0, 0, 142], [107, 142, 35]];

/// Color of ignored or out-of-palette labels.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

/// Version of the curve CSV layout.
pub const CURVE_SCHEMA_VERSION: u32 = 1;

/// Number of test samples rendered as overlays and strips.
pub const SHOWCASE_SAMPLES: usize = 4;

fn class_color(c: u8) -> [u8; 3] {
    PALETTE.get(c as usize).copied().unwrap_or(IGNORE_COLOR)
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| f32::from(v) / 255.0)
}

pub fn colorize(labels: &LabelMap) -> Raster {
    let mut r = Raster::filled(labels.height(), labels.width(), 0.0);
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            r.set_pixel(y, x, to_unit(class_color(labels.at(y, x))));
        }
    }
    r
}

/// `image` blended with the label colors at weight `alpha`.
pub fn overlay(image: &Raster, labels: &LabelMap, alpha: f32) -> Result<Raster> {
    if (image.height(), image.width()) != (labels.height(), labels.width()) {
        return Err(Error::dim("overlay needs image and labels of equal size"));
    }
    let colors = colorize(labels);
    let mut out = image.clone();
    for (o, c) in out.data_mut().iter_mut().zip(colors.data()) {
        *o = (1.0 - alpha) * *o + alpha * c;
    }
    Ok(out)
}

/// Panels side by side; all panels must share one size.
pub fn strip(panels: &[&Raster]) -> Result<Raster> {
    let first = panels.first().ok_or_else(|| Error::dim("strip needs at least one panel"))?;
    let (h, w) = (first.height(), first.width());
    if panels.iter().any(|p| (p.height(), p.width()) != (h, w)) {
        return Err(Error::dim("strip panels differ in size"));
    }
    let mut out = Raster::filled(h, w * panels.len(), 0.0);
    for (i, p) in panels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(y, i * w + x, p.pixel(y, x));
            }
        }
    }
    Ok(out)
}

/// Series colors for plots.
const SERIES: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// 3x5 glyphs, one row per nibble (bit 2 is the left column).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

/// RGB8 drawing surface with the origin at the top left.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            px: vec![255; w * h * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// Draws `text` with its top-left corner at `(x, y)`; unknown glyphs
    /// leave a gap.
    fn text(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        for (i, ch) in text.chars().enumerate() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for col in 0..3 {
                        if bits & (4 >> col) != 0 {
                            self.set(x + i as i64 * 4 + col, y + r as i64, c);
                        }
                    }
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        crate::fogsim::write_png(path, self.w, self.h, png::ColorType::Rgb, &self.px)
    }
}

const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const MARGIN_L: i64 = 34;
const MARGIN: i64 = 10;

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        format!("{v:.2}")
    }
}

/// Axes with `ticks` horizontal grid lines over `[lo, hi]`; returns the
/// plot rectangle `(x0, y0, x1, y1)`.
fn axes(cv: &mut Canvas, lo: f64, hi: f64, ticks: usize) -> (i64, i64, i64, i64) {
    let (x0, y0, x1, y1) = (MARGIN_L, MARGIN, cv.w as i64 - MARGIN, cv.h as i64 - MARGIN);
    for t in 0..=ticks {
        let f = t as f64 / ticks as f64;
        let y = y1 - ((y1 - y0) as f64 * f).round() as i64;
        cv.line((x0, y), (x1, y), GRID);
        cv.text(2, y - 2, &fmt_tick(lo + (hi - lo) * f), AXIS);
    }
    cv.line((x0, y0), (x0, y1), AXIS);
    cv.line((x0, y1), (x1, y1), AXIS);
    (x0, y0, x1, y1)
}

/// Grouped bars: one group per row, one bar per metric, values in `[0, 1]`.
fn bar_chart(path: &Path, groups: &[Vec<f64>]) -> Result<()> {
    let series = groups.first().map_or(1, Vec::len).max(1);
    let bar = 8i64;
    let group_w = bar * series as i64 + 8;
    let w = (MARGIN_L + MARGIN + group_w * groups.len().max(1) as i64) as usize;
    let mut cv = Canvas::new(w.max(120), 140);
    let (x0, y0, _, y1) = axes(&mut cv, 0.0, 1.0, 4);
    for (gi, g) in groups.iter().enumerate() {
        for (si, &v) in g.iter().enumerate() {
            let x = x0 + 5 + gi as i64 * group_w + si as i64 * bar;
            let top = y1 - ((y1 - y0) as f64 * v.clamp(0.0, 1.0)).round() as i64;
            cv.rect(x, top, x + bar - 2, y1 - 1, SERIES[si % SERIES.len()]);
        }
    }
    cv.save(path)
}

/// One polyline per series of `(x, y)` points, sharing axes.
fn line_chart(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let pts = series.iter().flatten();
    let (mut xl, mut xh, mut yl, mut yh) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        if y.is_finite() {
            xl = xl.min(x);
            xh = xh.max(x);
            yl = yl.min(y);
            yh = yh.max(y);
        }
    }
    if xl > xh {
        (xl, xh, yl, yh) = (0.0, 1.0, 0.0, 1.0);
    }
    if xh == xl {
        xh = xl + 1.0;
    }
    if yh == yl {
        yh = yl + 1.0;
    }
    let mut cv = Canvas::new(240, 140);
    let (x0, y0, x1, y1) = axes(&mut cv, yl, yh, 4);
    let map = |x: f64, y: f64| {
        (
            x0 + ((x1 - x0) as f64 * (x - xl) / (xh - xl)).round() as i64,
            y1 - ((y1 - y0) as f64 * (y - yl) / (yh - yl)).round() as i64,
        )
    };
    for (si, s) in series.iter().enumerate() {
        let c = SERIES[si % SERIES.len()];
        let mut prev = None;
        for &(x, y) in s.iter().filter(|p| p.1.is_finite()) {
            let p = map(x, y);
            if let Some(q) = prev {
                cv.line(q, p, c);
            }
            prev = Some(p);
        }
    }
    cv.save(path)
}

/// Loss columns drawn for each curve, when logged.
const CURVE_COLUMNS: [&str; 7] = ["total", "dct", "sed", "l1_pix", "fog_ce", "clean_ce", "depth_l1"];

fn curve_csv(curves: &[(String, TrainLog)]) -> String {
    let mut s = String::from("schema,curve,iteration,lr,column,value\n");
    for (name, log) in curves {
        for col in CURVE_COLUMNS {
            for row in &log.rows {
                if let Some(v) = row.report.get(col) {
                    s.push_str(&format!(
                        "{CURVE_SCHEMA_VERSION},{name},{},{:e},{col},{v:.6}\n",
                        row.iteration, row.lr
                    ));
                }
            }
        }
    }
    s
}

fn curve_series(log: &TrainLog) -> Vec<Vec<(f64, f64)>> {
    CURVE_COLUMNS
        .iter()
        .map(|col| {
            log.rows
                .iter()
                .filter_map(|r| r.report.get(col).map(|v| (r.iteration as f64, f64::from(v))))
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

fn mkdirs(out: &Path) -> Result<()> {
    for d in ["tables", "plots", "overlays", "strips"] {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Writes every report file for `report` and returns their paths in a fixed
/// order. `samples` supplies the images for overlays and strips; only the
/// first [`SHOWCASE_SAMPLES`] are used.
pub fn emit_report(
    report: &AblationReport,
    samples: &[SceneSample],
    arch: &ArchConfig,
    config: &serde_json::Value,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    mkdirs(out)?;
    let preset = report.table.preset.name();
    let mut files = Vec::new();
    let mut text = |rel: String, body: String| -> Result<()> {
        let p = out.join(rel);
        write_atomic(&p, body.as_bytes())?;
        files.push(p);
        Ok(())
    };
    text(format!("tables/{preset}.csv"), report.table.to_csv())?;
    text(format!("tables/{preset}_seeds.csv"), report.table.to_seed_csv())?;
    text(format!("tables/{preset}_curves.csv"), curve_csv(&report.curves))?;
    let cfg = serde_json::to_string_pretty(config).map_err(|e| Error::Format(e.to_string()))?;
    text("config.json".into(), cfg + "\n")?;

    let groups: Vec<Vec<f64>> = report
        .table
        .rows
        .iter()
        .map(|r| (0..METRICS.len()).map(|m| r.mean(m)).collect())
        .collect();
    let p = out.join(format!("plots/{preset}_miou.png"));
    bar_chart(&p, &groups)?;
    files.push(p);
    for (i, (_, log)) in report.curves.iter().enumerate() {
        let p = out.join(format!("plots/{preset}_loss_{i}.png"));
        line_chart(&p, &curve_series(log))?;
        files.push(p);
    }

    if let Some(show) = &report.showcase {
        let picked: Vec<&SceneSample> = samples.iter().take(SHOWCASE_SAMPLES).collect();
        if !picked.is_empty() {
            let fog: Vec<&Raster> = picked.iter().map(|s| &s.fog).collect();
            let x = Tensor::stack_batch(&fog.iter().map(|r| r.to_tensor()).collect::<Vec<_>>())?;
            let logits = seg_forward_tensor(&show.seg, arch, &x)?.logits;
            let defogged = match &show.dfnet {
                Some(df) => Some(defog_all(df, arch, &fog)?),
                None => None,
            };
            for (i, s) in picked.iter().enumerate() {
                let pred = argmax_labels(&logits, i)?;
                let p = out.join(format!("overlays/{preset}_{i}.png"));
                overlay(&s.fog, &pred, 0.5)?.save_png(&p)?;
                files.push(p);
                let mut panels = vec![&s.fog];
                if let Some(d) = &defogged {
                    panels.push(&d[i]);
                }
                if let Ok(c) = s.clean() {
                    panels.push(c);
                }
                let gt = s.label().ok().map(colorize);
                let pr = colorize(&pred);
                panels.push(&pr);
                if let Some(g) = &gt {
                    panels.push(g);
                }
                let p = out.join(format!("strips/{preset}_{i}.png"));
                strip(&panels)?.save_png(&p)?;
                files.push(p);
            }
        }
    }
    Ok(files)
}
