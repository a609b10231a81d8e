//! Shared pieces of the training loops: batch sampling and per-step logs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::nets::write_atomic;
use crate::tensor::Tensor;

/// Draws batches by walking seeded permutations of `0..n`.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Next `size` indices; a batch never straddles two permutations, so it
    /// holds no repeats when `size <= n`.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        if n == 0 {
            return Vec::new();
        }
        let size = size.min(n);
        if self.pos + size > n {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Stacks `[1, C, H, W]` items selected by `idx`.
pub fn gather(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let picked: Vec<Tensor<f32>> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack_batch(&picked)
}

/// Per-step loss log of one phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: String,
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl TrainLog {
    pub fn new(phase: impl Into<String>) -> Self {
        TrainLog {
            phase: phase.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, iteration: usize, report: LossReport, lr: f64) {
        self.rows.push(LogRow { iteration, report, lr });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of one loss column, in iteration order.
    pub fn series(&self, column: &str) -> Vec<(usize, f32)> {
        self.rows
            .iter()
            .filter_map(|r| r.report.get(column).map(|v| (r.iteration, v)))
            .collect()
    }

    /// Mean of `column` over the first or last `window` rows.
    pub fn window_mean(&self, column: &str, window: usize, from_end: bool) -> Option<f32> {
        let s = self.series(column);
        if s.is_empty() {
            return None;
        }
        let w = window.clamp(1, s.len());
        let part = if from_end { &s[s.len() - w..] } else { &s[..w] };
        Some(part.iter().map(|(_, v)| v).sum::<f32>() / w as f32)
    }

    pub fn to_csv(&self) -> String {
        let mut s = LossReport::csv_header();
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.report.csv_row(r.iteration, &self.phase, r.lr));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Integrity {
            path: path.into(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_index_once_per_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut a = BatchSampler::new(10, 3);
        let mut b = BatchSampler::new(10, 3);
        for _ in 0..7 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
    }
}
