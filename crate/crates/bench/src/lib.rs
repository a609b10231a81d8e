//! Benchmark fixtures shared by the criterion targets.

use fogseg::fogsim::{generate_split, DatasetConfig, Split};
use fogseg::tensor::Tensor;

/// Foggy training images stacked into one `[n, 3, H, W]` batch.
pub fn fog_batch(n: usize) -> Tensor<f32> {
    let cfg = DatasetConfig {
        train: n,
        ..DatasetConfig::default()
    };
    let samples = generate_split(&cfg, Split::Train).expect("default dataset config is valid");
    let xs: Vec<_> = samples.iter().map(|s| s.fog.to_tensor()).collect();
    Tensor::stack_batch(&xs).expect("equal sizes")
}
