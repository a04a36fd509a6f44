//! Shared fixtures for the criterion benches.

use mvmark_core::data::{generate_multiview_images, Dataset, MultiViewImagesConfig};
use mvmark_core::model::{ModelCheckpoint, ModelSpec};

/// 8x8 single-channel images, ten classes.
pub fn images(per_class: usize, seed: u64) -> Dataset {
    let cfg = MultiViewImagesConfig {
        num_classes: 10,
        channels: 1,
        side: 8,
        per_class,
        noise: 0.15,
        mix_fraction: 0.6,
        max_mix: 0.4,
    };
    generate_multiview_images(&cfg, seed, "bench").expect("bench data")
}

pub fn small_conv(seed: u64) -> ModelCheckpoint {
    let spec = ModelSpec::conv_net(10, [1, 8, 8], [16, 32, 32, 64]).expect("bench spec");
    ModelCheckpoint::initialize(&spec, seed).expect("bench init")
}
