#![allow(dead_code)]

use mimrefine::harness::ExperimentConfig;

/// A pipeline small enough to run every stage in a few seconds.
pub const TINY: &str = r#"
seed = 3

[data]
n_per_class = 24

[encoder]
depth = 3
width = 16
mlp_hidden = 32

[pretrain]
epochs = 2
probe_epochs = 2

[heads]
projector_hidden = 16
bottleneck = 8
predictor_hidden = 16

[refine]
epochs = 2
init_epochs = 1

[refine.queue]
capacity = 64

[refine.views]
n_local = 1

[probe]
low_shot = [1, 2]
low_shot_seeds = 2

[cluster.kmeans]
restarts = 2
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}
