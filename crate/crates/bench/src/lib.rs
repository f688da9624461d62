//! Fixtures shared by the criterion benches.

use meden::sim::{generate_sample, DataDistribution};
use meden::{builtin_model, MomentModel, Sample};

/// Standard normal shifted to mean 1, the setting of the simulation study.
pub fn normal_sample(n: usize, replicate: u64) -> Sample {
    generate_sample(
        &DataDistribution::Normal { mean: 1.0, sd: 1.0 },
        n,
        1,
        7,
        replicate,
    )
    .expect("valid distribution")
}

pub fn sim_model() -> MomentModel {
    builtin_model("sim_example").expect("built-in model")
}
