#![allow(dead_code)]

use perpeft::data::Dataset;
use perpeft::encoder::EncoderConfig;
use perpeft::pipeline::{generate_synthetic, Method, RunConfig, SyntheticSpec};

pub fn small_data(users: usize, items: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_users: users,
        n_items: items,
        seed,
        ..SyntheticSpec::for_encoder(&EncoderConfig::desk())
    };
    generate_synthetic(&spec).unwrap().dataset
}

pub fn desk_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        groups: 2,
        global_epochs: 2,
        personal_epochs: 2,
        learning_rate: 1e-3,
        encoder: EncoderConfig::desk(),
        ..RunConfig::default()
    }
}
