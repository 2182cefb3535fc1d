#![allow(dead_code)]

use std::sync::OnceLock;

use incalign::synth::{generate_training_set, INTEROCULAR};
use incalign::{train_models, ModelSet, SynthConfig, TrainConfig};

pub fn train_config() -> TrainConfig {
    TrainConfig {
        eyes: INTEROCULAR,
        ..TrainConfig::default()
    }
}

/// Small model shared by the tracker and round-trip tests.
pub fn small_models() -> &'static ModelSet {
    static MODELS: OnceLock<ModelSet> = OnceLock::new();
    MODELS.get_or_init(|| {
        let data = generate_training_set(&SynthConfig { seed: 31, ..SynthConfig::default() }, 120).expect("training set");
        train_models(&data, &train_config()).expect("training").0
    })
}
