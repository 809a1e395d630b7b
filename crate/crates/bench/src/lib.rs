//! Fixtures shared by the criterion benches: a deterministic backbone, a
//! small rendered task and an initialized prompt parameter store.

use duet_core::encoder::{Backbone, EncoderConfig};
use duet_core::prompt::TaskParams;
use duet_core::rng::Rng;
use duet_core::trainer::data::TaskDataset;
use duet_core::trainer::synth::{gen_benchmark, GenSpec};
use duet_core::trainer::train::TrainConfig;
use duet_core::ParamStore;

pub fn mini_backbone() -> Backbone {
    Backbone::init(EncoderConfig::mini(), &mut Rng::new(1)).expect("backbone initializes")
}

pub fn mini_task() -> TaskDataset {
    let bench = gen_benchmark(
        &EncoderConfig::mini(),
        &GenSpec {
            n_domains: 1,
            n_classes: 6,
            train_per_class: 4,
            test_per_class: 2,
            seed: 2,
        },
    )
    .expect("benchmark generates");
    bench.tasks.into_iter().next().expect("one task")
}

pub fn train_config() -> TrainConfig {
    let mut tc = TrainConfig::new(EncoderConfig::mini().layers, 2, 3);
    tc.batch = 4;
    tc
}

pub fn prompt_store(tc: &TrainConfig) -> ParamStore {
    let task = TaskParams::init(&EncoderConfig::mini(), tc.depth, tc.plen, &mut Rng::new(4))
        .expect("prompts initialize");
    task.to_store()
}
