pub mod data;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod synth;
pub mod train;

/// Seed-stream labels: every random decision in the pipeline draws from
/// `Rng::derived(seed, label(KIND, payload))`, so streams never collide and
/// reordering call sites cannot change any of them.
pub(crate) mod streams {
    pub const TASK_INIT: u64 = 1;
    pub const TASK_BATCH: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 3;
    pub const PRETRAIN_BATCH: u64 = 4;
    pub const FEW_SHOT: u64 = 5;
    pub const TAGS: u64 = 6;
    pub const RENDER: u64 = 7;
    pub const REROLL: u64 = 8;

    pub fn label(kind: u64, payload: u64) -> u64 {
        debug_assert!(kind < 16 && payload < 1 << 60);
        (payload << 4) | kind
    }
}
