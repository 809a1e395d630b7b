use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use duet_core::encoder::EncoderConfig;
use duet_core::trainer::infer::{EvalConfig, EvalRouting};
use duet_core::trainer::synth::GenSpec;
use duet_core::trainer::train::{PretrainConfig, TrainConfig};

/// How evaluation routes each query against the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    /// Retrieve when the best key similarity clears the threshold.
    Gamma,
    /// Force zero-shot fallback on tasks the pool has not been trained on,
    /// regardless of similarity.
    ForceFallbackUntrained,
}

impl From<Routing> for EvalRouting {
    fn from(r: Routing) -> EvalRouting {
        match r {
            Routing::Gamma => EvalRouting::Gamma,
            Routing::ForceFallbackUntrained => EvalRouting::ForceFallbackUntrained,
        }
    }
}

/// Benchmark dimensions independent of the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDims {
    pub domains: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

/// Every knob a run needs, after merging defaults, the optional TOML file
/// and command-line flags (flags win).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub benchmark: BenchmarkDims,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub routing: Routing,
}

/// Shared flags. Every value is optional; unset flags fall back to the
/// configuration file and then to built-in defaults.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML settings file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for generation, pretraining and prompt training
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoder preset: "mini" or "tiny"
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of shifted domains in the benchmark
    #[arg(long)]
    pub domains: Option<usize>,
    /// Classes per domain
    #[arg(long)]
    pub classes: Option<usize>,
    /// Training images per class in each domain split
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Held-out images per class in each split
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Prompt-training iterations per task
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Iterations used when --few-shot is active
    #[arg(long)]
    pub few_shot_iterations: Option<usize>,
    /// Prompt-training learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Prompt-training weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Prompt-training batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Softmax temperature for the contrastive loss and inference
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of leading layers that receive prompts
    #[arg(long)]
    pub depth: Option<usize>,
    /// Prompt rows per layer
    #[arg(long)]
    pub plen: Option<usize>,
    /// Retrieval threshold on key cosine similarity
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Pretraining learning rate
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    /// Pretraining iteration cap
    #[arg(long)]
    pub pretrain_cap: Option<usize>,
    /// Held-out accuracy that ends pretraining
    #[arg(long)]
    pub pretrain_target: Option<f64>,
    /// Pool routing mode used at evaluation
    #[arg(long, value_enum)]
    pub routing: Option<Routing>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    encoder: Option<EncoderSection>,
    benchmark: Option<BenchmarkSection>,
    train: Option<TrainSection>,
    pretrain: Option<PretrainSection>,
    eval: Option<EvalSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderSection {
    preset: Option<String>,
    layers: Option<usize>,
    heads: Option<usize>,
    d_t: Option<usize>,
    d_v: Option<usize>,
    d_joint: Option<usize>,
    vocab: Option<usize>,
    max_tokens: Option<usize>,
    image: Option<usize>,
    patch: Option<usize>,
    channels: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkSection {
    domains: Option<usize>,
    classes: Option<usize>,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    iterations: Option<usize>,
    few_shot_iterations: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    batch: Option<usize>,
    tau: Option<f64>,
    depth: Option<usize>,
    plen: Option<usize>,
    gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainSection {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    tau: Option<f64>,
    cap: Option<usize>,
    eval_every: Option<usize>,
    target: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    routing: Option<Routing>,
}

fn preset(name: &str) -> Result<EncoderConfig> {
    match name {
        "mini" => Ok(EncoderConfig::mini()),
        "tiny" => Ok(EncoderConfig::tiny()),
        other => bail!("unknown encoder preset {other:?}; expected \"mini\" or \"tiny\""),
    }
}

macro_rules! take {
    ($dst:expr, $($src:expr),+) => {
        $(if let Some(v) = $src {
            $dst = v;
        })+
    };
}

impl RunConfig {
    /// Merges built-in defaults, the optional TOML file and flags, flags
    /// winning over the file. Validation failures are hard errors.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let file: FileConfig = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let enc_file = file.encoder.unwrap_or_default();
        let bench_file = file.benchmark.unwrap_or_default();
        let train_file = file.train.unwrap_or_default();
        let pre_file = file.pretrain.unwrap_or_default();
        let eval_file = file.eval.unwrap_or_default();

        let mut seed = 7;
        take!(seed, file.seed, args.seed);

        let mut encoder = preset(
            args.preset
                .as_deref()
                .or(enc_file.preset.as_deref())
                .unwrap_or("mini"),
        )?;
        take!(encoder.layers, enc_file.layers);
        take!(encoder.heads, enc_file.heads);
        take!(encoder.d_t, enc_file.d_t);
        take!(encoder.d_v, enc_file.d_v);
        take!(encoder.d_joint, enc_file.d_joint);
        take!(encoder.vocab, enc_file.vocab);
        take!(encoder.max_tokens, enc_file.max_tokens);
        take!(encoder.image, enc_file.image);
        take!(encoder.patch, enc_file.patch);
        take!(encoder.channels, enc_file.channels);
        encoder.validate()?;

        let mut benchmark = BenchmarkDims {
            domains: 3,
            classes: 6,
            train_per_class: 12,
            test_per_class: 8,
        };
        take!(benchmark.domains, bench_file.domains, args.domains);
        take!(benchmark.classes, bench_file.classes, args.classes);
        take!(
            benchmark.train_per_class,
            bench_file.train_per_class,
            args.train_per_class
        );
        take!(
            benchmark.test_per_class,
            bench_file.test_per_class,
            args.test_per_class
        );

        let mut train = TrainConfig::new(encoder.layers, 2, seed);
        take!(train.iterations, train_file.iterations, args.iterations);
        take!(
            train.few_shot_iterations,
            train_file.few_shot_iterations,
            args.few_shot_iterations
        );
        take!(train.lr, train_file.lr, args.lr);
        take!(train.weight_decay, train_file.weight_decay, args.weight_decay);
        take!(train.batch, train_file.batch, args.batch);
        take!(train.tau, train_file.tau, args.tau);
        take!(train.depth, train_file.depth, args.depth);
        take!(train.plen, train_file.plen, args.plen);
        take!(train.gamma, train_file.gamma, args.gamma);
        train.validate()?;
        if train.depth > encoder.layers {
            bail!(
                "prompt depth {} exceeds encoder depth {}",
                train.depth,
                encoder.layers
            );
        }

        let mut pretrain = PretrainConfig::new(seed);
        take!(pretrain.lr, pre_file.lr, args.pretrain_lr);
        take!(pretrain.weight_decay, pre_file.weight_decay);
        take!(pretrain.tau, pre_file.tau);
        take!(pretrain.cap, pre_file.cap, args.pretrain_cap);
        take!(pretrain.eval_every, pre_file.eval_every);
        take!(pretrain.target, pre_file.target, args.pretrain_target);

        let mut routing = Routing::Gamma;
        take!(routing, eval_file.routing, args.routing);

        Ok(RunConfig {
            seed,
            encoder,
            benchmark,
            train,
            pretrain,
            routing,
        })
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            n_domains: self.benchmark.domains,
            n_classes: self.benchmark.classes,
            train_per_class: self.benchmark.train_per_class,
            test_per_class: self.benchmark.test_per_class,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            gamma: self.train.gamma,
            tau: self.train.tau,
            routing: self.routing.into(),
        }
    }

    /// Ceiling on cross-task key similarity the generator enforces: below
    /// the retrieval threshold so foreign keys never clear it, and at most
    /// 0.9 so own-key retrieval keeps a tenth of headroom.
    pub fn max_cross(&self) -> f64 {
        self.train.gamma.min(0.9)
    }
}

/// What the train command records next to its outputs so a later eval can
/// reproduce the exact same report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub order: Vec<usize>,
    pub few_shot: Option<usize>,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
