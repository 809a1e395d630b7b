use crate::encoder::{Backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamWConfig, OptimState};
use crate::params::ParamStore;
use crate::pool::{config_digest, extract_prototype, PoolEntry, PromptPool};
use crate::prompt::{bind_task, TaskParams};
use crate::rng::Rng;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;
use crate::trainer::data::TaskDataset;
use crate::trainer::loss::{contrastive_loss, symmetric_loss};
use crate::trainer::streams;

/// Per-task training knobs. The defaults mirror the full-data recipe:
/// 2000 iterations (500 few-shot) at learning rate 2e-3, batch 64,
/// temperature 0.01.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub few_shot_iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub tau: f64,
    pub depth: usize,
    pub plen: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(depth: usize, plen: usize, seed: u64) -> Self {
        TrainConfig {
            iterations: 2000,
            few_shot_iterations: 500,
            lr: 2e-3,
            weight_decay: 0.0,
            batch: 64,
            tau: 0.01,
            depth,
            plen,
            gamma: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate {} invalid", self.lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight decay {} invalid",
                self.weight_decay
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive".to_string()));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config(format!("temperature {} invalid", self.tau)));
        }
        if self.plen == 0 {
            return Err(Error::config("prompt length must be positive".to_string()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::config(format!("threshold {} invalid", self.gamma)));
        }
        Ok(())
    }
}

/// Builds the full training loss for one batch on a fresh tape: prompted
/// text features per class, prompted image features per batch sample, and
/// the temperature-scaled cross-entropy over their cosine matrix. The
/// backbone enters as constants; only prompts and aligners are parameters
/// when `trainable`. Also the graph the finite-difference check probes.
pub fn build_task_loss(
    backbone: &Backbone,
    dataset: &TaskDataset,
    store: &ParamStore,
    batch: &[usize],
    cfg: &TrainConfig,
    trainable: bool,
) -> Result<(Tape, ValId)> {
    if batch.is_empty() {
        return Err(Error::contract("batch must be non-empty".to_string()));
    }
    let mut tape = Tape::new();
    let binding = backbone.bind(&mut tape, false)?;
    let task = TaskParams::from_store(store, cfg.depth, cfg.plen)?;
    let bound = bind_task(&mut tape, &task, trainable)?;

    let ecfg = backbone.cfg();
    let mut txt_rows = Vec::with_capacity(dataset.class_names.len());
    for name in &dataset.class_names {
        let trace =
            crate::encoder::encode_text_on_tape(&mut tape, ecfg, &binding, name, &bound.text)?;
        let d = tape.value(trace.out).numel();
        txt_rows.push(tape.reshape(trace.out, vec![1, d])?);
    }
    let txt = tape.concat_rows(&txt_rows)?;

    let mut img_rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let sample = dataset.train.get(i).ok_or_else(|| {
            Error::contract(format!("batch index {i} out of range"))
        })?;
        let trace = crate::encoder::encode_image_on_tape(
            &mut tape,
            ecfg,
            &binding,
            &sample.image,
            &bound.vis,
        )?;
        let d = tape.value(trace.out).numel();
        img_rows.push(tape.reshape(trace.out, vec![1, d])?);
        labels.push(sample.label);
    }
    let img = tape.concat_rows(&img_rows)?;

    let loss = contrastive_loss(&mut tape, img, txt, &labels, cfg.tau)?;
    Ok((tape, loss))
}

/// One task's training output: frozen prompt parameters, the retrieval key
/// and the per-iteration loss trace.
#[derive(Clone, Debug)]
pub struct TrainedTask {
    pub params: TaskParams,
    pub key: Tensor,
    pub loss_trace: Vec<f64>,
}

/// Trains one task's prompts and aligners against the frozen backbone.
/// The key is extracted before any optimization and never depends on the
/// prompts. Batches draw uniformly with replacement from the train split.
pub fn train_task(
    backbone: &Backbone,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    task_index: usize,
) -> Result<TrainedTask> {
    cfg.validate()?;
    dataset.validate(backbone.cfg())?;
    if dataset.train.is_empty() {
        return Err(Error::contract(format!(
            "task {:?} has no training samples",
            dataset.task_id
        )));
    }

    let key = extract_prototype(backbone, &dataset.class_names)?;
    let mut init_rng = Rng::derived(
        cfg.seed,
        streams::label(streams::TASK_INIT, task_index as u64),
    );
    let task0 = TaskParams::init(backbone.cfg(), cfg.depth, cfg.plen, &mut init_rng)?;
    let mut store = task0.to_store();

    let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let mut state = OptimState::new();
    let mut batch_rng = Rng::derived(
        cfg.seed,
        streams::label(streams::TASK_BATCH, task_index as u64),
    );
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| batch_rng.below(dataset.train.len()))
            .collect();
        let (tape, loss) = build_task_loss(backbone, dataset, &store, &batch, cfg, true)?;
        let value = tape.value(loss).scalar_value()?;
        if !value.is_finite() {
            return Err(Error::contract(format!(
                "loss diverged to {value} at iteration {iter} of task {:?}",
                dataset.task_id
            )));
        }
        loss_trace.push(value);
        let grads = tape.backward(loss)?;
        adamw_step(&opt, &mut store, &grads, &mut state)?;
    }

    let params = TaskParams::from_store(&store, cfg.depth, cfg.plen)?;
    Ok(TrainedTask {
        params,
        key,
        loss_trace,
    })
}

/// A full continual run: the final pool, a snapshot after every task
/// (index 0 is the empty pre-training pool) and the loss traces.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub pool: PromptPool,
    pub snapshots: Vec<PromptPool>,
    pub loss_traces: Vec<Vec<f64>>,
}

/// Trains the tasks strictly in order, adding each trained entry to the
/// pool. Earlier entries are never touched again.
pub fn train_sequence(
    backbone: &Backbone,
    datasets: &[TaskDataset],
    cfg: &TrainConfig,
) -> Result<SequenceRun> {
    if datasets.is_empty() {
        return Err(Error::contract("no tasks to train".to_string()));
    }
    let digest = config_digest(backbone.cfg(), cfg.depth, cfg.plen);
    let mut pool = PromptPool::new(digest);
    let mut snapshots = vec![pool.clone()];
    let mut loss_traces = Vec::with_capacity(datasets.len());
    for (i, dataset) in datasets.iter().enumerate() {
        let trained = train_task(backbone, dataset, cfg, i)?;
        pool.add(PoolEntry {
            task_id: dataset.task_id.clone(),
            key: trained.key,
            params: trained.params,
        })?;
        snapshots.push(pool.clone());
        loss_traces.push(trained.loss_trace);
    }
    Ok(SequenceRun {
        pool,
        snapshots,
        loss_traces,
    })
}

/// Base-model pretraining knobs: symmetric contrastive loss on one image
/// per class, evaluated on the held-out split every `eval_every` steps
/// until `target` zero-shot accuracy or the iteration cap.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub cap: usize,
    pub eval_every: usize,
    pub target: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(seed: u64) -> Self {
        PretrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            tau: 0.01,
            cap: 5000,
            eval_every: 50,
            target: 0.85,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub backbone: Backbone,
    pub iterations: usize,
    pub achieved: f64,
    pub loss_trace: Vec<f64>,
}

fn pretrain_loss(
    backbone: &Backbone,
    base: &TaskDataset,
    picks: &[usize],
    tau: f64,
) -> Result<(Tape, ValId)> {
    let cfg = backbone.cfg();
    let mut tape = Tape::new();
    let binding = backbone.bind(&mut tape, true)?;
    let mut txt_rows = Vec::with_capacity(base.class_names.len());
    for name in &base.class_names {
        let trace = crate::encoder::encode_text_on_tape(&mut tape, cfg, &binding, name, &[])?;
        let d = tape.value(trace.out).numel();
        txt_rows.push(tape.reshape(trace.out, vec![1, d])?);
    }
    let txt = tape.concat_rows(&txt_rows)?;
    let mut img_rows = Vec::with_capacity(picks.len());
    for &i in picks {
        let trace = crate::encoder::encode_image_on_tape(
            &mut tape,
            cfg,
            &binding,
            &base.train[i].image,
            &[],
        )?;
        let d = tape.value(trace.out).numel();
        img_rows.push(tape.reshape(trace.out, vec![1, d])?);
    }
    let img = tape.concat_rows(&img_rows)?;
    let loss = symmetric_loss(&mut tape, img, txt, tau)?;
    Ok((tape, loss))
}

/// Trains the dual encoder from scratch on the base set. Each step aligns
/// one randomly drawn image per class with that class's name (row i of the
/// image batch matches text row i). Stops at the first held-out evaluation
/// reaching `target`; hitting the cap first is an error carrying the best
/// accuracy seen.
pub fn pretrain_base(
    cfg: &EncoderConfig,
    base: &TaskDataset,
    pcfg: &PretrainConfig,
) -> Result<PretrainRun> {
    cfg.validate()?;
    base.validate(cfg)?;
    if !(pcfg.target > 0.0 && pcfg.target <= 1.0) {
        return Err(Error::config(format!(
            "pretraining target {} must be in (0, 1]",
            pcfg.target
        )));
    }
    if pcfg.eval_every == 0 {
        return Err(Error::config("eval_every must be positive".to_string()));
    }
    let n_classes = base.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in base.train.iter().enumerate() {
        by_class[s.label].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::contract(
            "every base class needs at least one training sample".to_string(),
        ));
    }

    let mut init_rng = Rng::derived(pcfg.seed, streams::label(streams::PRETRAIN_INIT, 0));
    let mut backbone = Backbone::init(cfg.clone(), &mut init_rng)?;
    let opt = AdamWConfig::new(pcfg.lr, pcfg.weight_decay);
    let mut state = OptimState::new();
    let mut batch_rng = Rng::derived(pcfg.seed, streams::label(streams::PRETRAIN_BATCH, 0));

    let mut best = 0.0_f64;
    let mut loss_trace = Vec::new();
    let mut iterations = 0;
    loop {
        // evaluate before the first step so a cap of zero reports the
        // random-weight accuracy
        if iterations % pcfg.eval_every == 0 || iterations == pcfg.cap {
            let preds = crate::trainer::infer::zero_shot_predict(&backbone, base)?;
            let hits = preds
                .iter()
                .zip(&base.test)
                .filter(|(&p, s)| p == s.label)
                .count();
            let acc = hits as f64 / base.test.len() as f64;
            best = best.max(acc);
            if acc >= pcfg.target {
                return Ok(PretrainRun {
                    backbone,
                    iterations,
                    achieved: acc,
                    loss_trace,
                });
            }
        }
        if iterations == pcfg.cap {
            return Err(Error::PretrainTarget {
                target: pcfg.target,
                achieved: best,
            });
        }
        let picks: Vec<usize> = by_class
            .iter()
            .map(|ids| ids[batch_rng.below(ids.len())])
            .collect();
        let (tape, loss) = pretrain_loss(&backbone, base, &picks, pcfg.tau)?;
        let value = tape.value(loss).scalar_value()?;
        if !value.is_finite() {
            return Err(Error::contract(format!(
                "pretraining loss diverged to {value} at iteration {iterations}"
            )));
        }
        loss_trace.push(value);
        let grads = tape.backward(loss)?;
        adamw_step(&opt, backbone.weights_mut(), &grads, &mut state)?;
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bits_equal;
    use crate::trainer::synth::{gen_benchmark, GenSpec};

    fn tiny_setup() -> (Backbone, TaskDataset, TrainConfig) {
        let cfg = EncoderConfig::tiny();
        let bench = gen_benchmark(
            &cfg,
            &GenSpec {
                n_domains: 1,
                n_classes: 3,
                train_per_class: 2,
                test_per_class: 1,
                seed: 31,
            },
        )
        .unwrap();
        let backbone = Backbone::init(cfg, &mut Rng::new(32)).unwrap();
        let mut tc = TrainConfig::new(2, 2, 33);
        tc.iterations = 3;
        tc.batch = 2;
        (backbone, bench.tasks.into_iter().next().unwrap(), tc)
    }

    #[test]
    fn zero_iterations_return_initialized_parameters() {
        let (backbone, task, mut tc) = tiny_setup();
        tc.iterations = 0;
        let trained = train_task(&backbone, &task, &tc, 0).unwrap();
        let mut rng = Rng::derived(tc.seed, streams::label(streams::TASK_INIT, 0));
        let expect = TaskParams::init(backbone.cfg(), tc.depth, tc.plen, &mut rng).unwrap();
        assert_eq!(trained.params, expect);
        assert!(trained.loss_trace.is_empty());
        // the key never depends on the prompts
        let key = extract_prototype(&backbone, &task.class_names).unwrap();
        assert!(bits_equal(&trained.key, &key));
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let (backbone, task, tc) = tiny_setup();
        let a = train_task(&backbone, &task, &tc, 0).unwrap();
        let b = train_task(&backbone, &task, &tc, 0).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert!(a.loss_trace.iter().all(|l| l.is_finite()));
        // parameters moved
        let mut rng = Rng::derived(tc.seed, streams::label(streams::TASK_INIT, 0));
        let init = TaskParams::init(backbone.cfg(), tc.depth, tc.plen, &mut rng).unwrap();
        assert_ne!(a.params, init);
        // a different task index draws different batches and init
        let c = train_task(&backbone, &task, &tc, 1).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn backbone_and_key_untouched_by_training() {
        let (backbone, task, tc) = tiny_setup();
        let before = backbone.to_bytes();
        let trained = train_task(&backbone, &task, &tc, 0).unwrap();
        assert_eq!(backbone.to_bytes(), before);
        let key = extract_prototype(&backbone, &task.class_names).unwrap();
        assert!(bits_equal(&trained.key, &key));
    }

    #[test]
    fn sequence_trains_in_order_and_freezes_entries() {
        let cfg = EncoderConfig::tiny();
        let bench = gen_benchmark(
            &cfg,
            &GenSpec {
                n_domains: 2,
                n_classes: 3,
                train_per_class: 2,
                test_per_class: 1,
                seed: 41,
            },
        )
        .unwrap();
        let backbone = Backbone::init(cfg, &mut Rng::new(42)).unwrap();
        let mut tc = TrainConfig::new(1, 1, 43);
        tc.iterations = 2;
        tc.batch = 2;
        let run = train_sequence(&backbone, &bench.tasks, &tc).unwrap();
        assert_eq!(run.pool.len(), 2);
        assert_eq!(run.snapshots.len(), 3);
        assert_eq!(run.snapshots[0].len(), 0);
        assert_eq!(run.pool.entries()[0].task_id, "domain-01");
        // entry 1's bytes after step 1 equal its bytes in the final pool
        let early = run.snapshots[1].to_bytes();
        let final_first = {
            let mut p = PromptPool::new(*run.pool.digest());
            p.add(run.pool.entries()[0].clone()).unwrap();
            p.to_bytes()
        };
        assert_eq!(early, final_first);
        // single-task sequence equals train_task output
        let solo = train_sequence(&backbone, &bench.tasks[..1], &tc).unwrap();
        let direct = train_task(&backbone, &bench.tasks[0], &tc, 0).unwrap();
        assert_eq!(solo.pool.entries()[0].params, direct.params);
    }

    #[test]
    fn pretrain_cap_zero_reports_chance_accuracy() {
        let cfg = EncoderConfig::tiny();
        let bench = gen_benchmark(
            &cfg,
            &GenSpec {
                n_domains: 1,
                n_classes: 3,
                train_per_class: 2,
                test_per_class: 4,
                seed: 51,
            },
        )
        .unwrap();
        let mut pcfg = PretrainConfig::new(52);
        pcfg.cap = 0;
        match pretrain_base(&cfg, &bench.base, &pcfg) {
            Err(Error::PretrainTarget { target, achieved }) => {
                assert!((target - 0.85).abs() < 1e-12);
                // random weights sit near chance, far below target
                assert!((0.0..0.7).contains(&achieved));
            }
            other => panic!("expected a pretraining-target error, got {other:?}"),
        }
    }

    #[test]
    fn pretrain_steps_run_and_stay_finite() {
        let cfg = EncoderConfig::tiny();
        let bench = gen_benchmark(
            &cfg,
            &GenSpec {
                n_domains: 1,
                n_classes: 2,
                train_per_class: 2,
                test_per_class: 1,
                seed: 61,
            },
        )
        .unwrap();
        let mut pcfg = PretrainConfig::new(62);
        pcfg.cap = 4;
        pcfg.eval_every = 2;
        // a tiny run will not reach the target; the error must carry the
        // best accuracy and every loss must have been finite
        match pretrain_base(&cfg, &bench.base, &pcfg) {
            Err(Error::PretrainTarget { achieved, .. }) => {
                assert!((0.0..=1.0).contains(&achieved));
            }
            Ok(run) => {
                assert!(run.achieved >= pcfg.target);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
