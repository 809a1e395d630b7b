use crate::encoder::{Backbone, TokenSeq};
use crate::error::{Error, Result};
use crate::pool::{extract_prototype, PromptPool, QueryOutcome};
use crate::prompt::{prompt_views, PromptViews, TaskParams};
use crate::tensor::Tensor;
use crate::trainer::data::{Sample, TaskDataset};
use crate::trainer::loss::{argmax, scores};
use crate::trainer::metrics::AccuracyMatrix;

/// How evaluation decides between a pool entry and the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalRouting {
    /// Algorithmic routing: threshold the best key similarity.
    Gamma,
    /// Force the base model for tasks the snapshot has not trained yet;
    /// trained tasks still route by threshold.
    ForceFallbackUntrained,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub gamma: f64,
    pub tau: f64,
    pub routing: EvalRouting,
}

fn text_feature(
    backbone: &Backbone,
    name: &TokenSeq,
    views: Option<&PromptViews>,
) -> Result<Tensor> {
    match views {
        None => backbone.base_text_encode(name),
        Some(v) => backbone.text_encode(name, &v.text_direct, &v.text_injected),
    }
}

fn image_feature(
    backbone: &Backbone,
    image: &Tensor,
    views: Option<&PromptViews>,
) -> Result<Tensor> {
    match views {
        None => backbone.base_image_encode(image),
        Some(v) => backbone.image_encode(image, &v.vis_direct, &v.vis_injected),
    }
}

fn class_matrix(
    backbone: &Backbone,
    names: &[TokenSeq],
    views: Option<&PromptViews>,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = 0;
    for name in names {
        let y = text_feature(backbone, name, views)?;
        width = y.numel();
        data.extend_from_slice(y.data());
    }
    Tensor::new(vec![names.len(), width], data)
}

/// Predicts every sample against the class list, optionally under a task's
/// prompts. Class features are computed once per call; the prediction is
/// the lowest-index cosine argmax.
pub fn predict_samples(
    backbone: &Backbone,
    class_names: &[TokenSeq],
    samples: &[Sample],
    params: Option<&TaskParams>,
) -> Result<Vec<usize>> {
    if class_names.is_empty() {
        return Err(Error::contract("prediction needs class names".to_string()));
    }
    let views = params.map(prompt_views).transpose()?;
    let y = class_matrix(backbone, class_names, views.as_ref())?;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let x = image_feature(backbone, &s.image, views.as_ref())?;
        preds.push(argmax(&scores(&x, &y)?));
    }
    Ok(preds)
}

/// Prompt-free predictions on the test split.
pub fn zero_shot_predict(backbone: &Backbone, dataset: &TaskDataset) -> Result<Vec<usize>> {
    predict_samples(backbone, &dataset.class_names, &dataset.test, None)
}

/// Classifies one image: build the query prototype from the class names,
/// route through the pool, then score with the routed entry's prompts or
/// the bare backbone. The temperature only rescales the softmax, so the
/// argmax prediction does not depend on it; it is validated for contract
/// symmetry with training.
pub fn infer_one(
    backbone: &Backbone,
    pool: &PromptPool,
    image: &Tensor,
    class_names: &[TokenSeq],
    gamma: f64,
    tau: f64,
) -> Result<usize> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let query = extract_prototype(backbone, class_names)?;
    let params = match pool.query(&query, gamma)? {
        QueryOutcome::Retrieved { index, .. } => Some(&pool.entry(index)?.params),
        QueryOutcome::Fallback { .. } => None,
    };
    let sample = Sample {
        image: image.clone(),
        label: 0,
    };
    Ok(predict_samples(backbone, class_names, std::slice::from_ref(&sample), params)?[0])
}

/// One full evaluation: accuracies, the per-sample predictions behind them
/// and the pool entry each cell routed to (`None` means fallback).
#[derive(Clone, Debug)]
pub struct EvalRun {
    pub matrix: AccuracyMatrix,
    pub predictions: Vec<Vec<Vec<usize>>>,
    pub routes: Vec<Vec<Option<usize>>>,
}

/// Evaluates every pool snapshot against every task's test split.
/// `snapshots[r]` must hold exactly the first `r` trained entries, so row 0
/// is the zero-shot row. Routing queries depend only on a dataset's class
/// names, so one query per cell decides the path for all its samples.
pub fn evaluate_matrix(
    backbone: &Backbone,
    snapshots: &[PromptPool],
    datasets: &[TaskDataset],
    cfg: &EvalConfig,
) -> Result<EvalRun> {
    if snapshots.len() != datasets.len() + 1 {
        return Err(Error::contract(format!(
            "{} snapshots for {} tasks; need one per step plus the empty start",
            snapshots.len(),
            datasets.len()
        )));
    }
    for (r, snap) in snapshots.iter().enumerate() {
        if snap.len() != r {
            return Err(Error::contract(format!(
                "snapshot {r} holds {} entries, expected {r}",
                snap.len()
            )));
        }
    }
    let mut queries = Vec::with_capacity(datasets.len());
    for ds in datasets {
        ds.validate(backbone.cfg())?;
        if ds.test.is_empty() {
            return Err(Error::contract(format!(
                "task {:?} has no test samples",
                ds.task_id
            )));
        }
        queries.push(extract_prototype(backbone, &ds.class_names)?);
    }

    let mut cells = Vec::with_capacity(snapshots.len());
    let mut predictions = Vec::with_capacity(snapshots.len());
    let mut routes = Vec::with_capacity(snapshots.len());
    for (r, snap) in snapshots.iter().enumerate() {
        let mut row = Vec::with_capacity(datasets.len());
        let mut row_preds = Vec::with_capacity(datasets.len());
        let mut row_routes = Vec::with_capacity(datasets.len());
        for (c, ds) in datasets.iter().enumerate() {
            let force_fallback =
                cfg.routing == EvalRouting::ForceFallbackUntrained && c + 1 > r;
            let route = if force_fallback {
                None
            } else {
                match snap.query(&queries[c], cfg.gamma)? {
                    QueryOutcome::Retrieved { index, .. } => Some(index),
                    QueryOutcome::Fallback { .. } => None,
                }
            };
            let params = match route {
                Some(i) => Some(&snap.entry(i)?.params),
                None => None,
            };
            let preds = predict_samples(backbone, &ds.class_names, &ds.test, params)?;
            let hits = preds
                .iter()
                .zip(&ds.test)
                .filter(|(&p, s)| p == s.label)
                .count();
            row.push(hits as f64 / ds.test.len() as f64);
            row_preds.push(preds);
            row_routes.push(route);
        }
        cells.push(row);
        predictions.push(row_preds);
        routes.push(row_routes);
    }
    Ok(EvalRun {
        matrix: AccuracyMatrix::new(cells)?,
        predictions,
        routes,
    })
}
