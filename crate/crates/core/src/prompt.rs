use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, ValId};
use crate::tensor::{matmul_nt_acc, Tensor};

const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable per-layer prompt tokens for both towers.
///
/// `text` is `[depth, len, d_t]`, `vis` is `[depth, len, d_v]`; layer `l`
/// uses slice `l`. Both towers always share one prompt length. Prompts fill
/// layers front to back: depth `D` prompts layers `0..D` of an `L`-layer
/// tower.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    depth: usize,
    len: usize,
    text: Tensor,
    vis: Tensor,
}

impl PromptSet {
    pub fn new(depth: usize, len: usize, text: Tensor, vis: Tensor) -> Result<Self> {
        if depth > 0 && len == 0 {
            return Err(Error::config("prompt length must be positive".to_string()));
        }
        if text.rank() != 3 || text.shape()[0] != depth || text.shape()[1] != len {
            return Err(Error::shape(
                "prompt_set",
                format!(
                    "text prompts must be [{depth}, {len}, d_t], got {:?}",
                    text.shape()
                ),
            ));
        }
        if vis.rank() != 3 || vis.shape()[0] != depth || vis.shape()[1] != len {
            return Err(Error::shape(
                "prompt_set",
                format!(
                    "vision prompts must be [{depth}, {len}, d_v], got {:?}",
                    vis.shape()
                ),
            ));
        }
        Ok(PromptSet {
            depth,
            len,
            text,
            vis,
        })
    }

    pub fn init(depth: usize, len: usize, d_t: usize, d_v: usize, rng: &mut Rng) -> Result<Self> {
        let mut text = Tensor::zeros(vec![depth, len, d_t]);
        rng.fill_normal(text.data_mut(), PROMPT_INIT_STD);
        let mut vis = Tensor::zeros(vec![depth, len, d_v]);
        rng.fill_normal(vis.data_mut(), PROMPT_INIT_STD);
        PromptSet::new(depth, len, text, vis)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.depth == 0
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn vis(&self) -> &Tensor {
        &self.vis
    }

    /// Layer `l`'s text prompt rows as a standalone `[len, d_t]` tensor.
    pub fn layer_text(&self, l: usize) -> Result<Tensor> {
        layer_slice(&self.text, self.depth, l)
    }

    /// Layer `l`'s vision prompt rows as a standalone `[len, d_v]` tensor.
    pub fn layer_vis(&self, l: usize) -> Result<Tensor> {
        layer_slice(&self.vis, self.depth, l)
    }
}

fn layer_slice(stack: &Tensor, depth: usize, l: usize) -> Result<Tensor> {
    if l >= depth {
        return Err(Error::contract(format!(
            "layer {l} out of range for prompt depth {depth}"
        )));
    }
    let rows = stack.shape()[1];
    let cols = stack.shape()[2];
    let block = rows * cols;
    Tensor::new(
        vec![rows, cols],
        stack.data()[l * block..(l + 1) * block].to_vec(),
    )
}

/// Per-layer cross-modal projection matrices.
///
/// Layer `l` of `v2t` is `[d_t, d_v]`: it maps that layer's vision prompt
/// rows into text space (the rows are multiplied by its transpose).
/// `t2v` is the mirror image, `[d_v, d_t]` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignerParams {
    depth: usize,
    v2t: Tensor,
    t2v: Tensor,
}

impl AlignerParams {
    pub fn new(depth: usize, v2t: Tensor, t2v: Tensor) -> Result<Self> {
        if v2t.rank() != 3 || v2t.shape()[0] != depth {
            return Err(Error::shape(
                "aligner",
                format!("v2t must be [{depth}, d_t, d_v], got {:?}", v2t.shape()),
            ));
        }
        if t2v.rank() != 3 || t2v.shape()[0] != depth {
            return Err(Error::shape(
                "aligner",
                format!("t2v must be [{depth}, d_v, d_t], got {:?}", t2v.shape()),
            ));
        }
        if depth > 0 {
            let (d_t, d_v) = (v2t.shape()[1], v2t.shape()[2]);
            if t2v.shape()[1] != d_v || t2v.shape()[2] != d_t {
                return Err(Error::shape(
                    "aligner",
                    format!(
                        "t2v {:?} is not the mirror of v2t {:?}",
                        t2v.shape(),
                        v2t.shape()
                    ),
                ));
            }
        }
        Ok(AlignerParams { depth, v2t, t2v })
    }

    /// Zero-initialized aligners: cross-modal injection starts as a no-op
    /// and is learned from scratch.
    pub fn zeros(depth: usize, d_t: usize, d_v: usize) -> Self {
        AlignerParams {
            depth,
            v2t: Tensor::zeros(vec![depth, d_t, d_v]),
            t2v: Tensor::zeros(vec![depth, d_v, d_t]),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn v2t(&self) -> &Tensor {
        &self.v2t
    }

    pub fn t2v(&self) -> &Tensor {
        &self.t2v
    }
}

/// Everything trained for one task: prompts plus their aligners.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub prompts: PromptSet,
    pub aligner: AlignerParams,
}

pub const PARAM_PROMPT_TEXT: &str = "prompt.text";
pub const PARAM_PROMPT_VIS: &str = "prompt.vis";
pub const PARAM_ALIGNER_V2T: &str = "aligner.v2t";
pub const PARAM_ALIGNER_T2V: &str = "aligner.t2v";

impl TaskParams {
    pub fn init(cfg: &EncoderConfig, depth: usize, len: usize, rng: &mut Rng) -> Result<Self> {
        if depth > cfg.layers {
            return Err(Error::config(format!(
                "prompt depth {depth} exceeds {} layers",
                cfg.layers
            )));
        }
        Ok(TaskParams {
            prompts: PromptSet::init(depth, len, cfg.d_t, cfg.d_v, rng)?,
            aligner: AlignerParams::zeros(depth, cfg.d_t, cfg.d_v),
        })
    }

    pub fn depth(&self) -> usize {
        self.prompts.depth()
    }

    pub fn plen(&self) -> usize {
        self.prompts.len()
    }

    /// Flat named view for the optimizer and the gradient checker.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.set(PARAM_PROMPT_TEXT, self.prompts.text().clone());
        s.set(PARAM_PROMPT_VIS, self.prompts.vis().clone());
        s.set(PARAM_ALIGNER_V2T, self.aligner.v2t().clone());
        s.set(PARAM_ALIGNER_T2V, self.aligner.t2v().clone());
        s
    }

    pub fn from_store(store: &ParamStore, depth: usize, len: usize) -> Result<Self> {
        let prompts = PromptSet::new(
            depth,
            len,
            store.require(PARAM_PROMPT_TEXT)?.clone(),
            store.require(PARAM_PROMPT_VIS)?.clone(),
        )?;
        let aligner = AlignerParams::new(
            depth,
            store.require(PARAM_ALIGNER_V2T)?.clone(),
            store.require(PARAM_ALIGNER_T2V)?.clone(),
        )?;
        Ok(TaskParams { prompts, aligner })
    }

    /// Actual number of trainable scalars held by this task.
    pub fn trainable_elements(&self) -> u64 {
        (self.prompts.text().numel()
            + self.prompts.vis().numel()
            + self.aligner.v2t().numel()
            + self.aligner.t2v().numel()) as u64
    }
}

/// Closed-form count of trainable scalars for a prompt depth, prompt
/// length and tower widths, with aligners either per layer or shared.
pub fn count_trainable(
    depth: usize,
    plen: usize,
    d_t: usize,
    d_v: usize,
    per_layer_aligner: bool,
) -> u64 {
    let (depth, plen, d_t, d_v) = (depth as u64, plen as u64, d_t as u64, d_v as u64);
    let prompts = depth * plen * d_t + depth * plen * d_v;
    let aligner_copies = if per_layer_aligner { depth } else { 1 };
    prompts + aligner_copies * 2 * d_t * d_v
}

/// One layer's prompt rows bound onto a tape: the directly learned rows and
/// the rows projected over from the other tower.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayerPrompt {
    pub direct: ValId,
    pub injected: ValId,
}

/// Per-tower bound prompts for every prompted layer.
#[derive(Clone, Debug, Default)]
pub struct BoundTask {
    pub text: Vec<BoundLayerPrompt>,
    pub vis: Vec<BoundLayerPrompt>,
}

/// Registers task parameters on a tape and wires up the cross-modal
/// projections: each layer's text tower receives the vision prompt mapped
/// through that layer's v2t matrix, and vice versa.
pub fn bind_task(tape: &mut Tape, task: &TaskParams, trainable: bool) -> Result<BoundTask> {
    let depth = task.depth();
    if depth == 0 {
        return Ok(BoundTask::default());
    }
    let p = task.plen();
    let d_t = task.prompts.text().shape()[2];
    let d_v = task.prompts.vis().shape()[2];

    let put = |tape: &mut Tape, name: &str, t: Tensor| -> Result<ValId> {
        if trainable {
            tape.param(name, t)
        } else {
            Ok(tape.constant(t))
        }
    };
    let text3 = put(tape, PARAM_PROMPT_TEXT, task.prompts.text().clone())?;
    let vis3 = put(tape, PARAM_PROMPT_VIS, task.prompts.vis().clone())?;
    let v2t3 = put(tape, PARAM_ALIGNER_V2T, task.aligner.v2t().clone())?;
    let t2v3 = put(tape, PARAM_ALIGNER_T2V, task.aligner.t2v().clone())?;

    let text2 = tape.reshape(text3, vec![depth * p, d_t])?;
    let vis2 = tape.reshape(vis3, vec![depth * p, d_v])?;
    let v2t2 = tape.reshape(v2t3, vec![depth * d_t, d_v])?;
    let t2v2 = tape.reshape(t2v3, vec![depth * d_v, d_t])?;

    let mut bound = BoundTask::default();
    for l in 0..depth {
        let t_l = tape.slice_rows(text2, l * p, p)?;
        let v_l = tape.slice_rows(vis2, l * p, p)?;
        let a_v2t = tape.slice_rows(v2t2, l * d_t, d_t)?;
        let a_t2v = tape.slice_rows(t2v2, l * d_v, d_v)?;
        let t_hat = tape.matmul_nt(v_l, a_v2t)?; // [p, d_t]
        let v_hat = tape.matmul_nt(t_l, a_t2v)?; // [p, d_v]
        bound.text.push(BoundLayerPrompt {
            direct: t_l,
            injected: t_hat,
        });
        bound.vis.push(BoundLayerPrompt {
            direct: v_l,
            injected: v_hat,
        });
    }
    Ok(bound)
}

/// Pure projection of one layer's vision prompt into text space.
pub fn project_v2t(aligner: &AlignerParams, layer: usize, v_l: &Tensor) -> Result<Tensor> {
    project(aligner.v2t(), aligner.depth(), layer, v_l, "project_v2t")
}

/// Pure projection of one layer's text prompt into vision space.
pub fn project_t2v(aligner: &AlignerParams, layer: usize, t_l: &Tensor) -> Result<Tensor> {
    project(aligner.t2v(), aligner.depth(), layer, t_l, "project_t2v")
}

fn project(
    mats: &Tensor,
    depth: usize,
    layer: usize,
    rows: &Tensor,
    op: &'static str,
) -> Result<Tensor> {
    if layer >= depth {
        return Err(Error::contract(format!(
            "{op}: layer {layer} out of prompted depth {depth}"
        )));
    }
    let d_out = mats.shape()[1];
    let d_in = mats.shape()[2];
    if rows.rank() != 2 || rows.shape()[1] != d_in {
        return Err(Error::shape(
            op,
            format!("prompt rows must be [p, {d_in}], got {:?}", rows.shape()),
        ));
    }
    let p = rows.shape()[0];
    let mat = &mats.data()[layer * d_out * d_in..(layer + 1) * d_out * d_in];
    let mut out = vec![0.0; p * d_out];
    // rows @ mat^T
    matmul_nt_acc(rows.data(), mat, &mut out, p, d_in, d_out);
    Tensor::new(vec![p, d_out], out)
}

/// Attention inputs for a value-injected layer.
///
/// Queries and keys see the stream plus the direct prompt rows; values see
/// the stream plus direct-plus-injected rows. Attention weights therefore
/// cannot depend on the injected rows.
#[derive(Clone, Copy, Debug)]
pub struct InjectedInputs {
    pub qk: ValId,
    pub v: ValId,
}

pub fn inject_values(
    tape: &mut Tape,
    stream: ValId,
    direct: ValId,
    injected: ValId,
) -> Result<InjectedInputs> {
    let qk = tape.concat_rows(&[stream, direct])?;
    let enriched = tape.add(direct, injected)?;
    let v = tape.concat_rows(&[stream, enriched])?;
    Ok(InjectedInputs { qk, v })
}

/// Per-layer prompt tensors in the form the pure encode API expects:
/// direct rows plus the cross-projected injected rows for both towers.
#[derive(Clone, Debug)]
pub struct PromptViews {
    pub text_direct: Vec<Tensor>,
    pub text_injected: Vec<Tensor>,
    pub vis_direct: Vec<Tensor>,
    pub vis_injected: Vec<Tensor>,
}

pub fn prompt_views(task: &TaskParams) -> Result<PromptViews> {
    let depth = task.depth();
    let mut views = PromptViews {
        text_direct: Vec::with_capacity(depth),
        text_injected: Vec::with_capacity(depth),
        vis_direct: Vec::with_capacity(depth),
        vis_injected: Vec::with_capacity(depth),
    };
    for l in 0..depth {
        let t_l = task.prompts.layer_text(l)?;
        let v_l = task.prompts.layer_vis(l)?;
        views.text_injected.push(project_v2t(&task.aligner, l, &v_l)?);
        views.vis_injected.push(project_t2v(&task.aligner, l, &t_l)?);
        views.text_direct.push(t_l);
        views.vis_direct.push(v_l);
    }
    Ok(views)
}
