use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CPBB";
const VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;
/// Token embeddings start large so rarely-seen tokens still steer the
/// encoder output through the residual passthrough; position tables and the
/// class token stay small because they only add shared offsets. Layer norms
/// keep the large inputs from destabilizing the blocks, and embeddings that
/// do appear in training are free to shrink.
const TOKEN_STD: f64 = 4.0;

/// Canonical parameter list of the backbone: `(name, shape)` pairs in the
/// order tensors are initialized and serialized. The checkpoint format
/// stores raw tensor data in exactly this order.
pub fn weight_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    v.push(("text.tok".into(), vec![cfg.vocab, cfg.d_t]));
    v.push(("text.pos".into(), vec![cfg.max_tokens, cfg.d_t]));
    for l in 0..cfg.layers {
        layer_layout(&mut v, &format!("text.l{l}"), cfg.d_t);
    }
    v.push(("text.proj".into(), vec![cfg.d_t, cfg.d_joint]));
    v.push(("vis.cls".into(), vec![1, cfg.d_v]));
    v.push(("vis.patch_w".into(), vec![cfg.patch_dim(), cfg.d_v]));
    v.push(("vis.patch_b".into(), vec![cfg.d_v]));
    v.push(("vis.pos".into(), vec![cfg.vis_tokens(), cfg.d_v]));
    for l in 0..cfg.layers {
        layer_layout(&mut v, &format!("vis.l{l}"), cfg.d_v);
    }
    v.push(("vis.proj".into(), vec![cfg.d_v, cfg.d_joint]));
    v
}

fn layer_layout(v: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    let push = |v: &mut Vec<(String, Vec<usize>)>, suffix: &str, shape: Vec<usize>| {
        v.push((format!("{prefix}.{suffix}"), shape));
    };
    push(v, "ln1.g", vec![d]);
    push(v, "ln1.b", vec![d]);
    push(v, "wq", vec![d, d]);
    push(v, "bq", vec![d]);
    push(v, "wk", vec![d, d]);
    push(v, "bk", vec![d]);
    push(v, "wv", vec![d, d]);
    push(v, "bv", vec![d]);
    push(v, "wo", vec![d, d]);
    push(v, "bo", vec![d]);
    push(v, "ln2.g", vec![d]);
    push(v, "ln2.b", vec![d]);
    push(v, "w1", vec![d, 4 * d]);
    push(v, "b1", vec![4 * d]);
    push(v, "w2", vec![4 * d, d]);
    push(v, "b2", vec![d]);
}

/// Frozen dual-encoder weights plus their configuration.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: EncoderConfig,
    weights: ParamStore,
}

impl Backbone {
    /// Fresh random backbone: layer-norm gains start at one, biases at zero,
    /// embeddings and position tables N(0, 0.02), and every linear map
    /// N(0, 1/fan_in) so attention logits have unit-order spread from the
    /// start. Draw order follows [`weight_layout`], so a seed pins every
    /// weight.
    pub fn init(cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut weights = ParamStore::new();
        for (name, shape) in weight_layout(&cfg) {
            let mut t = Tensor::zeros(shape.clone());
            if name.ends_with("ln1.g") || name.ends_with("ln2.g") {
                t.data_mut().fill(1.0);
            } else if is_bias(&name) {
                // already zero
            } else if name.ends_with(".tok") {
                rng.fill_normal(t.data_mut(), TOKEN_STD);
            } else if is_embedding(&name) {
                rng.fill_normal(t.data_mut(), INIT_STD);
            } else {
                // rank-2 maps apply as x * W, so rows are the fan-in
                rng.fill_normal(t.data_mut(), 1.0 / (shape[0] as f64).sqrt());
            }
            weights.insert(name, t)?;
        }
        Ok(Backbone { cfg, weights })
    }

    pub fn from_parts(cfg: EncoderConfig, weights: ParamStore) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in weight_layout(&cfg) {
            let t = weights.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "backbone",
                    format!("{name} must be {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(Backbone { cfg, weights })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamStore {
        &mut self.weights
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in config_fields(&self.cfg) {
            w.u32(v as u32);
        }
        for (name, _) in weight_layout(&self.cfg) {
            for &x in self.weights.get(&name).expect("layout-complete").data() {
                w.f64(x);
            }
        }
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let mut fields = [0usize; 10];
        for f in fields.iter_mut() {
            *f = r.u32()? as usize;
        }
        let cfg = config_from_fields(&fields);
        cfg.validate()
            .map_err(|e| r.error(format!("invalid stored config: {e}")))?;
        let mut weights = ParamStore::new();
        for (name, shape) in weight_layout(&cfg) {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64().map_err(|e| match e {
                    Error::Format { path, offset, .. } => Error::Format {
                        path,
                        offset,
                        detail: format!("truncated while reading tensor {name}"),
                    },
                    other => other,
                })?);
            }
            weights
                .insert(name, Tensor::new(shape, data)?)
                .expect("layout names are unique");
        }
        r.finish()?;
        Ok(Backbone { cfg, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn is_bias(name: &str) -> bool {
    let tail = name.rsplit('.').next().unwrap_or("");
    matches!(tail, "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "b" | "patch_b")
}

fn is_embedding(name: &str) -> bool {
    let tail = name.rsplit('.').next().unwrap_or("");
    matches!(tail, "tok" | "pos" | "cls")
}

fn config_fields(cfg: &EncoderConfig) -> [usize; 10] {
    [
        cfg.layers,
        cfg.heads,
        cfg.d_t,
        cfg.d_v,
        cfg.d_joint,
        cfg.vocab,
        cfg.max_tokens,
        cfg.image,
        cfg.patch,
        cfg.channels,
    ]
}

fn config_from_fields(f: &[usize; 10]) -> EncoderConfig {
    EncoderConfig {
        layers: f[0],
        heads: f[1],
        d_t: f[2],
        d_v: f[3],
        d_joint: f[4],
        vocab: f[5],
        max_tokens: f[6],
        image: f[7],
        patch: f[8],
        channels: f[9],
    }
}
