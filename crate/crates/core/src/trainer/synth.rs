use crate::encoder::{Backbone, EncoderConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::pool::extract_prototype;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::data::{Sample, TaskDataset};
use crate::trainer::streams;

const SHAPE_KINDS: usize = 6;
const TEXTURE_KINDS: usize = 4;
const STYLE_KINDS: usize = 6;

/// The base split carries this many times `train_per_class` images: the
/// encoder trains from scratch on it and needs the extra render variety,
/// while prompt tuning on the domain splits starts from aligned features.
pub const BASE_TRAIN_FACTOR: usize = 4;

/// Benchmark dimensions. Classes are (shape, texture) pairs shared by every
/// domain; each domain renders them under its own aggressive style and names
/// them with its own tag tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.n_domains == 0
            || self.n_classes < 2
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::config(
                "benchmark needs at least one domain, two classes and one sample per split"
                    .to_string(),
            ));
        }
        let (n_shapes, n_textures) = class_grid(self.n_classes)?;
        let words = cfg.vocab / 2;
        if n_shapes > words / 2 || n_textures > words - words / 2 {
            return Err(Error::config(format!(
                "vocabulary {} too small for a {n_shapes}x{n_textures} class grid",
                cfg.vocab
            )));
        }
        if TAGS_PER_DOMAIN * self.n_domains > cfg.vocab - words {
            return Err(Error::config(format!(
                "vocabulary {} has too few tag tokens for {} domains",
                cfg.vocab, self.n_domains
            )));
        }
        if cfg.max_tokens < TAGS_PER_DOMAIN + 2 {
            return Err(Error::config(format!(
                "domain class names need max_tokens >= {}",
                TAGS_PER_DOMAIN + 2
            )));
        }
        if cfg.channels != 3 {
            return Err(Error::config(format!(
                "renderer draws 3-channel images, config has {}",
                cfg.channels
            )));
        }
        Ok(())
    }
}

/// The base pretraining set plus the ordered continual tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub base: TaskDataset,
    pub tasks: Vec<TaskDataset>,
}

/// Smallest shape-count-by-texture-count grid covering `n` classes.
fn class_grid(n: usize) -> Result<(usize, usize)> {
    for shapes in 1..=SHAPE_KINDS {
        let textures = n.div_ceil(shapes);
        if textures <= TEXTURE_KINDS
            && shapes * textures >= n
            && (shapes >= textures || shapes == SHAPE_KINDS)
        {
            return Ok((shapes, textures));
        }
    }
    Err(Error::config(format!(
        "at most {} classes supported, asked for {n}",
        SHAPE_KINDS * TEXTURE_KINDS
    )))
}

fn shape_mask(kind: usize, y: f64, x: f64, n: f64) -> f64 {
    let cy = (n - 1.0) / 2.0;
    let (dy, dx) = (y - cy, x - cy);
    let hit = match kind % SHAPE_KINDS {
        0 => dy * dy + dx * dx <= (0.33 * n) * (0.33 * n),
        1 => dy.abs() <= 0.3 * n && dx.abs() <= 0.3 * n,
        2 => dy.abs() + dx.abs() <= 0.42 * n,
        3 => {
            (dy.abs() <= 0.14 * n && dx.abs() <= 0.42 * n)
                || (dx.abs() <= 0.14 * n && dy.abs() <= 0.42 * n)
        }
        4 => {
            let r = (dy * dy + dx * dx).sqrt();
            (0.2 * n..=0.42 * n).contains(&r)
        }
        _ => {
            ((dy - dx).abs() <= 0.16 * n || (dy + dx).abs() <= 0.16 * n)
                && dy.abs() <= 0.42 * n
                && dx.abs() <= 0.42 * n
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

fn texture_mod(kind: usize, y: usize, x: usize) -> f64 {
    match kind % TEXTURE_KINDS {
        0 => 1.0,
        1 => {
            if (y / 2 + x / 2).is_multiple_of(2) {
                1.0
            } else {
                0.4
            }
        }
        2 => {
            if y % 4 < 2 {
                1.0
            } else {
                0.4
            }
        }
        _ => {
            if x % 4 < 2 {
                1.0
            } else {
                0.4
            }
        }
    }
}

/// Maps the grayscale pattern value into RGB. Style 0 is the neutral base
/// rendering; the rest invert contrast, flip single channels or add gratings
/// so a base-pretrained encoder sees the domains as far off-distribution.
/// Every style keeps the channel sum varying with the pattern: a projection
/// trained on gray images reads mostly the luminance direction, and a style
/// that hid the pattern from it would cap prompted accuracy, not just the
/// zero-shot accuracy the shift is meant to depress.
fn style_map(style: usize, g: f64, y: usize, x: usize) -> [f64; 3] {
    match style {
        0 => [g, g, g],
        1 => [1.0 - g, 1.0 - g, 1.0 - g],
        2 => [g, 1.0 - g, g],
        3 => {
            let w = if (y + x) % 4 < 2 { 0.3 } else { -0.3 };
            [g + w, g - w, g]
        }
        4 => [1.0 - g, g, g],
        5 => [g, g, 1.0 - g],
        _ => {
            let w = if x % 4 < 2 { 0.3 } else { -0.3 };
            [g, g + w, g - w]
        }
    }
}

fn render(cfg: &EncoderConfig, shape: usize, texture: usize, style: usize, rng: &mut Rng) -> Tensor {
    let n = cfg.image;
    let jit = (n / 8).max(1) as i64;
    let dy = rng.below((2 * jit + 1) as usize) as i64 - jit;
    let dx = rng.below((2 * jit + 1) as usize) as i64 - jit;
    let amp = rng.range(0.8, 1.0);
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            let p = shape_mask(shape, sy as f64, sx as f64, n as f64) * texture_mod(texture, y, x);
            let g = 0.12 + 0.75 * amp * p;
            let rgb = style_map(style, g, y, x);
            for c in rgb {
                data.push((c + 0.02 * rng.normal()).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, n, 3], data).expect("render fills the image exactly")
}

fn render_split(
    cfg: &EncoderConfig,
    spec: &GenSpec,
    domain: u64,
    style: usize,
    per_class: usize,
    is_test: bool,
) -> Vec<Sample> {
    let (n_shapes, _) = class_grid(spec.n_classes).expect("validated");
    let mut samples = Vec::with_capacity(spec.n_classes * per_class);
    for class in 0..spec.n_classes {
        let (shape, texture) = (class % n_shapes, class / n_shapes);
        for j in 0..per_class {
            let payload = (domain << 40)
                | ((class as u64) << 24)
                | ((j as u64) << 1)
                | u64::from(is_test);
            let mut rng = Rng::derived(spec.seed, streams::label(streams::RENDER, payload));
            samples.push(Sample {
                image: render(cfg, shape, texture, style, &mut rng),
                label: class,
            });
        }
    }
    samples
}

/// Tags per domain name: two before and two after the class words. The tag
/// block is what separates one domain's prototype from another's, so it
/// outweighs the class words the domains share.
pub const TAGS_PER_DOMAIN: usize = 4;

fn class_name(shape_tok: u32, tex_tok: u32, tags: Option<&[u32]>) -> TokenSeq {
    let ids = match tags {
        None => vec![shape_tok, tex_tok],
        Some(t) => vec![t[0], t[1], shape_tok, tex_tok, t[2], t[3]],
    };
    TokenSeq::new(ids).expect("names are non-empty")
}

/// Deterministic benchmark: a neutral-style base set named with bare
/// shape-texture word pairs, then one task per domain with styled images
/// and tag-wrapped names. Tag pairs are drawn without replacement, so name
/// sequences never collide across tasks.
pub fn gen_benchmark(cfg: &EncoderConfig, spec: &GenSpec) -> Result<Benchmark> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let (n_shapes, _) = class_grid(spec.n_classes)?;
    let words = cfg.vocab / 2;
    let shape_tok = |s: usize| s as u32;
    let tex_tok = |t: usize| (words / 2 + t) as u32;

    let mut tag_space: Vec<u32> = (words as u32..cfg.vocab as u32).collect();
    let mut tag_rng = Rng::derived(spec.seed, streams::label(streams::TAGS, 0));
    tag_rng.shuffle(&mut tag_space);

    let names = |tags: Option<&[u32]>| -> Vec<TokenSeq> {
        (0..spec.n_classes)
            .map(|c| class_name(shape_tok(c % n_shapes), tex_tok(c / n_shapes), tags))
            .collect()
    };

    // the base set renders with style 0 under its own stream id, one past
    // the last domain
    let base_id = spec.n_domains as u64;
    let base = TaskDataset {
        task_id: "base".to_string(),
        class_names: names(None),
        train: render_split(
            cfg,
            spec,
            base_id,
            0,
            BASE_TRAIN_FACTOR * spec.train_per_class,
            false,
        ),
        test: render_split(cfg, spec, base_id, 0, spec.test_per_class, true),
    };

    let mut tasks = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let tags = &tag_space[TAGS_PER_DOMAIN * d..TAGS_PER_DOMAIN * (d + 1)];
        let style = 1 + d % STYLE_KINDS;
        tasks.push(TaskDataset {
            task_id: format!("domain-{:02}", d + 1),
            class_names: names(Some(tags)),
            train: render_split(cfg, spec, d as u64, style, spec.train_per_class, false),
            test: render_split(cfg, spec, d as u64, style, spec.test_per_class, true),
        });
    }

    let bench = Benchmark { base, tasks };
    bench.base.validate(cfg)?;
    for t in &bench.tasks {
        t.validate(cfg)?;
    }
    Ok(bench)
}

/// Checks every pair of task prototypes under the (pretrained) backbone and
/// re-draws the later task's tag tokens while any cross similarity reaches
/// `max_cross`. Returns the final key per task. Names keep their classes;
/// only the two tag positions change.
pub fn enforce_key_margins(
    backbone: &Backbone,
    tasks: &mut [TaskDataset],
    max_cross: f64,
    max_rounds: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let cfg = backbone.cfg();
    let words = cfg.vocab / 2;
    let mut rng = Rng::derived(seed, streams::label(streams::REROLL, 0));
    let mut round = 0;
    loop {
        let mut keys = Vec::with_capacity(tasks.len());
        for t in tasks.iter() {
            keys.push(extract_prototype(backbone, &t.class_names)?);
        }
        let mut worst: Option<(usize, usize, f64)> = None;
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                let sim = crate::tensor::cosine(&keys[i], &keys[j])?;
                if worst.is_none_or(|(_, _, w)| sim > w) {
                    worst = Some((i, j, sim));
                }
            }
        }
        match worst {
            Some((i, j, sim)) if sim >= max_cross => {
                if round >= max_rounds {
                    return Err(Error::contract(format!(
                        "prototype margin unmet after {max_rounds} re-rolls: tasks {i} and {j} \
                         at cosine {sim:.4}, limit {max_cross}"
                    )));
                }
                round += 1;
                let in_use: Vec<u32> = tasks
                    .iter()
                    .flat_map(|t| t.class_names.iter())
                    .flat_map(|n| {
                        let ids = n.ids();
                        let k = ids.len();
                        [ids[0], ids[1], ids[k - 2], ids[k - 1]]
                    })
                    .collect();
                let mut free: Vec<u32> = (words as u32..cfg.vocab as u32)
                    .filter(|t| !in_use.contains(t))
                    .collect();
                if free.len() < TAGS_PER_DOMAIN {
                    return Err(Error::contract(
                        "tag vocabulary exhausted while separating prototypes".to_string(),
                    ));
                }
                rng.shuffle(&mut free);
                let tags = &free[..TAGS_PER_DOMAIN];
                for name in &mut tasks[j].class_names {
                    let mut ids = name.ids().to_vec();
                    let k = ids.len();
                    ids[0] = tags[0];
                    ids[1] = tags[1];
                    ids[k - 2] = tags[2];
                    ids[k - 1] = tags[3];
                    *name = TokenSeq::new(ids)?;
                }
            }
            _ => return Ok(keys),
        }
    }
}
