//! Synthetic dense-prediction task: scene generation, the toy image encoder,
//! and the linear task head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{Init, Linear, TransformerBlock, INIT_STD};
use crate::numcore::{seeded_rng, Graph, ParamId, ParamStore, RngStream, Tensor, Var};
use crate::probdecoder::VisualFeatures;

pub const BACKGROUND: usize = 0;

/// Scene generator settings. Labels live in `[0, classes)`, with class 0 the
/// background; foreground classes are `1..classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub channels: usize,
    pub max_objects: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub noise_std: f64,
    /// Seed of the class colour archetypes.
    pub palette_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 6,
            channels: 8,
            max_objects: 2,
            min_classes: 1,
            max_classes: 5,
            noise_std: 0.25,
            palette_seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Constraint("scene classes >= 2 required".into()));
        }
        if self.min_classes < 1 || self.min_classes > self.max_classes || self.max_classes > self.classes - 1 {
            return Err(Error::Constraint(
                "1 <= min_classes <= max_classes <= classes - 1 required".into(),
            ));
        }
        if self.max_objects < 1 {
            return Err(Error::Constraint("max_objects >= 1 required".into()));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Constraint("scene dimensions must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Constraint("noise_std >= 0 required".into()));
        }
        Ok(())
    }

    /// One unit vector in `R^channels` per class, `[classes × channels]`.
    pub fn palette(&self) -> Tensor {
        let mut rng = seeded_rng(self.palette_seed, 0);
        let mut p = rng.normal_tensor(&[self.classes, self.channels], 1.0);
        for r in 0..self.classes {
            let n = p.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            p.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[H × W × ch]`.
    pub image: Tensor,
    /// Row-major class ids, `H·W`.
    pub labels: Vec<usize>,
    /// Distinct foreground classes visible in `labels`.
    pub n_classes_present: usize,
    pub height: usize,
    pub width: usize,
}

fn count_foreground(labels: &[usize], classes: usize) -> usize {
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l] = true;
    }
    seen.iter().skip(1).filter(|&&s| s).count()
}

/// Paint random rectangles and discs for a random set of foreground classes.
///
/// Layouts in which a chosen class ends up fully covered are redrawn, so the
/// number of visible foreground classes always equals the number drawn.
pub fn generate_scene(spec: &SceneSpec, palette: &Tensor, rng: &mut RngStream) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (hi_side, hi_r) = ((h.min(w) / 2).max(2), (h.min(w) / 4).max(1));
    let labels = loop {
        let k = rng.int_inclusive(spec.min_classes, spec.max_classes);
        let mut pool: Vec<usize> = (1..spec.classes).collect();
        rng.shuffle(&mut pool);
        pool.truncate(k);
        let mut labels = vec![BACKGROUND; h * w];
        for &c in &pool {
            let objects = rng.int_inclusive(1, spec.max_objects);
            for _ in 0..objects {
                if rng.uniform() < 0.5 {
                    let rh = rng.int_inclusive(2.min(hi_side), hi_side);
                    let rw = rng.int_inclusive(2.min(hi_side), hi_side);
                    let y0 = rng.int_inclusive(0, h - 1);
                    let x0 = rng.int_inclusive(0, w - 1);
                    for y in y0..(y0 + rh).min(h) {
                        for x in x0..(x0 + rw).min(w) {
                            labels[y * w + x] = c;
                        }
                    }
                } else {
                    let r = rng.int_inclusive(1, hi_r) as f64 + 0.5;
                    let cy = rng.int_inclusive(0, h - 1) as f64;
                    let cx = rng.int_inclusive(0, w - 1) as f64;
                    for y in 0..h {
                        for x in 0..w {
                            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                            if dy * dy + dx * dx <= r * r {
                                labels[y * w + x] = c;
                            }
                        }
                    }
                }
            }
        }
        if count_foreground(&labels, spec.classes) == k {
            break labels;
        }
    };
    let ch = spec.channels;
    let mut image = Tensor::zeros(&[h, w, ch]);
    for (p, &l) in labels.iter().enumerate() {
        let px = &mut image.data_mut()[p * ch..(p + 1) * ch];
        for (j, v) in px.iter_mut().enumerate() {
            *v = palette.row(l)[j];
        }
        if spec.noise_std > 0.0 {
            for v in px.iter_mut() {
                *v += spec.noise_std * rng.normal();
            }
        }
    }
    let n_classes_present = count_foreground(&labels, spec.classes);
    Ok(Scene {
        image,
        labels,
        n_classes_present,
        height: h,
        width: w,
    })
}

/// Majority label per `patch × patch` block; ties go to the lowest class id.
pub fn downsample_labels(labels: &[usize], h: usize, w: usize, patch: usize, classes: usize) -> Vec<usize> {
    let (hp, wp) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(hp * wp);
    let mut counts = vec![0usize; classes];
    for py in 0..hp {
        for px in 0..wp {
            counts.iter_mut().for_each(|c| *c = 0);
            for dy in 0..patch {
                for dx in 0..patch {
                    counts[labels[(py * patch + dy) * w + px * patch + dx]] += 1;
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Nearest-neighbour upsampling of a patch-grid label map to full resolution.
pub fn upsample_nearest(grid: &[usize], hp: usize, wp: usize, patch: usize) -> Vec<usize> {
    let (h, w) = (hp * patch, wp * patch);
    let mut out = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = grid[(y / patch) * wp + x / patch];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl ImageDims {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn positions(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }
}

/// Patch embedding, learned positions, transformer blocks, per-position
/// projection, and L2 normalization.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub projection: Linear,
    pub dims: ImageDims,
}

impl ImageEncoder {
    pub fn new(init: &mut Init, dims: ImageDims) -> Result<Self> {
        if dims.patch == 0 || dims.height % dims.patch != 0 || dims.width % dims.patch != 0 {
            return Err(Error::input(format!(
                "image {}x{} not divisible by patch size {}",
                dims.height, dims.width, dims.patch
            )));
        }
        let fan_in = dims.patch * dims.patch * dims.channels;
        Ok(Self {
            patch_embed: Linear::new(init, "image.patch_embed", fan_in, dims.d)?,
            positions: init.normal("image.positions", &[dims.positions(), dims.d], INIT_STD)?,
            blocks: (0..dims.blocks)
                .map(|i| TransformerBlock::new(init, &format!("image.block{i}"), dims.d, dims.heads, dims.mlp_ratio))
                .collect::<Result<Vec<_>>>()?,
            projection: Linear::new(init, "image.projection", dims.d, dims.d)?,
            dims,
        })
    }

    /// `images` is `[B·H·W × ch]` (each image row-major); returns `[B·P × d]`.
    pub fn forward(&self, g: &mut Graph, images: Var, batch: usize) -> Result<Var> {
        let ImageDims {
            height: h,
            width: w,
            channels: ch,
            patch,
            ..
        } = self.dims;
        if g.value(images).outer() != batch * h * w || g.value(images).last_dim() != ch {
            return Err(Error::shape("encode_image", g.shape(images), &[batch * h * w, ch]));
        }
        let (hp, wp) = self.dims.grid();
        let p = hp * wp;
        let mut idx = Vec::with_capacity(batch * h * w);
        for b in 0..batch {
            for py in 0..hp {
                for px in 0..wp {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            idx.push(b * h * w + (py * patch + dy) * w + px * patch + dx);
                        }
                    }
                }
            }
        }
        let patches = g.gather(images, idx)?;
        let patches = g.reshape(patches, &[batch * p, patch * patch * ch])?;
        let x = self.patch_embed.forward(g, patches)?;
        let pos = g.param(self.positions);
        let pos = g.gather(pos, (0..batch).flat_map(|_| 0..p).collect())?;
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x, batch, p)?;
        }
        let x = self.projection.forward(g, x)?;
        Ok(g.l2_normalize(x))
    }
}

/// Stack images into the `[B·H·W × ch]` layout the encoder consumes.
pub fn stack_images(scenes: &[&Scene]) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| Error::input("empty batch"))?;
    let ch = first.image.last_dim();
    let mut data = Vec::with_capacity(scenes.len() * first.image.len());
    for s in scenes {
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(vec![data.len() / ch, ch], data)
}

/// Encode one image on plain tensors.
pub fn encode_image(store: &ParamStore, encoder: &ImageEncoder, image: &Tensor) -> Result<VisualFeatures> {
    let ImageDims {
        height: h,
        width: w,
        channels: ch,
        patch,
        ..
    } = encoder.dims;
    if image.shape() != [h, w, ch] {
        return Err(Error::input(format!(
            "image shape {:?} does not match encoder {h}x{w}x{ch}",
            image.shape()
        )));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::input("image not divisible by patch size"));
    }
    let mut g = Graph::with_params(store);
    let x = g.constant(image.clone().reshape(&[h * w, ch])?);
    let v = encoder.forward(&mut g, x, 1)?;
    let (hp, wp) = encoder.dims.grid();
    VisualFeatures::new(g.value(v).clone(), hp, wp)
}

/// Linear classification head over visual features.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub linear: Linear,
}

impl TaskHead {
    pub fn new(init: &mut Init, d: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(init, "task_head", d, classes)?,
        })
    }

    /// Mean cross-entropy of the head's logits against patch labels.
    pub fn loss(&self, g: &mut Graph, feat: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.linear.forward(g, feat)?;
        task_loss_from_logits(g, logits, labels)
    }
}

pub fn task_loss_from_logits(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = g.value(logits).outer();
    let classes = g.value(logits).last_dim();
    if labels.len() != rows {
        return Err(Error::shape("task_loss", g.shape(logits), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!("label {bad} out of range [0, {classes})")));
    }
    let lp = g.log_softmax(logits, 1.0)?;
    let picked = g.pick(lp, labels.to_vec())?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Cross-entropy of the task head on plain features.
pub fn task_loss(store: &ParamStore, head: &TaskHead, feat: &VisualFeatures, labels_downsampled: &[usize]) -> Result<f64> {
    let mut g = Graph::with_params(store);
    let f = g.constant(feat.v.clone());
    let l = head.loss(&mut g, f, labels_downsampled)?;
    Ok(g.value(l).item())
}

/// Labels as a binary greyscale PGM (`P5`, maxval 255).
pub fn labels_to_pgm(scene: &Scene) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", scene.width, scene.height).into_bytes();
    out.extend(scene.labels.iter().map(|&l| l.min(255) as u8));
    out
}

/// Image as little-endian `f32`, `H × W × ch` row-major.
pub fn image_to_f32_le(scene: &Scene) -> Vec<u8> {
    scene
        .image
        .data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}
