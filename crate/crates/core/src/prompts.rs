//! Class-agnostic attribute prompts, the class token table, the toy text
//! encoder, and the diversity regularizer.

use crate::error::{Error, Result};
use crate::numcore::graph::softplus;
use crate::numcore::nn::{Init, Linear, TransformerBlock, INIT_STD};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Initial overlap budget of the diversity hinge.
pub const SLACK_INIT: f64 = 0.1;

/// Shape of the text side of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextDims {
    /// Attribute prompts.
    pub k: usize,
    /// Context tokens per prompt.
    pub l: usize,
    pub d_tok: usize,
    /// Embedding width.
    pub d: usize,
    pub classes: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

/// `K` learnable prompt templates of `L` context vectors each.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub contexts: ParamId,
    pub k: usize,
    pub l: usize,
    pub d_tok: usize,
}

/// One learnable token per class.
#[derive(Clone, Debug)]
pub struct ClassTokens {
    pub tokens: ParamId,
    pub classes: usize,
}

/// Per-class overlap budget `b_c = softplus(raw_b[c])`.
#[derive(Clone, Debug)]
pub struct SlackVector {
    pub raw: ParamId,
}

impl SlackVector {
    pub fn effective(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.raw).data().iter().map(|&x| softplus(x)).collect()
    }
}

/// Two transformer blocks over `[p_1..p_L, t_c]`, mean-pool, project, normalize.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub projection: Linear,
    pub dims: TextDims,
}

/// Per-class, per-attribute unit-norm embeddings, shape `[C × K × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeEmbeddings {
    pub w: Tensor,
}

impl AttributeEmbeddings {
    /// `[K × d]` block for class `c`.
    pub fn class(&self, c: usize) -> Tensor {
        let (k, d) = (self.w.shape()[1], self.w.shape()[2]);
        let data = self.w.data()[c * k * d..(c + 1) * k * d].to_vec();
        Tensor::new(vec![k, d], data).expect("class block")
    }
}

/// All text-side parameters.
#[derive(Clone, Debug)]
pub struct TextSide {
    pub prompts: PromptSet,
    pub classes: ClassTokens,
    pub slack: SlackVector,
    pub encoder: TextEncoder,
}

impl TextSide {
    pub fn new(init: &mut Init, dims: TextDims) -> Result<Self> {
        if dims.k == 0 || dims.l == 0 {
            return Err(Error::Constraint("K >= 1 and L >= 1 required".into()));
        }
        if dims.classes < 2 {
            return Err(Error::Constraint("at least 2 classes required".into()));
        }
        let prompts = PromptSet {
            contexts: init.normal("prompts.contexts", &[dims.k, dims.l, dims.d_tok], INIT_STD)?,
            k: dims.k,
            l: dims.l,
            d_tok: dims.d_tok,
        };
        let classes = ClassTokens {
            tokens: init.normal("prompts.class_tokens", &[dims.classes, dims.d_tok], INIT_STD)?,
            classes: dims.classes,
        };
        let raw_b = SLACK_INIT.exp_m1().ln();
        let slack = SlackVector {
            raw: init.full("prompts.slack", &[dims.classes], raw_b)?,
        };
        let positions = init.normal("text.positions", &[dims.l + 1, dims.d_tok], INIT_STD)?;
        let blocks = (0..dims.blocks)
            .map(|i| TransformerBlock::new(init, &format!("text.block{i}"), dims.d_tok, dims.heads, dims.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let projection = Linear::new(init, "text.projection", dims.d_tok, dims.d)?;
        Ok(Self {
            prompts,
            classes,
            slack,
            encoder: TextEncoder {
                positions,
                blocks,
                projection,
                dims,
            },
        })
    }

    /// Differentiable class-attribute embeddings, `[C·K × d]` with row `c·K + k`.
    pub fn encode(&self, g: &mut Graph) -> Result<Var> {
        let TextDims {
            k, l, d_tok, classes, ..
        } = self.encoder.dims;
        let ctx = g.param(self.prompts.contexts);
        let ctx = g.reshape(ctx, &[k * l, d_tok])?;
        let cls = g.param(self.classes.tokens);
        let table = g.concat(&[ctx, cls])?;
        let seq = l + 1;
        let mut idx = Vec::with_capacity(classes * k * seq);
        let mut pos_idx = Vec::with_capacity(classes * k * seq);
        for c in 0..classes {
            for a in 0..k {
                for t in 0..l {
                    idx.push(a * l + t);
                    pos_idx.push(t);
                }
                idx.push(k * l + c);
                pos_idx.push(l);
            }
        }
        let tokens = g.gather(table, idx)?;
        let pos = g.param(self.encoder.positions);
        let pos = g.gather(pos, pos_idx)?;
        let mut x = g.add(tokens, pos)?;
        for block in &self.encoder.blocks {
            x = block.forward(g, x, classes * k, seq)?;
        }
        let groups = (0..classes * k)
            .map(|s| (s * seq..(s + 1) * seq).collect())
            .collect();
        let pooled = g.group_mean(x, groups)?;
        let w = self.encoder.projection.forward(g, pooled)?;
        Ok(g.l2_normalize(w))
    }

    /// Effective slack `b` as a graph node, `[C]`.
    pub fn slack(&self, g: &mut Graph) -> Var {
        let raw = g.param(self.slack.raw);
        g.softplus(raw)
    }
}

/// Run the text encoder for every (class, attribute) pair.
pub fn encode_class_attributes(store: &ParamStore, text: &TextSide) -> Result<AttributeEmbeddings> {
    let TextDims { k, d, classes, .. } = text.encoder.dims;
    let mut g = Graph::with_params(store);
    let w = text.encode(&mut g)?;
    let w = g.value(w).clone().reshape(&[classes, k, d])?;
    Ok(AttributeEmbeddings { w })
}

/// `max(‖W Wᵀ − I‖_F² − b, 0)` for one class block `W` of shape `[K × d]`.
pub fn diversity_loss(w_c: &Tensor, b_c: f64) -> f64 {
    let k = w_c.outer();
    let mut fro = 0.0;
    for i in 0..k {
        for j in 0..k {
            let gij: f64 = w_c.row(i).iter().zip(w_c.row(j)).map(|(a, b)| a * b).sum();
            let e = gij - if i == j { 1.0 } else { 0.0 };
            fro += e * e;
        }
    }
    (fro - b_c).max(0.0)
}

/// Mean over classes of the diversity hinge; `w` is `[C·K × d]`, `b` is `[C]`.
pub fn diversity_loss_var(g: &mut Graph, w: Var, b: Var, k: usize) -> Result<Var> {
    let rows = g.value(w).outer();
    if k == 0 || rows % k != 0 {
        return Err(Error::shape("diversity_loss", g.shape(w), &[k]));
    }
    let classes = rows / k;
    if g.value(b).len() != classes {
        return Err(Error::shape("diversity_loss", g.shape(w), g.shape(b)));
    }
    let gram = g.batch_matmul_nt(w, w, classes)?;
    let mut eye = Tensor::zeros(&[classes * k, k]);
    for c in 0..classes {
        for i in 0..k {
            eye.row_mut(c * k + i)[i] = 1.0;
        }
    }
    let eye = g.constant(eye);
    let diff = g.sub(gram, eye)?;
    let sq = g.square(diff);
    let sq = g.reshape(sq, &[classes, k * k])?;
    let fro = g.sum_last(sq);
    let b = g.reshape(b, &[classes])?;
    let excess = g.sub(fro, b)?;
    let hinge = g.relu(excess);
    Ok(g.mean(hinge))
}
