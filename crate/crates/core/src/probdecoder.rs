//! Visual-context probabilistic decoder: maps a class-attribute embedding and
//! the image's visual features to a per-dimension standard deviation.
//!
//! The embedding is prepended as one token to four quadrant-mean summaries of
//! the visual grid. Five transformer blocks run over that 5-token sequence and
//! the output at the embedding's position becomes the query `q`. Two branches
//! then predict the log-variance:
//!
//! ```text
//! logvar = MLP_a(LN(q)) + MLP_b(MHA(q, v, v))
//! sigma  = exp(0.5 * clamp(logvar, -10, 10))
//! ```

use crate::error::{Error, Result};
use crate::numcore::nn::{Init, LayerNorm, Mlp, MultiHeadAttention, TransformerBlock, INIT_STD};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
/// Quadrant summary tokens per image.
pub const SUMMARY_TOKENS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            blocks: 5,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Row 0 marks the embedding token, row 1 the visual summary tokens.
    pub token_types: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub query_norm: LayerNorm,
    pub norm_branch: Mlp,
    pub cross_attention: MultiHeadAttention,
    pub attention_branch: Mlp,
    pub dims: DecoderDims,
}

/// Per-position visual embeddings on an `h × w` grid, unit norm per row.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub v: Tensor,
    pub h: usize,
    pub w: usize,
}

impl VisualFeatures {
    pub fn new(v: Tensor, h: usize, w: usize) -> Result<Self> {
        if v.ndim() != 2 || v.outer() != h * w {
            return Err(Error::shape("visual features", v.shape(), &[h * w]));
        }
        Ok(Self { v, h, w })
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Row indices of the four quadrants of an `h × w` grid (row-major).
///
/// Halves split at `ceil(n/2)` and `floor(n/2)`, so an odd middle line belongs
/// to both halves and a 1-wide grid still yields four non-empty quadrants.
pub fn quadrant_groups(h: usize, w: usize) -> Vec<Vec<usize>> {
    let halves = |n: usize| [(0, n.div_ceil(2)), (n / 2, n)];
    let mut out = Vec::with_capacity(SUMMARY_TOKENS);
    for (r0, r1) in halves(h) {
        for (c0, c1) in halves(w) {
            let mut g = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    g.push(r * w + c);
                }
            }
            out.push(g);
        }
    }
    out
}

/// Decoder outputs for a batch of queries.
pub struct SigmaOutput {
    /// `[rows × d]`, strictly positive.
    pub sigma: Var,
    /// Clamped log-variance, `[rows × d]`.
    pub logvar: Var,
}

impl DecoderParams {
    pub fn new(init: &mut Init, dims: DecoderDims) -> Result<Self> {
        let d = dims.d;
        Ok(Self {
            token_types: init.normal("decoder.token_types", &[2, d], INIT_STD)?,
            blocks: (0..dims.blocks)
                .map(|i| TransformerBlock::new(init, &format!("decoder.block{i}"), d, dims.heads, dims.mlp_ratio))
                .collect::<Result<Vec<_>>>()?,
            query_norm: LayerNorm::new(init, "decoder.query_norm", d)?,
            norm_branch: Mlp::new(init, "decoder.norm_branch", d, d * dims.mlp_ratio, d)?,
            cross_attention: MultiHeadAttention::new(init, "decoder.cross_attention", d, dims.heads)?,
            attention_branch: Mlp::new(init, "decoder.attention_branch", d, d * dims.mlp_ratio, d)?,
            dims,
        })
    }

    /// Standard deviations for `queries` (`[B·Q × d]`, grouped by image)
    /// against visual features `visual` (`[B·P × d]`, grid `h × w`).
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        visual: Var,
        batch: usize,
        grid: (usize, usize),
    ) -> Result<SigmaOutput> {
        let d = self.dims.d;
        let (h, w) = grid;
        let positions = h * w;
        if positions == 0 {
            return Err(Error::input("empty visual grid"));
        }
        let rows = g.value(queries).outer();
        if batch == 0 || rows % batch != 0 || g.value(visual).outer() != batch * positions {
            return Err(Error::shape("predict_sigma", g.shape(queries), g.shape(visual)));
        }
        if g.value(queries).last_dim() != d || g.value(visual).last_dim() != d {
            return Err(Error::shape("predict_sigma", g.shape(queries), &[d]));
        }
        let per_image = rows / batch;
        let quads = quadrant_groups(h, w);
        let groups = (0..batch)
            .flat_map(|b| quads.iter().map(move |q| q.iter().map(|&p| b * positions + p).collect()))
            .collect();
        let summary = g.group_mean(visual, groups)?;
        let table = g.concat(&[queries, summary])?;
        let seq = 1 + SUMMARY_TOKENS;
        let mut idx = Vec::with_capacity(rows * seq);
        let mut types = Vec::with_capacity(rows * seq);
        for r in 0..rows {
            let b = r / per_image;
            idx.push(r);
            types.push(0);
            for q in 0..SUMMARY_TOKENS {
                idx.push(rows + b * SUMMARY_TOKENS + q);
                types.push(1);
            }
        }
        let tokens = g.gather(table, idx)?;
        let tt = g.param(self.token_types);
        let tt = g.gather(tt, types)?;
        let mut x = g.add(tokens, tt)?;
        for block in &self.blocks {
            x = block.forward(g, x, rows, seq)?;
        }
        let q = g.gather(x, (0..rows).map(|r| r * seq).collect())?;
        let a = self.query_norm.forward(g, q)?;
        let a = self.norm_branch.forward(g, a)?;
        let m = self
            .cross_attention
            .forward(g, q, visual, visual, batch, per_image, positions)?;
        let m = self.attention_branch.forward(g, m)?;
        let logvar = g.add(a, m)?;
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        let half = g.scale(logvar, 0.5);
        let sigma = g.exp(half);
        Ok(SigmaOutput { sigma, logvar })
    }
}

/// Standard deviation for a single class-attribute embedding.
pub fn predict_sigma(
    store: &ParamStore,
    params: &DecoderParams,
    w_ck: &Tensor,
    visual: &VisualFeatures,
) -> Result<Tensor> {
    if visual.positions() == 0 {
        return Err(Error::input("empty visual grid"));
    }
    let d = params.dims.d;
    let mut g = Graph::with_params(store);
    let q = g.constant(w_ck.clone().reshape(&[1, d])?);
    let v = g.constant(visual.v.clone());
    let out = params.forward(&mut g, q, v, 1, (visual.h, visual.w))?;
    g.value(out.sigma).clone().reshape(&[d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;

    fn setup(d: usize) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3, 0);
        let p = DecoderParams::new(
            &mut Init { store: &mut store, rng: &mut rng },
            DecoderDims {
                d,
                heads: 2,
                blocks: 5,
                mlp_ratio: 2,
            },
        )
        .unwrap();
        (store, p)
    }

    fn unit_rows(mut t: Tensor) -> Tensor {
        for r in 0..t.outer() {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            t.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        t
    }

    #[test]
    fn quadrants_cover_grid() {
        let q = quadrant_groups(4, 4);
        assert_eq!(q.len(), 4);
        assert_eq!(q[0], vec![0, 1, 4, 5]);
        assert_eq!(q[3], vec![10, 11, 14, 15]);
        let one = quadrant_groups(1, 1);
        assert!(one.iter().all(|g| g == &vec![0]));
    }

    #[test]
    fn sigma_within_clamp_and_pure() {
        let (store, p) = setup(8);
        let mut rng = seeded_rng(4, 1);
        let w = unit_rows(rng.normal_tensor(&[1, 8], 1.0)).reshape(&[8]).unwrap();
        let v = VisualFeatures::new(unit_rows(rng.normal_tensor(&[16, 8], 1.0)), 4, 4).unwrap();
        let s1 = predict_sigma(&store, &p, &w, &v).unwrap();
        let s2 = predict_sigma(&store, &p, &w, &v).unwrap();
        assert_eq!(s1, s2);
        let (lo, hi) = ((-5f64).exp(), 5f64.exp());
        assert!(s1.data().iter().all(|&s| s > 0.0 && s >= lo && s <= hi));
    }

    #[test]
    fn empty_grid_is_an_input_error() {
        let (store, p) = setup(8);
        let w = Tensor::full(&[8], 0.3);
        let v = VisualFeatures {
            v: Tensor::zeros(&[0, 8]),
            h: 0,
            w: 0,
        };
        assert!(matches!(predict_sigma(&store, &p, &w, &v), Err(Error::Input(_))));
    }

    #[test]
    fn invariant_to_permutations_within_quadrants_and_quadrant_swaps() {
        let (store, p) = setup(8);
        let mut rng = seeded_rng(6, 1);
        let w = unit_rows(rng.normal_tensor(&[1, 8], 1.0)).reshape(&[8]).unwrap();
        let v = unit_rows(rng.normal_tensor(&[16, 8], 1.0));
        let base = predict_sigma(&store, &p, &w, &VisualFeatures::new(v.clone(), 4, 4).unwrap()).unwrap();
        // swap the top-left and bottom-right quadrants, and shuffle inside each
        let quads = quadrant_groups(4, 4);
        let mut perm = vec![0usize; 16];
        let order = [3, 1, 2, 0];
        for (dst_q, &src_q) in order.iter().enumerate() {
            let mut src = quads[src_q].clone();
            src.reverse();
            for (dst, s) in quads[dst_q].iter().zip(src) {
                perm[*dst] = s;
            }
        }
        let mut pv = Tensor::zeros(&[16, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            pv.row_mut(dst).copy_from_slice(v.row(src));
        }
        let moved = predict_sigma(&store, &p, &w, &VisualFeatures::new(pv, 4, 4).unwrap()).unwrap();
        assert!(base.max_abs_diff(&moved) < 1e-10);
    }
}
