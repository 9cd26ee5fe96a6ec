//! Finite-difference verification of every differentiable operation.
//!
//! Each case draws a fresh random instance per trial and returns the worst
//! relative error between reverse-mode and central-difference gradients.

use crate::error::Result;
use crate::losses::{mc_scores_var, nll_per_image, prob_loss_var};
use crate::model::{ForwardOptions, ModelDims, Noise, PplModel};
use crate::mog::{kl_to_standard_var, mixture_moments, reparameterize, stratified_component, SamplingMode};
use crate::numcore::gradcheck::{check_input, check_params, finite_difference_check, DEFAULT_STEP};
use crate::numcore::nn::{Init, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
use crate::numcore::{seeded_rng, AttentionShape, Graph, ParamStore, RngStream, Tensor, Var};
use crate::probdecoder::{DecoderDims, DecoderParams};
use crate::prompts::{diversity_loss_var, TextDims, TextSide};
use crate::synth::{ImageDims, ImageEncoder, TaskHead};
use crate::LossWeights;

pub const TRIALS: usize = 50;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per parameter tensor in module-level cases.
const COORDS: usize = 6;

type CaseFn = fn(&mut RngStream) -> Result<f64>;

/// One named gradient check.
pub struct Case {
    pub name: &'static str,
    run: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn rand(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0)
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        let m = lo + (hi - lo) * rng.uniform();
        *x = if rng.uniform() < 0.5 { -m } else { m };
    }
    t
}

fn positive(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = lo + (hi - lo) * rng.uniform();
    }
    t
}

/// `Σ r ⊙ y` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn unary(rng: &mut RngStream, x: Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let shape = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = op(&mut g, v)?;
        g.shape(y).to_vec()
    };
    let r = rand(rng, &shape);
    finite_difference_check(
        |g, v| {
            let y = op(g, v)?;
            project(g, y, &r)
        },
        &x,
        DEFAULT_STEP,
    )
}

/// Worst error over both arguments of a binary op.
fn binary(rng: &mut RngStream, a: Tensor, b: Tensor, op: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let shape = {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = op(&mut g, va, vb)?;
        g.shape(y).to_vec()
    };
    let r = rand(rng, &shape);
    let ea = finite_difference_check(
        |g, v| {
            let vb = g.constant(b.clone());
            let y = op(g, v, vb)?;
            project(g, y, &r)
        },
        &a,
        DEFAULT_STEP,
    )?;
    let eb = finite_difference_check(
        |g, v| {
            let va = g.constant(a.clone());
            let y = op(g, va, v)?;
            project(g, y, &r)
        },
        &b,
        DEFAULT_STEP,
    )?;
    Ok(ea.max(eb))
}

fn small_dim(rng: &mut RngStream) -> usize {
    rng.int_inclusive(1, 4)
}

fn case_matmul(rng: &mut RngStream) -> Result<f64> {
    let (m, k, n) = (small_dim(rng), small_dim(rng), small_dim(rng));
    let (a, b) = (rand(rng, &[m, k]), rand(rng, &[k, n]));
    binary(rng, a, b, |g, a, b| g.matmul(a, b))
}

fn case_batch_matmul(rng: &mut RngStream) -> Result<f64> {
    let (bt, m, n, k) = (small_dim(rng), small_dim(rng), small_dim(rng), small_dim(rng));
    let (a, b) = (rand(rng, &[bt * m, k]), rand(rng, &[bt * n, k]));
    binary(rng, a, b, move |g, a, b| g.batch_matmul_nt(a, b, bt))
}

fn elementwise_pair(rng: &mut RngStream) -> (Tensor, Tensor) {
    let shape = [small_dim(rng), small_dim(rng)];
    (rand(rng, &shape), rand(rng, &shape))
}

fn case_add(rng: &mut RngStream) -> Result<f64> {
    let (a, b) = elementwise_pair(rng);
    binary(rng, a, b, |g, a, b| g.add(a, b))
}

fn case_sub(rng: &mut RngStream) -> Result<f64> {
    let (a, b) = elementwise_pair(rng);
    binary(rng, a, b, |g, a, b| g.sub(a, b))
}

fn case_mul(rng: &mut RngStream) -> Result<f64> {
    let (a, b) = elementwise_pair(rng);
    binary(rng, a, b, |g, a, b| g.mul(a, b))
}

fn case_add_row(rng: &mut RngStream) -> Result<f64> {
    let (r, c) = (small_dim(rng), small_dim(rng));
    let (x, b) = (rand(rng, &[r, c]), rand(rng, &[c]));
    binary(rng, x, b, |g, x, b| g.add_row(x, b))
}

fn case_mul_row(rng: &mut RngStream) -> Result<f64> {
    let (r, c) = (small_dim(rng), small_dim(rng));
    let (x, b) = (rand(rng, &[r, c]), rand(rng, &[c]));
    binary(rng, x, b, |g, x, b| g.mul_row(x, b))
}

fn matrix(rng: &mut RngStream) -> Tensor {
    let shape = [small_dim(rng), small_dim(rng)];
    rand(rng, &shape)
}

fn case_scale(rng: &mut RngStream) -> Result<f64> {
    let s = rng.normal();
    let x = matrix(rng);
    unary(rng, x, move |g, x| Ok(g.scale(x, s)))
}

fn case_add_scalar(rng: &mut RngStream) -> Result<f64> {
    let s = rng.normal();
    let x = matrix(rng);
    unary(rng, x, move |g, x| Ok(g.add_scalar(x, s)))
}

fn case_exp(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.exp(x)))
}

fn case_log(rng: &mut RngStream) -> Result<f64> {
    let x = positive(rng, &[3, 2], 0.1, 3.0);
    unary(rng, x, |g, x| Ok(g.log(x)))
}

fn case_sqrt(rng: &mut RngStream) -> Result<f64> {
    let x = positive(rng, &[3, 2], 0.1, 3.0);
    unary(rng, x, |g, x| Ok(g.sqrt(x)))
}

fn case_square(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.square(x)))
}

fn case_sin(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.sin(x)))
}

fn case_softplus(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.softplus(x)))
}

fn case_gelu(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.gelu(x)))
}

fn case_relu(rng: &mut RngStream) -> Result<f64> {
    let x = away_from_zero(rng, &[3, 3], 0.01, 2.0);
    unary(rng, x, |g, x| Ok(g.relu(x)))
}

fn case_clamp(rng: &mut RngStream) -> Result<f64> {
    // bounds at ±1 with inputs kept clear of them
    let mut x = away_from_zero(rng, &[3, 3], 0.01, 1.6);
    for v in x.data_mut() {
        if (v.abs() - 1.0).abs() < 0.05 {
            *v *= 0.5;
        }
    }
    unary(rng, x, |g, x| Ok(g.clamp(x, -1.0, 1.0)))
}

fn case_sum(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.sum(x)))
}

fn case_mean(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.mean(x)))
}

fn case_sum_last(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.sum_last(x)))
}

fn case_mean_last(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    unary(rng, x, |g, x| Ok(g.mean_last(x)))
}

fn temperature(rng: &mut RngStream) -> f64 {
    0.3 + 2.0 * rng.uniform()
}

fn case_softmax(rng: &mut RngStream) -> Result<f64> {
    let t = temperature(rng);
    let x = matrix(rng);
    unary(rng, x, move |g, x| g.softmax(x, t))
}

fn case_log_softmax(rng: &mut RngStream) -> Result<f64> {
    let t = temperature(rng);
    let x = matrix(rng);
    unary(rng, x, move |g, x| g.log_softmax(x, t))
}

fn case_layer_norm(rng: &mut RngStream) -> Result<f64> {
    let (r, c) = (small_dim(rng), 1 + small_dim(rng));
    let x = rand(rng, &[r, c]);
    let gain = rand(rng, &[c]);
    let bias = rand(rng, &[c]);
    let r1 = rand(rng, &[r, c]);
    let ex = {
        let (gain, bias) = (gain.clone(), bias.clone());
        unary(rng, x.clone(), move |g, x| {
            let (gn, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
            g.layer_norm(x, gn, b, 1e-5)
        })?
    };
    let f_gain = |g: &mut Graph, v: Var| {
        let (xv, b) = (g.constant(x.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(xv, v, b, 1e-5)?;
        project(g, y, &r1)
    };
    let eg = finite_difference_check(f_gain, &gain, DEFAULT_STEP)?;
    let f_bias = |g: &mut Graph, v: Var| {
        let (xv, gn) = (g.constant(x.clone()), g.constant(gain.clone()));
        let y = g.layer_norm(xv, gn, v, 1e-5)?;
        project(g, y, &r1)
    };
    let eb = finite_difference_check(f_bias, &bias, DEFAULT_STEP)?;
    Ok(ex.max(eg).max(eb))
}

fn case_l2_normalize(rng: &mut RngStream) -> Result<f64> {
    let shape = [small_dim(rng), 1 + small_dim(rng)];
    let x = away_from_zero(rng, &shape, 0.2, 1.5);
    unary(rng, x, |g, x| Ok(g.l2_normalize(x)))
}

fn case_attention(rng: &mut RngStream) -> Result<f64> {
    let heads = rng.int_inclusive(1, 2);
    let d = heads * rng.int_inclusive(1, 3);
    let (batch, tq, tk) = (rng.int_inclusive(1, 2), small_dim(rng), small_dim(rng));
    let shape = AttentionShape { batch, tq, tk, heads };
    let q = rand(rng, &[batch * tq, d]);
    let k = rand(rng, &[batch * tk, d]);
    let v = rand(rng, &[batch * tk, d]);
    let r = rand(rng, &[batch * tq, d]);
    let mut worst = 0.0f64;
    for which in 0..3 {
        let f = |g: &mut Graph, x: Var| {
            let mut args = [q.clone(), k.clone(), v.clone()].map(|t| g.constant(t));
            args[which] = x;
            let y = g.attention(args[0], args[1], args[2], shape)?;
            project(g, y, &r)
        };
        let theta = [&q, &k, &v][which];
        worst = worst.max(finite_difference_check(f, theta, DEFAULT_STEP)?);
    }
    Ok(worst)
}

fn case_gather(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    let rows = x.outer();
    let idx: Vec<usize> = (0..5).map(|_| rng.int_inclusive(0, rows - 1)).collect();
    unary(rng, x, move |g, x| g.gather(x, idx.clone()))
}

fn case_group_mean(rng: &mut RngStream) -> Result<f64> {
    let x = rand(rng, &[5, 3]);
    let groups: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..rng.int_inclusive(1, 4)).map(|_| rng.int_inclusive(0, 4)).collect())
        .collect();
    unary(rng, x, move |g, x| g.group_mean(x, groups.clone()))
}

fn case_concat(rng: &mut RngStream) -> Result<f64> {
    let c = small_dim(rng);
    let (ra, rb) = (small_dim(rng), small_dim(rng));
    let a = rand(rng, &[ra, c]);
    let b = rand(rng, &[rb, c]);
    binary(rng, a, b, |g, a, b| g.concat(&[a, b, a]))
}

fn case_reshape(rng: &mut RngStream) -> Result<f64> {
    let x = rand(rng, &[2, 6]);
    unary(rng, x, |g, x| g.reshape(x, &[3, 4]))
}

fn case_pick(rng: &mut RngStream) -> Result<f64> {
    let x = matrix(rng);
    let (rows, c) = (x.outer(), x.last_dim());
    let idx: Vec<usize> = (0..rows).map(|_| rng.int_inclusive(0, c - 1)).collect();
    unary(rng, x, move |g, x| g.pick(x, idx.clone()))
}

/// Randomize every parameter so the check does not sit at the small-init point.
fn perturb(store: &mut ParamStore, rng: &mut RngStream, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += std * rng.normal();
        }
    }
}

fn module_check(
    rng: &mut RngStream,
    build: impl FnOnce(&mut Init) -> Result<Box<dyn Fn(&mut Graph) -> Result<Var>>>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(rng.next_u64(), 0);
    let f = build(&mut Init {
        store: &mut store,
        rng: &mut init_rng,
    })?;
    perturb(&mut store, rng, 0.3);
    check_params(&store, f, DEFAULT_STEP, Some(COORDS), rng)
}

fn case_linear_layer(rng: &mut RngStream) -> Result<f64> {
    let (n, p, q) = (small_dim(rng), small_dim(rng), small_dim(rng));
    let x = rand(rng, &[n, p]);
    let r = rand(rng, &[n, q]);
    module_check(rng, |init| {
        let lin = Linear::new(init, "lin", p, q)?;
        Ok(Box::new(move |g| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, xv)?;
            project(g, y, &r)
        }))
    })
}

fn case_layer_norm_module(rng: &mut RngStream) -> Result<f64> {
    let (n, d) = (small_dim(rng), 2 + small_dim(rng));
    let x = rand(rng, &[n, d]);
    let r = rand(rng, &[n, d]);
    module_check(rng, |init| {
        let ln = LayerNorm::new(init, "ln", d)?;
        Ok(Box::new(move |g| {
            let xv = g.constant(x.clone());
            let y = ln.forward(g, xv)?;
            project(g, y, &r)
        }))
    })
}

fn case_mha(rng: &mut RngStream) -> Result<f64> {
    let (batch, tq, tk, d) = (2, small_dim(rng), small_dim(rng), 4);
    let q = rand(rng, &[batch * tq, d]);
    let kv = rand(rng, &[batch * tk, d]);
    let r = rand(rng, &[batch * tq, d]);
    module_check(rng, |init| {
        let mha = MultiHeadAttention::new(init, "mha", d, 2)?;
        Ok(Box::new(move |g| {
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let y = mha.forward(g, qv, kvv, kvv, batch, tq, tk)?;
            project(g, y, &r)
        }))
    })
}

fn case_mlp(rng: &mut RngStream) -> Result<f64> {
    let (n, d) = (small_dim(rng), small_dim(rng));
    let x = rand(rng, &[n, d]);
    let r = rand(rng, &[n, 2]);
    module_check(rng, |init| {
        let mlp = Mlp::new(init, "mlp", d, 5, 2)?;
        Ok(Box::new(move |g| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, xv)?;
            project(g, y, &r)
        }))
    })
}

fn case_transformer_block(rng: &mut RngStream) -> Result<f64> {
    let (batch, len, d) = (2, small_dim(rng), 4);
    let x = rand(rng, &[batch * len, d]);
    let r = rand(rng, &[batch * len, d]);
    module_check(rng, |init| {
        let block = TransformerBlock::new(init, "blk", d, 2, 2)?;
        Ok(Box::new(move |g| {
            let xv = g.constant(x.clone());
            let y = block.forward(g, xv, batch, len)?;
            project(g, y, &r)
        }))
    })
}

fn tiny_text(rng: &mut RngStream) -> TextDims {
    TextDims {
        k: rng.int_inclusive(1, 3),
        l: 2,
        d_tok: 4,
        d: 4,
        classes: 3,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
    }
}

fn case_text_encoder(rng: &mut RngStream) -> Result<f64> {
    let dims = tiny_text(rng);
    let r = rand(rng, &[dims.classes * dims.k, dims.d]);
    module_check(rng, |init| {
        let text = TextSide::new(init, dims)?;
        Ok(Box::new(move |g| {
            let w = text.encode(g)?;
            project(g, w, &r)
        }))
    })
}

fn tiny_image() -> ImageDims {
    ImageDims {
        height: 4,
        width: 4,
        channels: 3,
        patch: 2,
        d: 4,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
    }
}

fn case_image_encoder(rng: &mut RngStream) -> Result<f64> {
    let dims = tiny_image();
    let batch = 2;
    let images = rand(rng, &[batch * dims.height * dims.width, dims.channels]);
    let r = rand(rng, &[batch * dims.positions(), dims.d]);
    module_check(rng, |init| {
        let enc = ImageEncoder::new(init, dims)?;
        Ok(Box::new(move |g| {
            let x = g.constant(images.clone());
            let v = enc.forward(g, x, batch)?;
            project(g, v, &r)
        }))
    })
}

fn decoder_dims() -> DecoderDims {
    DecoderDims {
        d: 4,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
    }
}

fn unit_rows(rng: &mut RngStream, rows: usize, d: usize) -> Tensor {
    let mut t = rand(rng, &[rows, d]);
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn case_decoder(rng: &mut RngStream) -> Result<f64> {
    let dims = decoder_dims();
    let (batch, q, hw) = (2, 3, (2, 3));
    let queries = unit_rows(rng, batch * q, dims.d);
    let visual = unit_rows(rng, batch * hw.0 * hw.1, dims.d);
    let r = rand(rng, &[batch * q, dims.d]);

    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(rng.next_u64(), 0);
    let dec = DecoderParams::new(
        &mut Init {
            store: &mut store,
            rng: &mut init_rng,
        },
        dims,
    )?;
    perturb(&mut store, rng, 0.3);

    let sigma_sum = |g: &mut Graph, qv: Var, vv: Var| -> Result<Var> {
        let out = dec.forward(g, qv, vv, batch, hw)?;
        project(g, out.sigma, &r)
    };
    let ep = check_params(
        &store,
        |g| {
            let (qv, vv) = (g.constant(queries.clone()), g.constant(visual.clone()));
            sigma_sum(g, qv, vv)
        },
        DEFAULT_STEP,
        Some(COORDS),
        rng,
    )?;
    let ew = check_input(
        Some(&store),
        |g, qv| {
            let vv = g.constant(visual.clone());
            sigma_sum(g, qv, vv)
        },
        &queries,
        DEFAULT_STEP,
    )?;
    let ev = check_input(
        Some(&store),
        |g, vv| {
            let qv = g.constant(queries.clone());
            sigma_sum(g, qv, vv)
        },
        &visual,
        DEFAULT_STEP,
    )?;
    Ok(ep.max(ew).max(ev))
}

fn case_task_head(rng: &mut RngStream) -> Result<f64> {
    let (n, d, c) = (small_dim(rng) + 1, 4, 3);
    let feat = unit_rows(rng, n, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.int_inclusive(0, c - 1)).collect();
    module_check(rng, |init| {
        let head = TaskHead::new(init, d, c)?;
        Ok(Box::new(move |g| {
            let f = g.constant(feat.clone());
            head.loss(g, f, &labels)
        }))
    })
}

fn case_diversity(rng: &mut RngStream) -> Result<f64> {
    let (c, k, d) = (small_dim(rng), 1 + small_dim(rng), 3);
    let w = unit_rows(rng, c * k, d);
    // slack well below the Gram excess so the hinge stays active
    let b = positive(rng, &[c], 0.0, 0.05);
    let active = (0..c).all(|ci| {
        let mut fro = 0.0;
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = w.row(ci * k + i).iter().zip(w.row(ci * k + j)).map(|(x, y)| x * y).sum();
                let e = dot - if i == j { 1.0 } else { 0.0 };
                fro += e * e;
            }
        }
        fro > 0.1
    });
    if !active {
        return case_diversity(rng);
    }
    binary(rng, w, b, move |g, w, b| diversity_loss_var(g, w, b, k))
}

fn case_pixel_loss(rng: &mut RngStream) -> Result<f64> {
    let (batch, n, p, c, d) = (2, rng.int_inclusive(1, 3), 3, 3, 4);
    let feat = unit_rows(rng, batch * p, d);
    let samples = unit_rows(rng, batch * n * c, d);
    let labels: Vec<usize> = (0..batch * p).map(|_| rng.int_inclusive(0, c - 1)).collect();
    let tau = 0.3;
    binary(rng, feat, samples, move |g, f, s| {
        let probs = mc_scores_var(g, f, s, batch, n, tau)?;
        let nll = nll_per_image(g, probs, &labels, batch)?;
        Ok(g.mean(nll))
    })
}

fn case_prob_loss(rng: &mut RngStream) -> Result<f64> {
    let (batch, c, d) = (2, 3, 4);
    let nll = positive(rng, &[batch], 0.1, 2.0);
    let var = positive(rng, &[batch * c, d], 0.05, 3.0);
    binary(rng, nll, var, move |g, l, v| prob_loss_var(g, l, v, batch))
}

fn case_kl(rng: &mut RngStream) -> Result<f64> {
    let mu = rand(rng, &[3, 4]);
    let sigma = positive(rng, &[3, 4], 0.2, 2.0);
    binary(rng, mu, sigma, |g, m, s| {
        let s2 = g.square(s);
        let lv = g.log(s2);
        kl_to_standard_var(g, m, s, lv)
    })
}

fn case_mixture_moments(rng: &mut RngStream) -> Result<f64> {
    let k = rng.int_inclusive(1, 3);
    let (classes, d) = (2, 3);
    let mu = rand(rng, &[classes * k, d]);
    let sigma = positive(rng, &[classes * k, d], 0.3, 1.5);
    let r = rand(rng, &[classes, d]);
    let r2 = rand(rng, &[classes, d]);
    binary(rng, mu, sigma, move |g, m, s| {
        let (mean, var) = mixture_moments(g, m, s, k)?;
        let a = project(g, mean, &r)?;
        let b = project(g, var, &r2)?;
        g.add(a, b)
    })
}

fn case_sampling_stratified(rng: &mut RngStream) -> Result<f64> {
    let k = rng.int_inclusive(1, 3);
    let (n, d) = (2 * k, 3);
    let mu = rand(rng, &[k, d]);
    let sigma = positive(rng, &[k, d], 0.2, 1.5);
    let noise = rand(rng, &[n, d]);
    let idx: Vec<usize> = (0..n).map(|i| stratified_component(i, n, k)).collect();
    binary(rng, mu, sigma, move |g, m, s| {
        let m = g.gather(m, idx.clone())?;
        let s = g.gather(s, idx.clone())?;
        let z = reparameterize(g, m, s, noise.clone())?;
        Ok(g.l2_normalize(z))
    })
}

fn case_sampling_moment_matched(rng: &mut RngStream) -> Result<f64> {
    let k = rng.int_inclusive(1, 3);
    let (n, d) = (3, 3);
    let mu = rand(rng, &[k, d]);
    let sigma = positive(rng, &[k, d], 0.3, 1.5);
    let noise = rand(rng, &[n, d]);
    binary(rng, mu, sigma, move |g, m, s| {
        let (mean, var) = mixture_moments(g, m, s, k)?;
        let sd = g.sqrt(var);
        let m = g.gather(mean, vec![0; n])?;
        let sd = g.gather(sd, vec![0; n])?;
        let z = reparameterize(g, m, sd, noise.clone())?;
        Ok(g.l2_normalize(z))
    })
}

fn tiny_model(k: usize) -> ModelDims {
    ModelDims {
        k,
        l: 2,
        d: 4,
        classes: 3,
        height: 4,
        width: 4,
        channels: 3,
        patch: 2,
        heads: 2,
        text_blocks: 1,
        image_blocks: 1,
        decoder_blocks: 1,
        mlp_ratio: 2,
    }
}

fn case_total(rng: &mut RngStream, mode: SamplingMode) -> Result<f64> {
    use crate::synth::{generate_scene, SceneSpec};
    let k = 2;
    let dims = tiny_model(k);
    let spec = SceneSpec {
        height: dims.height,
        width: dims.width,
        classes: dims.classes,
        channels: dims.channels,
        max_objects: 1,
        min_classes: 1,
        max_classes: 2,
        ..SceneSpec::default()
    };
    let palette = spec.palette();
    let scenes = vec![generate_scene(&spec, &palette, rng)?, generate_scene(&spec, &palette, rng)?];
    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(rng.next_u64(), 0);
    let model = PplModel::new(&mut store, &mut init_rng, dims)?;
    perturb(&mut store, rng, 0.1);
    let noise_seed = rng.next_u64();
    let weights = LossWeights {
        tau: 0.5,
        beta: 0.1,
        ..LossWeights::default()
    };
    let refs: Vec<_> = scenes.iter().collect();
    check_params(
        &store,
        |g| {
            let mut noise = seeded_rng(noise_seed, 0);
            let fwd = model.forward(
                g,
                &refs,
                ForwardOptions {
                    samples: k,
                    mode,
                    weights,
                    noise: Noise::Draw(&mut noise),
                    zero_sigma: false,
                },
            )?;
            Ok(fwd.total)
        },
        DEFAULT_STEP,
        Some(COORDS),
        rng,
    )
}

fn case_total_stratified(rng: &mut RngStream) -> Result<f64> {
    case_total(rng, SamplingMode::Stratified)
}

fn case_total_moment_matched(rng: &mut RngStream) -> Result<f64> {
    case_total(rng, SamplingMode::MomentMatched)
}

/// Every case, primitive operations first.
pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:literal, $f:expr) => {
            Case { name: $name, run: $f }
        };
    }
    vec![
        case!("matmul", case_matmul),
        case!("batch_matmul_nt", case_batch_matmul),
        case!("add", case_add),
        case!("sub", case_sub),
        case!("mul", case_mul),
        case!("add_row", case_add_row),
        case!("mul_row", case_mul_row),
        case!("scale", case_scale),
        case!("add_scalar", case_add_scalar),
        case!("exp", case_exp),
        case!("log", case_log),
        case!("sqrt", case_sqrt),
        case!("square", case_square),
        case!("sin", case_sin),
        case!("softplus", case_softplus),
        case!("gelu", case_gelu),
        case!("relu", case_relu),
        case!("clamp", case_clamp),
        case!("sum", case_sum),
        case!("mean", case_mean),
        case!("sum_last", case_sum_last),
        case!("mean_last", case_mean_last),
        case!("softmax", case_softmax),
        case!("log_softmax", case_log_softmax),
        case!("layer_norm", case_layer_norm),
        case!("l2_normalize", case_l2_normalize),
        case!("attention", case_attention),
        case!("gather", case_gather),
        case!("group_mean", case_group_mean),
        case!("concat", case_concat),
        case!("reshape", case_reshape),
        case!("pick", case_pick),
        case!("linear_layer", case_linear_layer),
        case!("layer_norm_module", case_layer_norm_module),
        case!("multi_head_attention", case_mha),
        case!("mlp", case_mlp),
        case!("transformer_block", case_transformer_block),
        case!("text_encoder", case_text_encoder),
        case!("image_encoder", case_image_encoder),
        case!("variance_decoder", case_decoder),
        case!("task_loss", case_task_head),
        case!("diversity_loss", case_diversity),
        case!("pixel_loss", case_pixel_loss),
        case!("prob_loss", case_prob_loss),
        case!("kl_loss", case_kl),
        case!("mixture_moments", case_mixture_moments),
        case!("sampling_stratified", case_sampling_stratified),
        case!("sampling_moment_matched", case_sampling_moment_matched),
        case!("total_loss_stratified", case_total_stratified),
        case!("total_loss_moment_matched", case_total_moment_matched),
    ]
}

pub fn run_case(case: &Case, trials: usize, seed: u64) -> Result<CaseReport> {
    let mut rng = seeded_rng(seed, crate::numcore::rng::streams::ANALYSIS);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..trials {
        let e = (case.run)(&mut rng)?;
        if !(e <= TOLERANCE) {
            failures += 1;
        }
        worst = worst.max(e);
    }
    Ok(CaseReport {
        name: case.name,
        trials,
        max_rel_err: worst,
        failures,
    })
}

/// Run every case for `trials` random instances.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    cases().iter().map(|c| run_case(c, trials, seed)).collect()
}
