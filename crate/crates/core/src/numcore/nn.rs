//! Layer primitives composed from [`Graph`] operations.

use super::graph::{AttentionShape, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::Result;

/// Standard deviation used for every weight matrix at init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut RngStream,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = self.rng.normal_tensor(shape, std);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&format!("{name}.weight"), &[fan_in, fan_out], INIT_STD)?,
            bias: init.zeros(&format!("{name}.bias"), &[fan_out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        linear(g, x, w, b)
    }
}

/// `x[n×p]·W[p×q] + b[q]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.full(&format!("{name}.gain"), &[d], 1.0)?,
            bias: init.zeros(&format!("{name}.bias"), &[d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(crate::Error::param(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(init, &format!("{name}.query"), d, d)?,
            key: Linear::new(init, &format!("{name}.key"), d, d)?,
            value: Linear::new(init, &format!("{name}.value"), d, d)?,
            output: Linear::new(init, &format!("{name}.output"), d, d)?,
            heads,
        })
    }

    /// `q` is `[batch·tq × d]`, `k` and `v` are `[batch·tk × d]`; attention
    /// stays within each batch element.
    pub fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tq: usize,
        tk: usize,
    ) -> Result<Var> {
        let qp = self.query.forward(g, q)?;
        let kp = self.key.forward(g, k)?;
        let vp = self.value.forward(g, v)?;
        let shape = AttentionShape {
            batch,
            tq,
            tk,
            heads: self.heads,
        };
        let a = g.attention(qp, kp, vp, shape)?;
        self.output.forward(g, a)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), d, d * mlp_ratio, d)?,
        })
    }

    /// Self-attention over `batch` sequences of `len` tokens stacked as rows.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h, batch, len, len)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
