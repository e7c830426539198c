//! Pre-norm multi-head attention blocks.

use rand::Rng;

use crate::checkpoint::{Bound, ParamStore};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::{Error, Result, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        let l = |s: &str| Linear::new(format!("{name}.{s}"), dim, dim);
        Self { q: l("q"), k: l("k"), v: l("v"), o: l("o"), heads, dim }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng);
        }
    }

    /// `(n x h x dh) -> (h x n x dh)`.
    fn split<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let n = t.shape(x)[0];
        let x = t.reshape(x, &[n, self.heads, self.dim / self.heads])?;
        t.permute(x, &[1, 0, 2])
    }

    /// Queries from `xq: n x D`, keys and values from `xkv: m x D`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, xq: Var, xkv: Var) -> Result<Var> {
        let n = t.shape(xq)[0];
        let q = self.q.forward(t, b, xq)?;
        let k = self.k.forward(t, b, xkv)?;
        let v = self.v.forward(t, b, xkv)?;
        let q = self.split(t, q)?;
        let k = self.split(t, k)?;
        let v = self.split(t, v)?;
        let kt = t.permute(k, &[0, 2, 1])?;
        let s = t.batch_matmul(q, kt)?;
        let s = t.scale(s, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        let a = t.softmax(s)?;
        let o = t.batch_matmul(a, v)?;
        let o = t.permute(o, &[1, 0, 2])?;
        let o = t.reshape(o, &[n, self.dim])?;
        self.o.forward(t, b, o)
    }
}

/// `x + attn(ln(x), ln(ctx))`, then `x + mlp(ln(x))`. Self-attention when no
/// context is given.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub ln_ctx: Option<LayerNorm>,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize, cross: bool) -> Self {
        Self {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim),
            ln_ctx: cross.then(|| LayerNorm::new(format!("{name}.ln_ctx"), dim)),
            attn: Attention::new(&format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.ln1.init(store);
        if let Some(l) = &self.ln_ctx {
            l.init(store);
        }
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var, ctx: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(t, b, x)?;
        let kv = match (&self.ln_ctx, ctx) {
            (Some(l), Some(c)) => l.forward(t, b, c)?,
            (None, None) => h,
            _ => return Err(Error::Invalid("cross-attention block needs exactly one context".into())),
        };
        let a = self.attn.forward(t, b, h, kv)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, b, x)?;
        let m = self.mlp.forward(t, b, h)?;
        t.add(x, m)
    }
}
