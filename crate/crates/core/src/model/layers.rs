//! Dense building blocks with explicit backward passes.
//!
//! Every layer keeps its parameters as 2-D arrays (biases are `[1, n]`) so
//! that optimizers, gradient clipping and checkpoints can treat all
//! parameters uniformly through [`Params`]. Forward methods return the
//! output together with whatever the backward pass needs; backward methods
//! accumulate into a gradient struct of the same type and return input
//! gradients.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element type of a network (`f32` for training, `f64` for
/// gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cst<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Named access to every learnable tensor of a module.
pub trait Params<F: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<F>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<F>)>);

    fn named(&self) -> Vec<(String, &Array2<F>)> {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v
    }

    /// Same structure with every parameter set to zero.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut g = self.clone();
        for (_, p) in g.named_mut() {
            p.fill(F::zero());
        }
        g
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<F: Scalar> Params<F> for Array2<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<F>)>) {
        out.push((prefix.to_string(), self));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<F>)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<F: Scalar, T: Params<F>> Params<F> for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<F>)>) {
        if let Some(t) = self {
            t.collect(prefix, out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<F>)>) {
        if let Some(t) = self {
            t.collect_mut(prefix, out);
        }
    }
}

impl<F: Scalar, T: Params<F>> Params<F> for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<F>)>) {
        for (i, t) in self.iter().enumerate() {
            t.collect(&join(prefix, &i.to_string()), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<F>)>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Params`] by visiting the listed fields in order.
macro_rules! impl_params {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<F: $crate::model::layers::Scalar> $crate::model::layers::Params<F> for $ty<F> {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ndarray::Array2<F>)>) {
                $( self.$field.collect(&$crate::model::layers::join(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ndarray::Array2<F>)>) {
                $( self.$field.collect_mut(&$crate::model::layers::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<F: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return cst(z * std);
        }
    })
}

fn uniform<F: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || cst(rng.random_range(-bound..bound)))
}

// ---------------------------------------------------------------- activations

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let (c, a, half) = (cst::<F>(GELU_C), cst::<F>(GELU_A), cst::<F>(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, a, half) = (cst::<F>(GELU_C), cst::<F>(GELU_A), cst::<F>(0.5));
    let three = cst::<F>(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[in, out]`
    pub w: Array2<F>,
    /// `[1, out]`
    pub b: Array2<F>,
}
impl_params!(Linear { w, b });

impl<F: Scalar> Linear<F> {
    /// PyTorch-style default: weights and bias uniform in ±1/sqrt(fan_in).
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: uniform(rng, fan_in, fan_out, bound),
            b: uniform(rng, 1, fan_out, bound),
        }
    }

    /// Truncated-normal weights, zero bias (projections and embeddings).
    pub fn new_projection(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Linear {
            w: trunc_normal(rng, fan_in, fan_out, std),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients without computing the input gradient.
    pub fn backward_params(&self, x: &ArrayView2<F>, dy: &ArrayView2<F>, g: &mut Linear<F>) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut g.w);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }

    pub fn backward(&self, x: &ArrayView2<F>, dy: &ArrayView2<F>, g: &mut Linear<F>) -> Array2<F> {
        self.backward_params(x, dy, g);
        dy.dot(&self.w.t())
    }
}

// ---------------------------------------------------------------- layer norm

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Option<Array2<F>>,
    pub beta: Option<Array2<F>>,
    pub eps: f64,
}
impl_params!(LayerNorm { gamma, beta });

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize, affine: bool, eps: f64) -> Self {
        LayerNorm {
            gamma: affine.then(|| Array2::ones((1, dim))),
            beta: affine.then(|| Array2::zeros((1, dim))),
            eps,
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let n = cst::<F>(x.ncols() as f64);
        let eps = cst::<F>(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<F>() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            *is = F::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = xhat.clone();
        if let Some(g) = &self.gamma {
            y *= g;
        }
        if let Some(b) = &self.beta {
            y += b;
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &ArrayView2<F>, g: &mut LayerNorm<F>) -> Array2<F> {
        if let Some(gg) = &mut g.gamma {
            *gg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if let Some(gb) = &mut g.beta {
            *gb += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let dxhat = match &self.gamma {
            Some(gamma) => dy * gamma,
            None => dy.to_owned(),
        };
        let n = cst::<F>(dy.ncols() as f64);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dh), xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_dh = dh.iter().copied().sum::<F>();
            let sum_dh_xh = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
                *o = is / n * (n * d - sum_dh - x * sum_dh_xh);
            });
        }
        dx
    }
}

// ---------------------------------------------------------------- MLP

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}
impl_params!(Mlp { fc1, fc2 });

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, d_in, d_hidden),
            fc2: Linear::new(rng, d_hidden, d_out),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act.view());
        (
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, c: &MlpCache<F>, dy: &ArrayView2<F>, g: &mut Mlp<F>) -> Array2<F> {
        let dact = self.fc2.backward(&c.act.view(), dy, &mut g.fc2);
        let dpre = dact * &c.pre.mapv(gelu_grad);
        self.fc1.backward(&c.x.view(), &dpre.view(), &mut g.fc1)
    }
}

// ---------------------------------------------------------------- attention

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub heads: usize,
}
impl_params!(Attention { q, k, v, o });

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    xq: Array2<F>,
    xkv: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

impl<F: Scalar> AttentionCache<F> {
    /// Attention weights of head `h`, `[n_query, n_key]`.
    pub fn probs(&self, h: usize) -> &Array2<F> {
        &self.probs[h]
    }
}

impl<F: Scalar> Attention<F> {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::new(rng, dim, dim),
            k: Linear::new(rng, dim, dim),
            v: Linear::new(rng, dim, dim),
            o: Linear::new(rng, dim, dim),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.out_dim() / self.heads
    }

    pub fn forward(&self, xq: &ArrayView2<F>, xkv: &ArrayView2<F>) -> (Array2<F>, AttentionCache<F>) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let dh = self.head_dim();
        let scale = cst::<F>(1.0 / (dh as f64).sqrt());
        let mut ctx = Array2::zeros((q.nrows(), q.ncols()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.o.forward(&ctx.view());
        (
            out,
            AttentionCache {
                xq: xq.to_owned(),
                xkv: xkv.to_owned(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(d_query_input, d_key_value_input)`.
    pub fn backward(&self, c: &AttentionCache<F>, dout: &ArrayView2<F>, g: &mut Attention<F>) -> (Array2<F>, Array2<F>) {
        let dctx = self.o.backward(&c.ctx.view(), dout, &mut g.o);
        let dh = self.head_dim();
        let scale = cst::<F>(1.0 / (dh as f64).sqrt());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            let mut ds = dp.clone();
            for ((mut ds_row, dp_row), p_row) in ds.rows_mut().into_iter().zip(dp.rows()).zip(p.rows()) {
                let dot: F = dp_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pp| *d = pp * (*d - dot));
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(&c.xq.view(), &dq.view(), &mut g.q);
        let mut dxkv = self.k.backward(&c.xkv.view(), &dk.view(), &mut g.k);
        dxkv += &self.v.backward(&c.xkv.view(), &dv.view(), &mut g.v);
        (dxq, dxkv)
    }
}

// ---------------------------------------------------------------- transformer blocks

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}
impl_params!(EncoderLayer { ln1, attn, ln2, mlp });

#[derive(Debug, Clone)]
pub struct EncoderLayerCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> EncoderLayer<F> {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(dim, true, eps),
            attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim, true, eps),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, EncoderLayerCache<F>) {
        let (n1, c1) = self.ln1.forward(x);
        let (a, ca) = self.attn.forward(&n1.view(), &n1.view());
        let h = x + &a;
        let (n2, c2) = self.ln2.forward(&h.view());
        let (m, cm) = self.mlp.forward(&n2.view());
        (
            h + m,
            EncoderLayerCache {
                ln1: c1,
                attn: ca,
                ln2: c2,
                mlp: cm,
            },
        )
    }

    pub fn backward(&self, c: &EncoderLayerCache<F>, dy: &ArrayView2<F>, g: &mut EncoderLayer<F>) -> Array2<F> {
        let dn2 = self.mlp.backward(&c.mlp, dy, &mut g.mlp);
        let dh = dy + &self.ln2.backward(&c.ln2, &dn2.view(), &mut g.ln2);
        let (dq, dkv) = self.attn.backward(&c.attn, &dh.view(), &mut g.attn);
        let dn1 = dq + dkv;
        dh + self.ln1.backward(&c.ln1, &dn1.view(), &mut g.ln1)
    }
}

/// Pre-norm transformer decoder block: self-attention over queries, then
/// cross-attention into a memory sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<F> {
    pub ln1: LayerNorm<F>,
    pub self_attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub ln3: LayerNorm<F>,
    pub mlp: Mlp<F>,
}
impl_params!(DecoderLayer { ln1, self_attn, ln2, cross_attn, ln3, mlp });

#[derive(Debug, Clone)]
pub struct DecoderLayerCache<F> {
    ln1: LayerNormCache<F>,
    self_attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    cross_attn: AttentionCache<F>,
    ln3: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> DecoderLayer<F> {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(dim, true, eps),
            self_attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim, true, eps),
            cross_attn: Attention::new(rng, dim, heads),
            ln3: LayerNorm::new(dim, true, eps),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>, memory: &ArrayView2<F>) -> (Array2<F>, DecoderLayerCache<F>) {
        let (n1, c1) = self.ln1.forward(x);
        let (a1, ca1) = self.self_attn.forward(&n1.view(), &n1.view());
        let h1 = x + &a1;
        let (n2, c2) = self.ln2.forward(&h1.view());
        let (a2, ca2) = self.cross_attn.forward(&n2.view(), memory);
        let h2 = h1 + a2;
        let (n3, c3) = self.ln3.forward(&h2.view());
        let (m, cm) = self.mlp.forward(&n3.view());
        (
            h2 + m,
            DecoderLayerCache {
                ln1: c1,
                self_attn: ca1,
                ln2: c2,
                cross_attn: ca2,
                ln3: c3,
                mlp: cm,
            },
        )
    }

    /// Returns `(d_x, d_memory)`.
    pub fn backward(&self, c: &DecoderLayerCache<F>, dy: &ArrayView2<F>, g: &mut DecoderLayer<F>) -> (Array2<F>, Array2<F>) {
        let dn3 = self.mlp.backward(&c.mlp, dy, &mut g.mlp);
        let dh2 = dy + &self.ln3.backward(&c.ln3, &dn3.view(), &mut g.ln3);
        let (dn2, dmem) = self.cross_attn.backward(&c.cross_attn, &dh2.view(), &mut g.cross_attn);
        let dh1 = &dh2 + &self.ln2.backward(&c.ln2, &dn2.view(), &mut g.ln2);
        let (dq, dkv) = self.self_attn.backward(&c.self_attn, &dh1.view(), &mut g.self_attn);
        let dn1 = dq + dkv;
        (dh1 + self.ln1.backward(&c.ln1, &dn1.view(), &mut g.ln1), dmem)
    }
}

/// Mean over rows, as a `[1, cols]` array.
pub fn mean_rows<F: Scalar>(x: &ArrayView2<F>) -> Array2<F> {
    let n = cst::<F>(x.nrows() as f64);
    (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0))
}

/// Horizontal concatenation of two `[1, d]` rows.
pub fn hcat<F: Scalar>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("equal row counts")
}
