//! Self-attention (SA) and its linear-cost reassociation (ESA) over one feature map.
//!
//! For an entry feature `X[C, h, w]` with `n = h·w` pixels, the projections give
//! `Q, K ∈ R^{q×n}` and `V ∈ R^{C×n}`. SA adds `Scale · V (softmax_rows(QᵀK))ᵀ`
//! to `X`; ESA adds `Scale · V softmax_cols(Kᵀ) softmax_rows(Q)`, which never
//! forms an `n×n` matrix. Both share the same weights, so a model trained with
//! SA can be evaluated with ESA.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{conv_specs, Bound, Conv, Init, ParamSpec};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Sa,
    Esa,
    None,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Sa => "sa",
            AttentionMode::Esa => "esa",
            AttentionMode::None => "none",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa" => Ok(AttentionMode::Sa),
            "esa" => Ok(AttentionMode::Esa),
            "none" => Ok(AttentionMode::None),
            other => Err(Error::Config(format!("unknown attention_mode `{other}`"))),
        }
    }
}

/// Bound attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct SaModule {
    pub entry: Conv,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub scale: Var,
}

impl SaModule {
    pub fn specs(prefix: &str, channels: usize, qk_channels: usize) -> Vec<ParamSpec> {
        let mut v = conv_specs(&format!("{prefix}.entry"), channels, channels, 3, Init::He(1.0));
        v.extend(conv_specs(&format!("{prefix}.query"), channels, qk_channels, 1, Init::He(1.0)));
        v.extend(conv_specs(&format!("{prefix}.key"), channels, qk_channels, 1, Init::He(1.0)));
        v.extend(conv_specs(&format!("{prefix}.value"), channels, channels, 1, Init::He(1.0)));
        // Zero scale: the module starts as the identity on its entry feature.
        v.push(ParamSpec { name: format!("{prefix}.scale"), shape: vec![1], init: Init::Zeros });
        v
    }

    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(SaModule {
            entry: Conv::bind(params, &format!("{prefix}.entry"))?,
            query: Conv::bind(params, &format!("{prefix}.query"))?,
            key: Conv::bind(params, &format!("{prefix}.key"))?,
            value: Conv::bind(params, &format!("{prefix}.value"))?,
            scale: params.get(&format!("{prefix}.scale"))?,
        })
    }

    /// Entry convolution followed by SA or ESA. `None` is rejected: the caller skips the module.
    pub fn forward<T: Float>(&self, g: &Graph<T>, input: Var, mode: AttentionMode) -> Result<Var> {
        let feat = self.entry.forward(g, input)?;
        match mode {
            AttentionMode::Sa => sa_forward(g, feat, self),
            AttentionMode::Esa => esa_forward(g, feat, self),
            AttentionMode::None => Err(Error::Config("attention module invoked with mode `none`".into())),
        }
    }

    /// Flattened `(Q, K, V)` projections of an entry feature.
    pub fn project<T: Float>(&self, g: &Graph<T>, feat: Var) -> Result<(Var, Var, Var)> {
        let shape = g.shape(feat);
        let [c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("attention expects [C,h,w], got {shape:?}")));
        };
        let n = h * w;
        let c_expected = g.shape(self.value.weight)[1];
        if c != c_expected {
            return Err(Error::Shape(format!("attention expects {c_expected} channels, got {c}")));
        }
        let q = self.query.forward(g, feat)?;
        let k = self.key.forward(g, feat)?;
        let v = self.value.forward(g, feat)?;
        let qk = g.shape(q)[0];
        Ok((g.reshape(q, &[qk, n])?, g.reshape(k, &[qk, n])?, g.reshape(v, &[c, n])?))
    }
}

/// Row-stochastic attention matrix `softmax_rows(QᵀK)`, `[n, n]`.
pub fn attention_matrix<T: Float>(g: &Graph<T>, feat: Var, module: &SaModule) -> Result<Var> {
    let (q, k, _) = module.project(g, feat)?;
    let qt = g.transpose(q)?;
    let logits = g.matmul(qt, k)?;
    g.softmax_rows(logits)
}

/// `feat + Scale · V (softmax_rows(QᵀK))ᵀ`, with `feat` the entry-conv output.
pub fn sa_forward<T: Float>(g: &Graph<T>, feat: Var, module: &SaModule) -> Result<Var> {
    let shape = g.shape(feat);
    let (q, k, v) = module.project(g, feat)?;
    let qt = g.transpose(q)?;
    let logits = g.matmul(qt, k)?;
    let attn = g.softmax_rows(logits)?;
    let attn_t = g.transpose(attn)?;
    let mixed = g.matmul(v, attn_t)?;
    let scaled = g.scale_by(mixed, module.scale)?;
    let scaled = g.reshape(scaled, &shape)?;
    g.add(feat, scaled)
}

/// `feat + Scale · V softmax_cols(Kᵀ) softmax_rows(Q)`, linear in the pixel count.
pub fn esa_forward<T: Float>(g: &Graph<T>, feat: Var, module: &SaModule) -> Result<Var> {
    let shape = g.shape(feat);
    let (q, k, v) = module.project(g, feat)?;
    let kt = g.transpose(k)?;
    let rho_k = g.softmax_cols(kt)?;
    let rho_q = g.softmax_rows(q)?;
    let context = g.matmul(v, rho_k)?;
    let mixed = g.matmul(context, rho_q)?;
    let scaled = g.scale_by(mixed, module.scale)?;
    let scaled = g.reshape(scaled, &shape)?;
    g.add(feat, scaled)
}

/// Largest elementwise difference between the two association orders
/// `V ((QᵀK)ᵀ / n)` and `(V Kᵀ)(Q / n)`.
///
/// With the softmaxes replaced by division by `n` both orders equal `V Kᵀ Q / n`,
/// so the result measures only floating-point reassociation error.
pub fn linear_norm_equivalence_check<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    let ([dq, n], [dk, nk], [_, nv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::Shape("linear_norm_equivalence_check expects matrices".into()));
    };
    if dq != dk || n != nk || n != nv {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?} are inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let g = Graph::new();
    let inv_n = T::one() / T::from_f64(*n as f64);
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    // Quadratic order.
    let qt = g.transpose(qv)?;
    let s = g.mul_scalar(g.matmul(qt, kv)?, inv_n)?;
    let quad = g.matmul(vv, g.transpose(s)?)?;
    // Linear order.
    let kt = g.transpose(kv)?;
    let context = g.matmul(vv, kt)?;
    let lin = g.matmul(context, g.mul_scalar(qv, inv_n)?)?;
    g.value(quad).max_abs_diff(&g.value(lin))
}

/// Plain attention weights for graph-free inference and benchmarking.
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Float> {
    pub query_weight: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key_weight: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub value_weight: Tensor<T>,
    pub value_bias: Tensor<T>,
    pub scale: T,
}

impl<T: Float> AttentionParams<T> {
    pub fn channels(&self) -> usize {
        self.value_weight.shape()[0]
    }

    pub fn qk_channels(&self) -> usize {
        self.query_weight.shape()[0]
    }

    fn project(&self, feat: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let c = self.channels();
        let qk = self.qk_channels();
        let mut q = vec![T::zero(); qk * n];
        let mut k = vec![T::zero(); qk * n];
        let mut v = vec![T::zero(); c * n];
        kernels::conv_gemm(self.query_weight.data(), Some(self.query_bias.data()), feat, qk, c, n, &mut q);
        kernels::conv_gemm(self.key_weight.data(), Some(self.key_bias.data()), feat, qk, c, n, &mut k);
        kernels::conv_gemm(self.value_weight.data(), Some(self.value_bias.data()), feat, c, c, n, &mut v);
        (q, k, v)
    }

    fn check(&self, feat: &Tensor<T>) -> Result<usize> {
        match feat.shape() {
            [c, h, w] if *c == self.channels() => Ok(h * w),
            s => Err(Error::Shape(format!("attention expects [{},h,w], got {s:?}", self.channels()))),
        }
    }

    /// Graph-free [`sa_forward`].
    pub fn sa(&self, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check(feat)?;
        let (c, qk) = (self.channels(), self.qk_channels());
        let (q, k, v) = self.project(feat.data(), n);
        let mut attn = vec![T::zero(); n * n];
        // attn[i, j] = sum_t Q[t, i] K[t, j]
        T::gemm(n, qk, n, T::one(), &q, 1, n as isize, &k, n as isize, 1, T::zero(), &mut attn, n as isize, 1);
        let logits = std::mem::take(&mut attn);
        let mut attn = vec![T::zero(); n * n];
        kernels::softmax_runs(&logits, n, &mut attn);
        drop(logits);
        let mut out = feat.data().to_vec();
        // out[c, i] += Scale * sum_j V[c, j] attn[i, j]
        T::gemm(c, n, n, self.scale, &v, n as isize, 1, &attn, 1, n as isize, T::one(), &mut out, n as isize, 1);
        Tensor::new(feat.shape(), out)
    }

    /// Graph-free [`esa_forward`].
    pub fn esa(&self, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check(feat)?;
        let (c, qk) = (self.channels(), self.qk_channels());
        let (q, k, v) = self.project(feat.data(), n);
        // softmax_cols(Kᵀ) is softmax_rows(K) read transposed.
        let mut rho_k = vec![T::zero(); qk * n];
        kernels::softmax_runs(&k, n, &mut rho_k);
        let mut rho_q = vec![T::zero(); qk * n];
        kernels::softmax_runs(&q, n, &mut rho_q);
        let mut context = vec![T::zero(); c * qk];
        T::gemm(c, n, qk, T::one(), &v, n as isize, 1, &rho_k, 1, n as isize, T::zero(), &mut context, qk as isize, 1);
        let mut out = feat.data().to_vec();
        T::gemm(c, qk, n, self.scale, &context, qk as isize, 1, &rho_q, n as isize, 1, T::one(), &mut out, n as isize, 1);
        Tensor::new(feat.shape(), out)
    }
}
