//! Parameterized layers shared by the model components.
//!
//! Layers hold [`ParamId`]s only; the tensors themselves live in a
//! [`ParamStore`] passed to every forward call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamStore, Real, Tensor};

fn uniform_init(bound: f64, rng: &mut ChaCha8Rng) -> Init {
    Init::Uniform {
        lo: -bound,
        hi: bound,
        seed: rng.random(),
    }
}

/// Fully connected layer over the last axis; weight is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialization for weight and bias.
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = uniform_init(bound, rng);
        let b = bias.then(|| uniform_init(bound, rng));
        Self::with_init(ps, name, in_dim, out_dim, w, b)
    }

    pub fn with_init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let weight = ps.add_init(format!("{name}.weight"), &[in_dim, out_dim], weight)?;
        let bias = match bias {
            Some(init) => Some(ps.add_init(format!("{name}.bias"), &[out_dim], init)?),
            None => None,
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in {}", shape, self.in_dim),
            ));
        }
        let rows = x.numel() / self.in_dim;
        let flat = if x.rank() == 2 {
            x.clone()
        } else {
            x.reshape(&[rows, self.in_dim])?
        };
        let mut y = flat.matmul(ps.get(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(ps.get(b))?;
        }
        if x.rank() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape.to_vec();
            *out_shape.last_mut().unwrap() = self.out_dim;
            y.reshape(&out_shape)
        }
    }
}

/// `[H, W, C]` to `[1, C, H, W]`.
pub fn hwc_to_nchw<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, c] = hwc_dims(x, "hwc_to_nchw")?;
    let mut index = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        for p in 0..h * w {
            index.push(p * c + ch);
        }
    }
    x.gather(index.into(), vec![1, c, h, w])
}

/// `[1, C, H, W]` to `[H, W, C]`.
pub fn nchw_to_hwc<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("nchw_to_hwc", format!("expected [1, C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut index = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        for ch in 0..c {
            index.push(ch * h * w + p);
        }
    }
    x.gather(index.into(), vec![h, w, c])
}

pub(crate) fn hwc_dims<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 3]> {
    match x.shape() {
        &[h, w, c] => Ok([h, w, c]),
        s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Same-padded odd-kernel convolution on `[H, W, C]` feature maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = uniform_init(bound, rng);
        let b = uniform_init(bound, rng);
        Self::with_init(ps, name, in_ch, out_ch, kernel, w, b)
    }

    pub fn with_init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size must be odd, got {kernel}")));
        }
        let weight = ps.add_init(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], weight)?;
        let bias = ps.add_init(format!("{name}.bias"), &[out_ch], bias)?;
        Ok(Conv {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, c] = hwc_dims(x, "conv")?;
        if c != self.in_ch {
            return Err(Error::shape(
                "conv",
                format!("input has {c} channels, layer expects {}", self.in_ch),
            ));
        }
        let y = hwc_to_nchw(x)?.conv2d(ps.get(self.weight), Some(ps.get(self.bias)), 1, self.kernel / 2)?;
        nchw_to_hwc(&y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: ps.add_init(format!("{name}.gain"), &[dim], Init::One)?,
            offset: ps.add_init(format!("{name}.offset"), &[dim], Init::Zero)?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(ps.get(self.gain), ps.get(self.offset), self.eps)
    }
}

/// Stochastic depth for residual branches.
///
/// In training mode each branch is kept with probability `1 − p` and the
/// kept branch is scaled by `1 / (1 − p)`. In evaluation mode every branch
/// is kept unscaled.
pub struct DropPath {
    prob: f64,
    rng: Option<ChaCha8Rng>,
}

impl DropPath {
    pub fn eval() -> Self {
        DropPath { prob: 0.0, rng: None }
    }

    pub fn train(prob: f64, seed: u64) -> Self {
        DropPath {
            prob,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// `None` when the branch is dropped, otherwise the scale to apply.
    pub fn sample(&mut self) -> Option<f64> {
        match self.rng.as_mut() {
            None => Some(1.0),
            Some(_) if self.prob <= 0.0 => Some(1.0),
            Some(rng) => {
                let keep = 1.0 - self.prob;
                (rng.random::<f64>() < keep).then_some(1.0 / keep)
            }
        }
    }

    /// `x + scale * branch(x)`, skipping `branch` entirely when dropped.
    pub fn residual<T: Real>(
        &mut self,
        x: &Tensor<T>,
        branch: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        match self.sample() {
            None => Ok(x.clone()),
            Some(s) => {
                let b = branch(x)?;
                let b = if s == 1.0 { b } else { b.scale(s) };
                x.add(&b)
            }
        }
    }
}

/// Multi-head scaled dot-product self-attention over `[B, L, D]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    /// Bias-free joint projection; a key bias would shift every logit of a
    /// query equally and so never receive a gradient.
    pub qkv: Linear,
    /// `[heads, 1, head_dim]`.
    pub q_bias: ParamId,
    pub v_bias: ParamId,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {heads} heads do not divide embedding dim {dim}"
            )));
        }
        let hd = dim / heads;
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(MultiHeadAttention {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, false, rng)?,
            q_bias: ps.add_init(format!("{name}.q_bias"), &[heads, 1, hd], uniform_init(bound, rng))?,
            v_bias: ps.add_init(format!("{name}.v_bias"), &[heads, 1, hd], uniform_init(bound, rng))?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// Returns the attended output and the attention weights `[B, heads, L, L]`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, l, d) = match x.shape() {
            &[b, l, d] if d == self.dim => (b, l, d),
            s => {
                return Err(Error::shape(
                    "attention",
                    format!("expected [B, L, {}], got {s:?}", self.dim),
                ))
            }
        };
        let (h, hd) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(ps, x)?; // [B, L, 3D] laid out as [B, L, 3, H, hd]
        let row = 3 * d;
        let gather = |which: usize, shape: [usize; 4], strides: [usize; 4]| {
            let idx = crate::tensor::ops::strided_index(&shape, &strides, which * d);
            qkv.gather(idx.into(), shape.to_vec())
        };
        let q = gather(0, [b, h, l, hd], [l * row, hd, row, 1])?.add(ps.get(self.q_bias))?;
        let kt = gather(1, [b, h, hd, l], [l * row, hd, 1, row])?;
        let v = gather(2, [b, h, l, hd], [l * row, hd, row, 1])?.add(ps.get(self.v_bias))?;
        let q = q.scale(1.0 / (hd as f64).sqrt());
        let attn = q.matmul(&kt)?.softmax(3)?;
        let o = attn.matmul(&v)?; // [B, H, L, hd]
        let idx = crate::tensor::ops::strided_index(&[b, l, h, hd], &[h * l * hd, hd, l * hd, 1], 0);
        let merged = o.gather(idx.into(), vec![b, l, d])?;
        Ok((self.proj.forward(ps, &merged)?, attn))
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(ps, x)?.gelu();
        self.fc2.forward(ps, &h)
    }
}

/// Pre-norm Transformer layer:
/// `y' = x + MSA(LN(x))`, `y = y' + MLP(LN(y'))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng)?,
        })
    }

    /// Returns the layer output and the attention weights (`None` when the
    /// attention branch was dropped).
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        drop: &mut DropPath,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut weights = None;
        let y = drop.residual(x, |x| {
            let (o, a) = self.attn.forward(ps, &self.norm1.forward(ps, x)?)?;
            weights = Some(a);
            Ok(o)
        })?;
        let y = drop.residual(&y, |y| self.mlp.forward(ps, &self.norm2.forward(ps, y)?))?;
        Ok((y, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn layout_conversions_round_trip() {
        let x = Tensor::<f64>::create(&[3, 4, 2], Init::Uniform { lo: 0.0, hi: 1.0, seed: 5 }).unwrap();
        let n = hwc_to_nchw(&x).unwrap();
        assert_eq!(n.shape(), &[1, 2, 3, 4]);
        // channel 1 of pixel (2, 3)
        assert_eq!(n.data()[12 + 2 * 4 + 3], x.data()[(2 * 4 + 3) * 2 + 1]);
        assert_eq!(nchw_to_hwc(&n).unwrap().data(), x.data());
    }

    #[test]
    fn linear_applies_to_last_axis() {
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::with_init(&mut ps, "fc", 2, 1, Init::One, Some(Init::Constant(0.5))).unwrap();
        let x = Tensor::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = lin.forward(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.data(), &[3.5, 7.5]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut ps = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut ps, "a", 6, 3, &mut rng()).unwrap();
        let x = Tensor::create(&[2, 5, 6], Init::Normal { mean: 0.0, std: 1.0, seed: 1 }).unwrap();
        let (y, w) = mha.forward(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 6]);
        assert_eq!(w.shape(), &[2, 3, 5, 5]);
        for row in w.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut ps = ParamStore::<f32>::new();
        assert!(matches!(
            MultiHeadAttention::new(&mut ps, "a", 15, 4, &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn drop_path_keep_rate_and_scale() {
        let mut dp = DropPath::train(0.1, 3);
        let samples: Vec<_> = (0..20_000).map(|_| dp.sample()).collect();
        let kept = samples.iter().filter(|s| s.is_some()).count() as f64 / samples.len() as f64;
        assert!((kept - 0.9).abs() < 0.01, "{kept}");
        assert!(samples.iter().flatten().all(|&s| (s - 1.0 / 0.9).abs() < 1e-12));
        let mut ev = DropPath::eval();
        assert!((0..100).all(|_| ev.sample() == Some(1.0)));
    }
}
