//! Small building blocks composed from primitive tensor ops so that every
//! path is differentiable in both `f32` and `f64`.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Result, Tensor, Var, D};
use candle_nn::{Init, Linear, Module, VarBuilder, VarMap};

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    pos + tail
}

/// `σ(x) = exp(−softplus(−x))`, finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    softplus(&x.neg()?)?.neg()?.exp()
}

/// Row softmax over the last axis with max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Max over `dim` whose gradient flows to a single (first) maximizer, so that
/// duplicated inputs do not multiply the gradient.
pub fn max_pool(x: &Tensor, dim: usize) -> Result<Tensor> {
    let idx = x.detach().argmax_keepdim(dim)?;
    x.gather(&idx, dim)?.squeeze(dim)
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "beta", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Two affine layers with a ReLU between.
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            l1: candle_nn::linear(input, hidden, vb.pp("l1"))?,
            l2: candle_nn::linear(hidden, output, vb.pp("l2"))?,
        })
    }

    /// Same shape, but the output layer starts at zero.
    pub fn new_zero_output(input: usize, hidden: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        let l2_vb = vb.pp("l2");
        Ok(Self {
            l1: candle_nn::linear(input, hidden, vb.pp("l1"))?,
            l2: Linear::new(
                l2_vb.get_with_hints((output, hidden), "weight", Init::Const(0.0))?,
                Some(l2_vb.get_with_hints(output, "bias", Init::Const(0.0))?),
            ),
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

/// Applies a linear map to a tensor of any rank ≥ 2 by flattening the
/// leading axes.
pub fn apply(m: &impl Module, x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().unwrap();
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = m.forward(&x.reshape((lead, last))?)?;
    let mut out = dims[..dims.len() - 1].to_vec();
    out.push(y.dim(1)?);
    y.reshape(out)
}

/// Standard sinusoidal encoding, `(frames, width)`.
pub fn sinusoidal_encoding(frames: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; frames * width];
    for t in 0..frames {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
            let angle = t as f64 * freq;
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(data, (frames, width), device)?.to_dtype(dtype)
}

/// Variables of `map` whose names start with any of `prefixes`, sorted by name.
pub fn named_vars(map: &VarMap, prefixes: &[&str]) -> Vec<(String, Var)> {
    let data = map.data().lock().unwrap();
    let mut out: Vec<(String, Var)> = data
        .iter()
        .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Redraws every non-constant variable under `prefixes` (all when empty)
/// from a seeded generator: `weight` matrices from `N(0, 1/fan_in)`, biases
/// from `U(±1/√fan_in)`. Constant tensors (norm gains, zero-initialized
/// layers) are left as they are.
pub fn reinitialize(map: &VarMap, prefixes: &[&str], seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    let vars = named_vars(map, prefixes);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let fan_in = |name: &str| -> Option<usize> {
        let w = name.strip_suffix("bias")?.to_string() + "weight";
        vars.iter().find(|(n, _)| *n == w).map(|(_, v)| v.as_tensor().dim(1).unwrap_or(1))
    };
    for (name, var) in &vars {
        let t = var.as_tensor();
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if values.windows(2).all(|w| w[0] == w[1]) {
            continue;
        }
        let fresh: Vec<f64> = if name.ends_with("weight") && t.rank() == 2 {
            let std = 1.0 / (t.dim(1)? as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..values.len()).map(|_| normal.sample(&mut rng)).collect()
        } else {
            let bound = 1.0 / (fan_in(name).unwrap_or(values.len()) as f64).sqrt();
            (0..values.len()).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        var.set(&Tensor::from_vec(fresh, t.shape(), t.device())?.to_dtype(t.dtype())?)?;
    }
    Ok(())
}

/// Stable content hash of a set of variables (FNV-1a over names and bytes).
pub fn parameter_hash(vars: &[(String, Var)]) -> Result<u64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, v) in vars {
        eat(name.as_bytes());
        for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            eat(&x.to_le_bytes());
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Adaptive-moment optimizer whose moments can be exported and restored.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            config,
            step: 0,
            vars,
            m,
            v,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from `grads`; variables without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let mut scale = 1.0;
        if let Some(max) = self.config.max_grad_norm {
            let mut sq = 0.0;
            for (_, var) in &self.vars {
                if let Some(g) = grads.get(var) {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let g = (g * scale)?;
            self.m[i] = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            self.v[i] = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&self.m[i] / bc1)?;
            let vhat = (&self.v[i] / bc2)?;
            let update = (mhat / (vhat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (update * c.lr)?)?)?;
        }
        Ok(())
    }

    /// Moments keyed `m/<name>` and `v/<name>`, plus the step count.
    pub fn state(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("m/{name}"), self.m[i].clone()));
            out.push((format!("v/{name}"), self.v[i].clone()));
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, state: &[(String, Tensor)]) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (key, slot) in [(format!("m/{name}"), 0), (format!("v/{name}"), 1)] {
                if let Some((_, t)) = state.iter().find(|(k, _)| *k == key) {
                    let t = t.to_dtype(var.dtype())?.reshape(var.shape())?;
                    if slot == 0 {
                        self.m[i] = t;
                    } else {
                        self.v[i] = t;
                    }
                }
            }
        }
        self.step = step;
        Ok(())
    }
}
