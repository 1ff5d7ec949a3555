//! Neural-network building blocks on top of the tensor engine: linear
//! layers, MLPs, layer norm, multi-head attention, and transformer
//! encoder/decoder layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{scaled_dot_product_attention, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive logit for blocked attention positions.
pub const MASK_NEG: f64 = -1e30;

/// Glorot-uniform initialization: +/- sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Anything holding trainable tensors can enumerate them by name.
pub trait Parameterized {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);
}

pub struct Linear {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::parameter(vec![d_in, d_out], glorot(rng, d_in, d_out, d_in * d_out)),
            b: Tensor::parameter(vec![d_out], vec![0.0; d_out]),
        }
    }

    /// `x: [n, in] -> [n, out]`; a rank-1 input is treated as one row.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.shape().len() == 1 {
            let n = x.numel();
            let y = x.reshape(vec![1, n]).matmul(&self.w)?.add(&self.b)?;
            let d_out = y.shape()[1];
            Ok(y.reshape(vec![d_out]))
        } else {
            x.matmul(&self.w)?.add(&self.b)
        }
    }
}

impl Parameterized for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Linear layers with ReLU between them (none after the last).
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| Linear::new(rng, w[0], w[1]))
                .collect(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&format!("{prefix}.{i}"), out);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::parameter(vec![d], vec![1.0; d]),
            beta: Tensor::parameter(vec![d], vec![0.0; d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

impl Parameterized for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(rng, d_model, d_model),
            wk: Linear::new(rng, d_model, d_model),
            wv: Linear::new(rng, d_model, d_model),
            wo: Linear::new(rng, d_model, d_model),
            n_heads,
        }
    }

    /// `query: [lq, d]`, `key_value: [lk, d]`, optional additive mask
    /// `[lq, lk]`.
    pub fn forward(
        &self,
        query: &Tensor,
        key_value: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        let d_model = query.shape()[1];
        let dh = d_model / self.n_heads;
        let q = self.wq.forward(query)?;
        let k = self.wk.forward(key_value)?;
        let v = self.wv.forward(key_value)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.cols(h * dh, dh);
            let kh = k.cols(h * dh, dh);
            let vh = v.cols(h * dh, dh);
            heads.push(scaled_dot_product_attention(&qh, &kh, &vh, mask)?);
        }
        self.wo.forward(&Tensor::concat(&heads, 1)?)
    }
}

impl Parameterized for MultiHeadAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

/// Post-norm transformer encoder layer: self-attention and feed-forward,
/// each with a residual connection and layer norm.
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, ff_dim: usize) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(rng, d_model, n_heads),
            ff1: Linear::new(rng, d_model, ff_dim),
            ff2: Linear::new(rng, ff_dim, d_model),
            ln1: LayerNorm::new(d_model),
            ln2: LayerNorm::new(d_model),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let a = self.attn.forward(x, x, None)?;
        let x = self.ln1.forward(&x.add(&a)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&x)?.relu())?;
        self.ln2.forward(&x.add(&f)?)
    }
}

impl Parameterized for EncoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.ff1.collect_params(&format!("{prefix}.ff1"), out);
        self.ff2.collect_params(&format!("{prefix}.ff2"), out);
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
    }
}

/// Post-norm transformer decoder layer: causal self-attention, cross
/// attention over the memory, then feed-forward.
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, ff_dim: usize) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(rng, d_model, n_heads),
            cross_attn: MultiHeadAttention::new(rng, d_model, n_heads),
            ff1: Linear::new(rng, d_model, ff_dim),
            ff2: Linear::new(rng, ff_dim, d_model),
            ln1: LayerNorm::new(d_model),
            ln2: LayerNorm::new(d_model),
            ln3: LayerNorm::new(d_model),
        }
    }

    pub fn forward(
        &self,
        target: &Tensor,
        memory: &Tensor,
        causal: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let a = self.self_attn.forward(target, target, Some(causal))?;
        let x = self.ln1.forward(&target.add(&a)?)?;
        let c = self.cross_attn.forward(&x, memory, None)?;
        let x = self.ln2.forward(&x.add(&c)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&x)?.relu())?;
        self.ln3.forward(&x.add(&f)?)
    }
}

impl Parameterized for DecoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn
            .collect_params(&format!("{prefix}.self_attn"), out);
        self.cross_attn
            .collect_params(&format!("{prefix}.cross_attn"), out);
        self.ff1.collect_params(&format!("{prefix}.ff1"), out);
        self.ff2.collect_params(&format!("{prefix}.ff2"), out);
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.ln3.collect_params(&format!("{prefix}.ln3"), out);
    }
}

/// Sinusoidal positional encoding table `[len, d]` (constant).
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut vals = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            vals[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::constant(vec![len, d], vals)
}

/// Additive causal mask `[len, len]`: position i may attend to j <= i.
pub fn causal_mask(len: usize) -> Tensor {
    let mut vals = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            vals[i * len + j] = MASK_NEG;
        }
    }
    Tensor::constant(vec![len, len], vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut rng, 3, 5);
        let x = Tensor::constant(vec![4, 3], vec![0.5; 12]);
        assert_eq!(l.forward(&x).unwrap().shape(), &[4, 5]);
        let v = Tensor::constant(vec![3], vec![0.5; 3]);
        assert_eq!(l.forward(&v).unwrap().shape(), &[5]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(3);
        let d = m.data();
        assert_eq!(d[0 * 3 + 1], MASK_NEG);
        assert_eq!(d[2 * 3 + 1], 0.0);
    }

    #[test]
    fn positional_encoding_distinguishes_positions() {
        let pe = positional_encoding(8, 16);
        let d = pe.data();
        assert!(d[..16] != d[16..32]);
    }

    #[test]
    fn encoder_layer_finite_on_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = EncoderLayer::new(&mut rng, 16, 4, 32);
        let x = Tensor::constant(vec![4, 16], vec![0.0; 64]);
        let y = layer.forward(&x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
