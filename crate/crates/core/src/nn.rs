//! Layers shared by the encoder, the per-stream layers and the decoder.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f32 = 0.02;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add(&format!("{name}.weight"), Tensor::randn(vec![d_in, d_out], INIT_STD, rng));
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(store, self.weight))?;
        match self.bias {
            Some(b) => g.add(y, g.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(vec![dim])),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(store, self.gain), g.param(store, self.bias))
    }
}

/// Multi-head self-attention: `softmax(QKᵀ/√d)V` followed by an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
        }
    }

    /// `x: [B, T, C] -> [B, T, C]`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let d = c / self.heads;
        let qkv = self.qkv.forward(g, store, x)?;
        let qkv = g.reshape(qkv, &[b, t, 3, self.heads, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, H, T, d]
        let part = |i: usize| -> Result<Var> {
            let p = g.narrow(qkv, 0, i, 1)?;
            g.reshape(p, &[b, self.heads, t, d])
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = g.matmul(q, g.transpose(k)?)?;
        let attn = g.softmax(g.scale(scores, 1.0 / (d as f32).sqrt()));
        let ctx = g.matmul(attn, v)?; // [B, H, T, d]
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, c])?;
        self.proj.forward(g, store, ctx)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let x = g.add(x, self.attn.forward(g, store, h)?)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = g.gelu(self.fc1.forward(g, store, h)?);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape_and_batch_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 8, 2, &mut rng);
        let x = Tensor::randn(vec![3, 5, 8], 1.0, &mut rng);
        let g = Graph::new();
        let y = block.forward(&g, &store, g.constant(x.clone())).unwrap();
        assert_eq!(g.shape(y), vec![3, 5, 8]);

        // a single sample alone gives the same rows as inside the batch
        let single = Tensor::new(vec![1, 5, 8], x.row(1).to_vec()).unwrap();
        let y1 = block.forward(&g, &store, g.constant(single)).unwrap();
        let full = g.value(y);
        let alone = g.value(y1);
        for (a, b) in full.row(1).iter().zip(alone.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
