//! Feature completion decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, INIT_STD};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcdConfig {
    /// Fraction of patch slots filled by completion tokens.
    pub alpha: f32,
    pub dec_depth: usize,
}

impl Default for FcdConfig {
    fn default() -> Self {
        Self { alpha: 0.7, dec_depth: 2 }
    }
}

impl FcdConfig {
    /// Completion token count `K = floor(α·N)`.
    pub fn k(&self, n: usize) -> usize {
        (self.alpha as f64 * n as f64 + 1e-9).floor() as usize
    }

    /// Retained token count `L = N − K`.
    pub fn l(&self, n: usize) -> usize {
        n.saturating_sub(self.k(n))
    }

    pub fn violations(&self, n: usize) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            v.push(format!("fcd alpha {} must lie in (0, 1)", self.alpha));
        }
        if self.k(n) == 0 || self.l(n) == 0 {
            v.push(format!(
                "fcd alpha {} on N = {n} gives K = {}, L = {}; both must be positive",
                self.alpha,
                self.k(n),
                self.l(n)
            ));
        }
        v
    }
}

/// `[N, J]` token projection whose column `j` starts on patch `offset + j`,
/// plus small noise, so decoder slots begin aligned with patch positions.
fn aligned_projection<R: Rng>(n: usize, j: usize, offset: usize, std: f32, rng: &mut R) -> Tensor {
    let mut w = Tensor::randn(vec![n, j], std * INIT_STD, rng);
    for col in 0..j {
        w.data_mut()[(offset + col) * j + col] += 1.0;
    }
    w
}

/// Initial scale of the recovery projection relative to other linear layers,
/// so completion starts close to the occluded features.
pub const RECOVERY_SCALE: f32 = 0.05;

#[derive(Clone, Debug)]
pub struct Fcd {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub proj_k: ParamId,
    pub proj_l: ParamId,
    pub t_c: ParamId,
    pub gate: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl Fcd {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &FcdConfig,
        n: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let v = cfg.violations(n);
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        let (k, l) = (cfg.k(n), cfg.l(n));
        let proj_std = 1.0 / (n as f32).sqrt();
        let t_c = Tensor::randn(vec![1, k, dim], INIT_STD, rng).map(|v| 1.0 + v);
        let gate = Linear::new(store, "fcd.gate", dim, 1, true, rng);
        store.value_mut(gate.weight).data_mut().fill(0.0);
        let out = Linear::new(store, "fcd.out", dim, dim, true, rng);
        store.value_mut(out.weight).data_mut().iter_mut().for_each(|w| *w *= RECOVERY_SCALE);
        Ok(Self {
            n,
            k,
            l,
            proj_k: store.add("fcd.proj_k", aligned_projection(n, k, 0, proj_std, rng)),
            proj_l: store.add("fcd.proj_l", aligned_projection(n, l, k, proj_std, rng)),
            t_c: store.add("fcd.t_c", t_c),
            gate,
            pos: store.add("fcd.pos_embed", Tensor::randn(vec![n + 1, dim], INIT_STD, rng)),
            blocks: (0..cfg.dec_depth)
                .map(|i| Block::new(store, &format!("fcd.blocks.{i}"), dim, heads, rng))
                .collect(),
            norm: LayerNorm::new(store, "fcd.norm", dim),
            out,
        })
    }

    /// Maps `[B, N, C]` along the token axis with `w: [N, J]` to `[B, J, C]`.
    fn token_proj(g: &Graph, x: Var, w: Var) -> Result<Var> {
        let xt = g.transpose(x)?; // [B, C, N]
        g.transpose(g.matmul(xt, w)?)
    }

    /// Instance completion tokens `T_b = proj_K(f_ot) ⊙ T_c`, `[B, K, C]`.
    pub fn completion_tokens(&self, g: &Graph, store: &ParamStore, f_ot: Var) -> Result<Var> {
        let proj = Self::token_proj(g, f_ot, g.param(store, self.proj_k))?;
        g.mul(proj, g.param(store, self.t_c))
    }

    /// `f_og: [B, C]`, `f_ot: [B, N, C]` to `f_r: [B, N+1, C]`.
    pub fn hybrid_embed(&self, g: &Graph, store: &ParamStore, f_og: Var, f_ot: Var) -> Result<Var> {
        let shape = g.shape(f_ot);
        if shape.len() != 3 || shape[1] != self.n || g.shape(f_og) != [shape[0], shape[2]] {
            return Err(Error::Shape {
                op: "hybrid_embed",
                lhs: g.shape(f_og),
                rhs: shape,
            });
        }
        let (b, c) = (shape[0], shape[2]);
        let t_b = self.completion_tokens(g, store, f_ot)?;
        let kept = Self::token_proj(g, f_ot, g.param(store, self.proj_l))?;
        let f_r = g.concat(&[g.reshape(f_og, &[b, 1, c])?, t_b, kept], 1)?;
        let gate = self.gate.forward(g, store, f_r)?; // [B, N+1, 1]
        let injected = g.mul(gate, g.param(store, self.pos))?;
        g.add(f_r, injected)
    }

    /// `f_r: [B, N+1, C]` to recovery features `[B, N, C]` aligned with
    /// patch positions.
    pub fn decode(&self, g: &Graph, store: &ParamStore, f_r: Var) -> Result<Var> {
        let x = self.blocks.iter().try_fold(f_r, |x, blk| blk.forward(g, store, x))?;
        let x = self.norm.forward(g, store, x)?;
        let x = self.out.forward(g, store, x)?;
        g.narrow(x, 1, 1, self.n)
    }

    /// Completed patch features: occluded features plus decoded recovery
    /// features, `[B, N, C]`. The skip path is a stop-gradient so completion
    /// losses reach the encoder only through the decoder.
    pub fn forward(&self, g: &Graph, store: &ParamStore, f_og: Var, f_ot: Var) -> Result<Var> {
        let f_r = self.hybrid_embed(g, store, f_og, f_ot)?;
        g.add(g.detach(f_ot), self.decode(g, store, f_r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_counts() {
        let cfg = FcdConfig::default();
        assert_eq!((cfg.k(32), cfg.l(32)), (22, 10));
        assert_eq!((cfg.k(128), cfg.l(128)), (89, 39));
        assert!(!FcdConfig { alpha: 0.01, dec_depth: 1 }.violations(32).is_empty());
        assert!(!FcdConfig { alpha: 1.0, dec_depth: 1 }.violations(32).is_empty());
        assert!(FcdConfig { alpha: 0.99, dec_depth: 1 }.violations(32).is_empty());
    }

    #[test]
    fn zero_prototype_gives_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let fcd = Fcd::new(&mut store, &FcdConfig::default(), 8, 4, 1, &mut rng).unwrap();
        store.value_mut(fcd.t_c).data_mut().fill(0.0);
        let g = Graph::new();
        let f_ot = g.constant(Tensor::randn(vec![2, 8, 4], 1.0, &mut rng));
        let t_b = fcd.completion_tokens(&g, &store, f_ot).unwrap();
        assert_eq!(g.shape(t_b), vec![2, 5, 4]);
        assert!(g.value(t_b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_leaves_embedding_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let fcd = Fcd::new(&mut store, &FcdConfig::default(), 8, 4, 1, &mut rng).unwrap();
        let g = Graph::new();
        let f_og = g.constant(Tensor::randn(vec![2, 4], 1.0, &mut rng));
        let f_ot = g.constant(Tensor::randn(vec![2, 8, 4], 1.0, &mut rng));
        let f_r = fcd.hybrid_embed(&g, &store, f_og, f_ot).unwrap();
        assert_eq!(g.shape(f_r), vec![2, 9, 4]);
        // global slot passes through untouched
        assert_eq!(&g.value(f_r).data()[..4], &g.value(f_og).data()[..4]);
    }
}
