//! Non-shared per-stream transformer layers, BNNeck and identity heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::split_parts;
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::numerics::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var, BN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Holistic,
    Occluded,
    Completed,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Holistic => "holistic",
            Stream::Occluded => "occluded",
            Stream::Completed => "completed",
        }
    }
}

pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization with a learned gain and no bias.
#[derive(Clone, Debug)]
pub struct BnNeck {
    pub gain: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics waiting to be folded into the running estimates.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let blend = |t: &mut Tensor, batch: &[f32]| {
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        };
        blend(store.value_mut(self.running_mean), &self.stats.mean);
        blend(store.value_mut(self.running_var), &self.stats.var);
    }
}

impl BnNeck {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(vec![dim])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(vec![dim])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(vec![dim])),
        }
    }

    /// `x: [B, F]`. Training mode uses batch statistics and queues a
    /// running-stat update; eval mode uses the running statistics.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let normed = if train {
            let (y, stats) = g.batch_norm(x)?;
            updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
            y
        } else {
            let mean = store.value(self.running_mean);
            let inv = store.value(self.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt());
            let centered = g.sub(x, g.constant(mean.clone()))?;
            g.mul(centered, g.constant(inv))?
        };
        g.mul(normed, g.param(store, self.gain))
    }
}

/// One non-shared transformer layer followed by a layer norm.
#[derive(Clone, Debug)]
pub struct StreamLayer {
    pub block: Block,
    pub norm: LayerNorm,
}

impl StreamLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, stream: Stream, dim: usize, heads: usize, rng: &mut R) -> Self {
        let name = format!("stream.{}", stream.name());
        Self {
            block: Block::new(store, &format!("{name}.block"), dim, heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    /// Runs every part sequence through the layer and returns the output at
    /// each part's global position as `[B, M, C]`.
    pub fn part_features(&self, g: &Graph, store: &ParamStore, seq: Var, m_parts: usize) -> Result<Var> {
        let shape = g.shape(seq);
        let (b, c) = (shape[0], shape[2]);
        let parts = split_parts(g, seq, m_parts)?;
        let stacked = g.concat(&parts, 0)?; // [M·B, T, C], part-major
        let out = self.block.forward(g, store, stacked)?;
        let tok = g.narrow(out, 1, 0, 1)?;
        let tok = self.norm.forward(g, store, tok)?;
        let tok = g.reshape(tok, &[m_parts, b, c])?;
        g.permute(tok, &[1, 0, 2])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StreamFeatures {
    /// `[B, C]`
    pub global: Var,
    /// `[B, C]`
    pub global_bn: Var,
    /// `[B, M, C]`
    pub parts: Var,
    /// `[B, M, C]`
    pub parts_bn: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureTriplet {
    pub holistic: StreamFeatures,
    pub occluded: StreamFeatures,
    pub completed: Option<StreamFeatures>,
}

/// Stream layer plus the BNNecks of its global and part features.
#[derive(Clone, Debug)]
pub struct StreamBranch {
    pub stream: Stream,
    pub layer: StreamLayer,
    pub global_bn: Option<BnNeck>,
    pub parts_bn: BnNeck,
}

impl StreamBranch {
    /// The completed branch has no global BNNeck of its own: its global
    /// feature is the occluded one.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        stream: Stream,
        dim: usize,
        heads: usize,
        m_parts: usize,
        rng: &mut R,
    ) -> Self {
        let base = format!("bnneck.{}", stream.name());
        Self {
            stream,
            layer: StreamLayer::new(store, stream, dim, heads, rng),
            global_bn: (stream != Stream::Completed).then(|| BnNeck::new(store, &format!("{base}.global"), dim)),
            parts_bn: BnNeck::new(store, &format!("{base}.parts"), m_parts * dim),
        }
    }

    /// `seq: [B, N+1, C]`. For the completed branch pass the occluded
    /// global features as `global`.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        seq: Var,
        m_parts: usize,
        global: Option<(Var, Var)>,
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<StreamFeatures> {
        let shape = g.shape(seq);
        let (b, c) = (shape[0], shape[2]);
        let (global, global_bn) = match (global, &self.global_bn) {
            (Some(pair), _) => pair,
            (None, Some(bn)) => {
                let gl = g.reshape(g.narrow(seq, 1, 0, 1)?, &[b, c])?;
                (gl, bn.forward(g, store, gl, train, updates)?)
            }
            (None, None) => {
                return Err(Error::Config(format!(
                    "{} stream needs an external global feature",
                    self.stream.name()
                )))
            }
        };
        let parts = self.layer.part_features(g, store, seq, m_parts)?;
        let flat = g.reshape(parts, &[b, m_parts * c])?;
        let bn = self.parts_bn.forward(g, store, flat, train, updates)?;
        let parts_bn = g.reshape(bn, &[b, m_parts, c])?;
        Ok(StreamFeatures {
            global,
            global_bn,
            parts,
            parts_bn,
        })
    }
}

/// Bias-free identity classifiers.
#[derive(Clone, Debug)]
pub struct Heads {
    /// Shared by the occluded and holistic global features.
    pub global: Linear,
    pub holistic_parts: Linear,
    pub occluded_parts: Linear,
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, n_ids: usize, rng: &mut R) -> Self {
        Self {
            global: Linear::new(store, "head.global", dim, n_ids, false, rng),
            holistic_parts: Linear::new(store, "head.holistic_parts", dim, n_ids, false, rng),
            occluded_parts: Linear::new(store, "head.occluded_parts", dim, n_ids, false, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_bnneck_with_unit_stats_is_identity() {
        let mut store = ParamStore::new();
        let bn = BnNeck::new(&mut store, "bn", 3);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let g = Graph::new();
        let y = bn.forward(&g, &store, g.constant(x.clone()), false, &mut Vec::new()).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn train_bnneck_centres_channels_and_tracks_ema() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bn = BnNeck::new(&mut store, "bn", 4);
        let mut ema_mean = vec![0.0f64; 4];
        let mut ema_var = vec![1.0f64; 4];
        for _ in 0..3 {
            let x = Tensor::randn(vec![6, 4], 2.0, &mut rng);
            let g = Graph::new();
            let mut up = Vec::new();
            let y = bn.forward(&g, &store, g.constant(x.clone()), true, &mut up).unwrap();
            let y = g.value(y);
            for ch in 0..4 {
                let col: Vec<f64> = (0..6).map(|r| x.data()[r * 4 + ch] as f64).collect();
                let m = col.iter().sum::<f64>() / 6.0;
                let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 5.0;
                ema_mean[ch] = 0.9 * ema_mean[ch] + 0.1 * m;
                ema_var[ch] = 0.9 * ema_var[ch] + 0.1 * v;
                let ym: f32 = (0..6).map(|r| y.data()[r * 4 + ch]).sum::<f32>() / 6.0;
                assert!(ym.abs() < 1e-5);
            }
            up.iter().for_each(|u| u.apply(&mut store));
        }
        for ch in 0..4 {
            assert!((store.value(bn.running_mean).data()[ch] as f64 - ema_mean[ch]).abs() < 1e-5);
            assert!((store.value(bn.running_var).data()[ch] as f64 - ema_var[ch]).abs() < 1e-4);
        }
    }

    #[test]
    fn train_bnneck_rejects_single_sample() {
        let mut store = ParamStore::new();
        let bn = BnNeck::new(&mut store, "bn", 2);
        let g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 2]));
        assert!(bn.forward(&g, &store, x, true, &mut Vec::new()).is_err());
    }
}
