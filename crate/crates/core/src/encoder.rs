//! Shared transformer trunk.
//!
//! Token layout: index 0 is the global token, 1..=N are patch tokens in
//! row-major patch order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, INIT_STD};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub n_cameras: usize,
    pub lambda_cm: f32,
    pub m_parts: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            img_h: 64,
            img_w: 32,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            n_cameras: 4,
            lambda_cm: 3.0,
            m_parts: 4,
        }
    }
}

impl EncoderConfig {
    pub fn n_patches(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Every violated constraint, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.patch == 0 || self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            v.push(format!(
                "image {}x{} is not divisible by patch {}",
                self.img_h, self.img_w, self.patch
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            v.push(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.n_cameras == 0 {
            v.push("n_cameras must be positive".into());
        }
        if self.patch > 0 && (self.m_parts == 0 || self.n_patches() % self.m_parts != 0) {
            v.push(format!(
                "m_parts {} does not divide N = {}",
                self.m_parts,
                self.n_patches()
            ));
        }
        if !self.lambda_cm.is_finite() {
            v.push("lambda_cm must be finite".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub global_token: ParamId,
    pub pos_embed: ParamId,
    pub cam_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, n) = (cfg.dim, cfg.n_patches());
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(store, "encoder.patch_embed", cfg.patch_dim(), c, true, rng),
            global_token: store.add("encoder.global_token", Tensor::randn(vec![1, 1, c], INIT_STD, rng)),
            pos_embed: store.add("encoder.pos_embed", Tensor::randn(vec![n + 1, c], INIT_STD, rng)),
            cam_embed: store.add("encoder.cam_embed", Tensor::randn(vec![cfg.n_cameras, c], INIT_STD, rng)),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), c, cfg.heads, rng))
                .collect(),
            norm: LayerNorm::new(store, "encoder.norm", c),
        })
    }

    /// `[B, H, W, 3]` pixels to `[B, N, 3·p·p]` non-overlapping patches.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        let (h, w, p) = (self.cfg.img_h, self.cfg.img_w, self.cfg.patch);
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != 3 {
            return Err(Error::Shape {
                op: "patchify",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), h, w, 3],
            });
        }
        let (b, gh, gw) = (s[0], h / p, w / p);
        let pd = self.cfg.patch_dim();
        let src = images.data();
        let mut out = Vec::with_capacity(b * gh * gw * pd);
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    for y in 0..p {
                        let row = ((bi * h + py * p + y) * w + px * p) * 3;
                        out.extend_from_slice(&src[row..row + 3 * p]);
                    }
                }
            }
        }
        Tensor::new(vec![b, gh * gw, pd], out)
    }

    /// `concat(E_g, p(x)) + P_E + λ_cm·E_cm[cam]`, shape `[B, N+1, C]`.
    pub fn embed(&self, g: &Graph, store: &ParamStore, images: &Tensor, cams: &[usize]) -> Result<Var> {
        let patches = self.patchify(images)?;
        let b = patches.shape()[0];
        if cams.len() != b {
            return Err(Error::Batch(format!("{} camera ids for {b} images", cams.len())));
        }
        if let Some(&bad) = cams.iter().find(|&&c| c >= self.cfg.n_cameras) {
            return Err(Error::Config(format!(
                "camera index {bad} out of range for {} cameras",
                self.cfg.n_cameras
            )));
        }
        let c = self.cfg.dim;
        let ep = self.patch_embed.forward(g, store, g.constant(patches))?;
        let eg = g.broadcast_to(g.param(store, self.global_token), &[b, 1, c])?;
        let x = g.concat(&[eg, ep], 1)?;
        let x = g.add(x, g.param(store, self.pos_embed))?;
        let cam = g.gather_rows(g.param(store, self.cam_embed), cams)?;
        let cam = g.reshape(g.scale(cam, self.cfg.lambda_cm), &[b, 1, c])?;
        g.add(x, cam)
    }

    /// The transformer blocks alone; identity at depth 0.
    pub fn encode(&self, g: &Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        self.blocks.iter().try_fold(seq, |x, blk| blk.forward(g, store, x))
    }

    /// `embed`, `encode`, then the output layer norm.
    pub fn forward(&self, g: &Graph, store: &ParamStore, images: &Tensor, cams: &[usize]) -> Result<Var> {
        let seq = self.embed(g, store, images, cams)?;
        let seq = self.encode(g, store, seq)?;
        self.norm.forward(g, store, seq)
    }
}

/// Part `k` is the global token followed by patch tokens
/// `[k·N/M, (k+1)·N/M)`; each part has `N/M + 1` tokens.
pub fn split_parts(g: &Graph, seq: Var, m_parts: usize) -> Result<Vec<Var>> {
    let shape = g.shape(seq);
    if shape.len() != 3 || shape[1] < 2 {
        return Err(Error::Dim {
            op: "split_parts",
            msg: format!("expected [B, N+1, C], got {shape:?}"),
        });
    }
    let n = shape[1] - 1;
    if m_parts == 0 || n % m_parts != 0 {
        return Err(Error::Config(format!("m_parts {m_parts} does not divide N = {n}")));
    }
    let len = n / m_parts;
    let global = g.narrow(seq, 1, 0, 1)?;
    (0..m_parts)
        .map(|k| g.concat(&[global, g.narrow(seq, 1, 1 + k * len, len)?], 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_lists_every_violation() {
        let cfg = EncoderConfig {
            img_h: 60,
            dim: 30,
            heads: 4,
            m_parts: 5,
            ..EncoderConfig::default()
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn paper_scale_token_count() {
        let cfg = EncoderConfig {
            img_h: 256,
            img_w: 128,
            patch: 16,
            ..EncoderConfig::default()
        };
        assert_eq!(cfg.n_patches(), 128);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn patchify_is_row_major() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            img_h: 4,
            img_w: 4,
            patch: 2,
            dim: 4,
            depth: 0,
            heads: 1,
            m_parts: 1,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data: Vec<f32> = (0..48).map(|i| i as f32).collect();
        let p = enc.patchify(&Tensor::new(vec![1, 4, 4, 3], data).unwrap()).unwrap();
        assert_eq!(p.shape(), &[1, 4, 12]);
        // second patch is the top-right 2x2 block: pixels (0,2),(0,3),(1,2),(1,3)
        let want: Vec<f32> = [6, 7, 8, 9, 10, 11, 18, 19, 20, 21, 22, 23].iter().map(|&v| v as f32).collect();
        assert_eq!(&p.data()[12..24], &want[..]);
    }
}
