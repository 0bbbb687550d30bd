//! The full network: shared encoder, three stream branches, decoder, heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fcd::{Fcd, FcdConfig};
use crate::losses::{self, LossReport, LossTerms, TripletSpec, DEFAULT_MARGIN};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::streams::{BnUpdate, FeatureTriplet, Heads, Stream, StreamBranch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fcd: FcdConfig,
    pub n_ids: usize,
    /// Build the completion stream and its losses.
    pub use_fcd: bool,
    pub margin: f32,
    #[serde(default)]
    pub cht: TripletSpec,
    /// Weight of the completion MSE in the total loss.
    #[serde(default = "unit_weight")]
    pub fcd_weight: f32,
}

fn unit_weight() -> f32 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fcd: FcdConfig::default(),
            n_ids: 8,
            use_fcd: true,
            margin: DEFAULT_MARGIN,
            cht: TripletSpec::default(),
            fcd_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.encoder.violations();
        if self.use_fcd && v.is_empty() {
            v.extend(self.fcd.violations(self.encoder.n_patches()));
        }
        if self.n_ids < 2 {
            v.push(format!("n_ids must be at least 2, got {}", self.n_ids));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            v.push(format!("margin {} must be finite and non-negative", self.margin));
        }
        if !(self.fcd_weight >= 0.0 && self.fcd_weight.is_finite()) {
            v.push(format!("fcd_weight {} must be finite and non-negative", self.fcd_weight));
        }
        v
    }

    /// Inference descriptor length.
    pub fn descriptor_dim(&self, include_holistic: bool) -> usize {
        let (c, m) = (self.encoder.dim, self.encoder.m_parts);
        c + m * c * (1 + usize::from(self.use_fcd) + usize::from(include_holistic))
    }
}

/// Module layout; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Net {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub holistic: StreamBranch,
    pub occluded: StreamBranch,
    pub completed: Option<StreamBranch>,
    pub fcd: Option<Fcd>,
    pub heads: Heads,
}

/// Everything one training forward produces.
#[derive(Debug)]
pub struct TrainForward {
    pub loss: Var,
    pub report: LossReport,
    pub terms: LossTerms,
    pub features: FeatureTriplet,
    pub bn_updates: Vec<BnUpdate>,
    /// Encoder patch tokens of the holistic and occluded images, `[B, N, C]`.
    pub f_ht: Var,
    pub f_ot: Var,
    /// Decoder output, `[B, N, C]`.
    pub f_cp: Option<Var>,
}

impl Net {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &cfg.encoder;
        let encoder = Encoder::new(store, e, &mut rng)?;
        let branch = |s: &mut ParamStore, stream, rng: &mut ChaCha8Rng| {
            StreamBranch::new(s, stream, e.dim, e.heads, e.m_parts, rng)
        };
        let holistic = branch(store, Stream::Holistic, &mut rng);
        let occluded = branch(store, Stream::Occluded, &mut rng);
        let (completed, fcd) = if cfg.use_fcd {
            let c = branch(store, Stream::Completed, &mut rng);
            let f = Fcd::new(store, &cfg.fcd, e.n_patches(), e.dim, e.heads, &mut rng)?;
            (Some(c), Some(f))
        } else {
            (None, None)
        };
        let heads = Heads::new(store, e.dim, cfg.n_ids, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            holistic,
            occluded,
            completed,
            fcd,
            heads,
        })
    }

    /// Training forward on aligned holistic/occluded batches. Both halves
    /// go through the shared encoder in one pass.
    pub fn forward_train(
        &self,
        g: &Graph,
        store: &ParamStore,
        holistic: &Tensor,
        occluded: &Tensor,
        cams: &[usize],
        labels: &[usize],
    ) -> Result<TrainForward> {
        if holistic.shape() != occluded.shape() {
            return Err(Error::Shape {
                op: "forward_train",
                lhs: holistic.shape().to_vec(),
                rhs: occluded.shape().to_vec(),
            });
        }
        let b = labels.len();
        if holistic.shape().first() != Some(&b) || cams.len() != b {
            return Err(Error::Batch(format!(
                "{b} labels, {} cameras for {:?} images",
                cams.len(),
                holistic.shape()
            )));
        }
        let m = self.cfg.encoder.m_parts;
        let n = self.cfg.encoder.n_patches();
        let c = self.cfg.encoder.dim;
        let mut both = holistic.data().to_vec();
        both.extend_from_slice(occluded.data());
        let mut shape = holistic.shape().to_vec();
        shape[0] *= 2;
        let cams2: Vec<usize> = cams.iter().chain(cams).copied().collect();
        let enc = self.encoder.forward(g, store, &Tensor::new(shape, both)?, &cams2)?;
        let seq_h = g.narrow(enc, 0, 0, b)?;
        let seq_o = g.narrow(enc, 0, b, b)?;

        let mut updates = Vec::new();
        let hol = self.holistic.forward(g, store, seq_h, m, None, true, &mut updates)?;
        let occ = self.occluded.forward(g, store, seq_o, m, None, true, &mut updates)?;

        let ce = |head: &crate::nn::Linear, x: Var| -> Result<Var> {
            losses::cross_entropy(g, head.forward(g, store, x)?, labels)
        };
        let mut id = g.add(ce(&self.heads.global, occ.global_bn)?, ce(&self.heads.global, hol.global_bn)?)?;
        id = g.add(id, ce(&self.heads.holistic_parts, hol.parts_bn)?)?;
        id = g.add(id, ce(&self.heads.occluded_parts, occ.parts_bn)?)?;

        let f_ht = g.narrow(seq_h, 1, 1, n)?;
        let f_ot = g.narrow(seq_o, 1, 1, n)?;
        let (completed, f_cp, fcd_loss, fc2) = match (&self.fcd, &self.completed) {
            (Some(fcd), Some(branch)) => {
                let f_cp = fcd.forward(g, store, occ.global, f_ot)?;
                let fcd_loss = g.scale(losses::completion_loss(g, f_cp, f_ht)?, self.cfg.fcd_weight);
                let seq_c = g.concat(&[g.reshape(occ.global, &[b, 1, c])?, f_cp], 1)?;
                let comp = branch.forward(g, store, seq_c, m, Some((occ.global, occ.global_bn)), true, &mut updates)?;
                let head = &self.heads.holistic_parts;
                let fc2 = losses::consistency_loss(
                    g,
                    head.forward(g, store, comp.parts_bn)?,
                    head.forward(g, store, hol.parts_bn)?,
                )?;
                (Some(comp), Some(f_cp), Some(fcd_loss), Some(fc2))
            }
            _ => (None, None, None, None),
        };
        let cht = losses::cht_loss(
            g,
            hol.parts,
            occ.parts,
            completed.map(|s| s.parts),
            labels,
            self.cfg.margin,
            self.cfg.cht,
        )?;
        let terms = LossTerms {
            id,
            fcd: fcd_loss,
            cht,
            fc2,
        };
        let (loss, report) = losses::total_loss(g, &terms)?;
        Ok(TrainForward {
            loss,
            report,
            terms,
            features: FeatureTriplet {
                holistic: hol,
                occluded: occ,
                completed,
            },
            bn_updates: updates,
            f_ht,
            f_ot,
            f_cp,
        })
    }

    /// Inference features from a single encoder pass: `[B, D]` rows of
    /// `[global_bn | occluded parts_bn | completed parts_bn (| holistic parts_bn)]`,
    /// before L2 normalization. Uses running BNNeck statistics.
    pub fn descriptor(
        &self,
        g: &Graph,
        store: &ParamStore,
        images: &Tensor,
        cams: &[usize],
        include_holistic: bool,
    ) -> Result<Var> {
        let m = self.cfg.encoder.m_parts;
        let (n, c) = (self.cfg.encoder.n_patches(), self.cfg.encoder.dim);
        let b = cams.len();
        let enc = self.encoder.forward(g, store, images, cams)?;
        let mut sink = Vec::new();
        let occ = self.occluded.forward(g, store, enc, m, None, false, &mut sink)?;
        let flat = |v: Var| g.reshape(v, &[b, m * c]);
        let mut cols = vec![occ.global_bn, flat(occ.parts_bn)?];
        if let (Some(fcd), Some(branch)) = (&self.fcd, &self.completed) {
            let f_cp = fcd.forward(g, store, occ.global, g.narrow(enc, 1, 1, n)?)?;
            let seq_c = g.concat(&[g.reshape(occ.global, &[b, 1, c])?, f_cp], 1)?;
            let comp = branch.forward(g, store, seq_c, m, Some((occ.global, occ.global_bn)), false, &mut sink)?;
            cols.push(flat(comp.parts_bn)?);
        }
        if include_holistic {
            let hol = self.holistic.forward(g, store, enc, m, None, false, &mut sink)?;
            cols.push(flat(hol.parts_bn)?);
        }
        g.concat(&cols, 1)
    }
}

/// Finite-difference check of the full training loss on a random batch of
/// `2·k` images (two identities, `k` each) against every trainable parameter.
/// Stop-gradients are made transparent so the check sees the true
/// derivative of the loss value.
pub fn grad_check_model(cfg: &ModelConfig, k: usize, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let gc = &GradCheckConfig {
        through_detach: true,
        ..gc.clone()
    };
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, cfg, gc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0x9c);
    let e = &cfg.encoder;
    let b = 2 * k.max(2);
    let shape = vec![b, e.img_h, e.img_w, 3];
    let holistic = Tensor::randn(shape.clone(), 0.5, &mut rng);
    let occluded = Tensor::randn(shape, 0.5, &mut rng);
    let labels: Vec<usize> = (0..b).map(|i| (i * 2 / b) % cfg.n_ids).collect();
    let cams: Vec<usize> = (0..b).map(|i| i % e.n_cameras).collect();
    let params = store.trainable_ids();
    grad_check(&mut store, &params, gc, |g, s| {
        Ok(net.forward_train(g, s, &holistic, &occluded, &cams, &labels)?.loss)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct FcFormer {
    pub net: Net,
    pub store: ParamStore,
    pub mode: Mode,
}

impl FcFormer {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, cfg, seed)?;
        Ok(Self {
            net,
            store,
            mode: Mode::Train,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }
}
