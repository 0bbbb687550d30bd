//! Descriptor extraction and CMC / mAP retrieval metrics.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::images_to_tensor;
use crate::error::{Error, Result};
use crate::model::{FcFormer, Mode};
use crate::numerics::{Checkpoint, Graph, Tensor};

/// L2-normalized descriptors with their identities and cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub dim: usize,
    /// Row-major `[n, dim]`.
    pub features: Vec<f32>,
    pub pids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl GalleryIndex {
    pub fn new(dim: usize, features: Vec<f32>, pids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * pids.len() || pids.len() != cams.len() {
            return Err(Error::Batch(format!(
                "{} features of dim {dim} for {} pids and {} cams",
                features.len(),
                pids.len(),
                cams.len()
            )));
        }
        Ok(Self { dim, features, pids, cams })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes `<path>` as an FCF1 container holding `features` and
    /// `<path>.json` with pids and cams.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut ckpt = Checkpoint::default();
        ckpt.tensors.push((
            "features".into(),
            Tensor::new(vec![self.len(), self.dim], self.features.clone())?,
        ));
        ckpt.save(path)?;
        let side = sidecar(path);
        let json = serde_json::json!({ "pids": self.pids, "cams": self.cams });
        std::fs::write(&side, json.to_string()).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::load(path)?;
        let t = ckpt
            .get("features")
            .ok_or_else(|| Error::load(path, "no features tensor"))?;
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        #[derive(Deserialize)]
        struct Side {
            pids: Vec<usize>,
            cams: Vec<usize>,
        }
        let s: Side = serde_json::from_str(&text).map_err(|e| Error::load(&side, e))?;
        let dim = t.shape().get(1).copied().unwrap_or(0);
        Self::new(dim, t.data().to_vec(), s.pids, s.cams)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn l2_normalize_rows(data: &mut [f32], dim: usize) {
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
}

/// Descriptors for `images` in batches of `batch_size`. The model must be
/// in eval mode.
pub fn extract(
    model: &FcFormer,
    images: &[&RgbImage],
    pids: &[usize],
    cams: &[usize],
    include_holistic: bool,
    batch_size: usize,
) -> Result<GalleryIndex> {
    if model.mode != Mode::Eval {
        return Err(Error::Mode("feature extraction needs eval mode"));
    }
    if images.len() != cams.len() || images.len() != pids.len() {
        return Err(Error::Batch(format!(
            "{} images, {} pids, {} cams",
            images.len(),
            pids.len(),
            cams.len()
        )));
    }
    let dim = model.cfg().descriptor_dim(include_holistic);
    let mut features = Vec::with_capacity(images.len() * dim);
    for (imgs, cs) in images.chunks(batch_size.max(1)).zip(cams.chunks(batch_size.max(1))) {
        let g = Graph::new();
        let x = images_to_tensor(imgs)?;
        let d = model.net.descriptor(&g, &model.store, &x, cs, include_holistic)?;
        features.extend_from_slice(g.value(d).data());
    }
    l2_normalize_rows(&mut features, dim);
    GalleryIndex::new(dim, features, pids.to_vec(), cams.to_vec())
}

/// Per-pair token reconstruction errors `(completed, occluded)`: the mean
/// squared distance of the completed and of the occluded patch tokens from
/// the holistic patch tokens of the same image. Needs eval mode and a model
/// with feature completion.
pub fn completion_errors(
    model: &FcFormer,
    occluded: &[&RgbImage],
    holistic: &[&RgbImage],
    cams: &[usize],
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    if model.mode != Mode::Eval {
        return Err(Error::Mode("completion errors need eval mode"));
    }
    let net = &model.net;
    let fcd = net
        .fcd
        .as_ref()
        .ok_or_else(|| Error::Config("model has no completion decoder".into()))?;
    if occluded.len() != holistic.len() || occluded.len() != cams.len() {
        return Err(Error::Batch(format!(
            "{} occluded, {} holistic, {} cams",
            occluded.len(),
            holistic.len(),
            cams.len()
        )));
    }
    let (n, m) = (net.cfg.encoder.n_patches(), net.cfg.encoder.m_parts);
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(occluded.len());
    for start in (0..occluded.len()).step_by(bs) {
        let end = (start + bs).min(occluded.len());
        let g = Graph::new();
        let cs = &cams[start..end];
        let enc_o = net.encoder.forward(&g, &model.store, &images_to_tensor(&occluded[start..end])?, cs)?;
        let enc_h = net.encoder.forward(&g, &model.store, &images_to_tensor(&holistic[start..end])?, cs)?;
        let occ = net.occluded.forward(&g, &model.store, enc_o, m, None, false, &mut Vec::new())?;
        let f_ot = g.narrow(enc_o, 1, 1, n)?;
        let f_cp = fcd.forward(&g, &model.store, occ.global, f_ot)?;
        let f_ht = g.value(g.narrow(enc_h, 1, 1, n)?).clone();
        let (f_ot, f_cp) = (g.value(f_ot).clone(), g.value(f_cp).clone());
        let row = f_ht.numel() / (end - start);
        let mse = |a: &Tensor, i: usize| -> f64 {
            let r = i * row..(i + 1) * row;
            a.data()[r.clone()]
                .iter()
                .zip(&f_ht.data()[r])
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                / row as f64
        };
        out.extend((0..end - start).map(|i| (mse(&f_cp, i), mse(&f_ot, i))));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `cmc[k-1]` = CMC@k, for k up to the gallery size.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub excluded_queries: usize,
}

impl RetrievalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cmc: BTreeMap<String, f64> = self
            .cmc
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{}", i + 1), *v))
            .collect();
        serde_json::json!({ "cmc": cmc, "mAP": self.map, "excluded_queries": self.excluded_queries })
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Cosine-distance ranking with same-identity same-camera gallery entries
/// removed. Ties keep gallery order. Queries without a valid match are
/// excluded and counted.
pub fn cmc_map(query: &GalleryIndex, gallery: &GalleryIndex) -> Result<RetrievalReport> {
    if query.dim != gallery.dim {
        return Err(Error::Shape {
            op: "cmc_map",
            lhs: vec![query.len(), query.dim],
            rhs: vec![gallery.len(), gallery.dim],
        });
    }
    let m = gallery.len();
    let mut cmc = vec![0.0f64; m];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for qi in 0..query.len() {
        let (qp, qc) = (query.pids[qi], query.cams[qi]);
        let mut order: Vec<(f64, usize)> = (0..m)
            .filter(|&j| !(gallery.pids[j] == qp && gallery.cams[j] == qc))
            .map(|j| (1.0 - cosine(query.row(qi), gallery.row(j)), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hits: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, (_, j))| gallery.pids[*j] == qp)
            .map(|(r, _)| r)
            .collect();
        if hits.is_empty() {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        for v in &mut cmc[hits[0]..] {
            *v += 1.0;
        }
        ap_sum += hits
            .iter()
            .enumerate()
            .map(|(n, &r)| (n + 1) as f64 / (r + 1) as f64)
            .sum::<f64>()
            / hits.len() as f64;
    }
    if evaluated == 0 {
        return Err(Error::Config("no query has a valid gallery match".into()));
    }
    cmc.iter_mut().for_each(|v| *v /= evaluated as f64);
    Ok(RetrievalReport {
        cmc,
        map: ap_sum / evaluated as f64,
        excluded_queries: excluded,
    })
}
