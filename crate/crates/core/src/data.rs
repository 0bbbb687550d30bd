//! Synthetic re-identification dataset and the P×K identity sampler.
//!
//! Every identity is a procedurally rendered figure (hair, skin, top, pattern,
//! trousers, proportions). Each camera applies its own photometric transform;
//! geometry depends only on the identity and the image index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::oia;
use crate::oil::make_synthetic_library;

const PALETTE: [[u8; 3]; 12] = [
    [200, 30, 30],
    [30, 160, 40],
    [30, 60, 200],
    [230, 200, 40],
    [150, 40, 170],
    [30, 180, 190],
    [240, 130, 20],
    [240, 240, 240],
    [25, 25, 25],
    [120, 70, 30],
    [240, 120, 170],
    [110, 110, 110],
];
const SKIN: [[u8; 3]; 3] = [[240, 200, 170], [190, 140, 100], [110, 75, 50]];
const HAIR: [[u8; 3]; 4] = [[20, 15, 10], [120, 80, 40], [220, 190, 120], [150, 150, 150]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
}

/// Render parameters of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPerson {
    pub pid: usize,
    pub hair: [u8; 3],
    pub skin: [u8; 3],
    pub top: [u8; 3],
    pub top_accent: [u8; 3],
    pub pattern: Pattern,
    pub bottom: [u8; 3],
    pub shoes: [u8; 3],
    /// Torso length and width in units of image height/width.
    pub torso_len: f32,
    pub torso_width: f32,
    pub leg_width: f32,
    pub has_bag: bool,
    pub texture_seed: u64,
}

/// Per-camera colour gain and brightness offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraTransform {
    pub gain: [f32; 3],
    pub offset: f32,
}

impl CameraTransform {
    pub fn new(seed: u64, cam: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xca3e_0000 + cam as u64));
        Self {
            gain: [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)],
            offset: rng.gen_range(-20.0..20.0),
        }
    }

    fn apply(&self, c: [u8; 3]) -> Rgb<u8> {
        let f = |i: usize| (c[i] as f32 * self.gain[i] + self.offset).round().clamp(0.0, 255.0) as u8;
        Rgb([f(0), f(1), f(2)])
    }
}

pub(crate) fn key(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Distinct identities, deterministic in `seed`.
pub fn make_people(seed: u64, n_ids: usize) -> Vec<ToyPerson> {
    let mut rng = ChaCha8Rng::seed_from_u64(key(&[seed, 0x70]));
    let mut top_perm: Vec<usize> = (0..PALETTE.len()).collect();
    let mut bottom_perm = top_perm.clone();
    top_perm.shuffle(&mut rng);
    bottom_perm.shuffle(&mut rng);
    let mut seen = std::collections::HashSet::new();
    let mut people = Vec::with_capacity(n_ids);
    let mut attempt = 0usize;
    while people.len() < n_ids {
        let pid = people.len();
        // cycle the palettes so neighbouring identities differ everywhere
        let top = top_perm[(pid + attempt) % PALETTE.len()];
        let mut bottom = bottom_perm[(pid / PALETTE.len() + pid + 3 * attempt) % PALETTE.len()];
        if bottom == top {
            bottom = (bottom + 1) % PALETTE.len();
        }
        let pattern = [Pattern::Solid, Pattern::HorizontalStripes, Pattern::VerticalStripes][(pid / 4 + attempt) % 3];
        let hair = HAIR[rng.gen_range(0..HAIR.len())];
        let signature = (top, bottom, pattern, hair);
        if !seen.insert(signature) {
            attempt += 1;
            continue;
        }
        people.push(ToyPerson {
            pid,
            hair,
            skin: SKIN[rng.gen_range(0..SKIN.len())],
            top: PALETTE[top],
            top_accent: PALETTE[(top + 4 + rng.gen_range(0..4)) % PALETTE.len()],
            pattern,
            bottom: PALETTE[bottom],
            shoes: PALETTE[rng.gen_range(0..PALETTE.len())],
            torso_len: rng.gen_range(0.28..0.38),
            torso_width: rng.gen_range(0.38..0.55),
            leg_width: rng.gen_range(0.13..0.2),
            has_bag: rng.gen_bool(0.4),
            texture_seed: rng.gen(),
        });
    }
    people
}

/// Which pixels belong to the figure and with which colour, before the
/// camera transform.
struct Figure {
    w: u32,
    px: Vec<Option<[u8; 3]>>,
}

fn draw_figure(p: &ToyPerson, h: u32, w: u32, idx: u64) -> Figure {
    let mut rng = ChaCha8Rng::seed_from_u64(key(&[p.texture_seed, idx]));
    let (hf, wf) = (h as f32, w as f32);
    let dx = rng.gen_range(-0.06..0.06) * wf;
    let dy = rng.gen_range(-0.03..0.03) * hf;
    let stance = rng.gen_range(0.0..0.08) * wf;
    let cx = wf / 2.0 + dx;

    let head_cy = 0.13 * hf + dy;
    let head_r = 0.075 * hf;
    let torso_top = 0.22 * hf + dy;
    let torso_bot = torso_top + p.torso_len * hf;
    let half_torso = p.torso_width * wf / 2.0;
    let leg_bot = 0.95 * hf + dy;
    let leg_w = p.leg_width * wf;
    let arm_w = 0.09 * wf;
    let stripe = 3.0;

    let mut px = vec![None; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut c = None;
            // legs and shoes
            let left = (xf - (cx - half_torso * 0.5 - stance)).abs() <= leg_w / 2.0;
            let right = (xf - (cx + half_torso * 0.5 + stance)).abs() <= leg_w / 2.0;
            if (left || right) && yf >= torso_bot && yf <= leg_bot {
                c = Some(if yf > leg_bot - 0.05 * hf { p.shoes } else { p.bottom });
            }
            // torso with pattern
            if (xf - cx).abs() <= half_torso && yf >= torso_top && yf <= torso_bot {
                let accent = match p.pattern {
                    Pattern::Solid => false,
                    Pattern::HorizontalStripes => ((yf - torso_top) / stripe) as i32 % 2 == 1,
                    Pattern::VerticalStripes => ((xf - cx + half_torso) / stripe) as i32 % 2 == 1,
                };
                c = Some(if accent { p.top_accent } else { p.top });
            }
            // arms
            let arm = (xf - cx).abs() > half_torso && (xf - cx).abs() <= half_torso + arm_w;
            if arm && yf >= torso_top + 1.0 && yf <= torso_bot + 0.04 * hf {
                c = Some(if yf > torso_bot - 0.02 * hf { p.skin } else { p.top });
            }
            // bag strap on the right hip
            if p.has_bag && xf >= cx + half_torso * 0.2 && xf <= cx + half_torso && yf >= torso_bot - 0.08 * hf && yf <= torso_bot {
                c = Some(p.top_accent.map(|v| v / 2));
            }
            // head: hair on top, face below
            let (ux, uy) = ((xf - cx) / (head_r * 0.85), (yf - head_cy) / head_r);
            if ux * ux + uy * uy <= 1.0 {
                c = Some(if uy < -0.2 { p.hair } else { p.skin });
            }
            px[(y * w + x) as usize] = c;
        }
    }
    Figure { w, px }
}

fn background(h: u32, w: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [f32; 3] = [rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0)];
    let bot: [f32; 3] = [rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0)];
    RgbImage::from_fn(w, h, |_, y| {
        let t = y as f32 / h.max(1) as f32;
        let n: f32 = rng.gen_range(-12.0..12.0);
        let c = |i: usize| (top[i] * (1.0 - t) + bot[i] * t + n).clamp(0.0, 255.0) as u8;
        Rgb([c(0), c(1), c(2)])
    })
}

/// Renders image `idx` of `person` as seen by `cam`.
pub fn render(person: &ToyPerson, cam: &CameraTransform, h: u32, w: u32, idx: u64) -> RgbImage {
    let fig = draw_figure(person, h, w, idx);
    let mut img = background(h, w, key(&[person.texture_seed, idx, 0xb6]));
    for (i, c) in fig.px.iter().enumerate() {
        if let Some(c) = c {
            let (x, y) = (i as u32 % fig.w, i as u32 / fig.w);
            img.put_pixel(x, y, cam.apply(*c));
        }
    }
    // camera transform on the background too
    for (i, p) in img.pixels_mut().enumerate() {
        if fig.px[i].is_none() {
            *p = cam.apply([p[0], p[1], p[2]]);
        }
    }
    img
}

/// Pixels covered by the figure in image `idx` (camera independent).
pub fn figure_mask(person: &ToyPerson, h: u32, w: u32, idx: u64) -> Vec<bool> {
    draw_figure(person, h, w, idx).px.iter().map(Option::is_some).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(skip)]
    pub image: RgbImage,
    pub pid: usize,
    pub cam: usize,
    pub idx: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_ids: usize,
    pub train_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub n_cams: usize,
    pub img_h: u32,
    pub img_w: u32,
    /// Paste library occluders onto query images.
    pub occlude_query: bool,
    pub query_delta_range: (f32, f32),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_ids: 8,
            train_per_id: 8,
            query_per_id: 2,
            gallery_per_id: 4,
            n_cams: 4,
            img_h: 64,
            img_w: 32,
            occlude_query: true,
            query_delta_range: oia::DEFAULT_DELTA_RANGE,
        }
    }
}

/// Train/query/gallery images over the same identities with disjoint image
/// indices. `query_holistic[i]` is query `i` before occlusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub query_holistic: Vec<RgbImage>,
    pub gallery: Vec<Sample>,
}

/// Seed offset of the occluder library used for queries; training uses a
/// different library, so query occluders are unseen shapes.
pub const QUERY_LIBRARY_SALT: u64 = 0x7175_6572_79;

pub fn generate_dataset(seed: u64, n_ids: usize, imgs_per_id: usize, n_cams: usize) -> Result<Dataset> {
    generate(&DatasetConfig {
        seed,
        n_ids,
        train_per_id: imgs_per_id,
        n_cams,
        ..DatasetConfig::default()
    })
}

pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_ids < 2 {
        return Err(Error::Config(format!("need at least 2 identities, got {}", cfg.n_ids)));
    }
    if cfg.n_cams < 1 {
        return Err(Error::Config("need at least 1 camera".into()));
    }
    let people = make_people(cfg.seed, cfg.n_ids);
    let cams: Vec<CameraTransform> = (0..cfg.n_cams).map(|c| CameraTransform::new(cfg.seed, c)).collect();
    let split = |start: usize, count: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(cfg.n_ids * count);
        for p in &people {
            for j in 0..count {
                let idx = start + j;
                let cam = (p.pid + j) % cfg.n_cams;
                out.push(Sample {
                    image: render(p, &cams[cam], cfg.img_h, cfg.img_w, idx as u64),
                    pid: p.pid,
                    cam,
                    idx,
                });
            }
        }
        out
    };
    let train = split(0, cfg.train_per_id);
    let mut query = split(cfg.train_per_id, cfg.query_per_id);
    let mut gallery = split(cfg.train_per_id + cfg.query_per_id, cfg.gallery_per_id);
    // gallery cameras start after the query cameras so each query has
    // cross-camera matches
    for s in &mut gallery {
        let j = s.idx - cfg.train_per_id - cfg.query_per_id;
        s.cam = (s.pid + cfg.query_per_id + j) % cfg.n_cams;
        s.image = render(&people[s.pid], &cams[s.cam], cfg.img_h, cfg.img_w, s.idx as u64);
    }
    let query_holistic = query.iter().map(|s| s.image.clone()).collect();
    if cfg.occlude_query {
        let lib = make_synthetic_library(cfg.seed ^ QUERY_LIBRARY_SALT, 8);
        for s in &mut query {
            let mut rng = ChaCha8Rng::seed_from_u64(key(&[cfg.seed, s.pid as u64, s.idx as u64, 0x0cc]));
            let (img, _) = oia::augment_one(&s.image, &lib, cfg.query_delta_range, None, &mut rng)?;
            s.image = img;
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        train,
        query,
        query_holistic,
        gallery,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    config: DatasetConfig,
    train: Vec<Sample>,
    query: Vec<Sample>,
    gallery: Vec<Sample>,
}

fn sample_name(s: &Sample) -> String {
    format!("{}_{}_{}.png", s.pid, s.cam, s.idx)
}

impl Dataset {
    pub fn n_ids(&self) -> usize {
        self.config.n_ids
    }

    /// Writes `<dir>/<split>/<pid>_<cam>_<idx>.png` plus `<dir>/splits.json`.
    /// Clean query copies go to `query_holistic/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let write = |split: &str, samples: &[Sample], images: &mut dyn Iterator<Item = &RgbImage>| -> Result<()> {
            let sub = dir.join(split);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for s in samples {
                let img = images.next().expect("one image per sample");
                let path = sub.join(sample_name(s));
                img.save(&path).map_err(|e| Error::load(&path, e))?;
            }
            Ok(())
        };
        write("train", &self.train, &mut self.train.iter().map(|s| &s.image))?;
        write("query", &self.query, &mut self.query.iter().map(|s| &s.image))?;
        write("query_holistic", &self.query, &mut self.query_holistic.iter())?;
        write("gallery", &self.gallery, &mut self.gallery.iter().map(|s| &s.image))?;
        let manifest = SplitManifest {
            config: self.config.clone(),
            train: self.train.clone(),
            query: self.query.clone(),
            gallery: self.gallery.clone(),
        };
        let path = dir.join("splits.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("splits.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e))?;
        let read = |split: &str, s: &Sample| -> Result<RgbImage> {
            let p: PathBuf = dir.join(split).join(sample_name(s));
            Ok(image::open(&p).map_err(|e| Error::load(&p, e))?.to_rgb8())
        };
        let fill = |split: &str, samples: Vec<Sample>| -> Result<Vec<Sample>> {
            samples
                .into_iter()
                .map(|mut s| {
                    s.image = read(split, &s)?;
                    Ok(s)
                })
                .collect()
        };
        let query = fill("query", m.query)?;
        let query_holistic = query
            .iter()
            .map(|s| read("query_holistic", s))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: m.config,
            train: fill("train", m.train)?,
            query,
            query_holistic,
            gallery: fill("gallery", m.gallery)?,
        })
    }
}

/// P identities × K images per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkSpec {
    pub p: usize,
    pub k: usize,
}

impl PkSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.p < 2 {
            return Err(Error::Config(format!(
                "P×K batches need P ≥ 2 and K ≥ 2, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Groups sample indices by identity and deals them into P×K batches.
#[derive(Clone, Debug)]
pub struct PkSampler {
    spec: PkSpec,
    by_pid: BTreeMap<usize, Vec<usize>>,
}

impl PkSampler {
    pub fn new(pids: &[usize], spec: PkSpec) -> Result<Self> {
        spec.validate()?;
        let mut by_pid: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &pid) in pids.iter().enumerate() {
            by_pid.entry(pid).or_default().push(i);
        }
        if by_pid.len() < spec.p {
            return Err(Error::Config(format!(
                "{} identities cannot fill batches of P={}",
                by_pid.len(),
                spec.p
            )));
        }
        if let Some((pid, v)) = by_pid.iter().find(|(_, v)| v.len() < spec.k) {
            return Err(Error::Config(format!(
                "identity {pid} has {} images, K={} needed",
                v.len(),
                spec.k
            )));
        }
        Ok(Self { spec, by_pid })
    }

    /// One epoch of batches. Identities with the most unused K-groups are
    /// dealt first (ties broken at random); a final short round is topped up
    /// with fresh groups so every identity appears at least once.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let k = self.spec.k;
        let mut groups: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        for (&pid, idx) in &self.by_pid {
            let mut idx = idx.clone();
            idx.shuffle(rng);
            groups.insert(pid, idx.chunks_exact(k).map(|c| c.to_vec()).collect());
        }
        let mut covered = std::collections::BTreeSet::new();
        let mut batches = Vec::new();
        loop {
            let mut avail: Vec<(usize, u64)> = groups
                .iter()
                .filter(|(_, g)| !g.is_empty())
                .map(|(&pid, _)| (pid, rng.gen()))
                .collect();
            if avail.is_empty() {
                break;
            }
            avail.sort_by(|a, b| groups[&b.0].len().cmp(&groups[&a.0].len()).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = avail.iter().take(self.spec.p).map(|a| a.0).collect();
            if chosen.len() < self.spec.p {
                if chosen.iter().all(|p| covered.contains(p)) {
                    break;
                }
                let mut others: Vec<usize> = self.by_pid.keys().copied().filter(|p| !chosen.contains(p)).collect();
                others.shuffle(rng);
                for pid in others.into_iter().take(self.spec.p - chosen.len()) {
                    let mut idx = self.by_pid[&pid].clone();
                    idx.shuffle(rng);
                    groups.get_mut(&pid).unwrap().push(idx[..k].to_vec());
                    chosen.push(pid);
                }
            }
            let mut batch = Vec::with_capacity(self.spec.batch_size());
            for pid in chosen {
                batch.extend(groups.get_mut(&pid).unwrap().pop().unwrap());
                covered.insert(pid);
            }
            batches.push(batch);
        }
        batches
    }
}

/// Horizontal flip with probability ½, then zero-pad by `pad` and crop back
/// at a random offset.
pub fn flip_pad_crop<R: Rng + ?Sized>(img: &RgbImage, pad: u32, rng: &mut R) -> RgbImage {
    let flipped = if rng.gen_bool(0.5) {
        image::imageops::flip_horizontal(img)
    } else {
        img.clone()
    };
    if pad == 0 {
        return flipped;
    }
    let (w, h) = img.dimensions();
    let ox = rng.gen_range(0..=2 * pad) as i64 - pad as i64;
    let oy = rng.gen_range(0..=2 * pad) as i64 - pad as i64;
    RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as i64 + ox, y as i64 + oy);
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            Rgb([0, 0, 0])
        } else {
            *flipped.get_pixel(sx as u32, sy as u32)
        }
    })
}

/// `[B, H, W, 3]` tensor with pixels mapped to [-1, 1].
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Batch("no images".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape {
                op: "images_to_tensor",
                lhs: vec![h as usize, w as usize],
                rhs: vec![img.height() as usize, img.width() as usize],
            });
        }
        data.extend(img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    Tensor::new(vec![images.len(), h as usize, w as usize, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn people_are_distinct() {
        let people = make_people(1, 32);
        for (i, a) in people.iter().enumerate() {
            for b in &people[i + 1..] {
                assert!((a.top, a.bottom, a.pattern, a.hair) != (b.top, b.bottom, b.pattern, b.hair));
            }
        }
    }

    #[test]
    fn sampler_rejects_thin_identities() {
        assert!(PkSampler::new(&[0, 0, 1], PkSpec { p: 2, k: 2 }).is_err());
        assert!(PkSampler::new(&[0, 0, 0, 0], PkSpec { p: 2, k: 2 }).is_err());
        assert!(PkSampler::new(&[0, 0, 1, 1], PkSpec { p: 2, k: 1 }).is_err());
    }

    #[test]
    fn flip_pad_crop_keeps_size() {
        let img = RgbImage::from_fn(32, 64, |x, y| Rgb([x as u8, y as u8, 0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(flip_pad_crop(&img, 2, &mut rng).dimensions(), (32, 64));
        }
    }
}
