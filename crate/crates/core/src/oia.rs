//! Occlusion instance augmentation: paste a scaled occluder onto a holistic
//! image to obtain an aligned (holistic, occluded, mask) triple.

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgba, RgbaImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oil::{crop_to_alpha, Library, OcclusionInstance, Prior};

/// Range of the area ratio δ between occluder and image.
pub const DEFAULT_DELTA_RANGE: (f32, f32) = (0.1, 0.7);

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub holistic: RgbImage,
    pub occluded: RgbImage,
    /// 255 where the occluder replaced the pixel, 0 elsewhere.
    pub occ_mask: GrayImage,
    pub pid: usize,
    pub cam: usize,
}

impl AugmentedPair {
    pub fn mask_fraction(&self) -> f64 {
        mask_fraction(&self.occ_mask)
    }
}

pub fn mask_fraction(mask: &GrayImage) -> f64 {
    let on = mask.pixels().filter(|p| p[0] != 0).count();
    on as f64 / (mask.width() * mask.height()) as f64
}

/// How paste positions are drawn across a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Every instance draws its own position.
    #[default]
    Random,
    /// One relative position per batch, shared by all instances.
    Fixed,
}

/// Area ratio ε = δ·H·W / (h_o·w_o).
pub fn scale_factor(h: u32, w: u32, h_o: u32, w_o: u32, delta: f32) -> f64 {
    delta as f64 * (h as f64 * w as f64) / (h_o as f64 * w_o as f64)
}

/// Resizes an occluder so its box covers δ of an `h`×`w` frame: both sides
/// scale by √ε, each side is clamped to the frame, and the result is cropped
/// to its opaque bounding box. Alpha uses nearest-neighbour sampling, colour
/// uses bilinear.
pub fn scale_occluder(inst: &OcclusionInstance, h: u32, w: u32, delta: f32) -> RgbaImage {
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1), got {delta}");
    let (h_o, w_o) = (inst.height(), inst.width());
    let s = scale_factor(h, w, h_o, w_o, delta).sqrt();
    let new_h = ((h_o as f64 * s).round() as u32).clamp(1, h);
    let new_w = ((w_o as f64 * s).round() as u32).clamp(1, w);
    if (new_h, new_w) == (h_o, w_o) {
        return inst.pixels.clone();
    }
    let rgb = imageops::resize(&inst.pixels, new_w, new_h, FilterType::Triangle);
    let alpha = imageops::resize(&inst.pixels, new_w, new_h, FilterType::Nearest);
    let mut out = RgbaImage::new(new_w, new_h);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let c = rgb.get_pixel(x, y);
        let a = alpha.get_pixel(x, y)[3];
        *p = Rgba([c[0], c[1], c[2], if a >= 128 { 255 } else { 0 }]);
    }
    crop_to_alpha(&out).unwrap_or(out)
}

/// Top-left paste coordinates for an occluder of size `oh`×`ow`.
fn position<R: Rng + ?Sized>(
    prior: Prior,
    (h, w): (u32, u32),
    (oh, ow): (u32, u32),
    rel: Option<(f32, f32)>,
    rng: &mut R,
) -> (u32, u32) {
    let (max_y, max_x) = (h - oh, w - ow);
    let (ry, rx) = rel.unwrap_or_else(|| (rng.gen::<f32>(), rng.gen::<f32>()));
    let x = ((rx * (max_x + 1) as f32) as u32).min(max_x);
    let y = match prior {
        Prior::Strong => max_y,
        Prior::Weak => ((ry * (max_y + 1) as f32) as u32).min(max_y),
    };
    (y, x)
}

/// Pastes `occ` onto `img`. Strong-prior occluders sit on the bottom edge
/// at a random column; weak-prior occluders go anywhere inside the frame.
pub fn place_occluder<R: Rng + ?Sized>(
    img: &RgbImage,
    occ: &RgbaImage,
    prior: Prior,
    rng: &mut R,
) -> (RgbImage, GrayImage) {
    place_at(img, occ, prior, None, rng)
}

fn place_at<R: Rng + ?Sized>(
    img: &RgbImage,
    occ: &RgbaImage,
    prior: Prior,
    rel: Option<(f32, f32)>,
    rng: &mut R,
) -> (RgbImage, GrayImage) {
    let (w, h) = img.dimensions();
    let (ow, oh) = occ.dimensions();
    assert!(ow <= w && oh <= h, "occluder {ow}x{oh} does not fit {w}x{h}");
    let (y0, x0) = position(prior, (h, w), (oh, ow), rel, rng);
    composite(img, occ, y0, x0)
}

/// occluded = α·occ + (1 − α)·img with binary α; mask = pasted α footprint.
pub fn composite(img: &RgbImage, occ: &RgbaImage, y0: u32, x0: u32) -> (RgbImage, GrayImage) {
    let mut out = img.clone();
    let mut mask = GrayImage::new(img.width(), img.height());
    for (x, y, p) in occ.enumerate_pixels() {
        if p[3] >= 128 {
            out.put_pixel(x0 + x, y0 + y, image::Rgb([p[0], p[1], p[2]]));
            mask.put_pixel(x0 + x, y0 + y, Luma([255]));
        }
    }
    (out, mask)
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub delta_range: (f32, f32),
    pub placement: Placement,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            delta_range: DEFAULT_DELTA_RANGE,
            placement: Placement::Random,
        }
    }
}

/// One occluder draw for one image.
pub fn augment_one<R: Rng + ?Sized>(
    img: &RgbImage,
    lib: &Library,
    delta_range: (f32, f32),
    rel: Option<(f32, f32)>,
    rng: &mut R,
) -> Result<(RgbImage, GrayImage)> {
    let inst = lib.sample_any(rng)?;
    let (lo, hi) = delta_range;
    let delta = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let occ = scale_occluder(inst, img.height(), img.width(), delta);
    Ok(place_at(img, &occ, inst.prior, rel, rng))
}

/// Produces an occluded copy of every image. Each element gets its own RNG
/// substream, so results do not depend on how elements are scheduled.
pub fn augment_batch<R: Rng + ?Sized>(
    batch: &[(RgbImage, usize, usize)],
    lib: &Library,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<AugmentedPair>> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    if lib.is_empty() {
        return Err(Error::Config("occlusion library is empty".into()));
    }
    let (lo, hi) = cfg.delta_range;
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(Error::Config(format!("delta range ({lo}, {hi}) must lie in (0, 1)")));
    }
    let shared = match cfg.placement {
        Placement::Fixed => Some((rng.gen::<f32>(), rng.gen::<f32>())),
        Placement::Random => None,
    };
    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
    batch
        .iter()
        .zip(seeds)
        .map(|((img, pid, cam), seed)| {
            let mut sub = ChaCha8Rng::seed_from_u64(seed);
            let (occluded, occ_mask) = augment_one(img, lib, cfg.delta_range, shared, &mut sub)?;
            Ok(AugmentedPair {
                holistic: img.clone(),
                occluded,
                occ_mask,
                pid: *pid,
                cam: *cam,
            })
        })
        .collect()
}
