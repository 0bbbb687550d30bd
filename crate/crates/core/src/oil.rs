//! Occlusion instance library: background-erased occluder cut-outs split
//! into a strong position-prior set (objects that stand on the ground) and a
//! weak set (objects that can appear anywhere in a person crop).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    Strong,
    Weak,
}

/// Alpha values at or above this are opaque; below, transparent.
pub const ALPHA_THRESHOLD: u8 = 128;
/// Minimum opaque fraction of an instance.
pub const MIN_OPAQUE_FRACTION: f64 = 0.01;

const STRONG_CLASSES: &[&str] = &[
    "car",
    "truck",
    "bicycle",
    "motorcycle",
    "fire hydrant",
    "table",
    "pedestrian",
    "chair",
    "bench",
];
const WEAK_CLASSES: &[&str] = &[
    "umbrella",
    "backpack",
    "suitcase",
    "road sign",
    "kite",
    "tennis racket",
    "billboard",
];

/// Class name to position prior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegistry {
    classes: BTreeMap<String, Prior>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        let mut classes = BTreeMap::new();
        for c in STRONG_CLASSES {
            classes.insert(c.to_string(), Prior::Strong);
        }
        for c in WEAK_CLASSES {
            classes.insert(c.to_string(), Prior::Weak);
        }
        Self { classes }
    }
}

impl ClassRegistry {
    pub fn prior(&self, class_name: &str) -> Option<Prior> {
        self.classes.get(class_name).copied()
    }

    /// Adds a class; an existing class keeps its prior unless it agrees.
    pub fn extend(&mut self, class_name: &str, prior: Prior) -> Result<()> {
        match self.classes.get(class_name) {
            Some(&p) if p != prior => Err(Error::Config(format!(
                "class {class_name:?} is registered as {p:?}, manifest says {prior:?}"
            ))),
            _ => {
                self.classes.insert(class_name.to_string(), prior);
                Ok(())
            }
        }
    }

    pub fn classes(&self, prior: Prior) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .filter(move |(_, &p)| p == prior)
            .map(|(c, _)| c.as_str())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// An RGBA occluder whose alpha channel is binary.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionInstance {
    pub pixels: RgbaImage,
    pub class_name: String,
    pub prior: Prior,
}

impl OcclusionInstance {
    /// Binarizes alpha, crops to the opaque bounding box and checks the
    /// opacity floor.
    pub fn new(pixels: RgbaImage, class_name: &str, prior: Prior) -> Result<Self> {
        let mut pixels = pixels;
        binarize_alpha(&mut pixels);
        let pixels = crop_to_alpha(&pixels).ok_or_else(|| {
            Error::Config(format!("instance of class {class_name:?} has no opaque pixels"))
        })?;
        let inst = Self {
            pixels,
            class_name: class_name.to_string(),
            prior,
        };
        if inst.opaque_fraction() < MIN_OPAQUE_FRACTION {
            return Err(Error::Config(format!(
                "instance of class {class_name:?} is only {:.2}% opaque",
                100.0 * inst.opaque_fraction()
            )));
        }
        Ok(inst)
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn opaque_fraction(&self) -> f64 {
        let opaque = self.pixels.pixels().filter(|p| p[3] == 255).count();
        opaque as f64 / (self.pixels.width() * self.pixels.height()) as f64
    }
}

pub(crate) fn binarize_alpha(img: &mut RgbaImage) {
    for p in img.pixels_mut() {
        p[3] = if p[3] >= ALPHA_THRESHOLD { 255 } else { 0 };
    }
}

/// Crops to the bounding box of opaque pixels; `None` when fully transparent.
pub(crate) fn crop_to_alpha(img: &RgbaImage) -> Option<RgbaImage> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (x, y, p) in img.enumerate_pixels() {
        if p[3] >= ALPHA_THRESHOLD {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == u32::MAX {
        return None;
    }
    Some(image::imageops::crop_imm(img, x0, y0, x1 - x0 + 1, y1 - y0 + 1).to_image())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_name: String,
    pub prior: Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Classes added on top of the default registry.
    #[serde(default)]
    pub classes: BTreeMap<String, Prior>,
}

/// Immutable set of occluders with uniform sampling per prior subset.
#[derive(Clone, Debug, Default)]
pub struct Library {
    instances: Vec<OcclusionInstance>,
    strong: Vec<usize>,
    weak: Vec<usize>,
}

impl Library {
    pub fn from_instances(instances: Vec<OcclusionInstance>) -> Self {
        let mut lib = Self::default();
        for inst in instances {
            lib.push(inst);
        }
        lib
    }

    fn push(&mut self, inst: OcclusionInstance) {
        let idx = self.instances.len();
        match inst.prior {
            Prior::Strong => self.strong.push(idx),
            Prior::Weak => self.weak.push(idx),
        }
        self.instances.push(inst);
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[OcclusionInstance] {
        &self.instances
    }

    pub fn count(&self, prior: Prior) -> usize {
        match prior {
            Prior::Strong => self.strong.len(),
            Prior::Weak => self.weak.len(),
        }
    }

    pub fn sample_strong<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&OcclusionInstance> {
        let i = self.strong.choose(rng).ok_or(Error::EmptySubset("strong"))?;
        Ok(&self.instances[*i])
    }

    pub fn sample_weak<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&OcclusionInstance> {
        let i = self.weak.choose(rng).ok_or(Error::EmptySubset("weak"))?;
        Ok(&self.instances[*i])
    }

    pub fn sample_any<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&OcclusionInstance> {
        self.instances.choose(rng).ok_or(Error::EmptySubset("any"))
    }

    /// Writes every instance as PNG next to a manifest at `dir/manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, inst) in self.instances.iter().enumerate() {
            let rel = PathBuf::from(format!("{i:04}_{}.png", inst.class_name.replace(' ', "_")));
            let path = dir.join(&rel);
            inst.pixels
                .save(&path)
                .map_err(|e| Error::load(&path, e))?;
            entries.push(ManifestEntry {
                path: rel,
                class_name: inst.class_name.clone(),
                prior: inst.prior,
            });
        }
        let manifest = LibraryManifest {
            version: 1,
            entries,
            classes: BTreeMap::new(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads a manifest and its images. Relative entry paths resolve against the
/// manifest's directory.
pub fn load_library(manifest_path: impl AsRef<Path>) -> Result<Library> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: LibraryManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(manifest_path, e))?;
    let mut registry = ClassRegistry::default();
    for (class, &prior) in &manifest.classes {
        registry
            .extend(class, prior)
            .map_err(|e| Error::load(manifest_path, e))?;
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lib = Library::default();
    for entry in &manifest.entries {
        let path = base.join(&entry.path);
        match registry.prior(&entry.class_name) {
            None => return Err(Error::load(&path, format!("unknown class {:?}", entry.class_name))),
            Some(p) if p != entry.prior => {
                return Err(Error::load(
                    &path,
                    format!(
                        "class {:?} has prior {p:?} but the entry says {:?}",
                        entry.class_name, entry.prior
                    ),
                ))
            }
            Some(_) => {}
        }
        let img = image::open(&path).map_err(|e| Error::load(&path, e))?.to_rgba8();
        let inst = OcclusionInstance::new(img, &entry.class_name, entry.prior)
            .map_err(|e| Error::load(&path, e))?;
        lib.push(inst);
    }
    Ok(lib)
}

/// Procedurally drawn occluders: `n_per_prior` strong and `n_per_prior` weak
/// instances with irregular alpha boundaries, deterministic in `seed`.
pub fn make_synthetic_library(seed: u64, n_per_prior: usize) -> Library {
    assert!(n_per_prior >= 1, "n_per_prior must be at least 1");
    let registry = ClassRegistry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f69_6c5f_7379_6e74);
    let mut lib = Library::default();
    for prior in [Prior::Strong, Prior::Weak] {
        let classes: Vec<&str> = registry.classes(prior).collect();
        for i in 0..n_per_prior {
            let class = classes[i % classes.len()];
            let pixels = draw_occluder(&mut rng);
            let inst = OcclusionInstance::new(pixels, class, prior).expect("drawn occluders are opaque");
            lib.push(inst);
        }
    }
    lib
}

fn draw_occluder(rng: &mut ChaCha8Rng) -> RgbaImage {
    let h = rng.gen_range(16..=40u32);
    let aspect: f32 = rng.gen_range(0.5..2.0);
    let w = ((h as f32 * aspect).round() as u32).clamp(8, 64);
    let base = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
    let accent = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
    let stripe = rng.gen_range(3..8u32);
    let shape = rng.gen_range(0..3);
    // per-row / per-column boundary jitter gives ragged edges
    let row_jit: Vec<f32> = (0..h).map(|_| rng.gen_range(0.0..0.12)).collect();
    let col_jit: Vec<f32> = (0..w).map(|_| rng.gen_range(0.0..0.12)).collect();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut img = RgbaImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 - cx) / (w as f32 / 2.0);
            let v = (y as f32 - cy) / (h as f32 / 2.0);
            let inside = match shape {
                // rectangle with ragged border
                0 => u.abs() <= 1.0 - col_jit[x as usize] && v.abs() <= 1.0 - row_jit[y as usize],
                // ellipse
                1 => u * u + v * v <= (1.0 - row_jit[y as usize]).powi(2) * 1.15,
                // trapezoid, wider at the bottom
                _ => u.abs() <= 0.55 + 0.45 * (v + 1.0) / 2.0 - col_jit[x as usize],
            };
            let rgb = if (x / stripe + y / stripe) % 2 == 0 { base } else { accent };
            let alpha = if inside { 255 } else { 0 };
            img.put_pixel(x, y, Rgba([rgb[0], rgb[1], rgb[2], alpha]));
        }
    }
    img
}
