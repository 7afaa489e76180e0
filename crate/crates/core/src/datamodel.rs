//! Image/mask patches, dataset manifests, raster tiling and stratified
//! splitting.
//!
//! Manifests are JSON Lines, one `{image, mask, has_pv, split}` object per
//! line, with paths relative to the directory holding the manifest.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB pixels, interleaved row-major, each channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImagePatch { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        ImagePatch { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-planar `[3, H, W]` copy.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64;
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> ImagePatch {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        ImagePatch { width, height, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("length checked at construction")
    }
}

/// Binary per-pixel labels: 0 background, 1 PV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPatch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskPatch {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(MaskPatch { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        MaskPatch {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn has_pv(&self) -> bool {
        self.data.contains(&1)
    }

    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> MaskPatch {
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        MaskPatch { width, height, data }
    }

    pub fn to_gray8(&self) -> GrayImage {
        let bytes = self.data.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("length checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub has_pv: bool,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(DatasetManifest { entries })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Structural checks that need no file access: unique image paths and
    /// non-empty path fields.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.image.is_empty() || e.mask.is_empty() {
                return Err(Error::Manifest("entry with empty image or mask path".into()));
            }
            if !seen.insert(e.image.as_str()) {
                return Err(Error::Manifest(format!("image {} listed more than once", e.image)));
            }
        }
        Ok(())
    }

    /// Checks every entry against the files under `root`: both files load,
    /// shapes agree and `has_pv` matches the mask content.
    pub fn validate(&self, root: &Path) -> Result<()> {
        self.validate_structure()?;
        for e in &self.entries {
            let (_, mask) = load_patch_pair(&root.join(&e.image), &root.join(&e.mask))?;
            if mask.has_pv() != e.has_pv {
                return Err(Error::Manifest(format!(
                    "{}: has_pv is {} but mask says {}",
                    e.image,
                    e.has_pv,
                    mask.has_pv()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub stratify_positive: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            stratify_positive: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train_frac, self.val_frac, self.test_frac]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Config(format!("split fractions must lie in (0, 1), got {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Apportions `n` items by `fractions` with the largest-remainder method;
/// ties in the remainder go to the earlier split.
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| n as f64 * f);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0, 1, 2];
    let rem = |i: usize| (quotas[i] - counts[i] as f64).max(0.0);
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assigns every entry to train/val/test. Within each stratum (PV present
/// or not) entries are ordered by path, shuffled by `spec.seed`, then cut
/// by largest-remainder counts, so membership depends only on entry
/// identity and seed, never on manifest order.
pub fn split_dataset(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::Manifest("cannot split an empty manifest".into()));
    }
    manifest.validate_structure()?;
    let strata: Vec<(u64, Vec<usize>)> = if spec.stratify_positive {
        [false, true]
            .into_iter()
            .map(|pv| {
                let idx = (0..manifest.entries.len()).filter(|&i| manifest.entries[i].has_pv == pv).collect();
                (u64::from(pv), idx)
            })
            .collect()
    } else {
        vec![(2, (0..manifest.entries.len()).collect())]
    };

    let mut out = manifest.clone();
    let nonzero = spec.fractions().iter().filter(|&&f| f > 0.0).count();
    for (stream, mut idx) in strata {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < nonzero {
            warn!(
                "stratum with {} entries is smaller than the {nonzero} splits; some splits get none",
                idx.len()
            );
        }
        idx.sort_by(|&a, &b| {
            let (ea, eb) = (&manifest.entries[a], &manifest.entries[b]);
            (&ea.image, &ea.mask).cmp(&(&eb.image, &eb.mask))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), spec.fractions());
        let mut cursor = idx.into_iter();
        for (split, n) in Split::ASSIGNED.into_iter().zip(counts) {
            for i in cursor.by_ref().take(n) {
                out.entries[i].split = split;
            }
        }
    }
    Ok(out)
}

/// One tile of a raster and its top-left pixel offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub image: ImagePatch,
    pub mask: MaskPatch,
}

/// Cuts `patch × patch` tiles in row-major order at `stride`, dropping
/// border remainders smaller than a full patch.
pub fn tile_raster(image: &ImagePatch, mask: &MaskPatch, patch: usize, stride: usize) -> Result<Vec<Tile>> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::PairShape {
            image_width: image.width,
            image_height: image.height,
            mask_width: mask.width,
            mask_height: mask.height,
        });
    }
    if stride == 0 || patch == 0 {
        return Err(Error::Config("patch size and stride must be at least 1".into()));
    }
    if image.width < patch || image.height < patch {
        return Err(Error::Shape(format!(
            "raster {}x{} is smaller than patch size {patch}",
            image.width, image.height
        )));
    }
    let mut tiles = Vec::new();
    for y in (0..=image.height - patch).step_by(stride) {
        for x in (0..=image.width - patch).step_by(stride) {
            tiles.push(Tile {
                x,
                y,
                image: image.crop(x, y, patch, patch),
                mask: mask.crop(x, y, patch, patch),
            });
        }
    }
    Ok(tiles)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_image(path: &Path) -> Result<ImagePatch> {
    let img = open_image(path)?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Channels {
            path: path.to_path_buf(),
            expected: 3,
            found: img.color().channel_count() as usize,
        });
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(ImagePatch {
        width: w,
        height: h,
        data,
    })
}

/// 8-bit single-channel masks; values above 127 are PV.
pub fn load_mask(path: &Path) -> Result<MaskPatch> {
    let img = open_image(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Channels {
            path: path.to_path_buf(),
            expected: 1,
            found: img.color().channel_count() as usize,
        });
    }
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Ok(MaskPatch {
        width: w,
        height: h,
        data,
    })
}

pub fn load_patch_pair(image_path: &Path, mask_path: &Path) -> Result<(ImagePatch, MaskPatch)> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::PairShape {
            image_width: image.width,
            image_height: image.height,
            mask_width: mask.width,
            mask_height: mask.height,
        });
    }
    Ok((image, mask))
}

fn save_png(path: &Path, encode: impl FnOnce(&mut Vec<u8>) -> image::ImageResult<()>) -> Result<()> {
    let mut bytes = Vec::new();
    encode(&mut bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, image: &ImagePatch) -> Result<()> {
    let rgb = image.to_rgb8();
    save_png(path, |buf| {
        rgb.write_to(&mut std::io::Cursor::new(buf), image::ImageFormat::Png)
    })
}

pub fn save_mask(path: &Path, mask: &MaskPatch) -> Result<()> {
    let gray = mask.to_gray8();
    save_png(path, |buf| {
        gray.write_to(&mut std::io::Cursor::new(buf), image::ImageFormat::Png)
    })
}

pub fn save_rgba(path: &Path, rgba: &image::RgbaImage) -> Result<()> {
    save_png(path, |buf| {
        rgba.write_to(&mut std::io::Cursor::new(buf), image::ImageFormat::Png)
    })
}

/// Directory that manifest paths are relative to.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
