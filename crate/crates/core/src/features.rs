//! Image features feeding the classifier heads.
//!
//! * [`FeatureTensor`]: grid-level (H×W×C) or object-level (K×C) features,
//!   stored as `f32` and persisted in a small binary container.
//! * [`Backbone`]: frozen, deterministic grid extractors selected by id.
//! * Classical baselines: difference-of-Gaussians keypoint statistics, HOG,
//!   and a max-margin linear classifier over them.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Grid,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    pub kind: FeatureKind,
    /// `[H, W, C]` for grid features, `[K, C]` for object features.
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub backbone_id: String,
}

impl FeatureTensor {
    pub fn grid(h: usize, w: usize, c: usize, data: Vec<f32>, backbone_id: impl Into<String>) -> Result<Self> {
        let t = FeatureTensor {
            kind: FeatureKind::Grid,
            shape: vec![h, w, c],
            data,
            backbone_id: backbone_id.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn object(k: usize, c: usize, data: Vec<f32>, backbone_id: impl Into<String>) -> Result<Self> {
        let t = FeatureTensor {
            kind: FeatureKind::Object,
            shape: vec![k, c],
            data,
            backbone_id: backbone_id.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let want_rank = match self.kind {
            FeatureKind::Grid => 3,
            FeatureKind::Object => 2,
        };
        if self.shape.len() != want_rank {
            return Err(Error::Schema(format!("{:?} features need rank {want_rank}, got shape {:?}", self.kind, self.shape)));
        }
        if self.shape.contains(&0) {
            return Err(Error::Schema(format!("feature shape {:?} has an empty dimension", self.shape)));
        }
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Schema(format!("shape {:?} needs {n} values, found {}", self.shape, self.data.len())));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    /// Number of regions: H·W for grids, K for objects.
    pub fn num_regions(&self) -> usize {
        self.data.len() / self.channels().max(1)
    }

    /// Region feature rows (grids flattened in row-major order).
    pub fn regions(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.channels())
    }

    pub fn region_matrix(&self) -> Vec<Vec<f64>> {
        self.regions().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    /// Mean over all regions (2-D global average pooling for grids).
    pub fn global_pool(&self) -> Vec<f64> {
        let c = self.channels();
        let mut acc = vec![0.0f64; c];
        for r in self.regions() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v as f64;
            }
        }
        let k = self.num_regions() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }
}

// ---------------------------------------------------------------------------
// Binary container
//
// little endian:
//   magic    8 bytes  "QFEAT01\0"
//   kind     u8       0 = grid, 1 = object
//   rank     u8       3 or 2
//   reserved u16
//   dims     u32 × rank
//   id_len   u16, backbone id (utf-8)
//   data     f32 × prod(dims)

const MAGIC: &[u8; 8] = b"QFEAT01\0";

pub fn encode_features(t: &FeatureTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + t.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(match t.kind {
        FeatureKind::Grid => 0,
        FeatureKind::Object => 1,
    });
    out.push(t.shape.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let id = t.backbone_id.as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureTensor> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(Error::Schema("truncated feature file".into()));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(Error::Schema("bad feature file magic".into()));
    }
    let hdr = take(4)?;
    let kind = match hdr[0] {
        0 => FeatureKind::Grid,
        1 => FeatureKind::Object,
        k => return Err(Error::Schema(format!("unknown feature kind tag {k}"))),
    };
    let rank = hdr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = take(4)?;
        shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let b = take(2)?;
    let id_len = u16::from_le_bytes([b[0], b[1]]) as usize;
    let backbone_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| Error::Schema("backbone id is not utf-8".into()))?;
    let n: usize = shape.iter().product();
    let raw = take(n.checked_mul(4).ok_or_else(|| Error::Schema("feature shape overflows".into()))?)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if !r.is_empty() {
        return Err(Error::Schema(format!("{} trailing bytes after feature data", r.len())));
    }
    let t = FeatureTensor {
        kind,
        shape,
        data,
        backbone_id,
    };
    t.validate()?;
    Ok(t)
}

pub fn write_feature_file(path: impl AsRef<Path>, t: &FeatureTensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_features(t)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_features(&buf)
}

/// Loads precomputed object-level (K×C) features. `expected_channels`
/// enforces the configured C.
pub fn load_object_features(path: impl AsRef<Path>, expected_channels: Option<usize>) -> Result<FeatureTensor> {
    let t = read_feature_file(path)?;
    if t.kind != FeatureKind::Object {
        return Err(Error::Schema("expected object-level features".into()));
    }
    if let Some(c) = expected_channels {
        if t.channels() != c {
            return Err(Error::Schema(format!("object features have C = {}, configured C = {c}", t.channels())));
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Images

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn luminance(img: &RgbImage) -> Gray {
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
        .collect();
    Gray {
        w: w as usize,
        h: h as usize,
        data,
    }
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone)]
struct Gray {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Gray {
    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn map3x3(&self, k: &[[f32; 3]; 3]) -> Gray {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut s = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        s += kv * self.at(x + dx as isize - 1, y + dy as isize - 1);
                    }
                }
                data.push(s);
            }
        }
        Gray { w: self.w, h: self.h, data }
    }

    fn gaussian_blur(&self, sigma: f32) -> Gray {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                tmp[y as usize * self.w + x as usize] =
                    kernel.iter().enumerate().map(|(i, k)| k * self.at(x + i as isize - radius, y)).sum();
            }
        }
        let horiz = Gray { w: self.w, h: self.h, data: tmp };
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                out[y as usize * self.w + x as usize] =
                    kernel.iter().enumerate().map(|(i, k)| k * horiz.at(x, y + i as isize - radius)).sum();
            }
        }
        Gray { w: self.w, h: self.h, data: out }
    }

    fn downsample2(&self) -> Gray {
        let w = (self.w / 2).max(1);
        let h = (self.h / 2).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x as isize, 2 * y as isize));
            }
        }
        Gray { w, h, data }
    }
}

// ---------------------------------------------------------------------------
// Backbones

/// Input preprocessing: square resize plus per-channel normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input_size: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            input_size: 64,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Preprocess {
    /// Stable hash of the preprocessing parameters, used to key caches and
    /// checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("preprocess serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn resize(&self, img: &RgbImage) -> RgbImage {
        let s = self.input_size;
        if img.dimensions() == (s, s) {
            img.clone()
        } else {
            image::imageops::resize(img, s, s, FilterType::Triangle)
        }
    }
}

/// A frozen grid-feature extractor.
pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;
    fn channels(&self) -> usize;
    fn grid_size(&self) -> usize;
    fn preprocess(&self) -> &Preprocess;
    fn extract(&self, img: &RgbImage) -> Result<FeatureTensor>;
    /// Hash of the backbone's fixed weights; never changes after construction.
    fn fingerprint(&self) -> String;

    fn preprocessing_hash(&self) -> String {
        self.preprocess().hash()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBankConfig {
    pub id: String,
    pub preprocess: Preprocess,
    /// Output grid is `grid × grid`.
    pub grid: usize,
    /// Number of seeded random 3×3 color filters appended to the fixed maps.
    pub random_filters: usize,
    pub seed: u64,
}

/// Deterministic filter-bank network: fixed photometric and gradient maps
/// plus seeded random 3×3 color filters with rectification, average-pooled
/// onto a coarse grid. Its weights are constants; nothing trains them.
#[derive(Debug, Clone)]
pub struct FilterBankBackbone {
    config: FilterBankConfig,
    /// random_filters × 3 channels × 3 × 3
    filters: Vec<f32>,
}

const FIXED_MAPS: usize = 13;

pub const RECOGNIZABILITY_BACKBONE: &str = "fbank-7x7-c32";
pub const FLAW_BACKBONE: &str = "fbank-5x5-c48";

impl FilterBankBackbone {
    pub fn new(config: FilterBankConfig) -> Result<Self> {
        if config.grid == 0 || config.preprocess.input_size < config.grid as u32 {
            return Err(Error::Config(format!("backbone `{}`: grid must be in 1..=input_size", config.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut filters = Vec::with_capacity(config.random_filters * 27);
        for _ in 0..config.random_filters {
            let mut f: Vec<f32> = (0..27).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            // zero-mean per filter so outputs respond to structure, not level
            let m = f.iter().sum::<f32>() / 27.0;
            f.iter_mut().for_each(|v| *v = (*v - m) / 3.0);
            filters.extend(f);
        }
        Ok(FilterBankBackbone { config, filters })
    }

    pub fn preset(id: &str) -> Result<Self> {
        let (grid, channels, seed) = match id {
            RECOGNIZABILITY_BACKBONE => (7, 32, 152),
            FLAW_BACKBONE => (5, 48, 71),
            other => {
                return Err(Error::Config(format!(
                    "unknown backbone `{other}` (no weights available); known: {RECOGNIZABILITY_BACKBONE}, {FLAW_BACKBONE}"
                )))
            }
        };
        Self::new(FilterBankConfig {
            id: id.to_string(),
            preprocess: Preprocess::default(),
            grid,
            random_filters: channels - FIXED_MAPS,
            seed,
        })
    }

    pub fn config(&self) -> &FilterBankConfig {
        &self.config
    }

    fn maps(&self, img: &RgbImage) -> Vec<Gray> {
        let pre = &self.config.preprocess;
        let img = pre.resize(img);
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut rgb = [
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
        ];
        let mut sat = Vec::with_capacity(w * h);
        for p in img.pixels() {
            let v = [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0];
            for c in 0..3 {
                rgb[c].push((v[c] - pre.mean[c]) / pre.std[c]);
            }
            sat.push(v.iter().copied().fold(0.0f32, f32::max) - v.iter().copied().fold(1.0f32, f32::min));
        }
        let rgb: Vec<Gray> = rgb.into_iter().map(|data| Gray { w, h, data }).collect();
        let lum = luminance(&img);
        let sx = lum.map3x3(&[[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
        let sy = lum.map3x3(&[[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
        let mag = Gray {
            w,
            h,
            data: sx.data.iter().zip(&sy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect(),
        };
        let lap = lum.map3x3(&[[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]);
        let half = lum.downsample2();
        let hx = half.map3x3(&[[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
        let hy = half.map3x3(&[[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
        let mut coarse = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = (y / 2).min(half.h - 1) * half.w + (x / 2).min(half.w - 1);
                coarse.push((hx.data[i] * hx.data[i] + hy.data[i] * hy.data[i]).sqrt());
            }
        }
        let boxed = lum.map3x3(&[[1.0 / 9.0; 3]; 3]);
        let contrast: Vec<f32> = lum.data.iter().zip(&boxed.data).map(|(a, b)| (a - b).abs()).collect();
        let soft = |z: f32| 1.0 / (1.0 + (-z).exp());
        let over: Vec<f32> = lum.data.iter().map(|&l| soft((l - 0.85) * 40.0)).collect();
        let under: Vec<f32> = lum.data.iter().map(|&l| soft((0.15 - l) * 40.0)).collect();
        let abs = |g: Gray| Gray {
            w,
            h,
            data: g.data.into_iter().map(f32::abs).collect(),
        };

        let mut maps = rgb.clone();
        maps.push(lum);
        maps.push(abs(sx));
        maps.push(abs(sy));
        maps.push(mag);
        maps.push(abs(lap));
        maps.push(Gray { w, h, data: coarse });
        maps.push(Gray { w, h, data: contrast });
        maps.push(Gray { w, h, data: over });
        maps.push(Gray { w, h, data: under });
        maps.push(Gray { w, h, data: sat });
        debug_assert_eq!(maps.len(), FIXED_MAPS);

        for f in self.filters.chunks_exact(27) {
            let mut data = vec![0.0f32; w * h];
            for (c, chan) in rgb.iter().enumerate() {
                let k = &f[c * 9..c * 9 + 9];
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut s = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                s += k[dy * 3 + dx] * chan.at(x + dx as isize - 1, y + dy as isize - 1);
                            }
                        }
                        data[y as usize * w + x as usize] += s;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v = v.max(0.0));
            maps.push(Gray { w, h, data });
        }
        maps
    }
}

impl Backbone for FilterBankBackbone {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn channels(&self) -> usize {
        FIXED_MAPS + self.config.random_filters
    }

    fn grid_size(&self) -> usize {
        self.config.grid
    }

    fn preprocess(&self) -> &Preprocess {
        &self.config.preprocess
    }

    fn extract(&self, img: &RgbImage) -> Result<FeatureTensor> {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Decode {
                path: "<memory>".into(),
                message: "empty image".into(),
            });
        }
        let maps = self.maps(img);
        let g = self.config.grid;
        let c = maps.len();
        let (w, h) = (maps[0].w, maps[0].h);
        let mut out = vec![0.0f32; g * g * c];
        for gy in 0..g {
            let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                let n = ((y1 - y0) * (x1 - x0)) as f32;
                for (ci, m) in maps.iter().enumerate() {
                    let mut s = 0.0f32;
                    for y in y0..y1 {
                        s += m.data[y * w + x0..y * w + x1].iter().sum::<f32>();
                    }
                    out[(gy * g + gx) * c + ci] = s / n;
                }
            }
        }
        FeatureTensor::grid(g, g, c, out, self.config.id.clone())
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for v in &self.filters {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Resolves a backbone by id.
pub fn backbone_by_id(id: &str) -> Result<Box<dyn Backbone>> {
    Ok(Box::new(FilterBankBackbone::preset(id)?))
}

pub fn extract_grid_features(img: &RgbImage, backbone: &dyn Backbone) -> Result<FeatureTensor> {
    backbone.extract(img)
}

/// On-disk feature cache keyed by (image id, backbone id, preprocessing hash).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache { root: root.into() }
    }

    pub fn path_for(&self, image_id: &str, backbone_id: &str, prep_hash: &str) -> PathBuf {
        let key = hex::encode(Sha256::digest(image_id.as_bytes()));
        self.root.join(backbone_id).join(prep_hash).join(format!("{}.qft", &key[..32]))
    }

    pub fn get(&self, image_id: &str, backbone: &dyn Backbone) -> Option<FeatureTensor> {
        let p = self.path_for(image_id, backbone.id(), &backbone.preprocessing_hash());
        read_feature_file(p).ok()
    }

    pub fn put(&self, image_id: &str, backbone: &dyn Backbone, t: &FeatureTensor) -> Result<()> {
        let p = self.path_for(image_id, backbone.id(), &backbone.preprocessing_hash());
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_feature_file(p, t)
    }

    /// Cached extraction.
    pub fn extract(&self, image_id: &str, img_path: &Path, backbone: &dyn Backbone) -> Result<FeatureTensor> {
        if let Some(t) = self.get(image_id, backbone) {
            return Ok(t);
        }
        let t = backbone.extract(&load_image(img_path)?)?;
        self.put(image_id, backbone, &t)?;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Classical features

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicKind {
    SiftStats,
    Hog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicFeature {
    pub kind: ClassicKind,
    pub vector: Vec<f64>,
}

/// Difference-of-Gaussians keypoint detector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftConfig {
    /// Longer image side is downscaled to at most this many pixels.
    pub max_side: u32,
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub sigma0: f32,
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
}

impl Default for SiftConfig {
    fn default() -> Self {
        SiftConfig {
            max_side: 256,
            octaves: 4,
            scales_per_octave: 3,
            sigma0: 1.6,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
        }
    }
}

/// Length of the keypoint summary vector:
/// `[count, ln(1+count), count per 1000 px, mean |DoG|, std |DoG|, max |DoG|,
///   mean relative scale, octave-0 share, octave-1 share, octave-2+ share]`.
pub const SIFT_STATS_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub octave: usize,
    pub scale: usize,
    pub response: f32,
}

pub fn detect_keypoints(img: &RgbImage, cfg: &SiftConfig) -> Vec<Keypoint> {
    let (w, h) = img.dimensions();
    let longest = w.max(h);
    let img = if longest > cfg.max_side {
        let f = cfg.max_side as f32 / longest as f32;
        image::imageops::resize(
            img,
            ((w as f32 * f).round() as u32).max(1),
            ((h as f32 * f).round() as u32).max(1),
            FilterType::Triangle,
        )
    } else {
        img.clone()
    };
    let s = cfg.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    // assume the input already carries a blur of 0.5
    let mut base = luminance(&img).gaussian_blur((cfg.sigma0 * cfg.sigma0 - 0.25).max(0.0).sqrt());
    let threshold = cfg.contrast_threshold / s as f32;
    let edge = (cfg.edge_ratio + 1.0).powi(2) / cfg.edge_ratio;
    let mut out = Vec::new();
    for octave in 0..cfg.octaves {
        if base.w < 8 || base.h < 8 {
            break;
        }
        let mut gauss = vec![base.clone()];
        for i in 1..s + 3 {
            let prev = cfg.sigma0 * k.powi(i as i32 - 1);
            let inc = ((prev * k).powi(2) - prev * prev).sqrt();
            let next = gauss[i - 1].gaussian_blur(inc);
            gauss.push(next);
        }
        let dogs: Vec<Gray> = gauss
            .windows(2)
            .map(|p| Gray {
                w: p[0].w,
                h: p[0].h,
                data: p[1].data.iter().zip(&p[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        let (w, h) = (base.w, base.h);
        for sc in 1..dogs.len() - 1 {
            let d = &dogs[sc];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = d.data[y * w + x];
                    if v.abs() <= threshold {
                        continue;
                    }
                    let mut is_max = true;
                    let mut is_min = true;
                    'scan: for layer in &dogs[sc - 1..=sc + 1] {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let n = layer.data[(y + dy - 1) * w + (x + dx - 1)];
                                if std::ptr::eq(layer, d) && dy == 1 && dx == 1 {
                                    continue;
                                }
                                is_max &= v > n;
                                is_min &= v < n;
                                if !is_max && !is_min {
                                    break 'scan;
                                }
                            }
                        }
                    }
                    if !(is_max || is_min) {
                        continue;
                    }
                    // principal curvature test rejects edge responses
                    let at = |dx: isize, dy: isize| d.data[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    let dxx = at(1, 0) + at(-1, 0) - 2.0 * v;
                    let dyy = at(0, 1) + at(0, -1) - 2.0 * v;
                    let dxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / 4.0;
                    let tr = dxx + dyy;
                    let det = dxx * dyy - dxy * dxy;
                    if det <= 0.0 || tr * tr / det >= edge {
                        continue;
                    }
                    let scale = 2f32.powi(octave as i32);
                    out.push(Keypoint {
                        x: x as f32 * scale,
                        y: y as f32 * scale,
                        octave,
                        scale: sc,
                        response: v.abs(),
                    });
                }
            }
        }
        base = gauss[s].downsample2();
    }
    out
}

pub fn sift_stats(img: &RgbImage, cfg: &SiftConfig) -> ClassicFeature {
    let kps = detect_keypoints(img, cfg);
    let mut v = vec![0.0f64; SIFT_STATS_DIM];
    let n = kps.len();
    if n > 0 {
        let nf = n as f64;
        let area = (img.width() as f64 * img.height() as f64).max(1.0);
        let resp: Vec<f64> = kps.iter().map(|k| k.response as f64).collect();
        let mean = resp.iter().sum::<f64>() / nf;
        let var = resp.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / nf;
        let rel_scale = kps
            .iter()
            .map(|k| (k.octave * cfg.scales_per_octave + k.scale) as f64)
            .sum::<f64>()
            / nf
            / (cfg.octaves * cfg.scales_per_octave) as f64;
        let share = |pred: &dyn Fn(usize) -> bool| kps.iter().filter(|k| pred(k.octave)).count() as f64 / nf;
        v = vec![
            nf,
            nf.ln_1p(),
            nf * 1000.0 / area,
            mean,
            var.sqrt(),
            resp.iter().copied().fold(0.0, f64::max),
            rel_scale,
            share(&|o| o == 0),
            share(&|o| o == 1),
            share(&|o| o >= 2),
        ];
    }
    ClassicFeature {
        kind: ClassicKind::SiftStats,
        vector: v,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    /// Images are resized to `size × size` before extraction.
    pub size: u32,
    pub cell: usize,
    pub block: usize,
    pub bins: usize,
    /// L2-Hys clipping value.
    pub clip: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            size: 64,
            cell: 8,
            block: 2,
            bins: 9,
            clip: 0.2,
        }
    }
}

impl HogConfig {
    pub fn dim(&self) -> usize {
        let cells = self.size as usize / self.cell;
        let blocks = cells + 1 - self.block;
        blocks * blocks * self.block * self.block * self.bins
    }
}

/// Histogram of oriented gradients with unsigned orientations, linear
/// orientation binning and L2-Hys block normalization.
pub fn hog_features(img: &RgbImage, cfg: &HogConfig) -> ClassicFeature {
    let img = if img.dimensions() == (cfg.size, cfg.size) {
        img.clone()
    } else {
        image::imageops::resize(img, cfg.size, cfg.size, FilterType::Triangle)
    };
    let g = luminance(&img);
    let cells = cfg.size as usize / cfg.cell;
    let mut hist = vec![0.0f64; cells * cells * cfg.bins];
    let bin_width = std::f64::consts::PI / cfg.bins as f64;
    for y in 0..cells * cfg.cell {
        for x in 0..cells * cfg.cell {
            let (xi, yi) = (x as isize, y as isize);
            let mut gx = (g.at(xi + 1, yi) - g.at(xi - 1, yi)) as f64;
            let mut gy = (g.at(xi, yi + 1) - g.at(xi, yi - 1)) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            // canonical half-plane so that (gx, gy) and (-gx, -gy) agree exactly
            if gy < 0.0 || (gy == 0.0 && gx < 0.0) {
                gx = -gx;
                gy = -gy;
            }
            let angle = gy.atan2(gx).min(std::f64::consts::PI - 1e-12);
            let pos = angle / bin_width - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as isize).rem_euclid(cfg.bins as isize) as usize;
            let b1 = (b0 + 1) % cfg.bins;
            let base = ((y / cfg.cell) * cells + x / cfg.cell) * cfg.bins;
            hist[base + b0] += mag * (1.0 - frac);
            hist[base + b1] += mag * frac;
        }
    }
    let blocks = cells + 1 - cfg.block;
    let mut out = Vec::with_capacity(cfg.dim());
    let eps = 1e-6;
    for by in 0..blocks {
        for bx in 0..blocks {
            let mut v = Vec::with_capacity(cfg.block * cfg.block * cfg.bins);
            for cy in by..by + cfg.block {
                for cx in bx..bx + cfg.block {
                    let base = (cy * cells + cx) * cfg.bins;
                    v.extend_from_slice(&hist[base..base + cfg.bins]);
                }
            }
            let norm = (v.iter().map(|a| a * a).sum::<f64>() + eps * eps).sqrt();
            v.iter_mut().for_each(|a| *a = (*a / norm).min(cfg.clip));
            let norm = (v.iter().map(|a| a * a).sum::<f64>() + eps * eps).sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            out.extend(v);
        }
    }
    ClassicFeature {
        kind: ClassicKind::Hog,
        vector: out,
    }
}

// ---------------------------------------------------------------------------
// Linear SVM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Hinge-loss penalty C.
    pub c: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            max_epochs: 1000,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Max-margin linear classifier over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| w * (v - m) / s)
                .sum::<f64>()
    }
}

/// Trains an L2-regularized hinge-loss SVM by dual coordinate descent.
pub fn train_linear_classifier(features: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<LinearSvm> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Dimension {
            expected: format!("{} labels", features.len()),
            got: labels.len().to_string(),
        });
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::DegenerateTraining("linear classifier needs both classes".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Dimension {
            expected: format!("{d} features per example"),
            got: "ragged rows".into(),
        });
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    // standardized rows, augmented with a constant bias feature
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut r: Vec<f64> = f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect();
            r.push(1.0);
            r
        })
        .collect();
    let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let qii: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    let mut w = vec![0.0; d + 1];
    let mut alpha = vec![0.0; xs.len()];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            if qii[i] == 0.0 {
                continue;
            }
            let g = ys[i] * crate::nn::dot(&w, &xs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (alpha[i] - g / qii[i]).clamp(0.0, cfg.c);
                let delta = (alpha[i] - old) * ys[i];
                for (wj, xj) in w.iter_mut().zip(&xs[i]) {
                    *wj += delta * xj;
                }
            }
        }
        if pg_max - pg_min < cfg.tolerance {
            break;
        }
    }
    let bias = w.pop().unwrap_or(0.0);
    Ok(LinearSvm {
        mean,
        scale,
        weights: w,
        bias,
    })
}

/// Hard decision: true when the decision value is non-negative.
pub fn predict_linear(model: &LinearSvm, feature: &[f64]) -> bool {
    model.decision(feature) >= 0.0
}
