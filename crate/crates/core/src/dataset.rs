//! Image pairs: PNG I/O, normalization, procedural artworks, the synthetic
//! cloak oracle, and manifests.
//!
//! The cloak oracle stands in for a real style-cloaking tool. It adds
//! band-limited noise ("ripples") whose amplitude is highest in flat regions
//! of the original and drops to 30% in textured ones, so the perturbation
//! depends on image content.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{GleanError, Result};
use crate::fft::{irfft2, rfft2};
use crate::tensor::Tensor;

/// One quantization step of an 8-bit channel in normalized `[-1, 1]` space.
pub const NORMALIZED_STEP: f32 = 2.0 / 255.0;

pub const MANIFEST_HEADER: [&str; 3] = ["id", "original_path", "perturbed_path"];

// ---------------------------------------------------------------------------
// image I/O

/// Reads an 8-bit RGB PNG as a `[3, H, W]` tensor with values `v / 255`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let fail = |reason: String| GleanError::ImageLoad {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| fail(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| fail(e.to_string()))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(fail("not a PNG file".into()));
    }
    let img = reader.decode().map_err(|e| fail(e.to_string()))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(fail(format!(
                "expected 8-bit RGB, found {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(GleanError::shape(format!("save_image needs 3 channels, got {c}")));
    }
    let mut buf = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            buf[3 * i + ch] = to_u8(img.data()[ch * h * w + i]);
        }
    }
    let rgb = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized for image");
    rgb.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => GleanError::io(path, io),
        other => GleanError::io(path, std::io::Error::other(other.to_string())),
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, `k / 255`.
pub fn quantize(x: &Tensor) -> Tensor {
    x.map(|v| to_u8(v) as f32 / 255.0)
}

/// `[0, 1] -> [-1, 1]`.
pub fn normalize(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] -> [0, 1]`.
pub fn denormalize(x: &Tensor) -> Tensor {
    x.map(|v| (v + 1.0) * 0.5)
}

// ---------------------------------------------------------------------------
// procedural artworks

fn smoothstep(lo: f32, hi: f32, x: f32) -> f32 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

/// Bilinear value noise in `[-1, 1]` on a lattice with spacing `cell` pixels.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: f32) -> Vec<f32> {
    let n = (size as f32 / cell).ceil() as usize + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 / cell, x as f32 / cell);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f32, fx - ix as f32);
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    /// Alpha-blends `color(x, y)` with coverage `alpha(x, y)`.
    fn blend(&mut self, alpha: impl Fn(f32, f32) -> f32, color: impl Fn(usize) -> [f32; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let a = alpha(x as f32 + 0.5, y as f32 + 0.5);
                if a <= 0.0 {
                    continue;
                }
                let i = y * self.size + x;
                let c = color(i);
                for ch in 0..3 {
                    self.px[i][ch] = self.px[i][ch] * (1.0 - a) + c[ch] * a;
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let n = self.size * self.size;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in self.px.iter().enumerate() {
            for ch in 0..3 {
                data[ch * n + i] = p[ch].clamp(0.0, 1.0);
            }
        }
        Tensor::new(vec![3, self.size, self.size], data).expect("canvas dims")
    }
}

/// Side of the flat square every artwork carries, before its soft edge.
pub fn flat_region_side(size: usize) -> usize {
    if size >= 128 {
        size / 4
    } else {
        32.min(size / 2)
    }
}

/// Deterministic procedural "artwork": layered gradients, soft shapes,
/// value-noise texture patches, and one flat square of side
/// [`flat_region_side`] drawn last. Values in `[0, 1]`.
pub fn synth_artwork(seed: u64, size: usize) -> Result<Tensor> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(GleanError::shape(format!("artwork size {size} must be a positive multiple of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;

    // layered gradients
    let base = random_color(&mut rng);
    let mut canvas = Canvas {
        size,
        px: vec![base; size * size],
    };
    for _ in 0..2 {
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let tint = random_color(&mut rng);
        let strength: f32 = rng.random_range(0.2..0.5);
        canvas.blend(
            |x, y| strength * (((x - s / 2.0) * dx + (y - s / 2.0) * dy) / s + 0.5).clamp(0.0, 1.0),
            |_| tint,
        );
    }

    // soft ellipses
    for _ in 0..rng.random_range(3..7) {
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (rx, ry) = (rng.random_range(s / 10.0..s / 3.0), rng.random_range(s / 10.0..s / 3.0));
        let color = random_color(&mut rng);
        let opacity: f32 = rng.random_range(0.6..1.0);
        canvas.blend(
            |x, y| {
                let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
                opacity * (1.0 - smoothstep(0.85, 1.0, d))
            },
            |_| color,
        );
    }

    // textured patches
    for _ in 0..rng.random_range(1..4) {
        let cell: f32 = rng.random_range(1.5..5.0);
        let noise = value_noise(&mut rng, size, cell);
        let amp: f32 = rng.random_range(0.12..0.3);
        let color = random_color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r: f32 = rng.random_range(s / 6.0..s / 2.5);
        canvas.blend(
            |x, y| 1.0 - smoothstep(0.8 * r, r, ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()),
            |i| {
                let n = noise[i] * amp;
                [color[0] + n, color[1] + n * 0.8, color[2] + n * 1.2]
            },
        );
    }

    // the flat square, with a soft rim outside its interior
    let side = flat_region_side(size) as f32;
    let rim = 4.0f32.min((s - side) / 2.0);
    let x0 = rng.random_range(rim..=(s - side - rim)).floor();
    let y0 = rng.random_range(rim..=(s - side - rim)).floor();
    let color = random_color(&mut rng);
    canvas.blend(
        |x, y| {
            let outside_x = (x0 - x).max(x - (x0 + side)).max(0.0);
            let outside_y = (y0 - y).max(y - (y0 + side)).max(0.0);
            let d = outside_x.max(outside_y);
            if rim <= 0.0 {
                if d > 0.0 {
                    0.0
                } else {
                    1.0
                }
            } else {
                1.0 - smoothstep(0.0, rim, d)
            }
        },
        |_| color,
    );

    Ok(canvas.into_tensor())
}

// ---------------------------------------------------------------------------
// cloak oracle

/// Parameters of the synthetic cloak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbConfig {
    /// Peak perturbation in `[0, 1]` pixel units, in `(0, 0.25]`.
    pub amplitude: f32,
    /// Radial pass band in cycles/pixel, `0 < f_lo < f_hi < 0.5`.
    pub f_lo: f32,
    pub f_hi: f32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            amplitude: 0.1,
            f_lo: 0.08,
            f_hi: 0.25,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude <= 0.25) {
            return Err(GleanError::config(format!(
                "amplitude {} outside (0, 0.25]",
                self.amplitude
            )));
        }
        if !(self.f_lo > 0.0 && self.f_lo < self.f_hi && self.f_hi < 0.5) {
            return Err(GleanError::config(format!(
                "band [{}, {}] must satisfy 0 < f_lo < f_hi < 0.5",
                self.f_lo, self.f_hi
            )));
        }
        Ok(())
    }
}

const FLAT_VARIANCE: f32 = 0.0005;
const TEXTURED_VARIANCE: f32 = 0.005;
const TEXTURED_WEIGHT: f32 = 0.3;

/// Per-pixel cloak weight: 1 where the 5x5 neighbourhood of the grey image
/// is flat, easing to 0.3 where it is textured. Windows are cut at borders.
pub fn flatness_weight(original: &Tensor) -> Result<Tensor> {
    let (c, h, w) = original.dims3()?;
    let grey: Vec<f32> = (0..h * w)
        .map(|i| (0..c).map(|ch| original.data()[ch * h * w + i]).sum::<f32>() / c as f32)
        .collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut n, mut s, mut s2) = (0.0f64, 0.0f64, 0.0f64);
            for yy in y.saturating_sub(2)..(y + 3).min(h) {
                for xx in x.saturating_sub(2)..(x + 3).min(w) {
                    let v = grey[yy * w + xx] as f64;
                    n += 1.0;
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0) as f32;
            out[y * w + x] =
                1.0 - (1.0 - TEXTURED_WEIGHT) * smoothstep(FLAT_VARIANCE, TEXTURED_VARIANCE, var);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// White noise per channel, band-passed by masking the half spectrum, scaled
/// so the largest magnitude over all channels is 1.
pub fn ripple_noise(seed: u64, h: usize, w: usize, f_lo: f32, f_hi: f32) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let white = Tensor::from_fn(&[h, w], |_| rng.sample::<f32, _>(StandardNormal));
        let mut s = rfft2(&white)?;
        let hw = s.half_width();
        for (i, b) in s.bins_mut().iter_mut().enumerate() {
            let (r, c) = (i / hw, i % hw);
            let fy = r.min(h - r) as f32 / h as f32;
            let fx = c as f32 / w as f32;
            let f = (fy * fy + fx * fx).sqrt();
            if f < f_lo || f > f_hi {
                *b = rustfft::num_complex::Complex32::new(0.0, 0.0);
            }
        }
        data.extend_from_slice(irfft2(&s)?.data());
    }
    let noise = Tensor::new(vec![3, h, w], data)?;
    let peak = noise.max_abs();
    Ok(if peak > 0.0 { noise.scale(1.0 / peak) } else { noise })
}

/// `clamp(original + A * ripple(seed) * flatness(original), 0, 1)` on `[0, 1]` images.
pub fn synth_perturb(original: &Tensor, seed: u64, cfg: &PerturbConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (c, h, w) = original.dims3()?;
    if c != 3 {
        return Err(GleanError::shape("synth_perturb needs a 3-channel image"));
    }
    let noise = ripple_noise(seed, h, w, cfg.f_lo, cfg.f_hi)?;
    let weight = flatness_weight(original)?;
    let plane = h * w;
    let data = original
        .data()
        .iter()
        .zip(noise.data())
        .enumerate()
        .map(|(i, (&o, &n))| {
            let cloak = cfg.amplitude * n * weight.data()[i % plane];
            (o + cloak).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![3, h, w], data)
}

// ---------------------------------------------------------------------------
// pairs and manifests

/// `(original, perturbed, residual)` in normalized `[-1, 1]` space.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub original: Tensor,
    pub perturbed: Tensor,
    pub residual: Tensor,
}

impl SamplePair {
    /// Builds a pair from normalized images; the residual is `perturbed - original`.
    pub fn new(id: impl Into<String>, original: Tensor, perturbed: Tensor) -> Result<Self> {
        let (_, h, w) = original.dims3()?;
        original.ensure_same_shape(&perturbed, "sample pair")?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(GleanError::shape(format!(
                "pair images are {w}x{h}; sides must be multiples of 8"
            )));
        }
        let residual = residual_label(&original, &perturbed)?;
        Ok(SamplePair {
            id: id.into(),
            original,
            perturbed,
            residual,
        })
    }
}

/// `glazed - original`, elementwise.
pub fn residual_label(original: &Tensor, glazed: &Tensor) -> Result<Tensor> {
    glazed.sub(original)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub original_path: String,
    pub perturbed_path: String,
}

/// Ordered rows of image pairs; paths are relative to `base_dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// Iteration order for [`Manifest::stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    AsListed,
    Shuffled(u64),
}

impl Manifest {
    /// SHA-256 (hex) over the row list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(format!("{},{},{}\n", r.id, r.original_path, r.perturbed_path).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `(train, val)` with `max(1, n / 6)` trailing rows held out.
    pub fn split(&self) -> (Manifest, Manifest) {
        let (train, val) = split_counts(self.rows.len());
        let sub = |rows: &[ManifestRow]| Manifest {
            base_dir: self.base_dir.clone(),
            rows: rows.to_vec(),
        };
        (sub(&self.rows[..train]), sub(&self.rows[train..train + val]))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        wtr.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            wtr.write_record([&r.id, &r.original_path, &r.perturbed_path])
                .map_err(|e| csv_error(path, e))?;
        }
        wtr.flush().map_err(|e| GleanError::io(path, e))
    }

    /// Parses a manifest and checks ids are unique and every file exists.
    pub fn load(path: &Path) -> Result<Manifest> {
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header = rdr.headers().map_err(|e| csv_error(path, e))?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(GleanError::Manifest(format!(
                "{}: header must be `{}`",
                path.display(),
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            if rec.len() != 3 {
                return Err(GleanError::Manifest(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let row = ManifestRow {
                id: rec[0].to_string(),
                original_path: rec[1].to_string(),
                perturbed_path: rec[2].to_string(),
            };
            if !seen.insert(row.id.clone()) {
                return Err(GleanError::Manifest(format!("duplicate id `{}`", row.id)));
            }
            for p in [&row.original_path, &row.perturbed_path] {
                if !base_dir.join(p).is_file() {
                    return Err(GleanError::Manifest(format!(
                        "row `{}`: missing file {}",
                        row.id,
                        base_dir.join(p).display()
                    )));
                }
            }
            rows.push(row);
        }
        Ok(Manifest { base_dir, rows })
    }

    pub fn load_pair(&self, row: &ManifestRow) -> Result<SamplePair> {
        let read = |rel: &str| {
            load_image(&self.base_dir.join(rel)).map_err(|e| {
                GleanError::Manifest(format!("row `{}`: {e}", row.id))
            })
        };
        let original = normalize(&read(&row.original_path)?);
        let perturbed = normalize(&read(&row.perturbed_path)?);
        SamplePair::new(row.id.clone(), original, perturbed)
    }

    /// Lazily loads pairs in the requested order.
    pub fn stream(&self, order: Order) -> impl Iterator<Item = Result<SamplePair>> + '_ {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        if let Order::Shuffled(seed) = order {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx.into_iter().map(move |i| self.load_pair(&self.rows[i]))
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>> {
        self.stream(Order::AsListed).collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> GleanError {
    GleanError::Manifest(format!("{}: {e}", path.display()))
}

/// `(train, val)` counts: `max(1, n / 6)` validation rows, the rest train.
pub fn split_counts(n: usize) -> (usize, usize) {
    if n < 2 {
        return (n, 0);
    }
    let val = (n / 6).max(1);
    (n - val, val)
}

/// Parameters of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub pairs: usize,
    pub size: usize,
    pub seed: u64,
    pub perturb: PerturbConfig,
}

/// Seeds for pair `i`: one for the artwork, one for its cloak.
fn pair_seeds(seed: u64, i: usize) -> (u64, u64) {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 * 2);
    (base, base.wrapping_add(1) ^ 0xC10A_C000)
}

/// Generates one in-memory pair, quantized to 8 bits as it would be on disk.
pub fn synth_pair(spec: &DatasetSpec, i: usize) -> Result<SamplePair> {
    let (art_seed, cloak_seed) = pair_seeds(spec.seed, i);
    let original = quantize(&synth_artwork(art_seed, spec.size)?);
    let perturbed = quantize(&synth_perturb(&original, cloak_seed, &spec.perturb)?);
    SamplePair::new(format!("pair_{i:05}"), normalize(&original), normalize(&perturbed))
}

/// Writes `pairs/<id>_{original,perturbed}.png` plus `manifest.csv`,
/// `train.csv` and `val.csv` under `out_dir`. On failure, files written by
/// this call are removed.
pub fn build_dataset(out_dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    if spec.pairs < 2 {
        return Err(GleanError::config("a dataset needs at least 2 pairs"));
    }
    spec.perturb.validate()?;
    if spec.size == 0 || !spec.size.is_multiple_of(8) {
        return Err(GleanError::config(format!("size {} must be a multiple of 8", spec.size)));
    }

    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(out_dir, spec, &mut written);
    if result.is_err() {
        for p in written.iter().rev() {
            let _ = fs::remove_file(p);
        }
    }
    result
}

fn write_dataset(out_dir: &Path, spec: &DatasetSpec, written: &mut Vec<PathBuf>) -> Result<Manifest> {
    let pair_dir = out_dir.join("pairs");
    fs::create_dir_all(&pair_dir).map_err(|e| GleanError::io(&pair_dir, e))?;

    let mut rows = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let (art_seed, cloak_seed) = pair_seeds(spec.seed, i);
        let original = synth_artwork(art_seed, spec.size)?;
        let original = quantize(&original);
        let perturbed = synth_perturb(&original, cloak_seed, &spec.perturb)?;
        let id = format!("pair_{i:05}");
        let row = ManifestRow {
            original_path: format!("pairs/{id}_original.png"),
            perturbed_path: format!("pairs/{id}_perturbed.png"),
            id,
        };
        for (rel, img) in [(&row.original_path, &original), (&row.perturbed_path, &perturbed)] {
            let p = out_dir.join(rel);
            written.push(p.clone());
            save_image(&p, img)?;
        }
        rows.push(row);
    }

    let manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        rows,
    };
    let (train, val) = manifest.split();
    for (name, m) in [("manifest.csv", &manifest), ("train.csv", &train), ("val.csv", &val)] {
        let p = out_dir.join(name);
        written.push(p.clone());
        m.write(&p)?;
    }
    Ok(manifest)
}
