//! Procedural two-class synthetic microscopy dataset with known generative
//! factors.
//!
//! Class 0 ("untreated") renders many nuclei, bright cytoplasm and tight
//! organelle puncta; class 1 ("treated") the converse. The class ranges are
//! configurable but must stay non-overlapping on at least two factors, so the
//! classification task is near-separable by construction and every discovered
//! direction can be checked against a measurable pixel witness.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Pixels, CH_CYTOPLASM, CH_NUCLEI, CH_ORGANELLE};
use crate::rng::{derive_seed, derive_seed_indexed, stream, stream_from};

pub const DEFAULT_NOISE_AMPLITUDE: f64 = 0.02;
const MAX_PUNCTA_PER_NUCLEUS: usize = 7;

/// Ground-truth phenotype parameters that render one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFactors {
    pub nucleus_count: u32,
    /// 0 = clustered, 1 = spread.
    pub nucleus_spacing: f64,
    pub cytoplasm_intensity: f64,
    pub organelle_scatter: f64,
    /// Per-image randomness; identical (factors, jitter_seed) render
    /// bit-identical images.
    pub jitter_seed: u64,
}

impl SyntheticFactors {
    fn validate(&self, max_count: u32) -> Result<()> {
        for (name, v) in [
            ("nucleus_spacing", self.nucleus_spacing),
            ("cytoplasm_intensity", self.cytoplasm_intensity),
            ("organelle_scatter", self.organelle_scatter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.nucleus_count > max_count {
            return Err(Error::Input(format!(
                "nucleus_count {} exceeds configured maximum {max_count}",
                self.nucleus_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: usize,
    pub pixels: Pixels,
    pub label: u8,
    /// Ground truth, never fed to training.
    pub factors: SyntheticFactors,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Class-conditional sampling ranges, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRanges {
    pub nucleus_count: (u32, u32),
    pub nucleus_spacing: (f64, f64),
    pub cytoplasm_intensity: (f64, f64),
    pub organelle_scatter: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub n_images: usize,
    pub side: usize,
    /// train/val/test fractions; must sum to 1.
    pub split_fractions: (f64, f64, f64),
    pub max_nucleus_count: u32,
    pub noise_amplitude: f64,
    pub class0: FactorRanges,
    pub class1: FactorRanges,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            n_images: 2000,
            side: 64,
            split_fractions: (0.8, 0.1, 0.1),
            max_nucleus_count: 16,
            noise_amplitude: DEFAULT_NOISE_AMPLITUDE,
            class0: FactorRanges {
                nucleus_count: (7, 12),
                nucleus_spacing: (0.45, 0.85),
                cytoplasm_intensity: (0.60, 0.95),
                organelle_scatter: (0.05, 0.30),
            },
            class1: FactorRanges {
                nucleus_count: (1, 4),
                nucleus_spacing: (0.15, 0.55),
                cytoplasm_intensity: (0.05, 0.35),
                organelle_scatter: (0.60, 0.95),
            },
        }
    }
}

fn ranges_disjoint_f(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Input("datagen.n_images must be > 0".into()));
        }
        if self.side < 16 {
            return Err(Error::Input(format!(
                "datagen.side must be >= 16, got {}",
                self.side
            )));
        }
        let (a, b, c) = self.split_fractions;
        if a <= 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Input(
                "datagen.split_fractions must be non-negative and sum to 1".into(),
            ));
        }
        if !(0.0..=0.2).contains(&self.noise_amplitude) {
            return Err(Error::Input(
                "datagen.noise_amplitude must lie in [0, 0.2]".into(),
            ));
        }
        for (cls, r) in [("class0", &self.class0), ("class1", &self.class1)] {
            if r.nucleus_count.1 > self.max_nucleus_count {
                return Err(Error::Input(format!(
                    "datagen.{cls}.nucleus_count exceeds max_nucleus_count"
                )));
            }
            for (name, (lo, hi)) in [
                ("nucleus_spacing", r.nucleus_spacing),
                ("cytoplasm_intensity", r.cytoplasm_intensity),
                ("organelle_scatter", r.organelle_scatter),
            ] {
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                    return Err(Error::Input(format!(
                        "datagen.{cls}.{name} must be an ordered range inside [0,1]"
                    )));
                }
            }
        }
        // the class signal must be unambiguous on at least two factors
        let mut disjoint = 0;
        if self.class0.nucleus_count.1 < self.class1.nucleus_count.0
            || self.class1.nucleus_count.1 < self.class0.nucleus_count.0
        {
            disjoint += 1;
        }
        for (a, b) in [
            (self.class0.nucleus_spacing, self.class1.nucleus_spacing),
            (
                self.class0.cytoplasm_intensity,
                self.class1.cytoplasm_intensity,
            ),
            (self.class0.organelle_scatter, self.class1.organelle_scatter),
        ] {
            if ranges_disjoint_f(a, b) {
                disjoint += 1;
            }
        }
        if disjoint < 2 {
            return Err(Error::Input(
                "class factor ranges must be non-overlapping on at least two factors".into(),
            ));
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Draw class-conditional factors. Same (label, seed) always produces the
/// same factors.
pub fn sample_factors(
    cfg: &DatagenConfig,
    class_label: usize,
    rng_seed: u64,
) -> Result<SyntheticFactors> {
    let ranges = match class_label {
        0 => &cfg.class0,
        1 => &cfg.class1,
        other => {
            return Err(Error::Input(format!(
                "class label must be 0 or 1, got {other}"
            )))
        }
    };
    let mut rng = stream_from(rng_seed);
    let (clo, chi) = ranges.nucleus_count;
    let nucleus_count = clo + (rng.gen::<f64>() * (chi - clo + 1) as f64).floor() as u32;
    let nucleus_count = nucleus_count.min(chi);
    let factors = SyntheticFactors {
        nucleus_count,
        nucleus_spacing: uniform_in(&mut rng, ranges.nucleus_spacing.0, ranges.nucleus_spacing.1),
        cytoplasm_intensity: uniform_in(
            &mut rng,
            ranges.cytoplasm_intensity.0,
            ranges.cytoplasm_intensity.1,
        ),
        organelle_scatter: uniform_in(
            &mut rng,
            ranges.organelle_scatter.0,
            ranges.organelle_scatter.1,
        ),
        jitter_seed: rng.gen::<u64>(),
    };
    factors.validate(cfg.max_nucleus_count)?;
    Ok(factors)
}

/// Add an isotropic Gaussian blob, evaluated inside a 3-sigma box.
fn add_blob(ch: &mut ndarray::ArrayViewMut2<f64>, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let side = ch.nrows();
    let r = (3.0 * sigma).ceil() as isize;
    let (icy, icx) = (cy.round() as isize, cx.round() as isize);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for i in (icy - r).max(0)..=(icy + r).min(side as isize - 1) {
        for j in (icx - r).max(0)..=(icx + r).min(side as isize - 1) {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            ch[[i as usize, j as usize]] += amp * (-(dy * dy + dx * dx) * inv2s2).exp();
        }
    }
}

/// Per-nucleus-slot draws: position offset (2), radius u, amplitude u, cyto u.
type NucleusJitter = (f64, f64, f64, f64, f64);
/// Per-punctum draws: offset (2), radius u, amplitude u.
type PunctumJitter = (f64, f64, f64, f64);

/// Deterministic jitter bundle for one image. All random draws happen here,
/// in a fixed order that does not depend on factor values, so varying one
/// factor with the seed held fixed changes the render only through
/// arithmetic. That is what makes the monotone pixel witnesses exact.
struct Jitter {
    center: (f64, f64),
    nucleus: Vec<NucleusJitter>,
    ambient: Vec<(f64, f64, f64)>,
    puncta: Vec<(f64, Vec<PunctumJitter>)>,
    noise: Vec<f64>,
}

fn draw_jitter(seed: u64, side: usize, max_count: u32) -> Jitter {
    let mut rng = stream_from(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(rand_distr::StandardNormal) };
    let center = (0.12 * normal(&mut rng), 0.12 * normal(&mut rng));
    let nucleus = (0..max_count)
        .map(|_| {
            (
                normal(&mut rng),
                normal(&mut rng),
                rng.gen::<f64>(),
                rng.gen::<f64>(),
                rng.gen::<f64>(),
            )
        })
        .collect();
    let ambient = (0..3)
        .map(|_| (normal(&mut rng), normal(&mut rng), rng.gen::<f64>()))
        .collect();
    let puncta = (0..max_count)
        .map(|_| {
            let count_u = rng.gen::<f64>();
            let ps = (0..MAX_PUNCTA_PER_NUCLEUS)
                .map(|_| {
                    (
                        normal(&mut rng),
                        normal(&mut rng),
                        rng.gen::<f64>(),
                        rng.gen::<f64>(),
                    )
                })
                .collect();
            (count_u, ps)
        })
        .collect();
    let noise = (0..3 * side * side).map(|_| rng.gen::<f64>()).collect();
    Jitter {
        center,
        nucleus,
        ambient,
        puncta,
        noise,
    }
}

/// Render one image from factors. Deterministic given (factors, jitter_seed).
pub fn render_image(factors: &SyntheticFactors, side: usize) -> Result<Pixels> {
    render_image_with(factors, side, DEFAULT_NOISE_AMPLITUDE, u32::MAX)
}

pub fn render_image_with(
    factors: &SyntheticFactors,
    side: usize,
    noise_amplitude: f64,
    max_count: u32,
) -> Result<Pixels> {
    if side < 16 {
        return Err(Error::Input(format!("side must be >= 16, got {side}")));
    }
    factors.validate(max_count)?;
    let jitter_slots = factors.nucleus_count.max(16).max(if max_count == u32::MAX {
        0
    } else {
        max_count
    });
    let jit = draw_jitter(factors.jitter_seed, side, jitter_slots);
    let s = side as f64;
    let mut px: Pixels = Array3::zeros((3, side, side));

    let center = (
        s * (0.5 + jit.center.0).clamp(0.3, 0.7),
        s * (0.5 + jit.center.1).clamp(0.3, 0.7),
    );
    let spread = s * (0.06 + 0.30 * factors.nucleus_spacing);

    // nucleus positions and sizes for the active slots
    let mut nuclei: Vec<(f64, f64, f64)> = Vec::new(); // (cy, cx, radius)
    for slot in 0..factors.nucleus_count as usize {
        let (gy, gx, ru, au, _cu) = jit.nucleus[slot];
        let cy = (center.0 + spread * gy).clamp(0.10 * s, 0.90 * s);
        let cx = (center.1 + spread * gx).clamp(0.10 * s, 0.90 * s);
        let radius = s * (0.035 + 0.020 * ru);
        let amp = 0.80 + 0.20 * au;
        add_blob(&mut px.index_axis_mut(ndarray::Axis(0), CH_NUCLEI), cy, cx, radius, amp);
        nuclei.push((cy, cx, radius));
    }

    // cytoplasm: cell bodies around nuclei plus ambient texture, all scaled
    // multiplicatively so the channel mean is strictly monotone in intensity
    {
        let mut cyto = Array3::<f64>::zeros((1, side, side));
        let mut ch = cyto.index_axis_mut(ndarray::Axis(0), 0);
        for (slot, &(cy, cx, radius)) in nuclei.iter().enumerate() {
            let (_, _, _, _, cu) = jit.nucleus[slot];
            add_blob(&mut ch, cy, cx, 2.6 * radius, 0.50 + 0.30 * cu);
        }
        for &(gy, gx, au) in &jit.ambient {
            let cy = (center.0 + 0.30 * s * gy).clamp(0.05 * s, 0.95 * s);
            let cx = (center.1 + 0.30 * s * gx).clamp(0.05 * s, 0.95 * s);
            add_blob(&mut ch, cy, cx, 0.22 * s, 0.25 + 0.20 * au);
        }
        let mut target = px.index_axis_mut(ndarray::Axis(0), CH_CYTOPLASM);
        for (t, &v) in target.iter_mut().zip(ch.iter()) {
            *t = factors.cytoplasm_intensity * v;
        }
    }

    // organelle puncta scattered around each nucleus; the offset scale is the
    // only place organelle_scatter enters, keeping the spatial second moment
    // monotone in it for a fixed seed
    {
        let sigma_scatter = s * (0.03 + 0.22 * factors.organelle_scatter);
        let mut ch = px.index_axis_mut(ndarray::Axis(0), CH_ORGANELLE);
        for (slot, &(cy, cx, _)) in nuclei.iter().enumerate() {
            let (count_u, ref ps) = jit.puncta[slot];
            let n_p = 4 + (count_u * 3.999).floor() as usize;
            for &(gy, gx, ru, au) in ps.iter().take(n_p) {
                let py = (cy + sigma_scatter * gy).clamp(0.02 * s, 0.98 * s);
                let pxx = (cx + sigma_scatter * gx).clamp(0.02 * s, 0.98 * s);
                let radius = s * (0.011 + 0.008 * ru);
                add_blob(&mut ch, py, pxx, radius, 0.55 + 0.35 * au);
            }
        }
    }

    // biological-variability stand-in: small additive uniform noise
    for (v, &u) in px.iter_mut().zip(jit.noise.iter()) {
        *v += noise_amplitude * u;
    }
    imageio::clamp01(&mut px);
    Ok(px)
}

/// Mean of the cytoplasm channel; the depth-0 separability witness.
pub fn cytoplasm_mean(px: &Pixels) -> f64 {
    px.index_axis(ndarray::Axis(0), CH_CYTOPLASM).mean().unwrap_or(0.0)
}

/// Count connected bright components in the nuclei channel (8-connectivity,
/// threshold 0.45, minimum area 3 px). A coarse but monotone witness for
/// nucleus count.
pub fn nucleus_blob_count(px: &Pixels) -> usize {
    let ch = px.index_axis(ndarray::Axis(0), CH_NUCLEI);
    let (h, w) = (ch.nrows(), ch.ncols());
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let thr = 0.45;
    for start in 0..h * w {
        if seen[start] || ch[[start / w, start % w]] < thr {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut area = 0usize;
        while let Some(p) = stack.pop() {
            area += 1;
            let (i, j) = (p / w, p % w);
            for di in -1i32..=1 {
                for dj in -1i32..=1 {
                    let (ni, nj) = (i as i32 + di, j as i32 + dj);
                    if ni < 0 || nj < 0 || ni >= h as i32 || nj >= w as i32 {
                        continue;
                    }
                    let np = ni as usize * w + nj as usize;
                    if !seen[np] && ch[[ni as usize, nj as usize]] >= thr {
                        seen[np] = true;
                        stack.push(np);
                    }
                }
            }
        }
        if area >= 3 {
            count += 1;
        }
    }
    count
}

/// Spatial standard deviation of organelle-channel mass around its centroid.
pub fn organelle_spatial_std(px: &Pixels) -> f64 {
    let ch = px.index_axis(ndarray::Axis(0), CH_ORGANELLE);
    let total: f64 = ch.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for ((i, j), &v) in ch.indexed_iter() {
        cy += i as f64 * v;
        cx += j as f64 * v;
    }
    cy /= total;
    cx /= total;
    let mut m2 = 0.0;
    for ((i, j), &v) in ch.indexed_iter() {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        m2 += v * (dy * dy + dx * dx);
    }
    (m2 / total).sqrt()
}

fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = (fractions.0 * n as f64).floor() as usize;
    let val = (fractions.1 * n as f64).floor() as usize;
    (train, val, n - train - val)
}

/// Generate the full dataset in memory. Deterministic in (config, master_seed).
pub fn generate_dataset(cfg: &DatagenConfig, master_seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let images: Vec<LabeledImage> = crate::nn::ordered_par_map(
        &(0..cfg.n_images).collect::<Vec<_>>(),
        |_, &i| -> Result<LabeledImage> {
            let label = (i % 2) as u8;
            let factors = sample_factors(
                cfg,
                label as usize,
                derive_seed_indexed(master_seed, "datagen/factors", i as u64),
            )?;
            let pixels =
                render_image_with(&factors, cfg.side, cfg.noise_amplitude, cfg.max_nucleus_count)?;
            Ok(LabeledImage {
                id: i,
                pixels,
                label,
                factors,
            })
        },
    )
    .into_iter()
    .collect::<Result<_>>()?;

    // stratified split with exact per-class counts
    let split_seed = derive_seed(master_seed, "datagen/split");
    let mut rng = stream(master_seed, "datagen/split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for cls in 0..2u8 {
        let mut idx: Vec<usize> = images
            .iter()
            .enumerate()
            .filter(|(_, im)| im.label == cls)
            .map(|(i, _)| i)
            .collect();
        // Fisher-Yates with our seeded stream
        for i in (1..idx.len()).rev() {
            let j = (rng.gen::<f64>() * (i + 1) as f64).floor() as usize;
            idx.swap(i, j.min(i));
        }
        let (n_train, n_val, _) = split_sizes(idx.len(), cfg.split_fractions);
        for (pos, &img_i) in idx.iter().enumerate() {
            let img = images[img_i].clone();
            if pos < n_train {
                train.push(img);
            } else if pos < n_train + n_val {
                val.push(img);
            } else {
                test.push(img);
            }
        }
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by_key(|im| im.id);
    }
    let split = DatasetSplit {
        train,
        val,
        test,
        split_seed,
    };
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if part.is_empty() {
            continue;
        }
        let c1 = part.iter().filter(|im| im.label == 1).count() as f64;
        let frac = c1 / part.len() as f64;
        if (frac - 0.5).abs() > 0.02 {
            return Err(Error::Numeric(format!(
                "{name} split class balance {frac:.3} drifted beyond 2% of 50/50"
            )));
        }
    }
    Ok(split)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    path: String,
    split: String,
    id: usize,
    label: u8,
    seed: u64,
    factors: SyntheticFactors,
}

/// Write images as PNG plus a line-delimited JSON manifest (one record per
/// image: path, split, id, label, seed, factors).
pub fn write_dataset(split: &DatasetSplit, out_dir: &Path) -> Result<()> {
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for im in part {
            let rel = format!("images/im_{:05}.png", im.id);
            imageio::write_png(&out_dir.join(&rel), &im.pixels)?;
            let rec = ManifestRecord {
                path: rel,
                split: name.to_string(),
                id: im.id,
                label: im.label,
                seed: im.factors.jitter_seed,
                factors: im.factors.clone(),
            };
            let _ = writeln!(
                manifest,
                "{}",
                serde_json::to_string(&rec).expect("manifest record serializes")
            );
        }
    }
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`]. Pixel values are the 8-bit
/// quantized ones from disk, which is what training consumes.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join("manifest.jsonl");
    let f = std::fs::File::open(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("bad manifest line: {e}")))?;
        let pixels = imageio::read_png(&dir.join(&rec.path))?;
        let im = LabeledImage {
            id: rec.id,
            pixels,
            label: rec.label,
            factors: rec.factors,
        };
        match rec.split.as_str() {
            "train" => train.push(im),
            "val" => val.push(im),
            "test" => test.push(im),
            other => return Err(Error::Input(format!("unknown split tag `{other}`"))),
        }
    }
    if train.is_empty() && val.is_empty() && test.is_empty() {
        return Err(Error::Input(format!(
            "no records in {}",
            manifest_path.display()
        )));
    }
    Ok(DatasetSplit {
        train,
        val,
        test,
        split_seed: 0,
    })
}
