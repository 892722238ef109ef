//! Clean datasets, label-noise injection with recorded ground truth,
//! train/validation splitting, and the on-disk dataset format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PlmError, Result};
use crate::rng::substream;
use crate::transition::TransitionMatrix;

/// One dense feature grid with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(PlmError::Shape(format!(
                "{} pixels for a {height}x{width} grid",
                pixels.len()
            )));
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGrid {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }
}

/// Instances with trusted labels.
#[derive(Debug, Clone)]
pub struct CleanDataset {
    pub images: Vec<ImageGrid>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl CleanDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Pair,
    Idn,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pair => "pair",
            NoiseKind::Idn => "idn",
        }
    }
}

/// The injector's recorded ground truth, kept for evaluation only.
#[derive(Debug, Clone)]
pub enum NoiseGroundTruth {
    /// Class-dependent kinds: the row-stochastic flip matrix.
    Matrix(TransitionMatrix),
    /// Instance-dependent noise: one recorded flip row per instance.
    PerInstance(Vec<Vec<f64>>),
}

impl NoiseGroundTruth {
    /// Ground-truth noisy posterior row for an instance with known clean label.
    pub fn row_for(&self, index: usize, clean_label: usize) -> &[f64] {
        match self {
            NoiseGroundTruth::Matrix(t) => t.row(clean_label),
            NoiseGroundTruth::PerInstance(rows) => &rows[index],
        }
    }
}

/// Instances with observed (noisy) labels; clean labels ride along for
/// evaluation only and never feed training.
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    pub images: Vec<ImageGrid>,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub num_classes: usize,
    pub kind: NoiseKind,
    pub rate: f64,
    pub truth: NoiseGroundTruth,
    pub seed: u64,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn take(&self, indices: &[usize]) -> NoisyDataset {
        let truth = match &self.truth {
            NoiseGroundTruth::Matrix(t) => NoiseGroundTruth::Matrix(t.clone()),
            NoiseGroundTruth::PerInstance(rows) => {
                NoiseGroundTruth::PerInstance(indices.iter().map(|&i| rows[i].clone()).collect())
            }
        };
        NoisyDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            noisy_labels: indices.iter().map(|&i| self.noisy_labels[i]).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            num_classes: self.num_classes,
            kind: self.kind,
            rate: self.rate,
            truth,
            seed: self.seed,
        }
    }
}

/// Validation fraction plus the seed controlling the partition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

const TEMPLATE_LOW: f64 = 0.1;
const TEMPLATE_HIGH: f64 = 0.9;

/// Class-balanced synthetic dataset: each class owns one bright cell of
/// a fixed grid of patch positions, plus i.i.d. pixel noise clipped to
/// [0, 1]. Distinct classes occupy distinct crop regions, so cropping
/// separates class evidence.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<CleanDataset> {
    if classes < 2 {
        return Err(PlmError::Domain("need at least two classes".into()));
    }
    if height < 8 || width < 8 {
        return Err(PlmError::Domain("grid must be at least 8x8".into()));
    }
    if noise_scale < 0.0 {
        return Err(PlmError::Domain("noise scale must be nonnegative".into()));
    }
    let grid = (classes as f64).sqrt().ceil() as usize;
    let (cell_h, cell_w) = (height / grid, width / grid);
    if cell_h < 2 || cell_w < 2 {
        return Err(PlmError::Config(format!(
            "too many classes ({classes}) for the {height}x{width} template grid"
        )));
    }

    let mut templates = Vec::with_capacity(classes);
    for k in 0..classes {
        let (cr, cc) = (k / grid, k % grid);
        let mut pixels = vec![TEMPLATE_LOW; height * width];
        for r in cr * cell_h..(cr + 1) * cell_h {
            for c in cc * cell_w..(cc + 1) * cell_w {
                pixels[r * width + c] = TEMPLATE_HIGH;
            }
        }
        templates.push(pixels);
    }

    let mut rng = substream(seed, "synth");
    let noise = if noise_scale > 0.0 {
        Some(Normal::new(0.0, noise_scale).map_err(|e| PlmError::Numeric(e.to_string()))?)
    } else {
        None
    };

    let n = classes * per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let mut pixels = templates[k].clone();
        if let Some(dist) = &noise {
            for p in pixels.iter_mut() {
                *p = (*p + dist.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        images.push(ImageGrid {
            height,
            width,
            pixels,
        });
        labels.push(k);
    }
    Ok(CleanDataset {
        images,
        labels,
        num_classes: classes,
        seed,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| PlmError::Format(format!("truncated {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label file pair (big-endian, magics 0x803/0x801),
/// scaling pixels to [0, 1]. At most `limit` instances are kept.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: usize) -> Result<CleanDataset> {
    let mut ir = fs::File::open(images_path).map_err(|e| {
        PlmError::Format(format!("cannot open {}: {e}", images_path.display()))
    })?;
    let magic = read_u32_be(&mut ir, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(PlmError::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut ir, "image header")? as usize;
    let rows = read_u32_be(&mut ir, "image header")? as usize;
    let cols = read_u32_be(&mut ir, "image header")? as usize;

    let mut lr = fs::File::open(labels_path).map_err(|e| {
        PlmError::Format(format!("cannot open {}: {e}", labels_path.display()))
    })?;
    let lmagic = read_u32_be(&mut lr, "label header")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(PlmError::Format(format!(
            "bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&mut lr, "label header")? as usize;
    if lcount != count {
        return Err(PlmError::Format(format!(
            "{count} images but {lcount} labels"
        )));
    }

    let keep = count.min(limit);
    let mut raw = vec![0u8; keep * rows * cols];
    ir.read_exact(&mut raw)
        .map_err(|e| PlmError::Format(format!("truncated image data: {e}")))?;
    let mut raw_labels = vec![0u8; keep];
    lr.read_exact(&mut raw_labels)
        .map_err(|e| PlmError::Format(format!("truncated label data: {e}")))?;

    let mut images = Vec::with_capacity(keep);
    for chunk in raw.chunks(rows * cols) {
        images.push(ImageGrid {
            height: rows,
            width: cols,
            pixels: chunk.iter().map(|&b| f64::from(b) / 255.0).collect(),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(CleanDataset {
        images,
        labels,
        num_classes,
        seed: 0,
    })
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PlmError::Domain(format!(
            "noise rate {rate} must lie in [0, 1)"
        )));
    }
    Ok(())
}

fn sample_from_rows(
    clean: &CleanDataset,
    row_of: impl Fn(usize) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let c = clean.num_classes;
    clean
        .labels
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let row = row_of(i);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            c - 1
        })
        .collect()
}

/// Symmetric flipping: diagonal 1 - rate, off-diagonal rate / (c - 1).
pub fn inject_symmetric(clean: &CleanDataset, rate: f64, seed: u64) -> Result<NoisyDataset> {
    check_rate(rate)?;
    let t = TransitionMatrix::symmetric(clean.num_classes, rate)?;
    let mut rng = substream(seed, "noise");
    let noisy = sample_from_rows(clean, |i| t.row(clean.labels[i]).to_vec(), &mut rng);
    Ok(NoisyDataset {
        images: clean.images.clone(),
        noisy_labels: noisy,
        clean_labels: clean.labels.clone(),
        num_classes: clean.num_classes,
        kind: NoiseKind::Symmetric,
        rate,
        truth: NoiseGroundTruth::Matrix(t),
        seed,
    })
}

/// Pair flipping: each class keeps 1 - rate and sends rate to the next
/// class in ascending cyclic order.
pub fn inject_pair(clean: &CleanDataset, rate: f64, seed: u64) -> Result<NoisyDataset> {
    check_rate(rate)?;
    let t = TransitionMatrix::pair(clean.num_classes, rate)?;
    let mut rng = substream(seed, "noise");
    let noisy = sample_from_rows(clean, |i| t.row(clean.labels[i]).to_vec(), &mut rng);
    Ok(NoisyDataset {
        images: clean.images.clone(),
        noisy_labels: noisy,
        clean_labels: clean.labels.clone(),
        num_classes: clean.num_classes,
        kind: NoiseKind::Pair,
        rate,
        truth: NoiseGroundTruth::Matrix(t),
        seed,
    })
}

/// Instance-dependent noise. Each instance draws a flip budget q from a
/// normal(rate, 0.1^2) truncated to [0, 1]; a fixed random projection of
/// the flattened instance scores the non-clean classes, which share q
/// via a softmax while the clean class keeps 1 - q. The realized rows
/// are recorded so evaluation can use exact ground truth.
pub fn inject_idn(clean: &CleanDataset, rate: f64, seed: u64) -> Result<NoisyDataset> {
    check_rate(rate)?;
    let c = clean.num_classes;
    let dim = clean
        .images
        .first()
        .map(|im| im.pixels.len())
        .ok_or_else(|| PlmError::Domain("cannot inject noise into an empty dataset".into()))?;

    let mut proj_rng = substream(seed, "idn-proj");
    let std_normal = Normal::new(0.0, 1.0).map_err(|e| PlmError::Numeric(e.to_string()))?;
    let proj: Vec<f64> = (0..dim * c).map(|_| std_normal.sample(&mut proj_rng)).collect();

    let mut q_rng = substream(seed, "idn-q");
    let q_dist = Normal::new(rate, 0.1).map_err(|e| PlmError::Numeric(e.to_string()))?;
    let mut rows = Vec::with_capacity(clean.len());
    for (image, &label) in clean.images.iter().zip(&clean.labels) {
        let q = if rate == 0.0 {
            0.0
        } else {
            // rejection sampling realizes the truncation exactly
            loop {
                let v = q_dist.sample(&mut q_rng);
                if (0.0..=1.0).contains(&v) {
                    break v;
                }
            }
        };
        let mut scores = vec![0.0; c];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, w) in image.pixels.iter().zip(proj[j * dim..(j + 1) * dim].iter()) {
                acc += p * w;
            }
            *s = acc;
        }
        let mx = scores
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut row = vec![0.0; c];
        let mut denom = 0.0;
        for (j, &s) in scores.iter().enumerate() {
            if j != label {
                let e = (s - mx).exp();
                row[j] = e;
                denom += e;
            }
        }
        for (j, r) in row.iter_mut().enumerate() {
            if j != label {
                *r = q * *r / denom;
            }
        }
        row[label] = 1.0 - q;
        rows.push(row);
    }

    let mut rng = substream(seed, "noise");
    let noisy = sample_from_rows(clean, |i| rows[i].clone(), &mut rng);
    Ok(NoisyDataset {
        images: clean.images.clone(),
        noisy_labels: noisy,
        clean_labels: clean.labels.clone(),
        num_classes: c,
        kind: NoiseKind::Idn,
        rate,
        truth: NoiseGroundTruth::PerInstance(rows),
        seed,
    })
}

/// Disjoint, exhaustive index partition for a dataset of n instances.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&spec.val_fraction) || spec.val_fraction == 0.0 {
        return Err(PlmError::Config(format!(
            "validation fraction {} must lie in (0, 1)",
            spec.val_fraction
        )));
    }
    let val_n = (n as f64 * spec.val_fraction).floor() as usize;
    if val_n == 0 || val_n == n {
        return Err(PlmError::Config(format!(
            "split of {n} instances at fraction {} leaves an empty side",
            spec.val_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(spec.seed, "split");
    order.shuffle(&mut rng);
    let mut val: Vec<usize> = order[..val_n].to_vec();
    let mut train: Vec<usize> = order[val_n..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Partition into train and validation subsets. Validation keeps its
/// noisy labels; model selection happens against them.
pub fn split_train_val(ds: &NoisyDataset, spec: &SplitSpec) -> Result<(NoisyDataset, NoisyDataset)> {
    let (train_idx, val_idx) = split_indices(ds.len(), spec)?;
    Ok((ds.take(&train_idx), ds.take(&val_idx)))
}

// ---------------------------------------------------------------------
// On-disk dataset directory
// ---------------------------------------------------------------------

/// JSON manifest describing a prepared dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub noise_kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
    pub files: BTreeMap<String, String>,
}

fn write_f32_block(path: &Path, images: &[ImageGrid]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for im in images {
        for &p in &im.pixels {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f32_block(path: &Path, count: usize, height: usize, width: usize) -> Result<Vec<ImageGrid>> {
    let bytes = fs::read(path)?;
    let expect = count * height * width * 4;
    if bytes.len() != expect {
        return Err(PlmError::Format(format!(
            "{} holds {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    let mut off = 0;
    for _ in 0..count {
        let mut pixels = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            pixels.push(f64::from(v));
            off += 4;
        }
        images.push(ImageGrid {
            height,
            width,
            pixels,
        });
    }
    Ok(images)
}

fn write_labels_csv(path: &Path, clean: &[usize], noisy: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "index,clean_label,noisy_label")?;
    for (i, (c, n)) in clean.iter().zip(noisy).enumerate() {
        writeln!(w, "{i},{c},{n}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_labels_csv(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| {
                PlmError::Format(format!("{}:{lineno}: bad label row", path.display()))
            })
        };
        let _idx = parse(parts.next())?;
        clean.push(parse(parts.next())?);
        noisy.push(parse(parts.next())?);
    }
    Ok((clean, noisy))
}

fn write_rows_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let c = rows.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..c).map(|j| j.to_string()).collect();
    writeln!(w, "index,{}", header.join(","))?;
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{i},{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').skip(1).map(str::parse).collect();
        rows.push(row.map_err(|e| {
            PlmError::Format(format!("{}: bad probability row: {e}", path.display()))
        })?);
    }
    Ok(rows)
}

/// Write a noisy train set and a clean test set as a dataset directory:
/// JSON manifest, little-endian float32 image blocks, and CSV labels.
/// Rerunning with identical inputs rewrites identical bytes.
pub fn write_dataset_dir(dir: &Path, train: &NoisyDataset, test: &CleanDataset) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(PlmError::Config("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let (h, w) = (train.images[0].height, train.images[0].width);

    let mut files = BTreeMap::new();
    files.insert("train_images".to_string(), "train_images.f32le".to_string());
    files.insert("train_labels".to_string(), "train_labels.csv".to_string());
    files.insert("test_images".to_string(), "test_images.f32le".to_string());
    files.insert("test_labels".to_string(), "test_labels.csv".to_string());
    match &train.truth {
        NoiseGroundTruth::Matrix(_) => {
            files.insert("true_t".to_string(), "true_t.csv".to_string());
        }
        NoiseGroundTruth::PerInstance(_) => {
            files.insert("idn_rows".to_string(), "idn_rows.csv".to_string());
        }
    }

    write_f32_block(&dir.join("train_images.f32le"), &train.images)?;
    write_labels_csv(
        &dir.join("train_labels.csv"),
        &train.clean_labels,
        &train.noisy_labels,
    )?;
    write_f32_block(&dir.join("test_images.f32le"), &test.images)?;
    write_labels_csv(&dir.join("test_labels.csv"), &test.labels, &test.labels)?;
    match &train.truth {
        NoiseGroundTruth::Matrix(t) => {
            let rows: Vec<Vec<f64>> = (0..t.classes()).map(|i| t.row(i).to_vec()).collect();
            write_rows_csv(&dir.join("true_t.csv"), &rows)?;
        }
        NoiseGroundTruth::PerInstance(rows) => {
            write_rows_csv(&dir.join("idn_rows.csv"), rows)?;
        }
    }

    let manifest = DatasetManifest {
        classes: train.num_classes,
        height: h,
        width: w,
        train_count: train.len(),
        test_count: test.len(),
        noise_kind: train.kind,
        rate: train.rate,
        seed: train.seed,
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PlmError::Format(e.to_string()))?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Read back a dataset directory written by [`write_dataset_dir`].
pub fn read_dataset_dir(dir: &Path) -> Result<(NoisyDataset, CleanDataset)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        PlmError::Format(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| PlmError::Format(e.to_string()))?;
    let file = |key: &str| -> Result<PathBuf> {
        manifest
            .files
            .get(key)
            .map(|f| dir.join(f))
            .ok_or_else(|| PlmError::Format(format!("manifest lacks file entry '{key}'")))
    };

    let train_images = read_f32_block(
        &file("train_images")?,
        manifest.train_count,
        manifest.height,
        manifest.width,
    )?;
    let (train_clean, train_noisy) = read_labels_csv(&file("train_labels")?)?;
    if train_clean.len() != manifest.train_count {
        return Err(PlmError::Format(format!(
            "{} train labels for {} images",
            train_clean.len(),
            manifest.train_count
        )));
    }
    let truth = match manifest.noise_kind {
        NoiseKind::Idn => NoiseGroundTruth::PerInstance(read_rows_csv(&file("idn_rows")?)?),
        _ => {
            let rows = read_rows_csv(&file("true_t")?)?;
            let entries: Vec<f64> = rows.into_iter().flatten().collect();
            NoiseGroundTruth::Matrix(TransitionMatrix::from_entries(manifest.classes, entries)?)
        }
    };
    let train = NoisyDataset {
        images: train_images,
        noisy_labels: train_noisy,
        clean_labels: train_clean,
        num_classes: manifest.classes,
        kind: manifest.noise_kind,
        rate: manifest.rate,
        truth,
        seed: manifest.seed,
    };

    let test_images = read_f32_block(
        &file("test_images")?,
        manifest.test_count,
        manifest.height,
        manifest.width,
    )?;
    let (test_clean, _) = read_labels_csv(&file("test_labels")?)?;
    let test = CleanDataset {
        images: test_images,
        labels: test_clean,
        num_classes: manifest.classes,
        seed: manifest.seed,
    };
    Ok((train, test))
}
