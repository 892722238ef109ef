//! Instance cropping, saliency-guided masking, and part-level labels.
//!
//! Crops are zero-embedded back onto a full-size canvas at their
//! original offset before classification, so a fixed-input network can
//! label every sub-instance. The part-label vector sets bit j exactly
//! when some sub-instance is classified as j.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageGrid;
use crate::error::{PlmError, Result};
use crate::linalg::argmax;
use crate::nn::MlpModel;
use crate::tape::Tape;

/// One rectangular sub-instance, kept with its placement.
#[derive(Debug, Clone)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// The sub-instances cut from one parent instance.
#[derive(Debug, Clone)]
pub struct CropSet {
    pub parent_height: usize,
    pub parent_width: usize,
    pub crops: Vec<Crop>,
}

impl CropSet {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}

/// Binary vector over classes; bit j marks that some part got label j.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLabelVector {
    pub bits: Vec<u8>,
}

impl PartLabelVector {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

/// Nonnegative per-feature importance scores.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

fn extract(x: &ImageGrid, row: usize, col: usize, h: usize, w: usize) -> Crop {
    let mut pixels = Vec::with_capacity(h * w);
    for r in row..row + h {
        pixels.extend_from_slice(&x.pixels[r * x.width + col..r * x.width + col + w]);
    }
    Crop {
        row,
        col,
        height: h,
        width: w,
        pixels,
    }
}

/// Five k x k crops: the four corners and the centre.
pub fn crop_uniform(x: &ImageGrid, k: usize) -> Result<CropSet> {
    if k == 0 || k > x.height.min(x.width) {
        return Err(PlmError::Domain(format!(
            "crop size {k} does not fit a {}x{} instance",
            x.height, x.width
        )));
    }
    let (h, w) = (x.height, x.width);
    let offsets = [
        (0, 0),
        (0, w - k),
        (h - k, 0),
        (h - k, w - k),
        ((h - k) / 2, (w - k) / 2),
    ];
    Ok(CropSet {
        parent_height: h,
        parent_width: w,
        crops: offsets
            .iter()
            .map(|&(r, c)| extract(x, r, c, k, k))
            .collect(),
    })
}

/// n_crops k x k crops at offsets uniform over the valid grid.
pub fn crop_random(x: &ImageGrid, k: usize, n_crops: usize, rng: &mut impl Rng) -> Result<CropSet> {
    if k == 0 || k > x.height.min(x.width) {
        return Err(PlmError::Domain(format!(
            "crop size {k} does not fit a {}x{} instance",
            x.height, x.width
        )));
    }
    if n_crops == 0 {
        return Err(PlmError::Domain("need at least one crop".into()));
    }
    let crops = (0..n_crops)
        .map(|_| {
            let r = rng.random_range(0..=x.height - k);
            let c = rng.random_range(0..=x.width - k);
            extract(x, r, c, k, k)
        })
        .collect();
    Ok(CropSet {
        parent_height: x.height,
        parent_width: x.width,
        crops,
    })
}

/// Gradient-times-input magnitude of the winning logit:
/// score_j = |d(max logit)/d(x_j) * x_j|.
pub fn saliency_map(f_l: &MlpModel, x: &ImageGrid) -> Result<SaliencyMap> {
    if f_l.input_dim() != x.pixels.len() {
        return Err(PlmError::Shape(format!(
            "instance of {} features for network input {}",
            x.pixels.len(),
            f_l.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let binding = f_l.bind_frozen(&mut tape)?;
    let input = tape.leaf(vec![1, x.pixels.len()], x.pixels.clone(), true)?;
    let logits = binding.forward(&mut tape, input)?;
    let winner = argmax(tape.value(logits));
    let picked = tape.gather_class(logits, &[winner])?;
    let scalar = tape.mean_all(picked)?;
    let grads = tape.backward(scalar)?;
    let gx = grads.expect(input)?;
    let scores: Vec<f64> = gx
        .iter()
        .zip(&x.pixels)
        .map(|(g, v)| (g * v).abs())
        .collect();
    Ok(SaliencyMap {
        height: x.height,
        width: x.width,
        scores,
    })
}

/// Two full-frame sub-instances: the first zero-masks the top-m salient
/// features, the second zero-masks the complement. Saliency ties break
/// by row-major feature index, so the masks always partition the grid.
pub fn crop_emphasized(x: &ImageGrid, s: &SaliencyMap, m: usize) -> Result<CropSet> {
    let n = x.pixels.len();
    if s.scores.len() != n {
        return Err(PlmError::Shape(
            "saliency map does not match the instance".into(),
        ));
    }
    if m == 0 || m >= n {
        return Err(PlmError::Domain(format!(
            "emphasis count {m} must lie in [1, {})",
            n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    let mut top = vec![false; n];
    for &i in order.iter().take(m) {
        top[i] = true;
    }
    let masked_top: Vec<f64> = x
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| if top[i] { 0.0 } else { v })
        .collect();
    let masked_rest: Vec<f64> = x
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| if top[i] { v } else { 0.0 })
        .collect();
    let full = |pixels: Vec<f64>| Crop {
        row: 0,
        col: 0,
        height: x.height,
        width: x.width,
        pixels,
    };
    Ok(CropSet {
        parent_height: x.height,
        parent_width: x.width,
        crops: vec![full(masked_top), full(masked_rest)],
    })
}

/// Zero canvas of the parent size with the crop at its original offset.
pub fn embed_crop(crop: &Crop, parent_height: usize, parent_width: usize) -> Result<ImageGrid> {
    if crop.row + crop.height > parent_height || crop.col + crop.width > parent_width {
        return Err(PlmError::Domain("crop exceeds parent bounds".into()));
    }
    let mut canvas = ImageGrid::zeros(parent_height, parent_width);
    for r in 0..crop.height {
        let dst = (crop.row + r) * parent_width + crop.col;
        canvas.pixels[dst..dst + crop.width]
            .copy_from_slice(&crop.pixels[r * crop.width..(r + 1) * crop.width]);
    }
    Ok(canvas)
}

/// Bit j is set exactly when some embedded crop's argmax class is j;
/// argmax ties resolve to the lowest class index.
pub fn assign_part_labels(f_l: &MlpModel, crops: &CropSet) -> Result<PartLabelVector> {
    if crops.is_empty() {
        return Err(PlmError::Domain("empty crop set".into()));
    }
    let c = f_l.output_dim();
    let dim = f_l.input_dim();
    if dim != crops.parent_height * crops.parent_width {
        return Err(PlmError::Shape(format!(
            "network input {dim} does not match parent {}x{}",
            crops.parent_height, crops.parent_width
        )));
    }
    let mut feats = Vec::with_capacity(crops.len() * dim);
    for crop in &crops.crops {
        feats.extend(embed_crop(crop, crops.parent_height, crops.parent_width)?.pixels);
    }
    let logits = f_l.logits(crops.len(), &feats)?;
    let mut bits = vec![0u8; c];
    for row in logits.chunks(c) {
        bits[argmax(row)] = 1;
    }
    Ok(PartLabelVector { bits })
}
