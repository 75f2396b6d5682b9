//! Sliding-window inference over oversized frames: overlapping window
//! placement, logit stitching with per-pixel averaging, horizontal-flip
//! test-time augmentation, probability-space geometric-mean ensembling,
//! argmax decoding and a binary dump format for score maps.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, WeightStore};
use crate::types::{ClassMask, PlaneImage, Rect, ScoreKind, ScoreMap};

/// Overlapping window placement covering a `width` x `height` frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub windows: Vec<Rect>,
    pub window_w: usize,
    pub window_h: usize,
}

fn window_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + window <= dim {
        origins.push(o);
        o += stride;
    }
    let last_end = origins.last().map_or(0, |&o| o + window);
    if last_end < dim {
        origins.push(dim - window);
    }
    origins
}

/// Place `window`-sized squares with `overlap` pixels of overlap between
/// neighbors, clamping the window per axis when the frame is smaller, and
/// aligning a final window to each far edge so every pixel is covered.
pub fn compute_window_grid(
    width: usize,
    height: usize,
    window: usize,
    overlap: usize,
) -> Result<WindowGrid> {
    if window == 0 {
        return Err(Error::InvalidConfig("window size must be >= 1".into()));
    }
    if overlap >= window {
        return Err(Error::InvalidConfig(format!(
            "overlap {overlap} must be smaller than the window {window}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::EmptyInput("zero-sized frame".into()));
    }
    let ww = window.min(width);
    let wh = window.min(height);
    let stride_x = ww.saturating_sub(overlap).max(1);
    let stride_y = wh.saturating_sub(overlap).max(1);
    let xs = window_origins(width, ww, stride_x);
    let ys = window_origins(height, wh, stride_y);
    let mut windows = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            windows.push(Rect::new(x, y, ww, wh));
        }
    }
    Ok(WindowGrid { windows, window_w: ww, window_h: wh })
}

/// Anything that maps an RGB tile to per-pixel class logits of the same
/// spatial extent.
pub trait Predictor: Sync {
    fn predict(&self, tile: &PlaneImage) -> Result<ScoreMap>;
    fn num_classes(&self) -> usize;
}

/// The trained model as a [`Predictor`]: standardizes the tile and runs the
/// forward pass.
pub struct ModelPredictor<'a> {
    pub cfg: &'a ModelConfig,
    pub store: &'a WeightStore<f32>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, tile: &PlaneImage) -> Result<ScoreMap> {
        let input = crate::train::augment::normalize(tile, self.mean, self.std)?;
        model::forward(&input, self.cfg, self.store)
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
}

/// Run the predictor over every window and average logits where windows
/// overlap. A frame covered by a single exact window reproduces that
/// window's logits bit for bit.
pub fn stitch_predict(
    img: &PlaneImage,
    window: usize,
    overlap: usize,
    predictor: &dyn Predictor,
) -> Result<ScoreMap> {
    let grid = compute_window_grid(img.width, img.height, window, overlap)?;
    let k = predictor.num_classes();
    let tiles: Vec<Result<(Rect, ScoreMap)>> = grid
        .windows
        .par_iter()
        .map(|&rect| {
            let tile = img.crop(rect);
            let scores = predictor.predict(&tile)?;
            if scores.width != rect.w || scores.height != rect.h || scores.classes != k {
                return Err(Error::ShapeMismatch(format!(
                    "predictor returned {}x{}x{} for a {}x{}x{k} window",
                    scores.width, scores.height, scores.classes, rect.w, rect.h
                )));
            }
            if scores.kind != ScoreKind::Logits {
                return Err(Error::InvalidConfig("stitching expects logit scores".into()));
            }
            Ok((rect, scores))
        })
        .collect();

    if grid.windows.len() == 1 && grid.windows[0] == Rect::new(0, 0, img.width, img.height) {
        // bit-exact fast path: nothing to average
        let (_, scores) = tiles.into_iter().next().unwrap()?;
        return Ok(scores);
    }

    let (w, h) = (img.width, img.height);
    let mut sum = vec![0.0f64; w * h * k];
    let mut count = vec![0u32; w * h];
    for t in tiles {
        let (rect, scores) = t?;
        for ty in 0..rect.h {
            let y = rect.y + ty;
            for tx in 0..rect.w {
                let x = rect.x + tx;
                count[y * w + x] += 1;
                let dst = (y * w + x) * k;
                let src = scores.pixel(tx, ty);
                for c in 0..k {
                    sum[dst + c] += src[c] as f64;
                }
            }
        }
    }
    let mut data = vec![0.0f32; w * h * k];
    for (i, &n) in count.iter().enumerate() {
        debug_assert!(n > 0, "window grid left pixel {i} uncovered");
        let inv = 1.0 / n as f64;
        for c in 0..k {
            data[i * k + c] = (sum[i * k + c] * inv) as f32;
        }
    }
    Ok(ScoreMap::new(w, h, k, ScoreKind::Logits, data))
}

/// Horizontal-flip test-time augmentation: average the stitched logits of
/// the frame and of its mirror (un-mirrored back) pixel by pixel.
pub fn tta_flip_predict(
    img: &PlaneImage,
    window: usize,
    overlap: usize,
    predictor: &dyn Predictor,
) -> Result<ScoreMap> {
    let plain = stitch_predict(img, window, overlap, predictor)?;
    let mirrored = stitch_predict(&img.flip_horizontal(), window, overlap, predictor)?;
    let restored = mirrored.flip_horizontal();
    let mut out = plain.clone();
    for (o, r) in out.data_mut().iter_mut().zip(restored.data()) {
        *o = 0.5 * (*o + r);
    }
    Ok(out)
}

/// Floor used before taking logs so zero probabilities cannot produce -inf.
pub const ENSEMBLE_LOG_FLOOR: f64 = 1e-12;

/// Geometric mean of probability maps, computed in log space with a floor of
/// [`ENSEMBLE_LOG_FLOOR`], renormalized per pixel. With a single input this
/// is the identity up to renormalization.
pub fn ensemble_geometric_mean(maps: &[&ScoreMap]) -> Result<ScoreMap> {
    let first = *maps.first().ok_or_else(|| Error::EmptyInput("ensemble of zero maps".into()))?;
    for m in maps {
        if m.kind != ScoreKind::Probabilities {
            return Err(Error::InvalidConfig(
                "ensembling operates on probability maps; run softmax first".into(),
            ));
        }
        if (m.width, m.height, m.classes) != (first.width, first.height, first.classes) {
            return Err(Error::ShapeMismatch(format!(
                "ensemble member {}x{}x{} vs {}x{}x{}",
                m.width, m.height, m.classes, first.width, first.height, first.classes
            )));
        }
    }
    let k = first.classes;
    let inv_n = 1.0 / maps.len() as f64;
    let mut data = vec![0.0f32; first.width * first.height * k];
    for px in 0..first.width * first.height {
        let mut logs = vec![0.0f64; k];
        for m in maps {
            for c in 0..k {
                let p = (m.data()[px * k + c] as f64).max(ENSEMBLE_LOG_FLOOR);
                logs[c] += p.ln();
            }
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * inv_n;
        let mut sum = 0.0f64;
        let mut vals = vec![0.0f64; k];
        for c in 0..k {
            let v = (logs[c] * inv_n - max).exp();
            vals[c] = v;
            sum += v;
        }
        for c in 0..k {
            data[px * k + c] = (vals[c] / sum) as f32;
        }
    }
    Ok(ScoreMap::new(first.width, first.height, k, ScoreKind::Probabilities, data))
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn argmax_decode(scores: &ScoreMap) -> Result<ClassMask> {
    if scores.classes > 255 {
        return Err(Error::InvalidConfig(format!(
            "{} classes cannot be decoded into a byte mask",
            scores.classes
        )));
    }
    if !scores.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("argmax_decode input".into()));
    }
    let mut data = Vec::with_capacity(scores.width * scores.height);
    for px in scores.data().chunks_exact(scores.classes) {
        let mut best = 0usize;
        for (c, &v) in px.iter().enumerate().skip(1) {
            if v > px[best] {
                best = c;
            }
        }
        data.push(best as u8);
    }
    Ok(ClassMask::new(scores.width, scores.height, data))
}

const SCORE_MAGIC: &[u8; 4] = b"SMAP";
const SCORE_VERSION: u32 = 1;

/// Serialize a score map: magic `SMAP`, u32 version, u32 width/height/classes,
/// u8 kind (0 logits, 1 probabilities), then row-major little-endian f32
/// scores.
pub fn save_scores(path: &Path, scores: &ScoreMap) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + scores.data().len() * 4);
    buf.extend_from_slice(SCORE_MAGIC);
    buf.extend_from_slice(&SCORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scores.width as u32).to_le_bytes());
    buf.extend_from_slice(&(scores.height as u32).to_le_bytes());
    buf.extend_from_slice(&(scores.classes as u32).to_le_bytes());
    buf.push(match scores.kind {
        ScoreKind::Logits => 0,
        ScoreKind::Probabilities => 1,
    });
    for v in scores.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Inverse of [`save_scores`], rejecting bad magic, unknown versions or a
/// payload that does not match the declared dimensions.
pub fn load_scores(path: &Path) -> Result<ScoreMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 21 {
        return Err(Error::CheckpointTruncated("score map header".into()));
    }
    if &bytes[0..4] != SCORE_MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SCORE_VERSION {
        return Err(Error::CheckpointVersion(version, SCORE_VERSION));
    }
    let (w, h, k) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let kind = match bytes[20] {
        0 => ScoreKind::Logits,
        1 => ScoreKind::Probabilities,
        other => {
            return Err(Error::InvalidConfig(format!("unknown score kind byte {other}")));
        }
    };
    if w == 0 || h == 0 || k == 0 {
        return Err(Error::EmptyInput("zero-sized score map".into()));
    }
    let expected = 21 + w * h * k * 4;
    if bytes.len() != expected {
        return Err(Error::CheckpointTruncated(format!(
            "score data: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[21..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ScoreMap::new(w, h, k, kind, data))
}
