//! Shared domain types: the class taxonomy, dense raster containers and the
//! pixel-local operations every other module builds on. All types are
//! immutable after construction and the operations are pure functions.

use crate::error::{Error, Result};

/// Sentinel class index marking pixels excluded from loss and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// One class of the taxonomy: canonical index, display name and render color.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelEntry {
    pub index: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class taxonomy with contiguous indices `0..K-1` and pairwise
/// distinct render colors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    entries: Vec<LabelEntry>,
}

impl LabelSet {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidLabelSet("no classes".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(Error::InvalidLabelSet(format!(
                    "indices must be contiguous from 0; entry {i} has index {}",
                    e.index
                )));
            }
        }
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                if entries[i].color == entries[j].color {
                    return Err(Error::InvalidLabelSet(format!(
                        "classes {:?} and {:?} share color {:?}",
                        entries[i].name, entries[j].name, entries[i].color
                    )));
                }
            }
        }
        Ok(LabelSet { entries })
    }

    /// The 8-class UAVid taxonomy with the dataset's published color codes.
    pub fn uavid() -> Self {
        let spec: [(&str, [u8; 3]); 8] = [
            ("Clutter", [0, 0, 0]),
            ("Buildings", [128, 0, 0]),
            ("Road", [128, 64, 128]),
            ("Tree", [0, 128, 0]),
            ("Low vegetation", [128, 128, 0]),
            ("Moving car", [64, 0, 128]),
            ("Static car", [192, 0, 192]),
            ("Human", [64, 64, 0]),
        ];
        let entries = spec
            .iter()
            .enumerate()
            .map(|(i, (name, color))| LabelEntry {
                index: i as u8,
                name: (*name).to_string(),
                color: *color,
            })
            .collect();
        LabelSet::new(entries).expect("built-in palette is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn color_of(&self, index: u8) -> Option<[u8; 3]> {
        self.entries.get(index as usize).map(|e| e.color)
    }

    pub fn index_of_color(&self, color: [u8; 3]) -> Option<u8> {
        self.entries.iter().find(|e| e.color == color).map(|e| e.index)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        assert!(w >= 1 && h >= 1, "degenerate rect {w}x{h}");
        Rect { x, y, w, h }
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// Dense real-valued raster, row-major with channel-innermost layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl PlaneImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert!(width >= 1 && height >= 1, "degenerate image {width}x{height}");
        assert_eq!(data.len(), width * height * channels, "image buffer length");
        PlaneImage { width, height, channels, data }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        PlaneImage::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bit-exact crop of `rect`, which must lie inside the image.
    pub fn crop(&self, rect: Rect) -> PlaneImage {
        assert!(rect.x + rect.w <= self.width && rect.y + rect.h <= self.height);
        let mut data = Vec::with_capacity(rect.w * rect.h * self.channels);
        for y in rect.y..rect.y + rect.h {
            let start = (y * self.width + rect.x) * self.channels;
            data.extend_from_slice(&self.data[start..start + rect.w * self.channels]);
        }
        PlaneImage::new(rect.w, rect.h, self.channels, data)
    }

    /// Mirror columns: column `j` maps to `width-1-j` in every channel.
    pub fn flip_horizontal(&self) -> PlaneImage {
        let mut out = self.clone();
        flip_rows(&mut out.data, self.width, self.height, self.channels);
        out
    }
}

/// Per-pixel class-index raster. `IGNORE_INDEX` marks excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert!(width >= 1 && height >= 1, "degenerate mask {width}x{height}");
        assert_eq!(data.len(), width * height, "mask buffer length");
        ClassMask { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        ClassMask::new(width, height, vec![value; width * height])
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, rect: Rect) -> ClassMask {
        assert!(rect.x + rect.w <= self.width && rect.y + rect.h <= self.height);
        let mut data = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y..rect.y + rect.h {
            let start = y * self.width + rect.x;
            data.extend_from_slice(&self.data[start..start + rect.w]);
        }
        ClassMask::new(rect.w, rect.h, data)
    }

    pub fn flip_horizontal(&self) -> ClassMask {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Check every non-sentinel value against the label set's class count.
    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        let k = labels.num_classes() as u8;
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE_INDEX && v >= k {
                return Err(Error::MaskEncode {
                    index: v,
                    x: i % self.width,
                    y: i / self.width,
                    num_classes: k as usize,
                });
            }
        }
        Ok(())
    }
}

/// Whether a [`ScoreMap`] carries raw logits or normalized probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

/// Per-pixel per-class scores, row-major with class-innermost layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub kind: ScoreKind,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, classes: usize, kind: ScoreKind, data: Vec<f32>) -> Self {
        assert!(width >= 1 && height >= 1 && classes >= 1);
        assert_eq!(data.len(), width * height * classes, "score buffer length");
        let map = ScoreMap { width, height, classes, kind, data };
        debug_assert!(map.kind_invariant_holds(), "probability invariant violated");
        map
    }

    pub fn zeros(width: usize, height: usize, classes: usize, kind: ScoreKind) -> Self {
        ScoreMap { width, height, classes, kind, data: vec![0.0; width * height * classes] }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let base = (y * self.width + x) * self.classes;
        &self.data[base..base + self.classes]
    }

    /// Probabilities must lie in [0,1] and sum to 1 per pixel within 1e-5.
    pub fn kind_invariant_holds(&self) -> bool {
        match self.kind {
            ScoreKind::Logits => true,
            ScoreKind::Probabilities => self.data.chunks_exact(self.classes).all(|px| {
                let sum: f32 = px.iter().sum();
                px.iter().all(|&p| (0.0..=1.0 + 1e-6).contains(&p)) && (sum - 1.0).abs() <= 1e-5
            }),
        }
    }

    pub fn flip_horizontal(&self) -> ScoreMap {
        let mut out = self.clone();
        flip_rows(&mut out.data, self.width, self.height, self.classes);
        out
    }
}

fn flip_rows(data: &mut [f32], width: usize, height: usize, channels: usize) {
    for y in 0..height {
        let row = &mut data[y * width * channels..(y + 1) * width * channels];
        for x in 0..width / 2 {
            let (a, b) = (x * channels, (width - 1 - x) * channels);
            for c in 0..channels {
                row.swap(a + c, b + c);
            }
        }
    }
}

/// Numerically stable per-pixel softmax. Argmax per pixel is preserved and
/// class sums normalize to 1 within 1e-6.
pub fn softmax_pixelwise(m: &ScoreMap) -> Result<ScoreMap> {
    assert_eq!(m.kind, ScoreKind::Logits, "softmax_pixelwise expects logits");
    if !m.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax_pixelwise input".into()));
    }
    let mut data = m.data.clone();
    for px in data.chunks_exact_mut(m.classes) {
        softmax_in_place(px);
    }
    Ok(ScoreMap::new(m.width, m.height, m.classes, ScoreKind::Probabilities, data))
}

/// Max-subtracted softmax over one slice of scores.
pub fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in scores.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in scores.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn logits_map(w: usize, h: usize, k: usize, data: Vec<f32>) -> ScoreMap {
        ScoreMap::new(w, h, k, ScoreKind::Logits, data)
    }

    #[test]
    fn uavid_labelset_matches_table_order() {
        let ls = LabelSet::uavid();
        assert_eq!(ls.num_classes(), 8);
        let names: Vec<&str> = ls.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            ["Clutter", "Buildings", "Road", "Tree", "Low vegetation", "Moving car", "Static car", "Human"]
        );
        assert_eq!(ls.color_of(1), Some([128, 0, 0]));
        assert_eq!(ls.index_of_color([128, 64, 128]), Some(2));
    }

    #[test]
    fn labelset_rejects_duplicate_colors() {
        let entries = vec![
            LabelEntry { index: 0, name: "a".into(), color: [1, 2, 3] },
            LabelEntry { index: 1, name: "b".into(), color: [1, 2, 3] },
        ];
        assert!(LabelSet::new(entries).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let m = logits_map(1, 1, 2, vec![0.0, 0.0]);
        let p = softmax_pixelwise(&m).unwrap();
        assert_relative_eq!(p.data()[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(p.data()[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn softmax_huge_logits_no_overflow() {
        let m = logits_map(1, 1, 2, vec![1000.0, 1000.0]);
        let p = softmax_pixelwise(&m).unwrap();
        assert_relative_eq!(p.data()[0], 0.5, epsilon = 1e-6);
        assert!(p.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_closed_form() {
        // (ln 3, 0) -> (3/(3+1), 1/(3+1)) = (0.75, 0.25)
        let m = logits_map(1, 1, 2, vec![3.0f32.ln(), 0.0]);
        let p = softmax_pixelwise(&m).unwrap();
        assert_relative_eq!(p.data()[0], 0.75, epsilon = 1e-6);
        assert_relative_eq!(p.data()[1], 0.25, epsilon = 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = logits_map(1, 1, 2, vec![f32::NAN, 0.0]);
        assert!(softmax_pixelwise(&m).is_err());
    }

    #[test]
    fn flip_mask_definitional() {
        let m = ClassMask::new(2, 1, vec![7, 3]);
        assert_eq!(m.flip_horizontal().data(), &[3, 7]);
    }

    #[test]
    fn flip_width_one_is_fixed_point() {
        let img = PlaneImage::new(1, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(img.flip_horizontal(), img);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-10.0f32..10.0, 4),
            shift in -5.0f32..5.0,
        ) {
            let base = logits_map(1, 1, 4, logits.clone());
            let shifted = logits_map(1, 1, 4, logits.iter().map(|v| v + shift).collect());
            let a = softmax_pixelwise(&base).unwrap();
            let b = softmax_pixelwise(&shifted).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn flip_image_is_involution(
            w in 1usize..8, h in 1usize..8, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let img = PlaneImage::new(w, h, c, data);
            prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        }

        #[test]
        fn flip_mask_preserves_class_histogram(
            w in 1usize..10, h in 1usize..10, seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..8)).collect();
            let mask = ClassMask::new(w, h, data);
            let flipped = mask.flip_horizontal();
            let hist = |m: &ClassMask| {
                let mut counts = [0usize; 8];
                for &v in m.data() { counts[v as usize] += 1; }
                counts
            };
            prop_assert_eq!(hist(&mask), hist(&flipped));
        }
    }
}
