//! Target-span machinery: token-level diffing of hallucinated and revised
//! responses, label masks restricted to those spans, and noise masking of the
//! image region that the target depends on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, GridImage};
use crate::numerics::Tensor;

/// Half-open token range `[start, end)` inside one response.
///
/// A span is normally nonempty. A zero-width span marks the point where the
/// other response has tokens this one lacks (a pure insertion), so that span
/// lists stay paired one-to-one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TargetSpan {
    pub start: usize,
    pub end: usize,
}

impl TargetSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

impl From<[usize; 2]> for TargetSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TargetSpan> for [usize; 2] {
    fn from(s: TargetSpan) -> Self {
        [s.start, s.end]
    }
}

/// Checks that `spans` are ordered, disjoint and inside `[0, len]`.
pub fn validate_spans(spans: &[TargetSpan], len: usize) -> std::result::Result<(), String> {
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start > s.end || s.end > len {
            return Err(format!("span {i} [{}, {}) invalid for length {len}", s.start, s.end));
        }
        if i > 0 && s.start < prev_end {
            return Err(format!("span {i} overlaps or precedes span {}", i - 1));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Paired target spans for a hallucinated (`spans_h`) and revised (`spans_r`)
/// response. The i-th entries of both lists describe the same differing chunk.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub spans_h: Vec<TargetSpan>,
    pub spans_r: Vec<TargetSpan>,
}

impl SpanAnnotation {
    pub fn is_empty(&self) -> bool {
        self.spans_h.is_empty() && self.spans_r.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.spans_h.iter().chain(&self.spans_r).map(TargetSpan::len).sum()
    }

    /// Validates spans against the two responses; returns the offending field.
    pub fn validate(&self, len_h: usize, len_r: usize) -> std::result::Result<(), (&'static str, String)> {
        validate_spans(&self.spans_h, len_h).map_err(|e| ("spans_h", e))?;
        validate_spans(&self.spans_r, len_r).map_err(|e| ("spans_r", e))?;
        if self.spans_h.len() != self.spans_r.len() {
            return Err((
                "spans_r",
                format!("{} spans vs {} in spans_h", self.spans_r.len(), self.spans_h.len()),
            ));
        }
        for (i, (h, r)) in self.spans_h.iter().zip(&self.spans_r).enumerate() {
            if h.is_empty() && r.is_empty() {
                return Err(("spans_h", format!("chunk {i} is empty in both responses")));
            }
        }
        Ok(())
    }
}

/// Index pairs `(i, j)` with `a[i] == b[j]` forming one longest common
/// subsequence, in increasing order.
pub fn lcs_pairs<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix table: table[i][j] = LCS length of a[i..], b[j..]
    let w = m + 1;
    let mut table = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i * w + j] = if a[i] == b[j] {
                table[(i + 1) * w + j + 1] + 1
            } else {
                table[(i + 1) * w + j].max(table[i * w + j + 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(table[0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if table[(i + 1) * w + j] >= table[i * w + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

/// Diffs two responses at token level. Every maximal run of tokens outside
/// the longest common subsequence becomes one chunk, paired positionally.
///
/// Identical inputs yield an empty annotation.
pub fn extract_target_spans<T: PartialEq>(y_h: &[T], y_r: &[T]) -> Result<SpanAnnotation> {
    if y_h.is_empty() || y_r.is_empty() {
        return Err(Error::Input("both responses must be nonempty".into()));
    }
    let mut ann = SpanAnnotation::default();
    let (mut ph, mut pr) = (0, 0);
    let sentinel = (y_h.len(), y_r.len());
    for (i, j) in lcs_pairs(y_h, y_r).into_iter().chain(std::iter::once(sentinel)) {
        if i > ph || j > pr {
            ann.spans_h.push(TargetSpan::new(ph, i));
            ann.spans_r.push(TargetSpan::new(pr, j));
        }
        ph = i + 1;
        pr = j + 1;
    }
    Ok(ann)
}

/// Per-token weights restricted to target spans, cut after the last span.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    /// 0/1 weights for positions `0..truncate_at`.
    pub weights: Vec<f64>,
    pub truncate_at: usize,
}

impl LabelMask {
    pub fn is_degenerate(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }
}

/// Marks non-target positions as ignored and truncates after the final
/// target position.
pub fn label_mask(response_len: usize, spans: &[TargetSpan]) -> Result<LabelMask> {
    if spans.is_empty() {
        return Err(Error::DegenerateTarget("no target spans".into()));
    }
    validate_spans(spans, response_len).map_err(Error::Input)?;
    let truncate_at = spans.last().map(|s| s.end).unwrap_or(0);
    let weights = (0..truncate_at)
        .map(|i| if spans.iter().any(|s| s.contains(i)) { 1.0 } else { 0.0 })
        .collect();
    Ok(LabelMask {
        weights,
        truncate_at,
    })
}

/// Replaces the features of every cell inside `bbox` by Gaussian noise with
/// standard deviation `sigma`; other cells are copied unchanged.
///
/// The noise for cell `c` comes from a ChaCha stream keyed by `(seed, c)`.
pub fn noisy_mask_features(
    features: &Tensor,
    g: usize,
    bbox: &BoundingBox,
    sigma: f64,
    seed: u64,
) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if features.rank() != 2 || features.shape()[0] != g * g {
        return Err(Error::Shape {
            op: "noisy_mask",
            lhs: features.shape().to_vec(),
            rhs: vec![g * g],
        });
    }
    bbox.validate(g).map_err(|e| Error::Input(e.to_string()))?;
    let width = features.shape()[1];
    let mut out = features.clone();
    for row in bbox.r0..bbox.r1 {
        for col in bbox.c0..bbox.c1 {
            let cell = row * g + col;
            let dst = &mut out.data_mut()[cell * width..(cell + 1) * width];
            if sigma == 0.0 {
                dst.fill(0.0);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(cell as u64);
            for v in dst.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sigma * z;
            }
        }
    }
    Ok(out)
}

pub fn noisy_mask(
    img: &GridImage,
    classes: usize,
    attributes: usize,
    bbox: &BoundingBox,
    sigma: f64,
    seed: u64,
) -> Result<Tensor> {
    let features = img.features(classes, attributes)?;
    noisy_mask_features(&features, img.g, bbox, sigma, seed)
}

/// Removes the tokens covered by `spans`.
pub fn remove_spans<T: Clone>(tokens: &[T], spans: &[TargetSpan]) -> Vec<T> {
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !spans.iter().any(|s| s.contains(*i)))
        .map(|(_, t)| t.clone())
        .collect()
}

/// Convenience for whitespace-tokenized text.
pub fn whitespace_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cell;

    fn sp(v: &[(usize, usize)]) -> Vec<TargetSpan> {
        v.iter().map(|&(s, e)| TargetSpan::new(s, e)).collect()
    }

    #[test]
    fn clock_example() {
        let h = whitespace_tokens("The clock reads approximately 11:20");
        let r = whitespace_tokens("The clock reads approximately 15:26");
        let ann = extract_target_spans(&h, &r).unwrap();
        assert_eq!(ann.spans_h, sp(&[(4, 5)]));
        assert_eq!(ann.spans_r, sp(&[(4, 5)]));
    }

    #[test]
    fn identical_sequences_give_empty_annotation() {
        let a = [1, 2, 3];
        assert!(extract_target_spans(&a, &a).unwrap().is_empty());
    }

    #[test]
    fn two_chunks() {
        let h = ["A", "X", "B", "Y"];
        let r = ["A", "P", "Q", "B", "Z"];
        let ann = extract_target_spans(&h, &r).unwrap();
        assert_eq!(ann.spans_h, sp(&[(1, 2), (3, 4)]));
        assert_eq!(ann.spans_r, sp(&[(1, 3), (4, 5)]));
    }

    #[test]
    fn insertion_gets_zero_width_partner() {
        let h = ["A", "B"];
        let r = ["A", "X", "B"];
        let ann = extract_target_spans(&h, &r).unwrap();
        assert_eq!(ann.spans_h, sp(&[(1, 1)]));
        assert_eq!(ann.spans_r, sp(&[(1, 2)]));
        assert!(ann.validate(2, 3).is_ok());
    }

    #[test]
    fn empty_input_rejected() {
        let e: [u32; 0] = [];
        assert!(extract_target_spans(&e, &[1]).is_err());
    }

    #[test]
    fn label_mask_examples() {
        let m = label_mask(5, &sp(&[(4, 5)])).unwrap();
        assert_eq!(m.weights, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.truncate_at, 5);

        let m = label_mask(5, &sp(&[(0, 5)])).unwrap();
        assert_eq!(m.weights, vec![1.0; 5]);

        let m = label_mask(6, &sp(&[(1, 2), (3, 4)])).unwrap();
        assert_eq!(m.weights, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.truncate_at, 4);
    }

    #[test]
    fn label_mask_rejects_empty_and_bad_spans() {
        assert!(matches!(label_mask(5, &[]), Err(Error::DegenerateTarget(_))));
        assert!(label_mask(3, &sp(&[(2, 4)])).is_err());
        assert!(label_mask(6, &sp(&[(3, 4), (1, 2)])).is_err());
    }

    fn grid4() -> GridImage {
        let mut img = GridImage::filled(4, Cell { obj: 0, attr: 0 });
        *img.cell_mut(1, 2) = Cell { obj: 2, attr: 5 };
        img
    }

    #[test]
    fn zero_area_box_is_identity() {
        let img = grid4();
        let f = img.features(4, 8).unwrap();
        let out = noisy_mask(&img, 4, 8, &BoundingBox::new(2, 2, 2, 2), 1.0, 9).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn full_box_with_zero_sigma_zeroes_everything() {
        let img = grid4();
        let out = noisy_mask(&img, 4, 8, &BoundingBox::new(0, 0, 4, 4), 0.0, 9).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_box_alters_exactly_four_cells() {
        let img = grid4();
        let f = img.features(4, 8).unwrap();
        let bbox = BoundingBox::new(1, 1, 3, 3);
        let out = noisy_mask(&img, 4, 8, &bbox, 1.0, 1234).unwrap();
        let again = noisy_mask(&img, 4, 8, &bbox, 1.0, 1234).unwrap();
        assert_eq!(out.data(), again.data());
        let changed = (0..16).filter(|&c| out.row(c) != f.row(c)).count();
        assert_eq!(changed, 4);
        for c in 0..16 {
            if !bbox.contains(c / 4, c % 4) {
                assert_eq!(out.row(c), f.row(c));
            }
        }
    }

    #[test]
    fn out_of_range_box_rejected() {
        let img = grid4();
        assert!(matches!(
            noisy_mask(&img, 4, 8, &BoundingBox::new(0, 0, 5, 1), 1.0, 0),
            Err(Error::Input(_))
        ));
        assert!(noisy_mask(&img, 4, 8, &BoundingBox::cell(0, 0), -1.0, 0).is_err());
    }
}
