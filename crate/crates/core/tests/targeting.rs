//! Span extraction against a brute-force LCS, label masks and the noisy-mask
//! contract.

use proptest::prelude::*;
use tldpo::model::{BoundingBox, Cell, GridImage};
use tldpo::targeting::{extract_target_spans, label_mask, noisy_mask, remove_spans, whitespace_tokens, TargetSpan};

/// Longest common subsequence length by enumerating every subsequence of
/// the shorter input.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |s: &[u8]| {
        let mut it = long.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << short.len())
        .filter_map(|bits| {
            let s: Vec<u8> = (0..short.len()).filter(|i| bits >> i & 1 == 1).map(|i| short[i]).collect();
            is_subseq(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn covered(spans: &[TargetSpan]) -> usize {
    spans.iter().map(TargetSpan::len).sum()
}

#[test]
fn clock_sentence() {
    let h = whitespace_tokens("The clock in the image shows 3 o'clock .");
    let r = whitespace_tokens("The clock in the image shows 10 o'clock .");
    let a = extract_target_spans(&h, &r).unwrap();
    assert_eq!(a.spans_h, vec![TargetSpan::new(6, 7)]);
    assert_eq!(a.spans_r, vec![TargetSpan::new(6, 7)]);
}

#[test]
fn two_chunks_with_different_lengths() {
    let h = [1u8, 2, 9, 9, 3, 4, 8];
    let r = [1u8, 2, 7, 3, 4, 5, 6];
    let a = extract_target_spans(&h, &r).unwrap();
    assert_eq!(a.spans_h, vec![TargetSpan::new(2, 4), TargetSpan::new(6, 7)]);
    assert_eq!(a.spans_r, vec![TargetSpan::new(2, 3), TargetSpan::new(5, 7)]);
}

#[test]
fn label_mask_truncates_after_last_span() {
    let m = label_mask(8, &[TargetSpan::new(1, 2), TargetSpan::new(4, 6)]).unwrap();
    assert_eq!(m.weights, vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    assert_eq!(m.truncate_at, 6);
    assert!(label_mask(8, &[]).is_err());
    assert!(label_mask(3, &[TargetSpan::new(2, 5)]).is_err());
}

fn image(g: usize, seed: u64) -> GridImage {
    let cells = (0..g * g)
        .map(|i| Cell {
            obj: ((i as u64 * 7 + seed) % 4) as u32,
            attr: ((i as u64 * 5 + seed / 3) % 8) as u32,
        })
        .collect();
    GridImage::new(g, cells).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn diff_is_sound_and_minimal(
        h in prop::collection::vec(0u8..4, 1..=10),
        r in prop::collection::vec(0u8..4, 1..=10),
    ) {
        let a = extract_target_spans(&h, &r).unwrap();
        prop_assert_eq!(a.spans_h.len(), a.spans_r.len());
        prop_assert!(a.validate(h.len(), r.len()).is_ok());
        prop_assert_eq!(remove_spans(&h, &a.spans_h), remove_spans(&r, &a.spans_r));
        let l = brute_lcs(&h, &r);
        prop_assert_eq!(covered(&a.spans_h), h.len() - l);
        prop_assert_eq!(covered(&a.spans_r), r.len() - l);
        prop_assert_eq!(a.is_empty(), h == r);
    }

    #[test]
    fn label_mask_marks_exactly_the_spans(len in 1usize..20, cuts in prop::collection::btree_set(0usize..20, 2..8)) {
        let cuts: Vec<usize> = cuts.into_iter().filter(|&c| c <= len).collect();
        let spans: Vec<TargetSpan> = cuts.chunks_exact(2).map(|c| TargetSpan::new(c[0], c[1])).collect();
        prop_assume!(!spans.is_empty());
        let m = label_mask(len, &spans).unwrap();
        prop_assert_eq!(m.truncate_at, spans.last().unwrap().end);
        for (i, &w) in m.weights.iter().enumerate() {
            prop_assert_eq!(w == 1.0, spans.iter().any(|s| s.contains(i)));
        }
    }

    #[test]
    fn noise_stays_inside_the_box(
        g in 1usize..6, seed in any::<u64>(), img_seed in 0u64..100, sigma in 0.0f64..3.0,
        r0 in 0usize..6, c0 in 0usize..6, h in 0usize..6, w in 0usize..6,
    ) {
        let (r0, c0) = (r0 % g, c0 % g);
        let b = BoundingBox::new(r0, c0, (r0 + h).min(g), (c0 + w).min(g));
        let img = image(g, img_seed);
        let clean = img.features(4, 8).unwrap();
        let a = noisy_mask(&img, 4, 8, &b, sigma, seed).unwrap();
        let again = noisy_mask(&img, 4, 8, &b, sigma, seed).unwrap();
        prop_assert_eq!(a.data(), again.data());
        for cell in 0..g * g {
            let row = &a.data()[cell * 12..(cell + 1) * 12];
            if !b.contains(cell / g, cell % g) {
                prop_assert_eq!(row, &clean.data()[cell * 12..(cell + 1) * 12]);
            }
        }
    }
}
