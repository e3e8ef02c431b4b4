//! Segmentation scoring: Rand indices from a contingency table, boundary
//! extraction and the boundary F-measure, Pearson correlation, and
//! multi-subject segment-count statistics.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{check_lattices, LabelMap, Lattice, ScalarField};

/// Conventional matching radius for boundary scoring, as a fraction of the
/// image diagonal.
pub const DEFAULT_BOUNDARY_TOL: f64 = 0.0075;

/// Joint label-count matrix between two partitions of the same pixels.
#[derive(Clone, Debug)]
pub struct ContingencyTable {
    counts: Array2<i64>,
    n: usize,
}

impl ContingencyTable {
    pub fn from_labels(a: &LabelMap, b: &LabelMap) -> Result<Self> {
        check_lattices(a.lattice(), b.lattice())?;
        let mut counts = Array2::<i64>::zeros((a.k(), b.k()));
        for (&la, &lb) in a.labels().iter().zip(b.labels()) {
            counts[[la as usize, lb as usize]] += 1;
        }
        Ok(Self {
            counts,
            n: a.labels().len(),
        })
    }

    pub fn counts(&self) -> &Array2<i64> {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn comb2(x: i64) -> i64 {
    x * (x - 1) / 2
}

/// Rand index and adjusted Rand index, computed exactly from the contingency
/// table in integer arithmetic with a single final division each.
///
/// The adjusted index's degenerate case (expected agreement equals maximal
/// agreement) is defined as 0.
pub fn rand_indices(a: &LabelMap, b: &LabelMap) -> Result<(f64, f64)> {
    let table = ContingencyTable::from_labels(a, b)?;
    let n = table.n() as i64;
    let total_pairs = comb2(n);
    if total_pairs == 0 {
        return Ok((1.0, 0.0));
    }

    let sum_ij: i64 = table.counts().iter().map(|&c| comb2(c)).sum();
    let sum_a: i64 = table
        .counts()
        .rows()
        .into_iter()
        .map(|r| comb2(r.sum()))
        .sum();
    let sum_b: i64 = table
        .counts()
        .columns()
        .into_iter()
        .map(|c| comb2(c.sum()))
        .sum();

    // Disagreeing pairs are split in exactly one of the two partitions.
    let disagreements = sum_a + sum_b - 2 * sum_ij;
    let ri = 1.0 - disagreements as f64 / total_pairs as f64;

    // ari = (index - expected) / (max - expected), cleared of denominators:
    // 2 (C2 sum_ij - sum_a sum_b) / (C2 (sum_a + sum_b) - 2 sum_a sum_b).
    let c2 = total_pairs as i128;
    let (sa, sb, sij) = (sum_a as i128, sum_b as i128, sum_ij as i128);
    let num = 2 * (c2 * sij - sa * sb);
    let den = c2 * (sa + sb) - 2 * sa * sb;
    let ari = if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((ri, ari))
}

/// One-pixel-thin boundary mask.
#[derive(Clone, Debug)]
pub struct BoundaryMap {
    lattice: Lattice,
    on: Vec<bool>,
}

impl BoundaryMap {
    pub fn new(lattice: Lattice, on: Vec<bool>) -> Result<Self> {
        if on.len() != lattice.n_pixels() {
            return Err(Error::DimMismatch {
                expected: lattice.n_pixels(),
                got: on.len(),
            });
        }
        Ok(Self { lattice, on })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn on(&self) -> &[bool] {
        &self.on
    }

    pub fn count(&self) -> usize {
        self.on.iter().filter(|&&b| b).count()
    }

    /// Indices (row, col) of marked pixels in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.on
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.lattice.coords(i))
            .collect()
    }
}

/// Boundary pixels of a label map. A pixel sits on a boundary when a
/// 4-neighbor carries a different label; of each such pair only the
/// lexicographically first pixel (the upper or left one) is marked, keeping
/// the trace one pixel thin.
pub fn boundary_from_labels(m: &LabelMap) -> BoundaryMap {
    let l = m.lattice();
    let (h, w) = (l.height(), l.width());
    let mut on = vec![false; l.n_pixels()];
    for r in 0..h {
        for c in 0..w {
            let here = m.at(r, c);
            if (c + 1 < w && m.at(r, c + 1) != here) || (r + 1 < h && m.at(r + 1, c) != here) {
                on[l.index(r, c)] = true;
            }
        }
    }
    BoundaryMap { lattice: l, on }
}

/// Greedy one-to-one matching of two pixel sets within a radius; returns
/// matched flags for each side. Candidate pairs are processed in increasing
/// (distance, first index, second index) order, exactly reproducible.
fn match_boundaries(
    pred: &[(usize, usize)],
    truth: &[(usize, usize)],
    tol: f64,
) -> (Vec<bool>, Vec<bool>) {
    let cell = tol.ceil().max(1.0) as i64;
    use std::collections::HashMap;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, &(r, c)) in truth.iter().enumerate() {
        grid.entry((r as i64 / cell, c as i64 / cell)).or_default().push(j);
    }

    let mut pairs: Vec<(i64, usize, usize)> = Vec::new();
    for (i, &(pr, pc)) in pred.iter().enumerate() {
        let (gr, gc) = (pr as i64 / cell, pc as i64 / cell);
        for dr in -1..=1 {
            for dc in -1..=1 {
                if let Some(cands) = grid.get(&(gr + dr, gc + dc)) {
                    for &j in cands {
                        let (tr, tc) = truth[j];
                        let d2 = (pr as i64 - tr as i64).pow(2) + (pc as i64 - tc as i64).pow(2);
                        if (d2 as f64) <= tol * tol {
                            pairs.push((d2, i, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();

    let mut pred_used = vec![false; pred.len()];
    let mut truth_used = vec![false; truth.len()];
    for (_, i, j) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
        }
    }
    (pred_used, truth_used)
}

/// Boundary F-measure of a predicted boundary against one or more reference
/// boundaries. Precision counts predicted pixels matched in at least one
/// reference; recall averages the per-reference matched fraction; the match
/// radius is `tol_frac` of the image diagonal.
pub fn f_boundary(pred: &BoundaryMap, truths: &[BoundaryMap], tol_frac: f64) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::InvalidArgument(
            "boundary scoring needs at least one reference map".into(),
        ));
    }
    for t in truths {
        check_lattices(pred.lattice(), t.lattice())?;
    }
    let l = pred.lattice();
    let diag = ((l.height() * l.height() + l.width() * l.width()) as f64).sqrt();
    let tol = tol_frac * diag;

    let pred_px = pred.pixels();
    let mut pred_matched = vec![false; pred_px.len()];
    let mut recall_sum = 0.0;
    for t in truths {
        let truth_px = t.pixels();
        if truth_px.is_empty() {
            recall_sum += 1.0;
            continue;
        }
        let (p_used, t_used) = match_boundaries(&pred_px, &truth_px, tol);
        for (flag, used) in pred_matched.iter_mut().zip(&p_used) {
            *flag |= used;
        }
        recall_sum += t_used.iter().filter(|&&u| u).count() as f64 / truth_px.len() as f64;
    }

    let precision = if pred_px.is_empty() {
        1.0
    } else {
        pred_matched.iter().filter(|&&m| m).count() as f64 / pred_px.len() as f64
    };
    let recall = recall_sum / truths.len() as f64;
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

/// Sample Pearson correlation coefficient, clamped to [-1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Inclusive rectangular pixel window.
#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

/// Cross-subject segmentation statistics over an optional window.
#[derive(Clone, Copy, Debug)]
pub struct SubjectStats {
    pub mean_segments: f64,
    pub sd_segments: f64,
    pub mean_entropy: Option<f64>,
}

/// Segment-count mean and sample standard deviation across several human
/// segmentations of the same image, restricted to `window` when given, and
/// optionally paired with the mean of a model entropy map over that window.
pub fn subject_stats(
    maps: &[LabelMap],
    window: Option<Rect>,
    entropy: Option<&ScalarField>,
) -> Result<SubjectStats> {
    if maps.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: maps.len(),
        });
    }
    let l = maps[0].lattice();
    for m in &maps[1..] {
        check_lattices(l, m.lattice())?;
    }
    if let Some(w) = window {
        if w.height == 0
            || w.width == 0
            || w.top + w.height > l.height()
            || w.left + w.width > l.width()
        {
            return Err(Error::InvalidArgument(format!(
                "window {}x{}+{}+{} does not fit a {}x{} image",
                w.height,
                w.width,
                w.top,
                w.left,
                l.height(),
                l.width()
            )));
        }
    }

    let counts: Vec<f64> = maps
        .iter()
        .map(|m| {
            let mut seen = vec![false; m.k()];
            for i in 0..l.n_pixels() {
                let (r, c) = l.coords(i);
                if window.is_none_or(|w| w.contains(r, c)) {
                    seen[m.labels()[i] as usize] = true;
                }
            }
            seen.iter().filter(|&&s| s).count() as f64
        })
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);

    let mean_entropy = match entropy {
        None => None,
        Some(e) => {
            check_lattices(l, e.lattice())?;
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..l.n_pixels() {
                let (r, c) = l.coords(i);
                if window.is_none_or(|w| w.contains(r, c)) {
                    total += e.data()[i];
                    count += 1;
                }
            }
            Some(total / count as f64)
        }
    };

    Ok(SubjectStats {
        mean_segments: mean,
        sd_segments: var.sqrt(),
        mean_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from(labels: Vec<u32>, h: usize, w: usize) -> LabelMap {
        let k = labels.iter().max().unwrap() + 1;
        LabelMap::new(Lattice::new(h, w).unwrap(), labels, k).unwrap()
    }

    /// O(n^2) pair-counting reference for both Rand indices.
    fn brute_force_rand(a: &[u32], b: &[u32]) -> (f64, f64) {
        let n = a.len();
        let mut agree = 0i64;
        let mut both_same = 0i64;
        let mut same_a = 0i64;
        let mut same_b = 0i64;
        let mut total = 0i64;
        for i in 0..n {
            for j in (i + 1)..n {
                total += 1;
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                if sa == sb {
                    agree += 1;
                }
                if sa && sb {
                    both_same += 1;
                }
                if sa {
                    same_a += 1;
                }
                if sb {
                    same_b += 1;
                }
            }
        }
        let ri = agree as f64 / total as f64;
        let expected = same_a as f64 * same_b as f64 / total as f64;
        let max = 0.5 * (same_a + same_b) as f64;
        let ari = if (max - expected).abs() == 0.0 {
            0.0
        } else {
            (both_same as f64 - expected) / (max - expected)
        };
        (ri, ari)
    }

    #[test]
    fn identical_partitions_score_one() {
        let a = map_from(vec![0, 1, 1, 2, 0, 2], 2, 3);
        let (ri, ari) = rand_indices(&a, &a).unwrap();
        assert_abs_diff_eq!(ri, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(ari, 1.0, epsilon = 0.0);
    }

    #[test]
    fn one_block_vs_singletons() {
        let a = map_from(vec![0, 0, 0, 0], 1, 4);
        let b = map_from(vec![0, 1, 2, 3], 1, 4);
        let (ri, ari) = rand_indices(&a, &b).unwrap();
        assert_abs_diff_eq!(ri, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(ari, 0.0, epsilon = 0.0);
    }

    #[test]
    fn rand_indices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..500 {
            let n = rng.random_range(2..=12usize);
            let la: Vec<u32> = (0..n).map(|_| rng.random_range(0..4u32)).collect();
            let lb: Vec<u32> = (0..n).map(|_| rng.random_range(0..4u32)).collect();
            let (ri, ari) = rand_indices(&map_from(la.clone(), 1, n), &map_from(lb.clone(), 1, n))
                .unwrap();
            let (ri_ref, ari_ref) = brute_force_rand(&la, &lb);
            assert_abs_diff_eq!(ri, ri_ref, epsilon = 1e-12);
            assert_abs_diff_eq!(ari, ari_ref, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rand_indices_are_permutation_invariant(
            labels in proptest::collection::vec(0..5u32, 6..30),
            other in proptest::collection::vec(0..5u32, 6..30),
        ) {
            let n = labels.len().min(other.len());
            let a: Vec<u32> = labels[..n].to_vec();
            let b: Vec<u32> = other[..n].to_vec();
            // Permute a's label identities: relabel l -> (l * 3 + 1) % 5.
            let a_perm: Vec<u32> = a.iter().map(|&l| (l * 3 + 1) % 5).collect();
            let (ri1, ari1) = rand_indices(
                &map_from(a, 1, n), &map_from(b.clone(), 1, n)).unwrap();
            let (ri2, ari2) = rand_indices(
                &map_from(a_perm, 1, n), &map_from(b, 1, n)).unwrap();
            prop_assert!((ri1 - ri2).abs() < 1e-12);
            prop_assert!((ari1 - ari2).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_has_no_boundary() {
        let m = map_from(vec![0; 30], 5, 6);
        assert_eq!(boundary_from_labels(&m).count(), 0);
    }

    #[test]
    fn half_split_gives_single_column() {
        let l = Lattice::new(4, 6).unwrap();
        let labels: Vec<u32> = (0..24).map(|i| u32::from(i % 6 >= 3)).collect();
        let m = LabelMap::new(l, labels, 2).unwrap();
        let b = boundary_from_labels(&m);
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(b.on()[l.index(r, c)], c == 2, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn checkerboard_marks_all_but_last_corner() {
        let l = Lattice::new(4, 4).unwrap();
        let labels: Vec<u32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u32).collect();
        let m = LabelMap::new(l, labels, 2).unwrap();
        let b = boundary_from_labels(&m);
        for r in 0..4 {
            for c in 0..4 {
                let expect = !(r == 3 && c == 3);
                assert_eq!(b.on()[l.index(r, c)], expect, "pixel ({r},{c})");
            }
        }
    }

    fn column_boundary(l: Lattice, col: usize) -> BoundaryMap {
        let mut on = vec![false; l.n_pixels()];
        for r in 0..l.height() {
            on[l.index(r, col)] = true;
        }
        BoundaryMap::new(l, on).unwrap()
    }

    #[test]
    fn f_boundary_identity_is_one() {
        let l = Lattice::new(20, 30).unwrap();
        let b = column_boundary(l, 7);
        assert_abs_diff_eq!(
            f_boundary(&b, &[b.clone()], DEFAULT_BOUNDARY_TOL).unwrap(),
            1.0,
            epsilon = 0.0
        );
    }

    #[test]
    fn f_boundary_empty_pred_is_zero() {
        let l = Lattice::new(10, 10).unwrap();
        let empty = BoundaryMap::new(l, vec![false; 100]).unwrap();
        let truth = column_boundary(l, 4);
        assert_abs_diff_eq!(
            f_boundary(&empty, &[truth], DEFAULT_BOUNDARY_TOL).unwrap(),
            0.0,
            epsilon = 0.0
        );
    }

    #[test]
    fn f_boundary_tolerates_small_shift_only() {
        // 481 x 321 image: tolerance is 0.0075 * 578.3 = 4.34 pixels.
        let l = Lattice::new(321, 481).unwrap();
        let truth = column_boundary(l, 150);
        let near = column_boundary(l, 152);
        let far = column_boundary(l, 160);
        assert_abs_diff_eq!(
            f_boundary(&near, &[truth.clone()], DEFAULT_BOUNDARY_TOL).unwrap(),
            1.0,
            epsilon = 0.0
        );
        assert!(f_boundary(&far, &[truth], DEFAULT_BOUNDARY_TOL).unwrap() < 1.0);
    }

    #[test]
    fn f_boundary_drops_under_deletion() {
        let l = Lattice::new(50, 50).unwrap();
        let truth = column_boundary(l, 25);
        let mut thinned_on = truth.on().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = 1.0;
        for _ in 0..5 {
            // Delete a handful of remaining boundary pixels.
            for _ in 0..5 {
                let r = rng.random_range(0..50usize);
                thinned_on[l.index(r, 25)] = false;
            }
            let pred = BoundaryMap::new(l, thinned_on.clone()).unwrap();
            let f = f_boundary(&pred, &[truth.clone()], DEFAULT_BOUNDARY_TOL).unwrap();
            assert!(f <= prev + 1e-12, "F rose from {prev} to {f}");
            prev = f;
        }
        assert!(prev < 1.0);
    }

    #[test]
    fn pearson_exact_lines() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y_up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let y_down: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson(&x, &y_up).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&x, &y_down).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(
            pearson(&x, &[5.0, 5.0, 5.0]),
            Err(Error::ConstantInput)
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn subject_stats_sample_sd() {
        let l = Lattice::new(1, 6).unwrap();
        let maps = vec![
            LabelMap::new(l, vec![0, 1, 2, 3, 3, 3], 4).unwrap(),
            LabelMap::new(l, vec![0, 1, 2, 3, 4, 4], 5).unwrap(),
            LabelMap::new(l, vec![0, 1, 2, 3, 4, 5], 6).unwrap(),
        ];
        let s = subject_stats(&maps, None, None).unwrap();
        assert_abs_diff_eq!(s.mean_segments, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sd_segments, 1.0, epsilon = 1e-12);
        assert!(s.mean_entropy.is_none());
    }

    #[test]
    fn subject_stats_identical_maps_have_zero_sd() {
        let l = Lattice::new(2, 2).unwrap();
        let m = LabelMap::new(l, vec![0, 1, 0, 1], 2).unwrap();
        let s = subject_stats(&[m.clone(), m], None, None).unwrap();
        assert_abs_diff_eq!(s.sd_segments, 0.0, epsilon = 0.0);
    }

    #[test]
    fn subject_stats_windows_and_entropy() {
        let l = Lattice::new(2, 4).unwrap();
        // Left half: labels {0} in both maps; right half: {1} for map a,
        // {1, 2} for map b.
        let a = LabelMap::new(l, vec![0, 0, 1, 1, 0, 0, 1, 1], 2).unwrap();
        let b = LabelMap::new(l, vec![0, 0, 1, 2, 0, 0, 2, 1], 3).unwrap();
        let left = Rect {
            top: 0,
            left: 0,
            height: 2,
            width: 2,
        };
        let ent = ScalarField::new(l, vec![0.1, 0.2, 0.9, 0.8, 0.3, 0.4, 0.7, 0.6]).unwrap();
        let s = subject_stats(&[a.clone(), b.clone()], Some(left), Some(&ent)).unwrap();
        assert_abs_diff_eq!(s.mean_segments, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sd_segments, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_entropy.unwrap(), 0.25, epsilon = 1e-12);

        let right = Rect {
            top: 0,
            left: 2,
            height: 2,
            width: 2,
        };
        let s = subject_stats(&[a, b], Some(right), Some(&ent)).unwrap();
        assert_abs_diff_eq!(s.mean_segments, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sd_segments, 0.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_entropy.unwrap(), 0.75, epsilon = 1e-12);

        let bad = Rect {
            top: 1,
            left: 3,
            height: 2,
            width: 2,
        };
        let maps = vec![
            LabelMap::new(l, vec![0; 8], 1).unwrap(),
            LabelMap::new(l, vec![0; 8], 1).unwrap(),
        ];
        assert!(subject_stats(&maps, Some(bad), None).is_err());
    }
}
