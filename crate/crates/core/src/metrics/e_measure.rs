//! Enhanced-alignment measure.
//!
//! A binarised prediction `B` and the ground truth `G` are mean-centred into
//! `a = B - mean(B)` and `b = G - mean(G)`. Each pixel scores
//! `((2ab / (a^2 + b^2)) + 1)^2 / 4` (0 where both are zero) and the map score
//! is the mean over all `N` pixels. Since a binary pair takes at most four
//! `(a, b)` combinations, the optimized path only needs the four joint counts
//! per threshold.
//!
//! The mean variant sweeps 256 thresholds placed at the centres of 256 equal
//! bins of `[0, 1]`, so a binary prediction is never thresholded into a
//! constant map.

use ndarray::ArrayView2;

use super::check_pair;
use crate::error::Result;

pub const THRESHOLDS: usize = 256;

/// The `t`-th threshold, `t` in `0..THRESHOLDS`.
pub fn threshold(t: usize) -> f64 {
    (t as f64 + 0.5) / THRESHOLDS as f64
}

fn align_term(a: f64, b: f64) -> f64 {
    let den = a * a + b * b;
    let align = if den == 0.0 { 0.0 } else { 2.0 * a * b / den };
    (align + 1.0) * (align + 1.0) / 4.0
}

/// Map score from counts: `n` pixels, `gt_fg` foreground in `G`, `pred_fg`
/// foreground in `B`, `tp` foreground in both.
fn score_counts(n: usize, gt_fg: usize, pred_fg: usize, tp: usize) -> f64 {
    if gt_fg == 0 {
        return (n - pred_fg) as f64 / n as f64;
    }
    if gt_fg == n {
        return pred_fg as f64 / n as f64;
    }
    let nf = n as f64;
    let mp = pred_fg as f64 / nf;
    let mg = gt_fg as f64 / nf;
    let parts = [
        (1.0 - mp, 1.0 - mg, tp),
        (1.0 - mp, -mg, pred_fg - tp),
        (-mp, 1.0 - mg, gt_fg - tp),
        (-mp, -mg, n + tp - pred_fg - gt_fg),
    ];
    parts
        .iter()
        .map(|&(a, b, c)| if c == 0 { 0.0 } else { align_term(a, b) * c as f64 })
        .sum::<f64>()
        / nf
}

/// Score of the prediction binarised at `S >= thr`.
pub fn e_measure_at(s: ArrayView2<f64>, g: ArrayView2<f64>, thr: f64) -> Result<f64> {
    check_pair(&s, &g)?;
    let (mut gt_fg, mut pred_fg, mut tp) = (0, 0, 0);
    for (&p, &t) in s.iter().zip(g.iter()) {
        let gf = t > 0.5;
        let pf = p >= thr;
        gt_fg += gf as usize;
        pred_fg += pf as usize;
        tp += (gf && pf) as usize;
    }
    Ok(score_counts(s.len(), gt_fg, pred_fg, tp))
}

/// Index of the largest threshold not above `v`, or `None` when `v` is
/// below every threshold.
fn bin(v: f64) -> Option<usize> {
    let mut q = ((v * THRESHOLDS as f64 - 0.5).floor()).clamp(-1.0, (THRESHOLDS - 1) as f64) as i64;
    while q + 1 < THRESHOLDS as i64 && threshold((q + 1) as usize) <= v {
        q += 1;
    }
    while q >= 0 && threshold(q as usize) > v {
        q -= 1;
    }
    (q >= 0).then_some(q as usize)
}

/// Scores at every threshold, computed from two histograms.
pub fn e_measure_curve(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_pair(&s, &g)?;
    let mut hist_fg = [0usize; THRESHOLDS];
    let mut hist_bg = [0usize; THRESHOLDS];
    let mut gt_fg = 0;
    for (&p, &t) in s.iter().zip(g.iter()) {
        let gf = t > 0.5;
        gt_fg += gf as usize;
        if let Some(q) = bin(p) {
            if gf {
                hist_fg[q] += 1;
            } else {
                hist_bg[q] += 1;
            }
        }
    }
    let n = s.len();
    let mut curve = vec![0.0; THRESHOLDS];
    let (mut tp, mut fp) = (0, 0);
    for t in (0..THRESHOLDS).rev() {
        tp += hist_fg[t];
        fp += hist_bg[t];
        curve[t] = score_counts(n, gt_fg, tp + fp, tp);
    }
    Ok(curve)
}

/// Mean score over the threshold sweep.
pub fn e_measure(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    let curve = e_measure_curve(s, g)?;
    Ok(curve.iter().sum::<f64>() / THRESHOLDS as f64)
}

/// Score at the adaptive threshold `min(2 mean(S), 1)`.
pub fn e_measure_adaptive(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&s, &g)?;
    let thr = (2.0 * s.mean().unwrap_or(0.0)).min(1.0);
    e_measure_at(s, g, thr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn bins_agree_with_direct_comparison() {
        for k in 0..=4096 {
            let v = k as f64 / 4096.0;
            let direct = (0..THRESHOLDS).filter(|&t| threshold(t) <= v).max();
            assert_eq!(bin(v), direct, "v = {v}");
        }
        for t in 0..THRESHOLDS {
            assert_eq!(bin(threshold(t)), Some(t));
        }
    }

    #[test]
    fn curve_matches_direct_thresholding() {
        let s = Array2::from_shape_fn((9, 11), |(y, x)| ((y * 37 + x * 101) % 97) as f64 / 96.0);
        let g = Array2::from_shape_fn((9, 11), |(y, x)| (y + x < 9) as u8 as f64);
        let curve = e_measure_curve(s.view(), g.view()).unwrap();
        for t in [0, 17, 128, 200, 255] {
            let d = e_measure_at(s.view(), g.view(), threshold(t)).unwrap();
            assert!((curve[t] - d).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_ground_truth_rewards_empty_prediction() {
        let z = Array2::zeros((4, 4));
        assert_eq!(e_measure(z.view(), z.view()).unwrap(), 1.0);
        let o = Array2::from_elem((4, 4), 1.0);
        assert_eq!(e_measure(o.view(), z.view()).unwrap(), 0.0);
    }
}
