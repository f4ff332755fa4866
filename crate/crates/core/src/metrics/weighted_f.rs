//! Weighted F-measure.
//!
//! Background errors are replaced by the error at the nearest foreground
//! pixel, smoothed with a 7x7 Gaussian (sigma 5, zero padding), kept only
//! where smoothing lowers a foreground error, and weighted by distance to
//! the object. Nearest-foreground ties resolve to the smallest
//! `(squared distance, row, column)`.

use ndarray::{Array2, ArrayView2};

use super::check_pair;
use crate::error::Result;

pub const DEFAULT_BETA2: f64 = 1.0;

const KERNEL_RADIUS: usize = 3;
const KERNEL_SIGMA: f64 = 5.0;

/// Normalised 1D factor of the separable 7x7 Gaussian.
pub(crate) fn gaussian_1d() -> [f64; 2 * KERNEL_RADIUS + 1] {
    let mut k = [0.0; 2 * KERNEL_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - KERNEL_RADIUS as f64;
        *v = (-(d * d) / (2.0 * KERNEL_SIGMA * KERNEL_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// For every pixel, the `(row, col)` of its nearest foreground pixel and the
/// Euclidean distance to it. `fg` must contain at least one `true`.
pub(crate) fn nearest_foreground(fg: &Array2<bool>) -> (Array2<(usize, usize)>, Array2<f64>) {
    let (h, w) = fg.dim();
    // nearest[y, x]: closest foreground row in column x (upper row on ties)
    let mut nearest: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for x in 0..w {
        let mut last = None;
        for y in 0..h {
            if fg[[y, x]] {
                last = Some(y);
            }
            nearest[[y, x]] = last;
        }
        let mut next = None;
        for y in (0..h).rev() {
            if fg[[y, x]] {
                next = Some(y);
            }
            nearest[[y, x]] = match (nearest[[y, x]], next) {
                (Some(a), Some(b)) => Some(if b - y < y - a { b } else { a }),
                (a, b) => a.or(b),
            };
        }
    }
    let mut idx = Array2::from_elem((h, w), (0, 0));
    let mut dist = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if fg[[y, x]] {
                idx[[y, x]] = (y, x);
                continue;
            }
            let mut best: Option<(usize, usize, usize)> = None;
            for xc in 0..w {
                if let Some(r) = nearest[[y, xc]] {
                    let d2 = r.abs_diff(y).pow(2) + xc.abs_diff(x).pow(2);
                    let cand = (d2, r, xc);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            let (d2, r, c) = best.expect("foreground is non-empty");
            idx[[y, x]] = (r, c);
            dist[[y, x]] = (d2 as f64).sqrt();
        }
    }
    (idx, dist)
}

/// Separable Gaussian smoothing with zero padding.
fn smooth(src: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_1d();
    let (h, w) = src.dim();
    let r = KERNEL_RADIUS as isize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if (0..w as isize).contains(&xx) {
                    acc += kv * src[[y, xx as usize]];
                }
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if (0..h as isize).contains(&yy) {
                    acc += kv * tmp[[yy as usize, x]];
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Weighted F-measure with `beta2` weighting recall against precision.
/// Returns 0 for a ground truth without foreground.
pub fn weighted_f(s: ArrayView2<f64>, g: ArrayView2<f64>, beta2: f64) -> Result<f64> {
    check_pair(&s, &g)?;
    let fg = g.mapv(|v| v > 0.5);
    let n_fg = fg.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return Ok(0.0);
    }
    let err = Array2::from_shape_fn(s.dim(), |(y, x)| (s[[y, x]] - g[[y, x]]).abs());
    let (idx, dist) = nearest_foreground(&fg);
    let et = Array2::from_shape_fn(s.dim(), |p| {
        let (r, c) = idx[p];
        err[[r, c]]
    });
    let ea = smooth(&et);
    let decay = 0.5f64.ln() / 5.0;
    let (mut sum_ew_fg, mut sum_ew_bg) = (0.0, 0.0);
    for ((p, &e), &is_fg) in err.indexed_iter().zip(fg.iter()) {
        if is_fg {
            sum_ew_fg += if ea[p] < e { ea[p] } else { e };
        } else {
            sum_ew_bg += e * (2.0 - (decay * dist[p]).exp());
        }
    }
    let tpw = n_fg as f64 - sum_ew_fg;
    let recall = 1.0 - sum_ew_fg / n_fg as f64;
    let precision = if tpw + sum_ew_bg == 0.0 {
        0.0
    } else {
        tpw / (tpw + sum_ew_bg)
    };
    let den = recall + beta2 * precision;
    Ok(if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * recall * precision / den
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_1d();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(k[i], k[6 - i]);
        }
    }

    #[test]
    fn nearest_foreground_tie_breaks_to_smallest_row_then_column() {
        let mut fg = Array2::from_elem((5, 5), false);
        fg[[0, 2]] = true;
        fg[[4, 2]] = true;
        fg[[2, 0]] = true;
        fg[[2, 4]] = true;
        let (idx, dist) = nearest_foreground(&fg);
        // the centre is 2 away from all four; (0, 2) wins on row
        assert_eq!(idx[[2, 2]], (0, 2));
        assert_eq!(dist[[2, 2]], 2.0);
        // (1, 1) is sqrt(2) from (0, 2) and (2, 0); row 0 wins
        assert_eq!(idx[[1, 1]], (0, 2));
        assert_eq!(idx[[0, 2]], (0, 2));
    }

    #[test]
    fn identities() {
        let g = Array2::from_shape_fn((12, 10), |(y, x)| (y > 3 && y < 9 && x > 2 && x < 7) as u8 as f64);
        assert_eq!(weighted_f(g.view(), g.view(), 1.0).unwrap(), 1.0);
        let inv = g.mapv(|v| 1.0 - v);
        assert!(weighted_f(inv.view(), g.view(), 1.0).unwrap() < 1e-9);
        let z = Array2::zeros((4, 4));
        assert_eq!(weighted_f(z.view(), z.view(), 1.0).unwrap(), 0.0);
    }
}
