//! Structure measure: `alpha * S_object + (1 - alpha) * S_region`.
//!
//! Statistics are accumulated in two passes (means, then centred sums), so a
//! constant region has exactly zero variance. Variances use the `n - 1`
//! normalisation of the reference definition.

use ndarray::ArrayView2;

use super::check_pair;
use crate::error::Result;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Running sums for one region, taken relative to the region's first value
/// so that a constant region has exactly zero spread.
#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    p0: f64,
    g0: f64,
    sp: f64,
    sg: f64,
    vpp: f64,
    vgg: f64,
    vpg: f64,
}

impl Moments {
    fn push(&mut self, p: f64, g: f64) {
        if self.n == 0.0 {
            (self.p0, self.g0) = (p, g);
        }
        self.n += 1.0;
        self.sp += p - self.p0;
        self.sg += g - self.g0;
    }

    fn means(&self) -> (f64, f64) {
        (self.p0 + self.sp / self.n, self.g0 + self.sg / self.n)
    }

    fn push_centred(&mut self, p: f64, g: f64) {
        let dp = (p - self.p0) - self.sp / self.n;
        let dg = (g - self.g0) - self.sg / self.n;
        self.vpp += dp * dp;
        self.vgg += dg * dg;
        self.vpg += dp * dg;
    }

    /// SSIM-style similarity of the prediction and ground truth in a block.
    fn ssim(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        let (x, y) = self.means();
        let (vx, vy, cxy) = if self.n > 1.0 {
            let d = self.n - 1.0;
            (self.vpp / d, self.vgg / d, self.vpg / d)
        } else {
            (0.0, 0.0, 0.0)
        };
        let alpha = 4.0 * x * y * cxy;
        let beta = (x * x + y * y) * (vx + vy);
        if alpha != 0.0 {
            alpha / beta
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// `2 m / (m^2 + 1 + sd)` over the values of one class.
fn s_object(mut values: impl Iterator<Item = f64> + Clone) -> f64 {
    let Some(v0) = values.clone().next() else {
        return 0.0;
    };
    let (n, shifted) = values.clone().fold((0.0, 0.0), |(n, s), v| (n + 1.0, s + (v - v0)));
    let m = v0 + shifted / n;
    let sd = if n > 1.0 {
        let d = shifted / n;
        (values.by_ref().map(|v| ((v - v0) - d).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd)
}

fn object_score(s: &ArrayView2<f64>, g: &ArrayView2<f64>) -> f64 {
    let pairs = s.iter().zip(g.iter());
    let fg = pairs.clone().filter(|(_, &t)| t > 0.5).map(|(&p, _)| p);
    let bg = pairs.filter(|(_, &t)| t <= 0.5).map(|(&p, _)| 1.0 - p);
    let u = fg.clone().count() as f64 / s.len() as f64;
    u * s_object(fg) + (1.0 - u) * s_object(bg)
}

/// 1-based centroid `(x, y)` of the foreground, rounded half to even.
fn centroid(g: &ArrayView2<f64>) -> (usize, usize) {
    let (h, w) = g.dim();
    let (mut n, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for ((y, x), &v) in g.indexed_iter() {
        if v > 0.5 {
            n += 1.0;
            sy += y as f64;
            sx += x as f64;
        }
    }
    if n == 0.0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize,
            (h as f64 / 2.0).round_ties_even() as usize,
        );
    }
    (
        (sx / n).round_ties_even() as usize + 1,
        (sy / n).round_ties_even() as usize + 1,
    )
}

fn region_score(s: &ArrayView2<f64>, g: &ArrayView2<f64>) -> f64 {
    let (h, w) = g.dim();
    let (cx, cy) = centroid(g);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let quadrant = |y: usize, x: usize| match (y < cy, x < cx) {
        (true, true) => 0,
        (true, false) => 1,
        (false, true) => 2,
        (false, false) => 3,
    };
    let mut blocks = [Moments::default(); 4];
    for ((y, x), &p) in s.indexed_iter() {
        blocks[quadrant(y, x)].push(p, g[[y, x]]);
    }
    for ((y, x), &p) in s.indexed_iter() {
        blocks[quadrant(y, x)].push_centred(p, g[[y, x]]);
    }
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * blocks[0].ssim() + w2 * blocks[1].ssim() + w3 * blocks[2].ssim() + w4 * blocks[3].ssim()
}

/// Structure measure. An all-background `G` scores `1 - mean(S)`, an
/// all-foreground `G` scores `mean(S)`.
pub fn s_measure(s: ArrayView2<f64>, g: ArrayView2<f64>, alpha: f64) -> Result<f64> {
    check_pair(&s, &g)?;
    let n = g.len() as f64;
    let fg = g.iter().filter(|&&v| v > 0.5).count() as f64;
    let mean_s = s.sum() / n;
    if fg == 0.0 {
        return Ok(1.0 - mean_s);
    }
    if fg == n {
        return Ok(mean_s);
    }
    let q = alpha * object_score(&s, &g) + (1.0 - alpha) * region_score(&s, &g);
    Ok(q.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn constant_regions_score_as_perfectly_structured() {
        // The fg quadrant holds three copies of a value whose mean does not
        // round-trip through a naive sum; its SSIM must still be exactly 1.
        let g = Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let blend = |l: f64| g.mapv(|t| (1.0 - l) * t + l * (1.0 - t));
        let scores: Vec<f64> = [0.2739550471854807, 0.30209989833561424, 0.3756269483330145]
            .iter()
            .map(|&l| s_measure(blend(l).view(), g.view(), 0.5).unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }

    #[test]
    fn self_similarity_is_one() {
        let g = Array2::from_shape_fn((8, 8), |(y, x)| (y > 2 && x < 5) as u8 as f64);
        assert_eq!(s_measure(g.view(), g.view(), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_ground_truth_fallbacks() {
        let zeros = Array2::zeros((6, 6));
        let ones = Array2::from_elem((6, 6), 1.0);
        assert_eq!(s_measure(zeros.view(), zeros.view(), 0.5).unwrap(), 1.0);
        assert_eq!(s_measure(ones.view(), zeros.view(), 0.5).unwrap(), 0.0);
        assert_eq!(s_measure(ones.view(), ones.view(), 0.5).unwrap(), 1.0);
        let half = Array2::from_elem((6, 6), 0.5);
        assert_eq!(s_measure(half.view(), ones.view(), 0.5).unwrap(), 0.5);
    }

    #[test]
    fn centroid_is_one_based_and_rounds_half_even() {
        // foreground at columns 1 and 2 -> mean column 1.5 rounds to 2
        let g = Array2::from_shape_fn((3, 4), |(y, x)| (y == 0 && (x == 1 || x == 2)) as u8 as f64);
        assert_eq!(centroid(&g.view()), (3, 1));
    }
}
