//! Metric definitions written out pixel by pixel, with two-pass statistics,
//! a brute-force nearest-foreground search and a direct 49-tap Gaussian.

use ndarray::Array2;

pub fn mae(s: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for (a, b) in s.iter().zip(g.iter()) {
        acc += (a - b).abs();
    }
    acc / s.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    if constant(v) {
        return v[0];
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Sample variance, 0 below two values or for a constant vector.
fn var(v: &[f64]) -> f64 {
    if v.len() < 2 || constant(v) {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 || constant(a) || constant(b) {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn object(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    2.0 * m / (m * m + 1.0 + var(v).sqrt())
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let (x, y) = (mean(p), mean(g));
    let alpha = 4.0 * x * y * cov(p, g);
    let beta = (x * x + y * y) * (var(p) + var(g));
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(s: &Array2<f64>, g: &Array2<f64>, alpha: f64) -> f64 {
    let (h, w) = s.dim();
    let fg: Vec<f64> = s.iter().zip(g.iter()).filter(|(_, &t)| t > 0.5).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = s.iter().zip(g.iter()).filter(|(_, &t)| t <= 0.5).map(|(&p, _)| 1.0 - p).collect();
    if fg.is_empty() {
        return 1.0 - mean(&s.iter().copied().collect::<Vec<_>>());
    }
    if bg.is_empty() {
        return mean(&s.iter().copied().collect::<Vec<_>>());
    }
    let u = fg.len() as f64 / (h * w) as f64;
    let so = u * object(&fg) + (1.0 - u) * object(&bg);

    let coords: Vec<(usize, usize)> = g.indexed_iter().filter(|(_, &t)| t > 0.5).map(|(p, _)| p).collect();
    let my = coords.iter().map(|c| c.0 as f64).sum::<f64>() / coords.len() as f64;
    let mx = coords.iter().map(|c| c.1 as f64).sum::<f64>() / coords.len() as f64;
    let cy = my.round_ties_even() as usize + 1;
    let cx = mx.round_ties_even() as usize + 1;
    let quads = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    let mut sr = 0.0;
    for (ys, xs) in quads {
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for y in ys.clone() {
            for x in xs.clone() {
                p.push(s[[y, x]]);
                t.push(g[[y, x]]);
            }
        }
        let weight = (ys.len() * xs.len()) as f64 / (h * w) as f64;
        sr += weight * ssim(&p, &t);
    }
    (alpha * so + (1.0 - alpha) * sr).max(0.0)
}

/// Enhanced alignment of the prediction binarised at `S >= thr`.
pub fn e_at(s: &Array2<f64>, g: &Array2<f64>, thr: f64) -> f64 {
    let n = s.len() as f64;
    let b = s.mapv(|v| (v >= thr) as u8 as f64);
    let gt_fg = g.sum();
    let enhanced = if gt_fg == 0.0 {
        b.mapv(|v| 1.0 - v)
    } else if gt_fg == n {
        b
    } else {
        let mb = b.sum() / n;
        let mg = gt_fg / n;
        Array2::from_shape_fn(s.dim(), |p| {
            let a = b[p] - mb;
            let c = g[p] - mg;
            let den = a * a + c * c;
            let align = if den == 0.0 { 0.0 } else { 2.0 * a * c / den };
            (align + 1.0).powi(2) / 4.0
        })
    };
    enhanced.sum() / n
}

pub fn e_mean(s: &Array2<f64>, g: &Array2<f64>) -> f64 {
    (0..256).map(|t| e_at(s, g, (t as f64 + 0.5) / 256.0)).sum::<f64>() / 256.0
}

pub fn e_adaptive(s: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let thr = (2.0 * s.mean().unwrap()).min(1.0);
    e_at(s, g, thr)
}

pub fn weighted_f(s: &Array2<f64>, g: &Array2<f64>, beta2: f64) -> f64 {
    let (h, w) = s.dim();
    let fg: Vec<(usize, usize)> = g.indexed_iter().filter(|(_, &t)| t > 0.5).map(|(p, _)| p).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let e = Array2::from_shape_fn((h, w), |p| (s[p] - g[p]).abs());
    let mut et = e.clone();
    let mut dist = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if g[[y, x]] > 0.5 {
                continue;
            }
            let best = fg
                .iter()
                .map(|&(r, c)| (r.abs_diff(y).pow(2) + c.abs_diff(x).pow(2), r, c))
                .min()
                .unwrap();
            et[[y, x]] = e[[best.1, best.2]];
            dist[[y, x]] = (best.0 as f64).sqrt();
        }
    }
    let mut kernel = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *k = (-(dy * dy + dx * dx) / 50.0).exp();
            ksum += *k;
        }
    }
    let ea = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for (i, row) in kernel.iter().enumerate() {
            for (j, k) in row.iter().enumerate() {
                let yy = y as isize + i as isize - 3;
                let xx = x as isize + j as isize - 3;
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += k / ksum * et[[yy as usize, xx as usize]];
                }
            }
        }
        acc
    });
    let (mut ew_fg, mut ew_bg) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[[y, x]] > 0.5 {
                ew_fg += ea[[y, x]].min(e[[y, x]]);
            } else {
                let b = 2.0 - ((0.5f64).ln() / 5.0 * dist[[y, x]]).exp();
                ew_bg += e[[y, x]] * b;
            }
        }
    }
    let n_fg = fg.len() as f64;
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = if tpw + ew_bg == 0.0 { 0.0 } else { tpw / (tpw + ew_bg) };
    if r + beta2 * p == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * r * p / (r + beta2 * p)
    }
}
