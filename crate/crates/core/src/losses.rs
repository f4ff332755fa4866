//! Training objective: BCE + edge-aware smoothness + dice, unit weighted by
//! default. Each term comes with its analytic gradient with respect to the
//! predicted map. [`batch_loss`] combines them into the gradient with respect
//! to the decoder logits, which seeds the backward pass.

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tensor};
use crate::config::LossConfig;
use crate::error::{ensure, Result};

/// Clamp applied to predictions inside the log terms.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing in the dice ratio.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub smooth: f64,
    pub dice: f64,
    pub total: f64,
}

fn check_pair(s: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    ensure!(
        s.dim() == g.dim(),
        "prediction {:?} and mask {:?} differ in shape",
        s.dim(),
        g.dim()
    );
    Ok(())
}

pub fn bce_loss(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&s, &g)?;
    let sum: f64 = s
        .iter()
        .zip(g.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / s.len() as f64)
}

fn bce_grad(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Array2<f64> {
    let n = s.len() as f64;
    let mut out = Array2::zeros(s.dim());
    ndarray::Zip::from(&mut out).and(&s).and(&g).for_each(|o, &p, &t| {
        *o = if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
            0.0
        } else {
            (p - t) / (p * (1.0 - p)) / n
        };
    });
    out
}

fn edge_weights(img: &ArrayView3<f64>, alpha: f64) -> (Array2<f64>, Array2<f64>) {
    let (c, h, w) = img.dim();
    let mut wx = Array2::zeros((h, w.saturating_sub(1)));
    let mut wy = Array2::zeros((h.saturating_sub(1), w));
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let m = (0..c).map(|k| (img[[k, y, x + 1]] - img[[k, y, x]]).abs()).sum::<f64>() / c as f64;
                wx[[y, x]] = (-alpha * m).exp();
            }
            if y + 1 < h {
                let m = (0..c).map(|k| (img[[k, y + 1, x]] - img[[k, y, x]]).abs()).sum::<f64>() / c as f64;
                wy[[y, x]] = (-alpha * m).exp();
            }
        }
    }
    (wx, wy)
}

fn check_image(s: &ArrayView2<f64>, img: &ArrayView3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    ensure!(
        s.dim() == (h, w),
        "prediction {:?} and image {:?} differ in spatial shape",
        s.dim(),
        img.dim()
    );
    Ok(())
}

/// Mean over pixels of `|dx S| exp(-a mean_c |dx I|) + |dy S| exp(-a mean_c |dy I|)`
/// with forward differences.
pub fn smoothness_loss(s: ArrayView2<f64>, img: ArrayView3<f64>, alpha: f64) -> Result<f64> {
    check_image(&s, &img)?;
    let (h, w) = s.dim();
    let (wx, wy) = edge_weights(&img, alpha);
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                sum += (s[[y, x + 1]] - s[[y, x]]).abs() * wx[[y, x]];
            }
            if y + 1 < h {
                sum += (s[[y + 1, x]] - s[[y, x]]).abs() * wy[[y, x]];
            }
        }
    }
    Ok(sum / (h * w) as f64)
}

fn smoothness_grad(s: ArrayView2<f64>, img: ArrayView3<f64>, alpha: f64) -> Array2<f64> {
    let (h, w) = s.dim();
    let (wx, wy) = edge_weights(&img, alpha);
    let n = (h * w) as f64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let d = s[[y, x + 1]] - s[[y, x]];
                let g = d.signum() * (d != 0.0) as u8 as f64 * wx[[y, x]] / n;
                out[[y, x + 1]] += g;
                out[[y, x]] -= g;
            }
            if y + 1 < h {
                let d = s[[y + 1, x]] - s[[y, x]];
                let g = d.signum() * (d != 0.0) as u8 as f64 * wy[[y, x]] / n;
                out[[y + 1, x]] += g;
                out[[y, x]] -= g;
            }
        }
    }
    out
}

/// `1 - (2 sum(S G) + 1) / (sum S + sum G + 1)`.
pub fn dice_loss(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&s, &g)?;
    let inter: f64 = s.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (s.sum() + g.sum() + DICE_EPS))
}

fn dice_grad(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Array2<f64> {
    let inter: f64 = s.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let num = 2.0 * inter + DICE_EPS;
    let den = s.sum() + g.sum() + DICE_EPS;
    g.mapv(|t| -(2.0 * t * den - num) / (den * den))
}

/// All three terms for one map, weighted per `cfg`.
pub fn total_loss(s: ArrayView2<f64>, g: ArrayView2<f64>, img: ArrayView3<f64>, cfg: &LossConfig) -> Result<LossReport> {
    let bce = bce_loss(s, g)?;
    let smooth = smoothness_loss(s, img, cfg.alpha_smooth)?;
    let dice = dice_loss(s, g)?;
    Ok(LossReport {
        bce,
        smooth,
        dice,
        total: cfg.w_bce * bce + cfg.w_smooth * smooth + cfg.w_dice * dice,
    })
}

/// Gradient of [`total_loss`] with respect to `s`.
pub fn total_loss_grad(s: ArrayView2<f64>, g: ArrayView2<f64>, img: ArrayView3<f64>, cfg: &LossConfig) -> Result<Array2<f64>> {
    check_pair(&s, &g)?;
    check_image(&s, &img)?;
    let mut grad = bce_grad(s, g) * cfg.w_bce;
    grad.scaled_add(cfg.w_smooth, &smoothness_grad(s, img, cfg.alpha_smooth));
    grad.scaled_add(cfg.w_dice, &dice_grad(s, g));
    Ok(grad)
}

/// BCE evaluated on logits, `max(z, 0) - z t + ln(1 + exp(-|z|))`. Matches
/// [`bce_loss`] of `sigmoid(z)` wherever the clamp is inactive.
pub fn bce_logits_loss(z: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&z, &g)?;
    let sum: f64 = z
        .iter()
        .zip(g.iter())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / z.len() as f64)
}

/// Batch loss (mean of per-image reports) and its gradient with respect to
/// the logits.
///
/// The BCE term is differentiated directly in logit space, so a saturated
/// prediction still receives the full `sigmoid(z) - t` signal. The smoothness
/// and dice gradients are chained through the sigmoid.
///
/// `z`, `g`: `[N, 1, H, W]`; `img`: `[N, 3, H, W]`.
pub fn batch_loss(z: &Tensor, g: &Tensor, img: &Tensor, cfg: &LossConfig) -> Result<(LossReport, Tensor)> {
    ensure!(z.ndim() == 4 && z.shape()[1] == 1, "logits must be [N,1,H,W], got {:?}", z.shape());
    ensure!(z.shape() == g.shape(), "logits {:?} vs mask {:?}", z.shape(), g.shape());
    ensure!(
        img.ndim() == 4 && img.shape()[0] == z.shape()[0] && img.shape()[2..] == z.shape()[2..],
        "image {:?} does not match logits {:?}",
        img.shape(),
        z.shape()
    );
    let n = z.shape()[0];
    let z4 = z.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let i4 = img.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut report = LossReport::default();
    let mut grad = Array4::<f64>::zeros(z4.dim());
    for k in 0..n {
        let zk = z4.index_axis(Axis(0), k).index_axis_move(Axis(0), 0);
        let gk = g4.index_axis(Axis(0), k).index_axis_move(Axis(0), 0);
        let ik = i4.index_axis(Axis(0), k);
        let sk = zk.mapv(sigmoid);
        let bce = bce_logits_loss(zk, gk)?;
        let smooth = smoothness_loss(sk.view(), ik, cfg.alpha_smooth)?;
        let dice = dice_loss(sk.view(), gk)?;
        let total = cfg.w_bce * bce + cfg.w_smooth * smooth + cfg.w_dice * dice;
        report.bce += bce / n as f64;
        report.smooth += smooth / n as f64;
        report.dice += dice / n as f64;
        report.total += total / n as f64;

        let mut gs = smoothness_grad(sk.view(), ik, cfg.alpha_smooth) * cfg.w_smooth;
        gs.scaled_add(cfg.w_dice, &dice_grad(sk.view(), gk));
        let npix = sk.len() as f64;
        let mut out = grad.index_axis_mut(Axis(0), k).index_axis_move(Axis(0), 0);
        ndarray::Zip::from(&mut out)
            .and(&sk)
            .and(&gk)
            .and(&gs)
            .for_each(|o, &p, &t, &d| {
                *o = (cfg.w_bce * (p - t) / npix + d * p * (1.0 - p)) / n as f64;
            });
    }
    Ok((report, grad.into_dyn()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.05..0.95))
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = rand_mask(&mut rng, 5, 5);
        let s = Array2::from_elem((5, 5), 0.5);
        assert!((bce_loss(s.view(), g.view()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_of_perfect_prediction_is_clamp_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rand_mask(&mut rng, 4, 4);
        let v = bce_loss(g.view(), g.view()).unwrap();
        assert!((v - -(1.0 - BCE_EPS).ln()).abs() < 1e-15);
        assert!(v < 1.1e-7);
    }

    #[test]
    fn bce_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_map(&mut rng, 4, 4);
        let g = rand_mask(&mut rng, 4, 4);
        let mut acc = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let p = s[[y, x]];
                acc += if g[[y, x]] == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
            }
        }
        assert!((bce_loss(s.view(), g.view()).unwrap() - acc / 16.0).abs() < 1e-6);
    }

    #[test]
    fn smoothness_cases() {
        let flat_img = Array3::from_elem((3, 4, 4), 0.3);
        let s = Array2::from_elem((4, 4), 0.7);
        assert_eq!(smoothness_loss(s.view(), flat_img.view(), 10.0).unwrap(), 0.0);

        // vertical unit step between columns 1 and 2: one edge per row
        let step = Array2::from_shape_fn((4, 4), |(_, x)| if x >= 2 { 1.0 } else { 0.0 });
        let v = smoothness_loss(step.view(), flat_img.view(), 10.0).unwrap();
        assert!((v - 4.0 / 16.0).abs() < 1e-15);

        let edged = Array3::from_shape_fn((3, 4, 4), |(_, _, x)| if x >= 2 { 1.0 } else { 0.0 });
        let e = smoothness_loss(step.view(), edged.view(), 10.0).unwrap();
        assert!(e < v);
    }

    #[test]
    fn dice_cases() {
        let g = Array2::from_shape_fn((4, 4), |(y, x)| if y < 2 && x < 2 { 1.0 } else { 0.0 });
        assert_eq!(dice_loss(g.view(), g.view()).unwrap(), 0.0);
        let zero = Array2::zeros((4, 4));
        assert!((dice_loss(zero.view(), g.view()).unwrap() - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
        let half = Array2::from_elem((4, 4), 0.5);
        // brute force: 2*sum(SG)+1 = 5, sum S + sum G + 1 = 13
        let mut inter = 0.0;
        let mut ss = 0.0;
        let mut gs = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                inter += half[[y, x]] * g[[y, x]];
                ss += half[[y, x]];
                gs += g[[y, x]];
            }
        }
        let brute = 1.0 - (2.0 * inter + 1.0) / (ss + gs + 1.0);
        let v = dice_loss(half.view(), g.view()).unwrap();
        assert!((v - brute).abs() < 1e-15);
        assert!((v - (1.0 - 5.0 / 13.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_on_flat_image_has_near_zero_total() {
        let g = Array2::from_shape_fn((6, 6), |(y, x)| if (1..4).contains(&y) && (2..5).contains(&x) { 1.0 } else { 0.0 });
        let img = Array3::from_elem((3, 6, 6), 0.5);
        let cfg = LossConfig::default();
        // a perfect binary map still has step edges; they vanish only when
        // the image carries the same edges, so use a zero smoothness weight
        let r = total_loss(g.view(), g.view(), img.view(), &LossConfig { w_smooth: 0.0, ..cfg }).unwrap();
        assert!(r.total < 1e-5, "{r:?}");
        let edged = Array3::from_shape_fn((3, 6, 6), |(_, y, x)| g[[y, x]] * 5.0);
        let r = total_loss(g.view(), g.view(), edged.view(), &cfg).unwrap();
        assert!(r.total < 1e-5, "{r:?}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((4, 5));
        assert!(bce_loss(a.view(), b.view()).is_err());
        assert!(dice_loss(a.view(), b.view()).is_err());
        let img = Array3::zeros((3, 5, 4));
        assert!(smoothness_loss(a.view(), img.view(), 10.0).is_err());
    }

    #[test]
    fn batch_loss_averages_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LossConfig::default();
        let z = Tensor::from_shape_fn(ndarray::IxDyn(&[2, 1, 4, 4]), |_| rng.random_range(-2.0..2.0));
        let g = Tensor::from_shape_fn(ndarray::IxDyn(&[2, 1, 4, 4]), |_| rng.random_range(0..2) as f64);
        let i = Tensor::from_shape_fn(ndarray::IxDyn(&[2, 3, 4, 4]), |_| rng.random());
        let (r, grad) = batch_loss(&z, &g, &i, &cfg).unwrap();
        let s = z.mapv(sigmoid);
        let s4 = s.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let i4 = i.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut total = 0.0;
        for k in 0..2 {
            let rk = total_loss(
                s4.slice(ndarray::s![k, 0, .., ..]),
                g4.slice(ndarray::s![k, 0, .., ..]),
                i4.slice(ndarray::s![k, .., .., ..]),
                &cfg,
            )
            .unwrap();
            total += rk.total / 2.0;
        }
        assert!((r.total - total).abs() < 1e-12);
        assert!((r.total - (r.bce + r.smooth + r.dice)).abs() < 1e-12);
        assert_eq!(grad.shape(), z.shape());
    }

    #[test]
    fn batch_gradient_matches_finite_differences_in_logit_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig::default();
        let z = Tensor::from_shape_fn(ndarray::IxDyn(&[2, 1, 5, 5]), |_| rng.random_range(-3.0..3.0));
        let g = Tensor::from_shape_fn(ndarray::IxDyn(&[2, 1, 5, 5]), |_| rng.random_range(0..2) as f64);
        let i = Tensor::from_shape_fn(ndarray::IxDyn(&[2, 3, 5, 5]), |_| rng.random());
        let (_, grad) = batch_loss(&z, &g, &i, &cfg).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 0, 2, 3], [1, 0, 4, 4], [1, 0, 1, 0]] {
            let mut zp = z.clone();
            zp[&idx[..]] += h;
            let mut zm = z.clone();
            zm[&idx[..]] -= h;
            let fd = (batch_loss(&zp, &g, &i, &cfg).unwrap().0.total - batch_loss(&zm, &g, &i, &cfg).unwrap().0.total) / (2.0 * h);
            assert!((fd - grad[&idx[..]]).abs() < 1e-7, "{idx:?}: {fd} vs {}", grad[&idx[..]]);
        }
    }

    #[test]
    fn saturated_logits_keep_a_bce_gradient() {
        let cfg = LossConfig::default();
        let z = Tensor::from_elem(ndarray::IxDyn(&[1, 1, 3, 3]), -40.0);
        let g = Tensor::from_elem(ndarray::IxDyn(&[1, 1, 3, 3]), 1.0);
        let i = Tensor::zeros(ndarray::IxDyn(&[1, 3, 3, 3]));
        let (r, grad) = batch_loss(&z, &g, &i, &cfg).unwrap();
        assert!((r.bce - 40.0).abs() < 1e-9);
        assert!(grad.iter().all(|&d| (d + 1.0 / 9.0).abs() < 1e-9));
    }
}
