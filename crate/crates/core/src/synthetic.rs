//! Procedural datasets for tests, demos and the ablation harness.
//!
//! `rgb_salient` draws a bright object over dim clutter, so the object is
//! visible in RGB. `camouflaged` hides the object in the RGB clutter and
//! reveals it only in the auxiliary map, where it is darker than its
//! surroundings.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Modality;
use crate::data::{save_gray_png, Sample};
use crate::error::{Error, Result};

fn ellipse(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Array2<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let ry = rng.random_range(0.15..0.3) * hf;
    let rx = rng.random_range(0.15..0.3) * wf;
    let cy = rng.random_range(ry..hf - ry);
    let cx = rng.random_range(rx..wf - rx);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        (dy * dy + dx * dx <= 1.0) as u8 as f64
    })
}

/// Dim blocky clutter in `[0.1, 0.45]`.
fn clutter(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Array3<f64> {
    let mut img = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.15..0.3));
    for _ in 0..12 {
        let bh = rng.random_range(2..=h / 4);
        let bw = rng.random_range(2..=w / 4);
        let y0 = rng.random_range(0..h - bh);
        let x0 = rng.random_range(0..w - bw);
        let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.45));
        for c in 0..3 {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    img[[c, y, x]] = col[c];
                }
            }
        }
    }
    img
}

/// RGB images with a bright object on dim clutter.
pub fn rgb_salient(n: usize, hw: (usize, usize), seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gt = ellipse(&mut rng, hw);
            let mut rgb = clutter(&mut rng, hw);
            let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
            for ((c, y, x), v) in rgb.indexed_iter_mut() {
                if gt[[y, x]] > 0.5 {
                    *v = col[c] - rng.random_range(0.0..0.05);
                }
            }
            Sample::new(format!("rgb_{i:04}"), rgb, None, gt, Modality::Rgb).expect("consistent shapes")
        })
        .collect()
}

/// Paired samples where only the auxiliary map shows the object: a dark
/// region on a bright, gently ramped background.
pub fn camouflaged(n: usize, hw: (usize, usize), modality: Modality, seed: u64) -> Vec<Sample> {
    assert!(modality.has_aux(), "camouflaged data needs an auxiliary modality");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = hw;
    (0..n)
        .map(|i| {
            let gt = ellipse(&mut rng, hw);
            let rgb = clutter(&mut rng, hw);
            let slope = rng.random_range(-0.15..0.15);
            let fg = rng.random_range(0.05..0.25);
            let plane = Array2::from_shape_fn(hw, |(y, x)| {
                if gt[[y, x]] > 0.5 {
                    fg + rng.random_range(0.0..0.05)
                } else {
                    let t = (x as f64 / w as f64 + y as f64 / h as f64) / 2.0;
                    (0.85 + slope * (t - 0.5) + rng.random_range(0.0..0.05)).min(1.0)
                }
            });
            let aux = Array3::from_shape_fn((3, h, w), |(_, y, x)| plane[[y, x]]);
            Sample::new(format!("mm_{i:04}"), rgb, Some(aux), gt, modality).expect("consistent shapes")
        })
        .collect()
}

/// Writes samples in the on-disk layout `root/{RGB,GT,Aux}/<id>.png`.
/// Auxiliary maps are written as 16-bit single-channel PNGs.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    for d in ["RGB", "GT", "Aux"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        let (h, w) = s.hw();
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Rgb(std::array::from_fn(|c| {
                (s.rgb[[c, y as usize, x as usize]] * 255.0).round() as u8
            }))
        });
        let p = root.join("RGB").join(format!("{}.png", s.id));
        rgb.save(&p).map_err(|e| Error::Image {
            path: p.clone(),
            message: e.to_string(),
        })?;
        save_gray_png(&s.gt, &root.join("GT").join(format!("{}.png", s.id)))?;
        if let Some(a) = &s.aux {
            let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([(a[[0, y as usize, x as usize]] * 65535.0).round() as u16])
            });
            let p = root.join("Aux").join(format!("{}.png", s.id));
            img.save(&p).map_err(|e| Error::Image {
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_valid() {
        let a = rgb_salient(3, (32, 32), 5);
        assert_eq!(a, rgb_salient(3, (32, 32), 5));
        for s in &a {
            let fg = s.gt.sum() / 1024.0;
            assert!(fg > 0.02 && fg < 0.4, "{fg}");
        }
        let b = camouflaged(2, (32, 32), Modality::Rgbd, 1);
        assert!(b.iter().all(|s| s.aux.is_some()));
    }

    #[test]
    fn camouflaged_rgb_does_not_reveal_the_object() {
        let s = &camouflaged(1, (64, 64), Modality::Rgbt, 2)[0];
        let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for ((_, y, x), v) in s.rgb.indexed_iter() {
            if s.gt[[y, x]] > 0.5 {
                fg += v;
                nf += 1.0;
            } else {
                bg += v;
                nb += 1.0;
            }
        }
        assert!((fg / nf - bg / nb).abs() < 0.08);
    }
}
