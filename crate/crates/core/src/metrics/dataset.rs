use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate_pair;
use crate::data::{list_images, load_gray, load_mask, resize_bilinear};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "dataset,image_id,mae,s,e_mean,e_adaptive,fw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub mae: f64,
    pub s: f64,
    pub e_mean: f64,
    pub e_adaptive: f64,
    pub fw: f64,
    /// Ground truth has no foreground; `fw` is 0 by convention.
    pub empty_gt: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mae: f64,
    pub s: f64,
    pub e_mean: f64,
    pub e_adaptive: f64,
    pub fw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReject {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub images: Vec<ImageMetrics>,
    pub rejects: Vec<EvalReject>,
}

impl MetricReport {
    /// Arithmetic means over `images`, all zero for an empty report.
    pub fn means(&self) -> MetricMeans {
        let n = self.images.len();
        if n == 0 {
            return MetricMeans::default();
        }
        let mut m = MetricMeans::default();
        for r in &self.images {
            m.mae += r.mae;
            m.s += r.s;
            m.e_mean += r.e_mean;
            m.e_adaptive += r.e_adaptive;
            m.fw += r.fw;
        }
        let n = n as f64;
        MetricMeans {
            mae: m.mae / n,
            s: m.s / n,
            e_mean: m.e_mean / n,
            e_adaptive: m.e_adaptive / n,
            fw: m.fw / n,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.images {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.dataset, r.image_id, r.mae, r.s, r.e_mean, r.e_adaptive, r.fw
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset": self.dataset,
            "count": self.images.len(),
            "means": self.means(),
            "empty_gt": self.images.iter().filter(|r| r.empty_gt).map(|r| &r.image_id).collect::<Vec<_>>(),
            "rejects": self.rejects,
        })
    }

    /// Writes the CSV and the JSON summary.
    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("plain JSON values");
        std::fs::write(json, text).map_err(|e| Error::io(json, e))
    }
}

fn evaluate_one(id: &str, pred: &Path, gt: &Path) -> Result<ImageMetrics> {
    let g = load_mask(gt)?;
    let mut s = load_gray(pred)?;
    if s.dim() != g.dim() {
        let resized = resize_bilinear(&s.insert_axis(Axis(0)), g.dim());
        s = resized.index_axis(Axis(0), 0).to_owned();
    }
    let s: Array2<f64> = s.mapv(|v| v.clamp(0.0, 1.0));
    let mut m = evaluate_pair(s.view(), g.view())?;
    m.image_id = id.to_string();
    Ok(m)
}

/// Scores every prediction in `pred_dir` against the same-stem mask in
/// `gt_dir`. Rows come back sorted by image id.
pub fn evaluate_dataset(dataset: &str, pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    for d in [pred_dir, gt_dir] {
        if !d.is_dir() {
            return Err(Error::Config(format!("directory {} does not exist", d.display())));
        }
    }
    let (preds, pd) = list_images(pred_dir)?;
    let (gts, gd) = list_images(gt_dir)?;
    let mut rejects = Vec::new();
    let mut pairs = Vec::new();
    let stems: std::collections::BTreeSet<&String> = preds.keys().chain(gts.keys()).collect();
    for stem in stems {
        let reason = if pd.contains(stem) || gd.contains(stem) {
            Some("stem appears with more than one extension")
        } else if !gts.contains_key(stem) {
            Some("no ground truth")
        } else if !preds.contains_key(stem) {
            Some("no prediction")
        } else {
            None
        };
        match reason {
            Some(r) => rejects.push(EvalReject {
                image_id: stem.clone(),
                reason: r.into(),
            }),
            None => pairs.push((stem.clone(), preds[stem].clone(), gts[stem].clone())),
        }
    }
    let images = pairs
        .par_iter()
        .map(|(id, p, g)| evaluate_one(id, p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        dataset: dataset.to_string(),
        images,
        rejects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_gray_png;

    #[test]
    fn means_are_arithmetic() {
        let row = |id: &str, mae| ImageMetrics {
            image_id: id.into(),
            mae,
            s: 1.0,
            e_mean: 1.0,
            e_adaptive: 1.0,
            fw: 1.0,
            empty_gt: false,
        };
        let r = MetricReport {
            dataset: "d".into(),
            images: vec![row("a", 0.0), row("b", 0.5)],
            rejects: vec![],
        };
        assert_eq!(r.means().mae, 0.25);
        assert_eq!(r.to_csv().lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn identical_directories_score_perfectly() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        for (i, name) in ["x", "y", "z"].iter().enumerate() {
            let m = Array2::from_shape_fn((12, 16), |(r, c)| (r > i + 2 && c > 3 && c < 12) as u8 as f64);
            save_gray_png(&m, &dir.join(format!("{name}.png"))).unwrap();
        }
        let r = evaluate_dataset("self", dir, dir).unwrap();
        assert_eq!(r.images.iter().map(|m| m.image_id.as_str()).collect::<Vec<_>>(), ["x", "y", "z"]);
        let m = r.means();
        assert_eq!((m.mae, m.s, m.e_mean, m.e_adaptive, m.fw), (0.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn unmatched_stems_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let (p, g) = (tmp.path().join("p"), tmp.path().join("g"));
        std::fs::create_dir_all(&p).unwrap();
        std::fs::create_dir_all(&g).unwrap();
        let m = Array2::from_elem((8, 8), 1.0);
        save_gray_png(&m, &p.join("a.png")).unwrap();
        save_gray_png(&m, &g.join("a.png")).unwrap();
        save_gray_png(&m, &p.join("b.png")).unwrap();
        let r = evaluate_dataset("d", &p, &g).unwrap();
        assert_eq!(r.images.len(), 1);
        assert_eq!(r.rejects, vec![EvalReject { image_id: "b".into(), reason: "no ground truth".into() }]);
    }
}
