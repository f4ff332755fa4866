//! Dataset scanning, sample loading and batching.
//!
//! Layout on disk is `root/{rgb_dir, gt_dir[, aux_dir]}/<stem>.{jpg,jpeg,png}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use ndarray::{Array2, Array3, Axis, IxDyn};
use serde::Serialize;

use crate::autograd::{resize_plane, Tensor};
use crate::config::{DataConfig, Modality};
use crate::error::{ensure, Error, Result};

pub type DatasetSpec = DataConfig;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Ground-truth pixels strictly above this 8-bit value are foreground.
pub const GT_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleDescriptor {
    pub id: String,
    pub rgb: PathBuf,
    pub aux: Option<PathBuf>,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub samples: Vec<SampleDescriptor>,
    pub rejects: Vec<Reject>,
}

/// Image files in `dir` keyed by stem. Stems that appear with more than one
/// extension are returned separately.
pub fn list_images(dir: &Path) -> Result<(BTreeMap<String, PathBuf>, BTreeSet<String>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut dupes = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let Some(ext) = ext else { continue };
        if !path.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if files.insert(stem.to_string(), path.clone()).is_some() {
            dupes.insert(stem.to_string());
        }
    }
    Ok((files, dupes))
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("dataset directory {} does not exist", path.display())))
    }
}

/// Matches stems across the modality directories.
pub fn scan_dataset(spec: &DatasetSpec) -> Result<ScanReport> {
    require_dir(&spec.root)?;
    let rgb_dir = spec.root.join(&spec.rgb_dir);
    let gt_dir = spec.root.join(&spec.gt_dir);
    require_dir(&rgb_dir)?;
    require_dir(&gt_dir)?;
    let aux_dir = spec.modality.has_aux().then(|| spec.root.join(&spec.aux_dir));
    if let Some(d) = &aux_dir {
        require_dir(d)?;
    }

    let (rgb, mut dupes) = list_images(&rgb_dir)?;
    let (gt, d) = list_images(&gt_dir)?;
    dupes.extend(d);
    let aux = match &aux_dir {
        Some(dir) => {
            let (files, d) = list_images(dir)?;
            dupes.extend(d);
            Some(files)
        }
        None => None,
    };

    let mut stems: BTreeSet<&String> = rgb.keys().chain(gt.keys()).collect();
    if let Some(a) = &aux {
        stems.extend(a.keys());
    }
    let mut report = ScanReport::default();
    for stem in stems {
        if dupes.contains(stem) {
            report.rejects.push(Reject {
                id: stem.clone(),
                reason: "stem appears with more than one extension".into(),
            });
            continue;
        }
        let mut missing = Vec::new();
        if !rgb.contains_key(stem) {
            missing.push(spec.rgb_dir.as_str());
        }
        if !gt.contains_key(stem) {
            missing.push(spec.gt_dir.as_str());
        }
        if let Some(a) = &aux {
            if !a.contains_key(stem) {
                missing.push(spec.aux_dir.as_str());
            }
        }
        if !missing.is_empty() {
            report.rejects.push(Reject {
                id: stem.clone(),
                reason: format!("missing from {}", missing.join(", ")),
            });
            continue;
        }
        report.samples.push(SampleDescriptor {
            id: stem.clone(),
            rgb: rgb[stem].clone(),
            aux: aux.as_ref().map(|a| a[stem].clone()),
            gt: gt[stem].clone(),
        });
    }
    Ok(report)
}

/// One preprocessed item. `rgb` and `aux` are `[3, H, W]` in `[0, 1]`,
/// `gt` is `[H, W]` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Array3<f64>,
    pub aux: Option<Array3<f64>>,
    pub gt: Array2<f64>,
    pub modality: Modality,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        rgb: Array3<f64>,
        aux: Option<Array3<f64>>,
        gt: Array2<f64>,
        modality: Modality,
    ) -> Result<Self> {
        let s = Sample {
            id: id.into(),
            rgb,
            aux,
            gt,
            modality,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn hw(&self) -> (usize, usize) {
        self.gt.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.gt.dim();
        ensure!(
            self.rgb.dim() == (3, h, w),
            "sample {}: rgb {:?} does not match gt {h}x{w}",
            self.id,
            self.rgb.dim()
        );
        ensure!(
            self.modality.has_aux() == self.aux.is_some(),
            "sample {}: modality {} but aux present = {}",
            self.id,
            self.modality,
            self.aux.is_some()
        );
        if let Some(a) = &self.aux {
            ensure!(
                a.dim() == (3, h, w),
                "sample {}: aux {:?} does not match gt {h}x{w}",
                self.id,
                a.dim()
            );
        }
        ensure!(
            self.gt.iter().all(|&v| v == 0.0 || v == 1.0),
            "sample {}: gt is not binary",
            self.id
        );
        Ok(())
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Bilinear resize of every channel of a `[C, H, W]` array.
pub fn resize_bilinear(x: &Array3<f64>, (h, w): (usize, usize)) -> Array3<f64> {
    let (c, hi, wi) = x.dim();
    if (hi, wi) == (h, w) {
        return x.clone();
    }
    let mut out = Array3::zeros((c, h, w));
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let src = src.as_standard_layout();
        resize_plane(
            src.as_slice().expect("standard layout"),
            (hi, wi),
            dst.as_slice_mut().expect("fresh array"),
            (h, w),
        );
    }
    out
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_nearest(x: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let (hi, wi) = x.dim();
    let pick = |o: usize, n_out: usize, n_in: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Array2::from_shape_fn((h, w), |(y, xx)| x[[pick(y, h, hi), pick(xx, w, wi)]])
}

fn rgb_planes(img: &DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Loads an image as `[3, H, W]` RGB values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    Ok(rgb_planes(&open(path)?))
}

/// Loads an 8-bit mask and binarises it.
pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        (g.get_pixel(x as u32, y as u32)[0] > GT_THRESHOLD) as u8 as f64
    }))
}

/// Loads a grayscale map as `[H, W]` values `v / 255`.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

/// Loads a depth or thermal map. Single-channel maps (8 or 16 bit) are
/// min-max normalised and replicated to three channels; colour maps keep
/// their channels and are normalised jointly.
pub fn load_aux(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?;
    let raw = if img.color().has_color() {
        let c = img.to_rgb16();
        let (w, h) = c.dimensions();
        Array3::from_shape_fn((3, h as usize, w as usize), |(ch, y, x)| {
            c.get_pixel(x as u32, y as u32)[ch] as f64
        })
    } else {
        let g = img.to_luma16();
        let (w, h) = g.dimensions();
        let plane = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0] as f64);
        ndarray::stack(Axis(0), &[plane.view(), plane.view(), plane.view()]).expect("same shapes")
    };
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if hi > lo {
        raw.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array3::zeros(raw.dim())
    })
}

/// Reads and preprocesses one sample at `target` resolution.
pub fn load_sample(desc: &SampleDescriptor, modality: Modality, target: (usize, usize)) -> Result<Sample> {
    let rgb = resize_bilinear(&load_rgb(&desc.rgb)?, target);
    let gt = resize_nearest(&load_mask(&desc.gt)?, target);
    let aux = match (modality.has_aux(), &desc.aux) {
        (false, _) => None,
        (true, Some(p)) => Some(resize_bilinear(&load_aux(p)?, target)),
        (true, None) => {
            return Err(Error::Data(format!(
                "sample {} has no auxiliary image but modality is {modality}",
                desc.id
            )))
        }
    };
    Sample::new(desc.id.clone(), rgb, aux, gt, modality)
}

/// Writes `[H, W]` values in `[0, 1]` as an 8-bit PNG, `round(255 v)`.
pub fn save_gray_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Stacked tensors for one training or inference step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub modality: Modality,
    /// `[N, 3, H, W]`
    pub rgb: Tensor,
    /// `[N, 3, H, W]`; a copy of `rgb` for RGB data.
    pub aux: Tensor,
    /// `[N, 1, H, W]`
    pub gt: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    ensure!(!samples.is_empty(), "cannot batch zero samples");
    let first = samples[0];
    let (h, w) = first.hw();
    for s in samples {
        ensure!(
            s.modality == first.modality,
            "mixed modalities in one batch: {} and {}",
            first.modality,
            s.modality
        );
        ensure!(
            s.hw() == (h, w),
            "mixed sizes in one batch: {h}x{w} and {:?}",
            s.hw()
        );
    }
    let n = samples.len();
    let mut rgb = Tensor::zeros(IxDyn(&[n, 3, h, w]));
    let mut gt = Tensor::zeros(IxDyn(&[n, 1, h, w]));
    for (i, s) in samples.iter().enumerate() {
        rgb.index_axis_mut(Axis(0), i).assign(&s.rgb.view().into_dyn());
        gt.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&s.gt.view().into_dyn());
    }
    let aux = if first.modality.has_aux() {
        let mut a = Tensor::zeros(IxDyn(&[n, 3, h, w]));
        for (i, s) in samples.iter().enumerate() {
            let src = s.aux.as_ref().expect("validated sample");
            a.index_axis_mut(Axis(0), i).assign(&src.view().into_dyn());
        }
        a
    } else {
        rgb.clone()
    };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        modality: first.modality,
        rgb,
        aux,
        gt,
    })
}
