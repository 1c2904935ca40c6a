//! Image and geometry metrics between renders and ground truth.
//!
//! A prediction directory (as written by `qgs render`) holds
//! `images/<name>.png` and optionally `alpha/`, `depth/` and `normal/`
//! float maps. A ground-truth directory holds `images/<name>.png` and
//! optionally `depth/` and `normal/` float maps. Depth is camera z-depth,
//! normals are in the camera frame.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use qgs_core::io::{read_float_map, read_png};
use qgs_core::losses::ssim;
use qgs_core::maps::Map;

use crate::error::{Result, TrainError};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
/// Pixels with predicted coverage above this count for geometry metrics.
pub const COVERAGE: f64 = 0.5;

pub fn psnr(pred: &Map, gt: &Map) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len().max(1) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Depth errors over pixels covered in the prediction and hit in the
/// ground truth (`gt > 0`). `None` if no pixel qualifies.
pub fn depth_errors(pred: &Map, gt: &Map, alpha: Option<&Map>) -> Result<Option<(f64, f64)>> {
    pred.check_same_shape(gt)?;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for i in 0..gt.data.len() {
        let covered = alpha.map_or(pred.data[i] > 0.0, |a| a.data[i] > COVERAGE);
        if covered && gt.data[i] > 0.0 {
            let e = pred.data[i] - gt.data[i];
            abs += e.abs();
            sq += e * e;
            n += 1;
        }
    }
    Ok((n > 0).then(|| (abs / n as f64, (sq / n as f64).sqrt())))
}

/// Mean angle in degrees between normal maps over covered pixels where
/// both normals are non-zero. Predicted normals need not be unit length.
pub fn normal_error_deg(pred: &Map, gt: &Map, alpha: Option<&Map>) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.num_pixels() {
        if alpha.is_some_and(|a| a.data[i] <= COVERAGE) {
            continue;
        }
        let (p, g) = (pred.pixel(i), gt.pixel(i));
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if np > 0.0 && ng > 0.0 {
            let c = p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (np * ng);
            sum += c.clamp(-1.0, 1.0).acos().to_degrees();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Renders of one view.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub image: Map,
    pub alpha: Option<Map>,
    pub depth: Option<Map>,
    pub normal: Option<Map>,
}

/// Ground truth of one view.
#[derive(Clone, Debug)]
pub struct Reference {
    pub image: Map,
    pub depth: Option<Map>,
    pub normal: Option<Map>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
    pub depth_rmse: Option<f64>,
    pub normal_deg: Option<f64>,
}

pub fn evaluate_view(name: &str, pred: &Prediction, gt: &Reference) -> Result<ImageMetrics> {
    let depth = match (&pred.depth, &gt.depth) {
        (Some(p), Some(g)) => depth_errors(p, g, pred.alpha.as_ref())?,
        _ => None,
    };
    let normal_deg = match (&pred.normal, &gt.normal) {
        (Some(p), Some(g)) => normal_error_deg(p, g, pred.alpha.as_ref())?,
        _ => None,
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr: psnr(&pred.image, &gt.image)?,
        ssim: ssim(&pred.image, &gt.image)?.value,
        depth_mae: depth.map(|d| d.0),
        depth_rmse: depth.map(|d| d.1),
        normal_deg,
    })
}

/// Means over views; optional metrics average over the views that have them.
pub fn summarize(rows: &[ImageMetrics]) -> ImageMetrics {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    ImageMetrics {
        name: "mean".into(),
        psnr: mean(rows.iter().map(|r| r.psnr).collect()).unwrap_or(f64::NAN),
        ssim: mean(rows.iter().map(|r| r.ssim).collect()).unwrap_or(f64::NAN),
        depth_mae: mean(rows.iter().filter_map(|r| r.depth_mae).collect()),
        depth_rmse: mean(rows.iter().filter_map(|r| r.depth_rmse).collect()),
        normal_deg: mean(rows.iter().filter_map(|r| r.normal_deg).collect()),
    }
}

/// Per-image rows followed by the mean row.
pub fn to_csv(rows: &[ImageMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("name,psnr,ssim,depth_mae,depth_rmse,normal_deg\n");
    for r in rows.iter().chain(std::iter::once(&summarize(rows))) {
        writeln!(
            s,
            "{},{:.6},{:.6},{},{},{}",
            r.name,
            r.psnr,
            r.ssim,
            opt(r.depth_mae),
            opt(r.depth_rmse),
            opt(r.normal_deg)
        )
        .expect("write to string");
    }
    s
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| TrainError::io(&images, e))?;
    let mut names = BTreeSet::new();
    for e in entries {
        let p = e.map_err(|e| TrainError::io(&images, e))?.path();
        if p.extension().is_some_and(|x| x == "png") {
            if let Some(stem) = p.file_stem() {
                names.insert(stem.to_string_lossy().into_owned());
            }
        }
    }
    Ok(names)
}

fn optional_map(dir: &Path, sub: &str, name: &str) -> Result<Option<Map>> {
    let p = dir.join(sub).join(format!("{name}.f32"));
    if p.exists() {
        Ok(Some(read_float_map(&p)?))
    } else {
        Ok(None)
    }
}

/// Evaluates every image of `pred` against the same-named image of `gt`.
/// Both directories must hold the same set of images.
pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<Vec<ImageMetrics>> {
    let pn = image_names(pred)?;
    let gn = image_names(gt)?;
    if pn != gn {
        return Err(TrainError::Eval(format!(
            "{} predicted images but {} ground-truth images, or their names differ",
            pn.len(),
            gn.len()
        )));
    }
    if pn.is_empty() {
        return Err(TrainError::Eval("no images to evaluate".into()));
    }
    pn.iter()
        .map(|name| {
            let p = Prediction {
                image: read_png(&pred.join("images").join(format!("{name}.png")))?,
                alpha: optional_map(pred, "alpha", name)?,
                depth: optional_map(pred, "depth", name)?,
                normal: optional_map(pred, "normal", name)?,
            };
            let g = Reference {
                image: read_png(&gt.join("images").join(format!("{name}.png")))?,
                depth: optional_map(gt, "depth", name)?,
                normal: optional_map(gt, "normal", name)?,
            };
            evaluate_view(name, &p, &g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use qgs_core::io::{write_float_map, write_png};

    #[test]
    fn psnr_examples() {
        let a = Map::filled(8, 8, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Map::filled(8, 8, 3, 0.5 + 1.0 / 255.0);
        // 20 log10(255)
        assert!((psnr(&b, &a).unwrap() - 48.130_803_608_679_1).abs() < 1e-9);
        assert!(psnr(&a, &Map::new(4, 8, 3)).is_err());
    }

    #[test]
    fn geometry_metrics() {
        let gt = Map::filled(4, 4, 1, 2.0);
        let pred = Map::filled(4, 4, 1, 2.0);
        assert_eq!(depth_errors(&pred, &gt, None).unwrap(), Some((0.0, 0.0)));
        let mut off = pred.clone();
        off.data[0] = 3.0;
        let mut alpha = Map::filled(4, 4, 1, 1.0);
        let (mae, rmse) = depth_errors(&off, &gt, Some(&alpha)).unwrap().unwrap();
        assert!((mae - 1.0 / 16.0).abs() < 1e-15 && (rmse - 0.25).abs() < 1e-15);
        alpha.data[0] = 0.2;
        assert_eq!(depth_errors(&off, &gt, Some(&alpha)).unwrap(), Some((0.0, 0.0)));

        let mut n = Map::new(1, 1, 3);
        n.data = vec![0.0, 0.0, -2.0];
        let mut m = Map::new(1, 1, 3);
        m.data = vec![1.0, 0.0, -1.0];
        assert!((normal_error_deg(&m, &n, None).unwrap().unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(normal_error_deg(&m, &Map::new(1, 1, 3), None).unwrap(), None);
    }

    #[test]
    fn directories_and_csv() {
        let (p, g) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [p.path(), g.path()] {
            fs::create_dir_all(d.join("images")).unwrap();
            fs::create_dir_all(d.join("depth")).unwrap();
        }
        let img = Map::filled(6, 5, 3, 0.25);
        for name in ["a", "b"] {
            write_png(&p.path().join("images").join(format!("{name}.png")), &img).unwrap();
            write_png(&g.path().join("images").join(format!("{name}.png")), &img).unwrap();
            write_float_map(&p.path().join("depth").join(format!("{name}.f32")), &Map::filled(6, 5, 1, 1.5)).unwrap();
            write_float_map(&g.path().join("depth").join(format!("{name}.f32")), &Map::filled(6, 5, 1, 1.5)).unwrap();
        }
        let rows = evaluate_dirs(p.path(), g.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].psnr, PSNR_CAP);
        assert_eq!(rows[1].depth_mae, Some(0.0));
        assert!((rows[0].ssim - 1.0).abs() < 1e-12);
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,99.0"));
        write_png(&g.path().join("images").join("c.png"), &img).unwrap();
        assert!(matches!(evaluate_dirs(p.path(), g.path()), Err(TrainError::Eval(_))));
    }
}
