//! Rendering fitted models to prediction directories.

use std::fs;
use std::path::Path;

use qgs_core::camera::Camera;
use qgs_core::io::{write_float_map, write_png};
use qgs_core::maps::Map;
use qgs_core::primitive::QuadricPrimitive;
use qgs_core::raster::{forward, RenderSettings};

use crate::error::{Result, TrainError};
use crate::eval::Prediction;

/// Renders one view: color, coverage, median depth and unit camera-frame
/// normals (zero where nothing was drawn).
pub fn render_prediction(primitives: &[QuadricPrimitive], camera: &Camera, settings: &RenderSettings) -> Prediction {
    let t = forward(primitives, camera, settings);
    let mut normal = t.normal.clone();
    for p in 0..normal.num_pixels() {
        let px = normal.pixel_mut(p);
        let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            px.iter_mut().for_each(|v| *v /= n);
        }
    }
    Prediction {
        image: t.color,
        alpha: Some(t.alpha),
        depth: Some(t.depth_median),
        normal: Some(normal),
    }
}

/// Writes `images/<name>.png` and the `alpha`, `depth` and `normal` float maps.
pub fn write_prediction(out: &Path, name: &str, pred: &Prediction) -> Result<()> {
    let maps: [(&str, Option<&Map>); 3] = [("alpha", pred.alpha.as_ref()), ("depth", pred.depth.as_ref()), ("normal", pred.normal.as_ref())];
    for sub in ["images", "alpha", "depth", "normal"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| TrainError::io(&d, e))?;
    }
    write_png(&out.join("images").join(format!("{name}.png")), &pred.image)?;
    for (sub, map) in maps {
        if let Some(m) = map {
            write_float_map(&out.join(sub).join(format!("{name}.f32")), m)?;
        }
    }
    Ok(())
}
