//! Posed image sets on disk.
//!
//! A data directory holds `cameras.json`, `images/*.png`, optionally a
//! `points.ply` seed cloud and `depth/*.f32` ground-truth z-depth maps.
//! `cameras.json` is an array of records:
//!
//! ```json
//! { "name": "view_000", "width": 128, "height": 128,
//!   "fx": 110.8, "fy": 110.8, "cx": 64.0, "cy": 64.0,
//!   "world_to_camera": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]],
//!   "image": "images/view_000.png", "split": "train" }
//! ```
//!
//! `world_to_camera` is row-major and maps world points into an OpenCV
//! camera frame (x right, y down, z forward). `image` defaults to
//! `images/<name>.png`, `split` to `train`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use qgs_core::camera::{Camera, Intrinsics};
use qgs_core::io::{read_float_map, read_png, read_points, SeedPoint};
use qgs_core::maps::Map;

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default)]
    pub split: Split,
}

impl CameraRecord {
    pub fn from_camera(camera: &Camera, split: Split) -> Self {
        let k = &camera.intrinsics;
        Self {
            name: camera.name.clone(),
            width: camera.width,
            height: camera.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            world_to_camera: camera.world_to_camera_matrix(),
            image: Some(format!("images/{}.png", camera.name)),
            split,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let k = Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        };
        Ok(Camera::from_world_to_camera_matrix(
            self.name.clone(),
            k,
            &self.world_to_camera,
            self.width,
            self.height,
        )?)
    }

    pub fn image_path(&self) -> String {
        self.image.clone().unwrap_or_else(|| format!("images/{}.png", self.name))
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    for r in &records {
        r.camera()?;
    }
    Ok(records)
}

pub fn write_cameras(path: &Path, records: &[CameraRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Map,
    /// Ground-truth camera z-depth, 0 where nothing was hit.
    pub depth: Option<Map>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub views: Vec<View>,
    pub points: Option<Vec<SeedPoint>>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let records = read_cameras(&root.join("cameras.json"))?;
        if records.is_empty() {
            return Err(TrainError::Dataset(format!("{} lists no cameras", root.join("cameras.json").display())));
        }
        let mut views = Vec::with_capacity(records.len());
        for r in &records {
            let camera = r.camera()?;
            let image = read_png(&root.join(r.image_path()))?;
            if image.width != camera.width || image.height != camera.height {
                return Err(TrainError::Dataset(format!(
                    "image of `{}` is {}x{}, camera says {}x{}",
                    r.name, image.width, image.height, camera.width, camera.height
                )));
            }
            let depth_path = root.join("depth").join(format!("{}.f32", r.name));
            let depth = if depth_path.exists() {
                let d = read_float_map(&depth_path)?;
                if d.width != camera.width || d.height != camera.height || d.channels != 1 {
                    return Err(TrainError::Dataset(format!("depth map of `{}` has the wrong shape", r.name)));
                }
                Some(d)
            } else {
                None
            };
            views.push(View {
                camera,
                image,
                depth,
                split: r.split,
            });
        }
        let points_path = root.join("points.ply");
        let points = if points_path.exists() {
            Some(read_points(&points_path)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            views,
            points,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&View> {
        self.views.iter().filter(|v| v.split == split).collect()
    }

    /// Radius of the bounding sphere of the training camera centers about
    /// their mean.
    pub fn scene_extent(&self) -> f64 {
        let centers: Vec<Vector3<f64>> = self.split(Split::Train).iter().map(|v| v.camera.center()).collect();
        camera_extent(&centers)
    }
}

pub fn camera_extent(centers: &[Vector3<f64>]) -> f64 {
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}
