//! Generate a synthetic scene, fit it and score the held-out views.

use std::time::Instant;

use qgs_core::primitive::QuadricPrimitive;

use crate::config::TrainConfig;
use crate::dataset::Split;
use crate::error::Result;
use crate::eval::{evaluate_view, summarize, ImageMetrics, Reference};
use crate::render::render_prediction;
use crate::synth::{generate, SynthScene, SynthSpec};
use crate::trainer::{fit, inference_settings, FitReport};

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Mean over the test views.
    pub metrics: ImageMetrics,
    pub per_view: Vec<ImageMetrics>,
    pub primitives: Vec<QuadricPrimitive>,
    pub report: FitReport,
    pub seconds: f64,
}

/// Scores a model on the test views of a generated scene.
pub fn evaluate_scene(scene: &SynthScene, primitives: &[QuadricPrimitive], cfg: &TrainConfig) -> Result<Vec<ImageMetrics>> {
    let settings = inference_settings(cfg)?;
    scene
        .cameras
        .iter()
        .zip(&scene.truth)
        .filter(|((_, split), _)| *split == Split::Test)
        .map(|((cam, _), gt)| {
            let pred = render_prediction(primitives, cam, &settings);
            let reference = Reference {
                image: gt.image.clone(),
                depth: Some(gt.depth.clone()),
                normal: Some(gt.normal.clone()),
            };
            evaluate_view(&cam.name, &pred, &reference)
        })
        .collect()
}

/// Fits `cfg` to an already generated scene.
pub fn run_on(scene: &SynthScene, cfg: &TrainConfig) -> Result<RunResult> {
    let start = Instant::now();
    let dataset = scene.to_dataset();
    let (primitives, report) = fit(cfg, &dataset)?;
    let per_view = evaluate_scene(scene, &primitives, cfg)?;
    Ok(RunResult {
        metrics: summarize(&per_view),
        per_view,
        primitives,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run(spec: &SynthSpec, cfg: &TrainConfig) -> Result<RunResult> {
    run_on(&generate(spec)?, cfg)
}
