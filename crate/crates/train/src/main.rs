use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qgs_core::io::{read_checkpoint, write_checkpoint};
use qgs_train::config::TrainConfig;
use qgs_train::dataset::{read_cameras, Dataset, Split};
use qgs_train::error::{Result, TrainError};
use qgs_train::eval::{evaluate_dirs, summarize, to_csv};
use qgs_train::render::{render_prediction, write_prediction};
use qgs_train::synth::{generate, scene_registry, texture_registry, write_scene, SynthSpec};
use qgs_train::trainer::{inference_settings, used_sh_degree, Trainer};

#[derive(Parser)]
#[command(name = "qgs", version, about = "Quadric Gaussian surfel fitting and rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a data directory.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a checkpoint from every camera of a cameras.json.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Background color as r,g,b in [0, 1].
        #[arg(long, default_value = "0,0,0")]
        background: String,
    },
    /// Compare a render directory with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Where to write the per-image CSV (default: <pred>/metrics.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a ray-traced synthetic data directory.
    Synth {
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 16)]
        views: usize,
        /// Resolution as WxH.
        #[arg(long, default_value = "128x128")]
        res: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "checker")]
        texture: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed points written to points.ply (0 for none).
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let bad = || TrainError::Config {
        key: "res".into(),
        msg: format!("expected WxH, got `{s}`"),
    };
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn mkdir(p: &std::path::Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| TrainError::io(p, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let dataset = Dataset::load(&data)?;
            mkdir(&out)?;
            let mut trainer = Trainer::new(&cfg, &dataset)?;
            log::info!(
                "fitting {} training views from {} primitives (scene extent {:.3})",
                dataset.split(Split::Train).len(),
                trainer.primitives.len(),
                trainer.scene_extent
            );
            while trainer.iteration < cfg.iterations {
                trainer.step()?;
            }
            let (prims, report) = trainer.finish();
            let ckpt = out.join("point_cloud.ply");
            write_checkpoint(&ckpt, &prims)?;
            let cfg_path = out.join("config.txt");
            fs::write(&cfg_path, cfg.to_text()).map_err(|e| TrainError::io(&cfg_path, e))?;
            let mut log = String::from("iteration,loss,photometric,distortion,normal,multiview,primitives\n");
            for e in &report.log {
                let c = &e.components;
                log.push_str(&format!(
                    "{},{:.8},{:.8},{:.8},{:.8},{:.8},{}\n",
                    e.iteration, e.loss, c.photometric, c.distortion, c.normal, c.multiview, e.primitives
                ));
            }
            let log_path = out.join("train_log.csv");
            fs::write(&log_path, log).map_err(|e| TrainError::io(&log_path, e))?;
            log::info!(
                "wrote {} primitives to {} ({} splits, {} clones, {} pruned, {} skipped updates)",
                prims.len(),
                ckpt.display(),
                report.splits,
                report.clones,
                report.prunes,
                report.skipped_updates
            );
        }
        Command::Render {
            ckpt,
            cameras,
            out,
            split,
            background,
        } => {
            let prims = read_checkpoint(&ckpt)?;
            let mut cfg = TrainConfig::default();
            cfg.set("background", &background)?;
            cfg.sh_degree = used_sh_degree(&prims);
            let settings = inference_settings(&cfg)?;
            let mut n = 0;
            for rec in read_cameras(&cameras)? {
                let keep = match split {
                    SplitArg::All => true,
                    SplitArg::Train => rec.split == Split::Train,
                    SplitArg::Test => rec.split == Split::Test,
                };
                if keep {
                    let cam = rec.camera()?;
                    write_prediction(&out, &rec.name, &render_prediction(&prims, &cam, &settings))?;
                    n += 1;
                }
            }
            log::info!("rendered {n} views to {}", out.display());
        }
        Command::Eval { pred, gt, csv } => {
            let rows = evaluate_dirs(&pred, &gt)?;
            let path = csv.unwrap_or_else(|| pred.join("metrics.csv"));
            fs::write(&path, to_csv(&rows)).map_err(|e| TrainError::io(&path, e))?;
            let m = summarize(&rows);
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!("images      {}", rows.len());
            println!("psnr        {:.3}", m.psnr);
            println!("ssim        {:.4}", m.ssim);
            println!("depth_mae   {}", opt(m.depth_mae));
            println!("depth_rmse  {}", opt(m.depth_rmse));
            println!("normal_deg  {}", opt(m.normal_deg));
        }
        Command::Synth {
            scene,
            views,
            res,
            out,
            texture,
            seed,
            points,
        } => {
            if !scene_registry().contains(&scene) {
                return Err(scene_registry().create(&scene).err().expect("unknown scene").into());
            }
            if !texture_registry().contains(&texture) {
                return Err(texture_registry().create(&texture).err().expect("unknown texture").into());
            }
            let (width, height) = parse_res(&res)?;
            let spec = SynthSpec {
                scene,
                texture,
                views,
                width,
                height,
                seed,
                points,
                ..SynthSpec::default()
            };
            write_scene(&generate(&spec)?, &out)?;
            log::info!("wrote {} + {} views to {}", spec.views, spec.test_views(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
