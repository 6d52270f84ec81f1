//! `graspkit`: train, predict, evaluate, render and synthesize grasp data.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use graspkit::data::{load_scenes, parse_scene_jsonl, save_image, synth_scene, SceneRecord};
use graspkit::eval::{evaluate, parse_predictions, EvalMode};
use graspkit::pipeline::{
    load_training_scenes, predict_scenes, render_scene, train, write_predictions, ColorBy, GraspNet, PipelineError,
    RenderOptions, RunConfig,
};

#[derive(Parser)]
#[command(name = "graspkit", version, about = "Multi-object grasp detection")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Colors {
    Angle,
    Category,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a run config; writes checkpoints and metrics.csv to train.out_dir.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Predict grasps for every scene in a scene list.
    Predict {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        weights: PathBuf,
        /// JSON-lines scene list.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        /// JSON-lines scene list holding the ground truth; images are not read.
        #[arg(short, long)]
        gt: PathBuf,
        #[arg(short, long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "multi")]
        mode: Mode,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Draw grasps (and optionally a graspability heatmap) over a scene.
    Render {
        /// JSON-lines scene list.
        #[arg(short, long)]
        scenes: PathBuf,
        /// Scene to draw; defaults to the first one.
        #[arg(long)]
        id: Option<String>,
        /// Draw these predictions instead of the ground truth.
        #[arg(short, long)]
        predictions: Option<PathBuf>,
        /// Draw nothing but the image (and heatmap).
        #[arg(long, conflicts_with = "predictions")]
        no_labels: bool,
        /// Blend in the model's graspability map; needs --config and --weights.
        #[arg(long, requires_all = ["config", "weights"])]
        heatmap: bool,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "angle")]
        color_by: Colors,
        /// PNG or PPM.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write synthetic labelled scenes and their scene list.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'n', long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        objects: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Output directory; receives the images and scenes.jsonl.
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Scene list records without their images.
fn read_scene_records(path: &Path) -> Result<Vec<SceneRecord>, PipelineError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            out.push(parse_scene_jsonl(line, i + 1, usize::MAX)?);
        }
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<(), PipelineError> {
    match cmd {
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let scenes = load_training_scenes(&cfg)?;
            log::info!("training on {} scenes", scenes.len());
            let out = train(&cfg, &scenes, Some(&cfg.train.out_dir), |_, _| ControlFlow::Continue(()))?;
            let last = out.history.last().map_or(f64::NAN, |r| r.loss.objective);
            println!(
                "{} steps, final objective {last:.5}, best epoch {} ({:.5}); wrote {}",
                out.history.len(),
                out.best_epoch,
                out.best_loss,
                cfg.train.out_dir.display()
            );
        }
        Cmd::Predict {
            config,
            weights,
            input,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let net = GraspNet::load(&cfg.model, &weights)?;
            let scenes = load_scenes(&input, cfg.model.decoder.num_classes)?;
            let out = predict_scenes(&net, &scenes, &cfg.eval)?;
            write_predictions(&output, &out.records)?;
            match out.latency_ms {
                Some(ms) => eprintln!("{} scenes, {ms:.1} ms per scene", scenes.len()),
                None => eprintln!("no scenes"),
            }
        }
        Cmd::Eval {
            gt,
            predictions,
            mode,
            json,
        } => {
            let scenes: Vec<_> = read_scene_records(&gt)?
                .into_iter()
                .map(|s| (s.source_id, s.grasps))
                .collect();
            let preds = parse_predictions(&read(&predictions)?)?;
            let mode = match mode {
                Mode::Single => EvalMode::Single,
                Mode::Multi => EvalMode::Multi,
            };
            let report = evaluate(&preds, &scenes, mode)?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                std::fs::write(&p, report.to_json()).map_err(io_err(&p))?;
            }
        }
        Cmd::Render {
            scenes,
            id,
            predictions,
            no_labels,
            heatmap,
            config,
            weights,
            color_by,
            output,
        } => {
            let records = read_scene_records(&scenes)?;
            let rec = match &id {
                Some(id) => records.iter().find(|r| &r.source_id == id),
                None => records.first(),
            }
            .ok_or_else(|| PipelineError::Config(format!("no scene `{}` in {}", id.unwrap_or_default(), scenes.display())))?;
            let base = scenes.parent().unwrap_or(Path::new("."));
            let image = graspkit::data::load_image(&base.join(&rec.image_path))?;
            let grasps = match (&predictions, no_labels) {
                (_, true) => Vec::new(),
                (Some(p), _) => parse_predictions(&read(p)?)?
                    .into_iter()
                    .find(|r| r.source_id == rec.source_id)
                    .map(|r| r.rects())
                    .unwrap_or_default(),
                (None, _) => rec.grasps.clone(),
            };
            let mut opts = RenderOptions::default();
            if let (true, Some(c), Some(w)) = (heatmap, &config, &weights) {
                let cfg = RunConfig::load(c)?;
                let net = GraspNet::load(&cfg.model, w)?;
                let input = graspkit::data::resize_to_input(
                    &graspkit::data::LabeledScene {
                        image: image.clone(),
                        grasps: vec![],
                        source_id: rec.source_id.clone(),
                    },
                    net.input_size(),
                );
                opts.heatmap = Some(net.dense_maps(&[input.image])?[0].score_map());
                opts.color_by = ColorBy::Angle {
                    bins: cfg.model.decoder.angle_bins,
                };
            }
            if let Colors::Category = color_by {
                opts.color_by = ColorBy::Category;
            }
            save_image(&output, &render_scene(&image, &grasps, &opts))?;
        }
        Cmd::Synth {
            seed,
            count,
            objects,
            size,
            output,
        } => {
            if count == 0 || objects == 0 || size < 32 {
                return Err(PipelineError::Config("synth needs count ≥ 1, objects ≥ 1 and size ≥ 32".into()));
            }
            std::fs::create_dir_all(&output).map_err(io_err(&output))?;
            let mut list = String::new();
            for i in 0..count {
                let scene = synth_scene(seed + i as u64, objects, size);
                let name = format!("synth-{:05}.png", seed + i as u64);
                save_image(&output.join(&name), &scene.image)?;
                let rec = SceneRecord {
                    image_path: name,
                    source_id: scene.source_id,
                    grasps: scene.grasps,
                };
                list.push_str(&rec.to_json_line());
                list.push('\n');
            }
            let p = output.join("scenes.jsonl");
            std::fs::write(&p, list).map_err(io_err(&p))?;
            println!("wrote {count} scenes to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("graspkit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
