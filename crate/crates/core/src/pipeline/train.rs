//! Momentum-SGD training over labelled scenes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraspNet, PipelineError, RunConfig};
use crate::data::{build_targets, load_scenes, resize_to_input, rotate_augment, synth_scene, LabeledScene, ROTATION_STEPS};
use crate::loss::{total_loss, LossBreakdown};
use crate::nn::Graph;
use crate::tensor::optim::Sgd;
use crate::tensor::TensorError;

pub const METRICS_HEADER: &str = "step,epoch,lr,grasp_box,angle,obj_class,graspability,total,objective,grad_norm";

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based optimiser step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Gradient L2 norm before clipping.
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6e}",
            self.step,
            self.epoch,
            self.lr,
            l.grasp_box,
            l.angle,
            l.obj_class,
            l.graspability,
            l.total,
            l.objective,
            self.grad_norm
        )
    }
}

pub struct TrainOutcome {
    /// Weights after the last step.
    pub net: GraspNet,
    pub history: Vec<StepRecord>,
    /// Lowest mean objective over an epoch, and that epoch.
    pub best_loss: f64,
    pub best_epoch: usize,
}

/// Resize to the model's square input.
pub fn prepare_scene(scene: &LabeledScene, input_size: usize) -> LabeledScene {
    resize_to_input(scene, input_size)
}

/// The configured training set, already at input resolution.
pub fn load_training_scenes(cfg: &RunConfig) -> Result<Vec<LabeledScene>, PipelineError> {
    let size = cfg.model.encoder.image_size;
    let scenes = match (&cfg.data.train_scenes, &cfg.data.synth) {
        (Some(path), _) => load_scenes(path, cfg.model.decoder.num_classes)?,
        (None, Some(s)) => (0..s.count as u64)
            .map(|i| synth_scene(s.seed + i, s.objects, size))
            .collect(),
        (None, None) => return Err(PipelineError::Config("data needs train_scenes or synth".into())),
    };
    if scenes.is_empty() {
        return Err(PipelineError::Config("the training set is empty".into()));
    }
    Ok(scenes.iter().map(|s| prepare_scene(s, size)).collect())
}

fn numeric(step: usize) -> impl Fn(TensorError) -> PipelineError {
    move |e| match e {
        TensorError::NonFinite { .. } => PipelineError::NonFinite { step },
        other => PipelineError::Tensor(other),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Train from scratch. With `out_dir`, writes `metrics.csv`, `best.ckpt`
/// (lowest epoch-mean objective), `final.ckpt` and the effective
/// `config.json`. `on_step` sees every step and the updated weights, and
/// may end training early with `ControlFlow::Break`.
pub fn train(
    cfg: &RunConfig,
    scenes: &[LabeledScene],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord, &GraspNet) -> ControlFlow<()>,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let t = &cfg.train;
    let size = cfg.model.encoder.image_size;
    if let Some(s) = scenes.iter().find(|s| s.height() != size || s.width() != size) {
        return Err(PipelineError::Config(format!(
            "scene `{}` is {}x{}, the model expects {size}x{size}",
            s.source_id,
            s.width(),
            s.height()
        )));
    }
    if scenes.is_empty() {
        return Err(PipelineError::Config("the training set is empty".into()));
    }
    let mut net = GraspNet::new(&cfg.model, t.seed)?;
    let layout = cfg.model.decoder.layout();
    let stride = net.stride();
    // separate stream so data order does not depend on the parameter count
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let mut sgd = Sgd::new(net.store.values(), t.momentum);

    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let cfg_path = dir.join("config.json");
            std::fs::write(&cfg_path, cfg.to_json()).map_err(io_err(&cfg_path))?;
            let p = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
            writeln!(w, "{METRICS_HEADER}").map_err(io_err(&p))?;
            Some((p, w))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0);
    let mut step = 0;
    let mut stop = false;
    let max_steps = t.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..t.epochs {
        let lr = t.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(t.batch_size) {
            if step >= max_steps {
                stop = true;
                break;
            }
            step += 1;
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let scene = if cfg.data.augment {
                    rotate_augment(&scenes[i], rng.random_range(0..ROTATION_STEPS))?
                } else {
                    scenes[i].clone()
                };
                targets.push(build_targets(&scene, stride, layout.angle_bins, layout.num_classes)?);
                images.push(scene.image);
            }
            let mut g = Graph::train(&net.store);
            let out = net.forward(&mut g, &images).map_err(numeric(step))?;
            let lv = total_loss(&mut g.tape, out, layout, &targets, t.weights).map_err(numeric(step))?;
            if !lv.breakdown.objective.is_finite() {
                return Err(PipelineError::NonFinite { step });
            }
            let grads = g.tape.backward(lv.objective).map_err(numeric(step))?;
            let mut grads = g.param_grads(&grads);
            drop(g);
            let norm = grads
                .iter()
                .flat_map(|gr| gr.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(PipelineError::NonFinite { step });
            }
            if let Some(clip) = t.grad_clip.filter(|&c| norm > c) {
                for v in grads.iter_mut().flat_map(|gr| gr.data_mut()) {
                    *v *= clip / norm;
                }
            }
            sgd.step(net.store.values_mut(), &grads, lr)?;

            let rec = StepRecord {
                step,
                epoch,
                lr,
                grad_norm: norm,
                loss: lv.breakdown,
            };
            if let Some((p, w)) = metrics.as_mut() {
                writeln!(w, "{}", rec.csv_row()).map_err(io_err(p))?;
            }
            log::debug!("step {step} epoch {epoch} lr {lr:e} objective {:.5}", rec.loss.objective);
            let flow = on_step(&rec, &net);
            sum += rec.loss.objective;
            n += 1;
            history.push(rec);
            if flow.is_break() {
                stop = true;
                break;
            }
        }
        if n == 0 {
            break;
        }
        let mean = sum / n as f64;
        if mean < best.0 {
            best = (mean, epoch);
            if let Some(dir) = out_dir {
                net.save(&dir.join("best.ckpt"))?;
            }
        }
        log::info!("epoch {epoch}: mean objective {mean:.5}, lr {lr:e}");
        if stop {
            break;
        }
    }
    if let Some((p, mut w)) = metrics {
        w.flush().map_err(io_err(&p))?;
    }
    if let Some(dir) = out_dir {
        net.save(&dir.join("final.ckpt"))?;
        if best.0.is_infinite() {
            net.save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        best_loss: best.0,
        best_epoch: best.1,
    })
}
