//! End-to-end model, training loop, inference and rendering.

mod config;
mod predict;
mod render;
mod train;

pub use config::{
    DataConfig, EvalConfig, ModelConfig, RunConfig, SynthConfig, TrainConfig, ENV_OUT_DIR, ENV_TRAIN_SCENES,
};
pub use predict::{predict_scene, predict_scenes, write_predictions, PredictOutput};
pub use render::{angle_color, category_color, draw_line, draw_quad, render_scene, ColorBy, RenderOptions};
pub use train::{
    load_training_scenes, prepare_scene, train, StepRecord, TrainOutcome, METRICS_HEADER,
};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::DataError;
use crate::decoder::{Decoder, DenseGraspMap};
use crate::encoder::Encoder;
use crate::eval::EvalError;
use crate::nn::{Graph, LoadError, ParamStore};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not fit the configured model: {0}")]
    Mismatch(#[from] LoadError),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    /// Process exit status: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Io { .. }
            | PipelineError::Data(_)
            | PipelineError::Eval(_)
            | PipelineError::Checkpoint(_)
            | PipelineError::Mismatch(_) => 2,
            PipelineError::NonFinite { .. } | PipelineError::Tensor(_) => 3,
        }
    }
}

/// Encoder, decoder and their parameters.
pub struct GraspNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl GraspNet {
    /// Freshly initialised from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, PipelineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, &mut rng).map_err(|e| PipelineError::Config(e.to_string()))?;
        let decoder = Decoder::new(&mut store, &cfg.decoder, cfg.encoder.pyramid_channels(), &mut rng)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
        })
    }

    /// Build the architecture from `cfg` and fill it from a checkpoint file.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self, PipelineError> {
        let mut net = Self::new(cfg, 0)?;
        let ck = Checkpoint::load(path)?;
        net.store.load_checkpoint(&ck, &cfg.hash())?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        self.store.to_checkpoint(&self.cfg.hash()).save(path)?;
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.cfg.encoder.image_size
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// `[B, C, H/8, W/8]` head output for a batch of `[3, S, S]` images.
    pub fn forward(&self, g: &mut Graph, images: &[Tensor]) -> Result<Var, TensorError> {
        let vars: Vec<Var> = images.iter().map(|im| g.tape.constant(im.clone())).collect();
        let pyramids = self.encoder.forward_batch(g, &vars)?;
        self.decoder.forward(g, &pyramids)
    }

    /// Inference-only dense maps, one per image.
    pub fn dense_maps(&self, images: &[Tensor]) -> Result<Vec<DenseGraspMap>, TensorError> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, images)?;
        self.decoder.dense_maps(g.tape.value(out))
    }
}
