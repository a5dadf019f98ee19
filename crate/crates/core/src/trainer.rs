//! The training loop around [`TrainState`]: data feeding, metrics log,
//! preview grids and periodic checkpoints.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ModelConfig;
use crate::data::{DatasetIndex, InMemoryDataset, Sampler};
use crate::error::{Error, Result};
use crate::generator::{GenerateOptions, Generator};
use crate::image_io::{image_grid, labels_to_rgb, save_png, tensor_to_rgb};
use crate::latent::LatentBundle;
use crate::schema::SemanticSchema;
use crate::train::{StepMetrics, TrainMode, TrainState};

const PREVIEW_SEED: u64 = 0x7072_6576;

/// Couples a training state with its data and sampler.
pub struct Trainer {
    pub state: TrainState,
    dataset: InMemoryDataset,
    sampler: Sampler,
}

impl Trainer {
    /// Continues from `state.sampler` when present, otherwise starts a fresh
    /// epoch sequence seeded by `seed`.
    pub fn new(state: TrainState, dataset: InMemoryDataset, seed: u64, flip: bool) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let sampler = match &state.sampler {
            Some(s) => Sampler::from_state(s.clone(), dataset.len()),
            None => Sampler::new(seed, dataset.len(), flip),
        };
        Ok(Self {
            state,
            dataset,
            sampler,
        })
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let picks = self.sampler.next_batch(self.state.config.batch_size);
        let (images, masks) = self.dataset.batch(&picks);
        self.state.sampler = Some(self.sampler.state.clone());
        match self.state.mode {
            TrainMode::Joint => self.state.train_step(&images, &masks),
            TrainMode::Finetune => self.state.finetune_step(&images, None),
        }
    }
}

/// Images over their segmentation previews, one column per bundle.
pub fn preview_grid(generator: &Generator, bundles: &[LatentBundle]) -> Result<RgbImage> {
    let out = generator.generate(bundles, &GenerateOptions::default(), None)?;
    let labels = out.labels();
    let palette = generator.schema.palette();
    let mut tiles = Vec::with_capacity(2 * bundles.len());
    for i in 0..bundles.len() as i64 {
        tiles.push(tensor_to_rgb(&out.render.image.get(i))?);
    }
    for i in 0..bundles.len() as i64 {
        tiles.push(labels_to_rgb(&labels.get(i), &palette)?);
    }
    image_grid(&tiles, bundles.len())
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: ModelConfig,
    pub schema: SemanticSchema,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub mode: TrainMode,
    pub resume: Option<PathBuf>,
    pub seed: u64,
    /// Steps to run in this invocation.
    pub steps: u64,
    pub sample_every: u64,
    pub checkpoint_every: u64,
    pub flip: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub final_step: u64,
    pub last: Option<StepMetrics>,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Runs `options.steps` steps, appending to `out/metrics.jsonl` and writing
/// `out/samples/*.png`, `out/checkpoints/*.safetensors` and
/// `out/latest.safetensors`.
pub fn run(options: &TrainOptions) -> Result<RunSummary> {
    let out = &options.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let state = match &options.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            if state.schema() != &options.schema {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different schema",
                    path.display()
                )));
            }
            if state.mode != options.mode {
                log::info!("switching {:?} checkpoint to {:?} mode", state.mode, options.mode);
                state.mode = options.mode;
            }
            state
        }
        None => TrainState::new(options.config.clone(), options.schema.clone(), options.seed, options.mode)?,
    };
    let config = state.config.clone();
    std::fs::write(out.join("config.json"), config.to_json()).map_err(io_err(out))?;
    options.schema.save(out.join("schema.json"))?;

    let index = DatasetIndex::from_dir(&options.data_dir, config.image_resolution)?;
    let dataset = InMemoryDataset::load(&index, &options.schema)?;
    log::info!("loaded {} training pairs from {}", dataset.len(), options.data_dir.display());
    let mut trainer = Trainer::new(state, dataset, options.seed, options.flip)?;

    let preview = trainer
        .state
        .ema
        .sample_bundles(&mut ChaCha8Rng::seed_from_u64(PREVIEW_SEED), 8)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(io_err(&metrics_path))?,
    );

    let start = Instant::now();
    let mut last = None;
    for _ in 0..options.steps {
        let m = trainer.step()?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        let done = trainer.state.step;
        if options.sample_every > 0 && done % options.sample_every == 0 {
            metrics.flush().map_err(io_err(&metrics_path))?;
            let grid = preview_grid(&trainer.state.ema, &preview)?;
            save_png(&grid, &out.join("samples").join(format!("step_{done:06}.png")))?;
            log::info!("step {done}: d={:.4} g={:.4} mask={:?}", m.d_loss, m.g_loss, m.mask_loss);
        }
        if options.checkpoint_every > 0 && done % options.checkpoint_every == 0 {
            save_checkpoint(
                &trainer.state,
                &out.join("checkpoints").join(format!("step_{done:06}.safetensors")),
            )?;
        }
        last = Some(m);
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    let checkpoint = out.join("latest.safetensors");
    save_checkpoint(&trainer.state, &checkpoint)?;
    Ok(RunSummary {
        final_step: trainer.state.step,
        last,
        seconds: start.elapsed().as_secs_f64(),
        checkpoint,
    })
}

/// Reads a metrics log written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

