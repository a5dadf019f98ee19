//! Single-file checkpoints in the safetensors layout.
//!
//! A training checkpoint holds the generator, its EMA copy, the
//! discriminator, both optimizers' moment buffers, the fixed Fourier matrix
//! and `mean_w`. Scalars that must survive bit-exactly (the path-length mean,
//! RNG position, sampler position) live in the string metadata.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, View};
use tch::{Kind, Tensor};

use crate::config::ModelConfig;
use crate::data::SamplerState;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::WStatistics;
use crate::nn::{copy_params, Parameterized};
use crate::schema::SemanticSchema;
use crate::train::{TrainMode, TrainState};

/// Number of mapped samples averaged into `mean_w` at save time.
pub const MEAN_W_SAMPLES: usize = 100_000;
const MEAN_W_SEED: u64 = 0x6d65_616e_5f77;
const FORMAT: &str = "compgan-1";

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let shape: Vec<usize> = t.size().iter().map(|&s| s as usize).collect();
    let flat = t.detach().contiguous().reshape([-1]);
    let (dtype, bytes) = match t.kind() {
        Kind::Double => (
            Dtype::F64,
            Vec::<f64>::try_from(&flat)?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        Kind::Float => (
            Dtype::F32,
            Vec::<f32>::try_from(&flat)?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported tensor kind {other:?}"))),
    };
    Ok(Raw { dtype, shape, bytes })
}

fn from_view(name: &str, view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let shape: Vec<i64> = view.shape().iter().map(|&s| s as i64).collect();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_slice(&v)
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_slice(&v)
        }
        other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(t.reshape(shape))
}

fn push_all(out: &mut Vec<(String, Raw)>, prefix: &str, params: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in params {
        out.push((format!("{prefix}{name}"), to_raw(t)?));
    }
    Ok(())
}

/// Estimates `mean_w` from the EMA mapping network with a fixed seed, so
/// saving never touches the training RNG.
pub fn estimate_stats(generator: &Generator) -> Result<WStatistics> {
    let mut rng = ChaCha8Rng::seed_from_u64(MEAN_W_SEED);
    generator.mapping.estimate_mean_w(&mut rng, MEAN_W_SAMPLES)
}

/// Writes the full training state to `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let stats = estimate_stats(&state.ema)?;
    let mut tensors = Vec::new();
    push_all(&mut tensors, "g.", &state.g.named_params())?;
    push_all(&mut tensors, "ema.", &state.ema.named_params())?;
    push_all(&mut tensors, "d.", &state.d.named_params())?;
    for (prefix, opt) in [("opt_g", &state.opt_g), ("opt_d", &state.opt_d)] {
        for (name, (m, v)) in opt.param_names().zip(opt.m.iter().zip(&opt.v)) {
            tensors.push((format!("{prefix}.m.{name}"), to_raw(m)?));
            tensors.push((format!("{prefix}.v.{name}"), to_raw(v)?));
        }
    }
    tensors.push(("fourier.b".into(), to_raw(&state.g.fourier.b)?));
    tensors.push(("stats.mean_w".into(), to_raw(&Tensor::from_slice(&stats.mean_w))?));

    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".into(), state.config.to_json());
    meta.insert("schema".into(), state.schema().to_json());
    meta.insert("step".into(), state.step.to_string());
    meta.insert("mode".into(), serde_json::to_string(&state.mode).expect("mode serializes"));
    meta.insert("path_mean_bits".into(), format!("{:016x}", state.path_mean.to_bits()));
    meta.insert("opt_g.steps".into(), state.opt_g.steps.to_string());
    meta.insert("opt_d.steps".into(), state.opt_d.steps.to_string());
    meta.insert("stats.sample_count".into(), stats.sample_count.to_string());
    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    meta.insert("rng.seed".into(), seed);
    meta.insert("rng.stream".into(), state.rng.get_stream().to_string());
    meta.insert("rng.word_pos".into(), state.rng.get_word_pos().to_string());
    if let Some(sampler) = &state.sampler {
        meta.insert("sampler".into(), serde_json::to_string(sampler).expect("sampler serializes"));
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling file first so a crash never leaves a truncated
    // checkpoint under the final name.
    let tmp = path.with_extension("tmp");
    safetensors::tensor::serialize_to_file(tensors, &Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A parsed checkpoint file.
pub struct CheckpointFile {
    bytes: Vec<u8>,
    meta: HashMap<String, String>,
}

impl CheckpointFile {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, metadata) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = metadata.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a {FORMAT} checkpoint", path.display())));
        }
        Ok(Self { bytes, meta })
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata `{key}`")))
    }

    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::from_json(self.meta("config")?)
    }

    pub fn schema(&self) -> Result<SemanticSchema> {
        SemanticSchema::from_json(self.meta("schema")?)
    }

    pub fn step(&self) -> Result<u64> {
        self.parse("step")
    }

    fn tensors(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let st = self.tensors()?;
        let view = st
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        from_view(name, &view)
    }

    /// Copies `prefix + name` into every parameter of `module`, checking
    /// shapes.
    fn restore(&self, prefix: &str, params: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in params {
            restore_into(&self.tensor(&format!("{prefix}{name}"))?, p, name)?;
        }
        Ok(())
    }

    pub fn stats(&self) -> Result<WStatistics> {
        let mean_w = Vec::<f32>::try_from(self.tensor("stats.mean_w")?.to_kind(Kind::Float))?;
        Ok(WStatistics {
            mean_w,
            sample_count: self.parse("stats.sample_count")?,
        })
    }
}

fn restore_into(src: &Tensor, dst: &Tensor, name: &str) -> Result<()> {
    if src.size() != dst.size() {
        return Err(Error::Checkpoint(format!(
            "{name}: checkpoint shape {:?} does not match model shape {:?}",
            src.size(),
            dst.size()
        )));
    }
    tch::no_grad(|| dst.shallow_clone().copy_(&src.to_kind(dst.kind())));
    Ok(())
}

/// Rebuilds a [`TrainState`] that continues exactly where the saved run
/// stopped.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = CheckpointFile::open(path)?;
    let mode: TrainMode = serde_json::from_str(file.meta("mode")?).map_err(|e| Error::json("mode", e))?;
    let mut state = TrainState::new(file.config()?, file.schema()?, 0, mode)?;
    file.restore("g.", &state.g.named_params())?;
    file.restore("ema.", &state.ema.named_params())?;
    file.restore("d.", &state.d.named_params())?;
    let b = file.tensor("fourier.b")?;
    restore_into(&b, &state.g.fourier.b, "fourier.b")?;
    restore_into(&b, &state.ema.fourier.b, "fourier.b")?;
    for (prefix, opt) in [("opt_g", &mut state.opt_g), ("opt_d", &mut state.opt_d)] {
        let names: Vec<String> = opt.param_names().map(str::to_string).collect();
        for (i, name) in names.iter().enumerate() {
            restore_into(&file.tensor(&format!("{prefix}.m.{name}"))?, &opt.m[i], name)?;
            restore_into(&file.tensor(&format!("{prefix}.v.{name}"))?, &opt.v[i], name)?;
        }
        opt.steps = file.parse(&format!("{prefix}.steps"))?;
    }
    state.step = file.step()?;
    let bits = u64::from_str_radix(file.meta("path_mean_bits")?, 16)
        .map_err(|_| Error::Checkpoint("bad metadata `path_mean_bits`".into()))?;
    state.path_mean = f64::from_bits(bits);

    let seed_hex = file.meta("rng.seed")?;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 {
        return Err(Error::Checkpoint("bad metadata `rng.seed`".into()));
    }
    for (i, byte) in seed.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Checkpoint("bad metadata `rng.seed`".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(file.parse("rng.stream")?);
    rng.set_word_pos(file.parse("rng.word_pos")?);
    state.rng = rng;
    state.sampler = match file.meta.get("sampler") {
        Some(s) => Some(serde_json::from_str::<SamplerState>(s).map_err(|e| Error::json("sampler", e))?),
        None => None,
    };
    Ok(state)
}

/// The inference half of a checkpoint: the EMA generator plus `mean_w`.
#[derive(Debug)]
pub struct Model {
    pub generator: Generator,
    pub stats: WStatistics,
    pub step: u64,
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::open(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let generator = Generator::new(&mut rng, file.config()?, file.schema()?)?;
        file.restore("ema.", &generator.named_params())?;
        restore_into(&file.tensor("fourier.b")?, &generator.fourier.b, "fourier.b")?;
        freeze(&generator);
        Ok(Self {
            generator,
            stats: file.stats()?,
            step: file.step()?,
        })
    }

    /// Snapshot of the EMA generator of a live training state.
    pub fn from_state(state: &TrainState) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let generator = Generator::new(&mut rng, state.config.clone(), state.schema().clone())?;
        copy_params(&generator, &state.ema);
        tch::no_grad(|| generator.fourier.b.shallow_clone().copy_(&state.ema.fourier.b));
        freeze(&generator);
        Ok(Self {
            stats: estimate_stats(&generator)?,
            generator,
            step: state.step,
        })
    }
}

fn freeze(g: &Generator) {
    for (_, p) in g.named_params() {
        let _ = p.set_requires_grad(false);
    }
}
