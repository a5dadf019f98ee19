use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use compgan::checkpoint::Model;
use compgan::config::ModelConfig;
use compgan::editing::{
    fit_attribute, parse_alphas, plot_curves, sample_independent_slots, sweep_curve, write_curve_csv,
    ClassAreaScorer, EditDirection,
};
use compgan::image_io::save_png;
use compgan::latent::parse_slots;
use compgan::schema::SemanticSchema;
use compgan::service::{self, ServiceState, DEFAULT_CAPACITY};
use compgan::toy::make_toy_dataset;
use compgan::train::TrainMode;
use compgan::trainer::{run, TrainOptions};

#[derive(Parser)]
#[command(name = "compgan", version, about = "Compositional GAN training, editing and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, resume, or fine-tune on images alone.
    Train(TrainArgs),
    /// Write the synthetic toy dataset.
    MakeToyData(ToyArgs),
    /// Fit or evaluate latent edit directions.
    #[command(subcommand)]
    Edit(EditCommand),
    /// Run the HTTP synthesis service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to `<data>/schema.json`.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image-only training; the segmentation branch of D is frozen.
    #[arg(long)]
    finetune: bool,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 250)]
    sample_every: u64,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    /// Mirror training pairs horizontally at random.
    #[arg(long)]
    flip: bool,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    res: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EditCommand {
    /// Fit a direction for the area of one class.
    Fit {
        /// Class name whose area is the attribute.
        #[arg(long)]
        attr: String,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preservation and score gain over a range of edit strengths.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// A fitted direction file.
        #[arg(long)]
        direction: PathBuf,
        /// Class name to score; defaults to the direction's attribute.
        #[arg(long)]
        attr: Option<String>,
        /// Comma-separated slot names the edit is restricted to.
        #[arg(long, default_value = "all")]
        slots: String,
        #[arg(long, default_value = "-3:3:0.5", allow_hyphen_values = true)]
        alphas: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; a PNG plot is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Without a checkpoint the generation endpoints answer 503.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    app_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
}

fn class_scorer(schema: &SemanticSchema, name: &str) -> Result<ClassAreaScorer> {
    let class = schema
        .class_id(name)
        .with_context(|| format!("unknown class `{name}`"))?;
    Ok(ClassAreaScorer { class })
}

fn resolve_slots(spec: &str, schema: &SemanticSchema, num_slots: usize) -> Result<BTreeSet<usize>> {
    if spec == "all" {
        return Ok((0..num_slots).collect());
    }
    let mut out = BTreeSet::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.extend(parse_slots(name, schema)?);
    }
    if out.is_empty() {
        bail!("no slots selected by `{spec}`");
    }
    Ok(out)
}

fn train(args: TrainArgs) -> Result<()> {
    let config = ModelConfig::load(&args.config)?;
    let schema_path = args.schema.unwrap_or_else(|| args.data.join("schema.json"));
    let schema = SemanticSchema::load(&schema_path)?;
    let summary = run(&TrainOptions {
        config,
        schema,
        data_dir: args.data,
        out_dir: args.out,
        mode: if args.finetune {
            TrainMode::Finetune
        } else {
            TrainMode::Joint
        },
        resume: args.resume,
        seed: args.seed,
        steps: args.steps,
        sample_every: args.sample_every,
        checkpoint_every: args.checkpoint_every,
        flip: args.flip,
    })?;
    println!(
        "trained to step {} in {:.1}s, checkpoint {}",
        summary.final_step,
        summary.seconds,
        summary.checkpoint.display()
    );
    if let Some(m) = summary.last {
        println!("last step: {}", serde_json::to_string(&m)?);
    }
    Ok(())
}

fn edit(cmd: EditCommand) -> Result<()> {
    match cmd {
        EditCommand::Fit {
            attr,
            samples,
            ckpt,
            seed,
            out,
        } => {
            let model = Model::load(&ckpt)?;
            let scorer = class_scorer(&model.generator.schema, &attr)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let direction = fit_attribute(&model.generator, &mut rng, samples, &scorer, &attr)?;
            direction.save(&out)?;
            println!(
                "fit `{attr}` on {} samples: train accuracy {:.3}, validation accuracy {}",
                direction.sample_count,
                direction.train_accuracy,
                direction
                    .validation_accuracy
                    .map_or("n/a".to_string(), |a| format!("{a:.3}"))
            );
        }
        EditCommand::Sweep {
            ckpt,
            direction,
            attr,
            slots,
            alphas,
            seed,
            out,
        } => {
            let model = Model::load(&ckpt)?;
            let g = &model.generator;
            let direction = EditDirection::load(&direction)?;
            let scorer = class_scorer(&g.schema, attr.as_deref().unwrap_or(&direction.attribute))?;
            let restricted = resolve_slots(&slots, &g.schema, g.num_slots())?;
            let alphas = parse_alphas(&alphas)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bundle = sample_independent_slots(g, &mut rng, 1)?.remove(0);
            let curve = sweep_curve(g, &bundle, &direction, &restricted, &alphas, &scorer)?;
            write_curve_csv(&out, &curve)?;
            let all: BTreeSet<usize> = (0..g.num_slots()).collect();
            let mut plot = vec![curve.as_slice()];
            let full;
            if restricted != all {
                full = sweep_curve(g, &bundle, &direction, &all, &alphas, &scorer)?;
                plot.push(full.as_slice());
            }
            let png = out.with_extension("png");
            save_png(&plot_curves(&plot), &png)?;
            println!("wrote {} and {}", out.display(), png.display());
        }
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let model = match &args.ckpt {
        Some(path) => Some(Model::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => {
            log::warn!("no checkpoint given; generation endpoints will answer 503");
            None
        }
    };
    let state = ServiceState::new(model, args.capacity);
    tokio::runtime::Runtime::new()?.block_on(service::serve(state, args.app_dir, args.port))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    tch::set_num_threads(1);
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::MakeToyData(args) => {
            let dir = make_toy_dataset(args.seed, args.count, args.res, &args.out)?;
            println!("wrote {} samples to {}", args.count, dir.display());
            Ok(())
        }
        Command::Edit(cmd) => edit(cmd),
        Command::Serve(args) => serve(args),
    }
}
