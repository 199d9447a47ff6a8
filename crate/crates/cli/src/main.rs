use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nearby3d::attention::{nearby_mask, Extent};
use nearby3d::bench::{report_csv, run_bench, BenchConfig, Mechanism};
use nearby3d::io::save_tokens;
use nearby3d::model::{load_checkpoint, sample, save_checkpoint, ModelConfig, ParamLayout, Strategy};
use nearby3d::train::{loss_csv, toy_dataset, train_toy, TaskKind};
use nearby3d::Dims3;

#[derive(Parser)]
#[command(name = "nearby3d", version, about = "3D nearby attention: masks, benchmarks, toy training, sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an attention mask as PGM + CSV.
    Mask(MaskArgs),
    /// Count pairs and time sparse vs dense attention.
    Bench(BenchArgs),
    /// Train on the synthetic three-task set.
    Train(TrainArgs),
    /// Generate a token grid from a checkpoint.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mech {
    Nearby,
    Axial,
    Block,
    Full,
}

impl Mech {
    fn name(self) -> &'static str {
        match self {
            Mech::Nearby => "nearby",
            Mech::Axial => "axial",
            Mech::Block => "block",
            Mech::Full => "full",
        }
    }
}

fn parse_dims(s: &str) -> Result<Dims3, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected h,w,s, got {s:?}"));
    }
    let mut v = [0usize; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| format!("bad dimension {p:?}"))?;
        if *slot == 0 {
            return Err("dimensions must be positive".into());
        }
    }
    Ok(Dims3::new(v[0], v[1], v[2]))
}

fn parse_extent(s: &str) -> Result<Extent, String> {
    s.parse().map_err(|e: nearby3d::Error| e.to_string())
}

fn parse_ids(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad token id {p:?}")))
        .collect()
}

#[derive(Args)]
struct MaskArgs {
    /// Query grid h,w,s.
    #[arg(long, value_parser = parse_dims)]
    dims: Dims3,
    #[arg(long, value_enum)]
    mech: Mech,
    /// Window sizes e_h,e_w,e_s (odd, or "all").
    #[arg(long, value_parser = parse_extent)]
    extent: Option<Extent>,
    /// Block dims for the block mechanism.
    #[arg(long, value_parser = parse_dims)]
    block: Option<Dims3>,
    #[arg(long)]
    causal: bool,
    /// Key grid for nearby cross-attention masks.
    #[arg(long, value_parser = parse_dims)]
    cond_dims: Option<Dims3>,
    /// Output prefix; writes PREFIX.pgm and PREFIX.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid dims, repeatable.
    #[arg(long, value_parser = parse_dims, required = true)]
    dims: Vec<Dims3>,
    /// Mechanisms, repeatable.
    #[arg(long, value_enum, required = true)]
    mech: Vec<Mech>,
    #[arg(long, value_parser = parse_extent)]
    extent: Option<Extent>,
    #[arg(long, value_parser = parse_dims)]
    block: Option<Dims3>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature width of the random inputs.
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long)]
    causal: bool,
    /// Parallel gathered attention.
    #[arg(long)]
    parallel: bool,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Temperature,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    T2i,
    V2v,
    T2v,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::T2i => TaskKind::T2I,
            TaskArg::V2v => TaskKind::V2V,
            TaskArg::T2v => TaskKind::T2V,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Refuse to sample when set to a preset too large for this tool.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "t2v")]
    task: TaskArg,
    /// Text ids; defaults to the training text for the task.
    #[arg(long, value_parser = parse_ids)]
    text: Option<Vec<usize>>,
    /// Given first-frame tokens for video prediction; defaults to the training frame.
    #[arg(long, value_parser = parse_ids)]
    given: Option<Vec<usize>>,
    /// Output grid (N3TG); a text dump goes next to it with a .txt extension.
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_mask(a: MaskArgs) -> Result<()> {
    let mask = match (a.mech, a.cond_dims) {
        (Mech::Nearby, Some(cond)) => {
            let extent = a.extent.context("--mech nearby needs --extent")?;
            nearby_mask(a.dims, cond, extent, a.causal)?
        }
        (_, Some(_)) => bail!("--cond-dims only applies to nearby masks"),
        (m, None) => Mechanism::parse(m.name(), a.extent, a.block)?.mask(a.dims, a.causal)?,
    };
    write(&with_ext(&a.out, "pgm"), mask.to_pgm())?;
    write(&with_ext(&a.out, "csv"), mask.to_csv())?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mechanisms = a
        .mech
        .iter()
        .map(|m| Mechanism::parse(m.name(), a.extent, a.block))
        .collect::<nearby3d::Result<Vec<_>>>()?;
    let mut config = BenchConfig::new(a.dims, mechanisms, a.repeats, a.seed);
    config.width = a.width;
    config.causal = a.causal;
    config.parallel = a.parallel;
    let csv = report_csv(&run_bench(&config)?);
    match a.out {
        Some(path) => write(&path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn refuse_large(preset: &str) -> Result<ModelConfig> {
    let config = ModelConfig::preset(preset)?;
    if preset == "paper-scale" {
        let count = ParamLayout::new(&config).count();
        println!("preset paper-scale: {count} parameters");
        bail!("preset paper-scale is for parameter counting only; use --preset toy");
    }
    Ok(config)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = refuse_large(&a.preset)?;
    let data = toy_dataset(&config)?;
    let out = train_toy(config, &data, a.steps, a.seed)?;
    save_checkpoint(&a.out, &out.model).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.loss_csv {
        write(path, loss_csv(&out.losses))?;
    }
    if let Some(last) = out.losses.last() {
        eprintln!("final loss {last}");
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    if let Some(p) = &a.preset {
        refuse_large(p)?;
    }
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("reading checkpoint {}", a.ckpt.display()))?;
    let config = model.config();
    let kind = TaskKind::from(a.task);
    let example = toy_dataset(config)?
        .into_iter()
        .find(|e| e.kind() == kind)
        .expect("toy set covers every task");
    let mut cond = example.condition();
    if let Some(text) = a.text {
        if kind == TaskKind::V2V {
            bail!("video prediction is conditioned on None; --text does not apply");
        }
        cond = nearby3d::model::Condition::Text(text);
    }
    let given = match a.given {
        Some(g) if kind == TaskKind::V2V => g,
        Some(_) => bail!("--given only applies to --task v2v"),
        None => example.given_tokens(),
    };
    let strategy = match a.strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::Temperature => Strategy::Temperature {
            tau: a.temperature,
            seed: a.seed,
        },
    };
    let grid = sample(&model, &cond, example.target().dims(), strategy, &given)?;
    save_tokens(&a.out, &grid).with_context(|| format!("writing {}", a.out.display()))?;
    write(&a.out.with_extension("txt"), grid.render_text())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
