use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use ade_core::pipeline::{PipelineConfig, TeacherMode};
use ade_core::teacher::{NoiseConfig, PromptMode};

#[derive(Parser)]
#[command(name = "ade", version, about = "Drug-centric adverse event extraction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split documents into sentences and keep those naming a lexicon drug.
    Curate(Common),
    /// Label curated sentences with the teacher and write the training pool.
    Annotate(Common),
    /// Train the student on the teacher pool.
    Train(Common),
    /// Score a checkpoint against gold annotations.
    Eval(Common),
    /// Teacher labelling, student training and the student/teacher comparison in one run.
    Distill(Common),
    /// Time unified against pairwise inference over a grid of drug and event counts.
    Bench(Common),
    /// Write a synthetic corpus with gold annotations.
    Synth(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Curate(_) => "curate",
            Command::Annotate(_) => "annotate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Distill(_) => "distill",
            Command::Bench(_) => "bench",
            Command::Synth(_) => "synth",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Curate(c)
            | Command::Annotate(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Distill(c)
            | Command::Bench(c)
            | Command::Synth(c) => c,
        }
    }
}

/// Flags shared by every subcommand; any flag given wins over the config file.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Documents JSONL.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Gold annotations JSONL.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    sentences: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// mock or real.
    #[arg(long, visible_alias = "teacher")]
    teacher_mode: Option<String>,
    /// zero or few.
    #[arg(long, visible_alias = "mode")]
    prompt: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    teacher_model: Option<String>,
    #[arg(long)]
    max_parallel: Option<usize>,
    /// All mock noise settings at once: drop,spurious,jitter,seed.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    noise_drop: Option<f64>,
    #[arg(long)]
    noise_spurious: Option<f64>,
    #[arg(long)]
    noise_jitter: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    /// Synthetic corpus size in drug sentences.
    #[arg(long)]
    n_sentences: Option<usize>,
    /// Timed repetitions per bench cell.
    #[arg(long)]
    repeats: Option<usize>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable config or inputs, missing credentials: exit 2.
    Usage(anyhow::Error),
    /// The run itself failed: exit 1.
    Failure(anyhow::Error),
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        CliError::Usage(e.into())
    }

    pub fn failure(e: impl Into<anyhow::Error>) -> Self {
        CliError::Failure(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn set<T>(slot: &mut T, v: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

/// Config file (or defaults) with flag overrides applied, then validated.
pub fn resolve_config(c: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(anyhow::anyhow!("{}: {e}", p.display())))?;
            toml::from_str::<PipelineConfig>(&text)
                .map_err(|e| CliError::usage(anyhow::anyhow!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, &c.seed);
    // --seed also reseeds the components; a seed inside --noise still wins.
    if c.seed.is_some() {
        cfg.training.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.teacher.noise.seed = cfg.seed;
    }
    set(&mut cfg.paths.out, &c.out);
    set_path(&mut cfg.paths.lexicon, &c.lexicon);
    set_path(&mut cfg.paths.corpus, &c.corpus);
    set_path(&mut cfg.paths.gold, &c.gold);
    set_path(&mut cfg.paths.sentences, &c.sentences);
    set_path(&mut cfg.paths.annotations, &c.annotations);
    set_path(&mut cfg.paths.checkpoint, &c.checkpoint);
    set_path(&mut cfg.paths.cache, &c.cache);
    set(&mut cfg.training.epochs, &c.epochs);
    set(&mut cfg.training.batch_size, &c.batch_size);
    set(&mut cfg.training.lr, &c.lr);
    set(&mut cfg.training.threshold, &c.threshold);
    set(&mut cfg.model.d_model, &c.d_model);
    set(&mut cfg.model.n_layers, &c.n_layers);
    set(&mut cfg.model.n_heads, &c.n_heads);
    set(&mut cfg.model.max_seq_len, &c.max_seq_len);
    if let Some(m) = &c.teacher_mode {
        cfg.teacher.mode = match m.as_str() {
            "mock" => TeacherMode::Mock,
            "real" => TeacherMode::Real,
            other => return Err(CliError::usage(anyhow::anyhow!("unknown teacher mode {other:?}"))),
        };
    }
    if let Some(p) = &c.prompt {
        cfg.teacher.prompt = p
            .parse::<PromptMode>()
            .map_err(|e| CliError::usage(anyhow::anyhow!("{e}")))?;
    }
    set(&mut cfg.teacher.endpoint, &c.endpoint);
    set(&mut cfg.teacher.model, &c.teacher_model);
    set(&mut cfg.teacher.max_parallel, &c.max_parallel);
    if let Some(spec) = &c.noise {
        cfg.teacher.noise = parse_noise(spec).map_err(CliError::usage)?;
    }
    set(&mut cfg.teacher.noise.drop_rate, &c.noise_drop);
    set(&mut cfg.teacher.noise.spurious_rate, &c.noise_spurious);
    set(&mut cfg.teacher.noise.jitter_rate, &c.noise_jitter);
    set(&mut cfg.distill_pool_size, &c.pool_size);
    set(&mut cfg.synth.n_sentences, &c.n_sentences);
    set(&mut cfg.bench.repeats, &c.repeats);
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

fn parse_noise(spec: &str) -> anyhow::Result<NoiseConfig> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [d, s, j, seed] = parts[..] else {
        anyhow::bail!("--noise expects drop,spurious,jitter,seed, got {spec:?}");
    };
    Ok(NoiseConfig::new(d.parse()?, s.parse()?, j.parse()?, seed.parse()?)?)
}

pub fn require_file(p: &Path, what: &str) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(anyhow::anyhow!("{what} not found: {}", p.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = resolve_config(cli.command.common()).and_then(|cfg| {
        std::fs::create_dir_all(&cfg.paths.out).map_err(|e| {
            CliError::usage(anyhow::anyhow!("cannot create {}: {e}", cfg.paths.out.display()))
        })?;
        let mut m = manifest::Manifest::new(name, &cfg);
        match &cli.command {
            Command::Curate(_) => commands::curate(&cfg, &mut m),
            Command::Annotate(_) => commands::annotate(&cfg, &mut m),
            Command::Train(_) => commands::train(&cfg, &mut m),
            Command::Eval(_) => commands::eval(&cfg, &mut m),
            Command::Distill(_) => commands::distill(&cfg, &mut m),
            Command::Bench(_) => commands::bench(&cfg, &mut m),
            Command::Synth(_) => commands::synth(&cfg, &mut m),
        }?;
        m.write(&cfg.paths.out).map_err(CliError::failure)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_spec_parses_and_rejects() {
        let n = parse_noise("0.1, 0.05,0.2,9").unwrap();
        assert_eq!((n.drop_rate, n.spurious_rate, n.jitter_rate, n.seed), (0.1, 0.05, 0.2, 9));
        assert!(parse_noise("0.1,0.2").is_err());
        assert!(parse_noise("1.5,0,0,1").is_err());
    }

    #[test]
    fn seed_flag_reseeds_components_unless_noise_names_one() {
        let c = Common {
            seed: Some(8),
            ..Default::default()
        };
        let cfg = resolve_config(&c).unwrap();
        assert_eq!((cfg.training.seed, cfg.synth.seed, cfg.teacher.noise.seed), (8, 8, 8));
        let c = Common {
            seed: Some(8),
            noise: Some("0,0,0,3".into()),
            ..Default::default()
        };
        assert_eq!(resolve_config(&c).unwrap().teacher.noise.seed, 3);
    }

    #[test]
    fn bad_enum_flags_are_usage_errors() {
        let c = Common {
            teacher_mode: Some("oracle".into()),
            ..Default::default()
        };
        assert!(matches!(resolve_config(&c), Err(CliError::Usage(_))));
    }
}
