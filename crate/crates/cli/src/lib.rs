//! Command-line front end: dataset generation, training, evaluation,
//! attention dumps, the position-encoding benchmark and text decoupling.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand};
use dualground_core::bench::{bench_schemes, compare_report, BenchInputs, BenchShape};
use dualground_core::geometry::Scheme;
use dualground_core::grounding::{
    evaluate, load_checkpoint, prepare_sample, trace_sample, train_prepared, write_attention_dump, GroundingModel, ModelConfig, TrainOptions,
};
use dualground_core::scenegen::{gen_dataset, load_dataset, save_dataset, SceneConfig};
use dualground_core::textsplit::{format_decoupled, Lexicon, TokenSet};
use dualground_core::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dualground", version, about = "3D visual grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a line-delimited dataset of scenes and utterances.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        num_scenes: usize,
        #[arg(long, default_value_t = 8)]
        objects_per_scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value override, repeatable.
        #[arg(long = "config", value_name = "KEY=VALUE")]
        config: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics file; stdout when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON summary path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the position-encoding schemes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "box_surface,center,vertex")]
        schemes: Vec<String>,
        #[arg(long = "K", default_value_t = 256)]
        queries: usize,
        #[arg(long = "N", default_value_t = 1024)]
        seeds: usize,
        #[arg(long = "D", default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Write per-layer attention maps for one sample.
    AttnDump {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Line index or scene id.
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Label utterances from stdin, one per line.
    Decouple,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn help_for(sub: Option<&str>) -> String {
    let mut cmd = Cli::command();
    if let Some(sc) = sub.and_then(|s| cmd.find_subcommand_mut(s)) {
        return sc.render_help().to_string();
    }
    cmd.render_help().to_string()
}

/// Parses `argv` (program name first) and runs it with real stdio.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdin = io::stdin();
    run_with(argv, &mut stdin.lock(), &mut io::stdout().lock(), &mut io::stderr().lock())
}

pub fn run_with<I, S>(argv: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let sub = args.get(1).and_then(|s| s.to_str());
            let _ = write!(err, "{e}\n{}", help_for(sub));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.cmd, input, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Cmd, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen { seed, num_scenes, objects_per_scene, out: path } => {
            let cfg = SceneConfig { num_objects: objects_per_scene, ..SceneConfig::default() };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let data = gen_dataset(seed, num_scenes, &cfg)?;
            save_dataset(&path, &data)?;
            let multiple = data.iter().filter(|s| s.is_multiple()).count();
            let relational = data.iter().filter(|s| s.token_labels.iter().any(|l| l.is_surrounding())).count();
            writeln!(out, "wrote {} samples to {}", data.len(), path.display())?;
            writeln!(out, "objects per scene: {objects_per_scene}")?;
            writeln!(out, "unique: {}  multiple: {multiple}", data.len() - multiple)?;
            writeln!(out, "utterances with surrounding context: {relational}")?;
        }
        Cmd::Train { data, config, out: ckpt, seed, metrics } => {
            let mut cfg = ModelConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.apply_overrides(&config).map_err(|e| Failure::Usage(e.to_string()))?;
            let scene_cfg = SceneConfig::default();
            let samples = load_dataset(&data, &scene_cfg)?;
            let mut model = GroundingModel::new(&cfg)?;
            let lex = Lexicon::standard();
            let prepared = samples.iter().map(|s| prepare_sample(s, &model, &scene_cfg, &lex)).collect::<dualground_core::Result<Vec<_>>>()?;
            let mut file_sink;
            let sink: &mut dyn Write = match &metrics {
                Some(p) => {
                    file_sink = BufWriter::new(fs::File::create(p)?);
                    &mut file_sink
                }
                None => out,
            };
            train_prepared(&mut model, &prepared, TrainOptions { metrics: Some(sink), checkpoint: Some(&ckpt) })?;
        }
        Cmd::Eval { data, checkpoint, out: summary } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let scene_cfg = SceneConfig::default();
            let samples = load_dataset(&data, &scene_cfg)?;
            let report = evaluate(&model, &samples, &scene_cfg)?;
            write!(out, "{}", report.to_text())?;
            if let Some(p) = summary {
                fs::write(p, serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n")?;
            }
        }
        Cmd::Bench { schemes, queries, seeds, dim, heads, reps, out_csv } => {
            let schemes = schemes.iter().map(|s| s.parse::<Scheme>()).collect::<dualground_core::Result<Vec<_>>>().map_err(|e| Failure::Usage(e.to_string()))?;
            let inputs = BenchInputs::new(BenchShape { queries, seeds, dim, heads }).map_err(|e| Failure::Usage(e.to_string()))?;
            let results = bench_schemes(&inputs, &schemes, reps)?;
            if results.len() == 1 {
                let r = &results[0];
                writeln!(out, "{}: median {:.3} ms (p10 {:.3}, p90 {:.3}), buffer {} bytes", r.scheme, r.median_ms, r.p10_ms, r.p90_ms, r.buffer_bytes)?;
            } else {
                let (text, csv) = compare_report(&results)?;
                write!(out, "{text}")?;
                if let Some(p) = out_csv {
                    fs::write(p, csv)?;
                }
            }
        }
        Cmd::AttnDump { data, checkpoint, sample_id, out_dir } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let scene_cfg = SceneConfig::default();
            let samples = load_dataset(&data, &scene_cfg)?;
            let sample = match sample_id.parse::<usize>() {
                Ok(i) => samples.get(i),
                Err(_) => samples.iter().find(|s| s.scene.scene_id == sample_id),
            }
            .ok_or_else(|| Failure::Usage(format!("no sample `{sample_id}` among {} samples", samples.len())))?;
            let prepared = prepare_sample(sample, &model, &scene_cfg, &Lexicon::standard())?;
            let trace = trace_sample(&model, &prepared)?;
            for p in write_attention_dump(&trace, &out_dir)? {
                writeln!(out, "{}", p.display())?;
            }
        }
        Cmd::Decouple => {
            let lex = Lexicon::standard();
            let mut text = String::new();
            input.read_to_string(&mut text)?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let set = TokenSet::parse(line, &lex)?;
                writeln!(out, "{}", format_decoupled(&set.tokens, &set.labels))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
