//! Command-line front end: kernel-vs-oracle verification, mask export,
//! reachability and cost reports, benchmarking, and training/evaluating
//! the toy byte-level model.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or
//! configuration error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};

use csat_core::analysis::{
    bench_pattern, gen_qkv, masked_full_oracle, reachability, BenchOptions, BENCH_CSV_HEADER,
};
use csat_core::analysis::flop_estimate;
use csat_core::error::Error;
use csat_core::kernels::forward_spec;
use csat_core::lm::{
    checkpoint, eval_perplexity, train, Model, ModelConfig, PplReport, TrainConfig,
};
use csat_core::lm::train::loss_curve_csv;
use csat_core::pattern::{build_mask, AttnConfig, PatternSpec};
use csat_core::Precision;

const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Parser)]
#[command(
    name = "csat",
    version,
    about = "Chunk-shifted sparse attention toolkit",
    propagate_version = true
)]
struct Cli {
    /// Plain-text key=value defaults; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Cap on worker threads (CSAT_THREADS overrides when absent).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ShapeArgs {
    /// One of: full, local, s2, scca_fixed, scca_flow, sda, longmixed.
    #[arg(long)]
    pattern: Option<String>,

    /// Sequence length.
    #[arg(long)]
    n: Option<usize>,

    /// Chunk window for chunked patterns.
    #[arg(long)]
    w: Option<usize>,

    #[arg(long)]
    heads: Option<usize>,

    /// Head dimension.
    #[arg(long)]
    d: Option<usize>,

    /// Dilation distance for sda.
    #[arg(long)]
    theta: Option<usize>,

    #[arg(long)]
    batch: Option<usize>,

    #[arg(long, action = ArgAction::SetTrue)]
    causal: bool,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one kernel against the dense masked oracle and report the error.
    Verify(ShapeArgs),

    /// Write per-head PGM masks plus a CSV of attendable (head,q,k) triples.
    Mask {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Multi-layer receptive-field coverage of a pattern, as CSV.
    Reach {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        layers: Option<usize>,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Closed-form multiply-add costs, as CSV.
    Flops {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Wall-clock timings over one or more sequence lengths, as CSV.
    Bench {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Comma-separated sequence lengths, overriding --n.
        #[arg(long)]
        ns: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// single or double.
        #[arg(long)]
        precision: Option<String>,
        /// Generate inputs concurrently (values are identical either way).
        #[arg(long, action = ArgAction::SetTrue)]
        parallel_gen: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train the byte-level model on a corpus file.
    Train {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Train context length.
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        /// Model width (heads * head dim).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Position-interpolation factor stored with the model.
        #[arg(long)]
        pi_scale: Option<f64>,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Loss-curve CSV output path.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },

    /// Sliding-window perplexity of a checkpoint on a corpus file.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// key=value defaults loaded from --config.
struct FileCfg(HashMap<String, String>);

impl FileCfg {
    fn load(path: Option<&Path>) -> Result<FileCfg, Error> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Format(format!(
                        "config line {} is not key=value: `{raw}`",
                        lineno + 1
                    ))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileCfg(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config value `{raw}` for `{key}` does not parse"))
            }),
        }
    }

    fn flag(&self, key: &str) -> Result<bool, Error> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }
}

fn resolve<T: FromStr>(flag: Option<T>, file: &FileCfg, key: &str) -> Result<Option<T>, Error> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn required<T: FromStr>(flag: Option<T>, file: &FileCfg, key: &str) -> Result<T, Error> {
    resolve(flag, file, key)?
        .ok_or_else(|| Error::Config(format!("missing required option --{key}")))
}

fn or_default<T: FromStr>(
    flag: Option<T>,
    file: &FileCfg,
    key: &str,
    default: T,
) -> Result<T, Error> {
    Ok(resolve(flag, file, key)?.unwrap_or(default))
}

struct Shape {
    spec: PatternSpec,
    cfg: AttnConfig,
    seed: u64,
}

fn build_spec(name: &str, w: usize, theta: usize, heads: usize) -> Result<PatternSpec, Error> {
    match name {
        "full" => Ok(PatternSpec::Full),
        "local" => Ok(PatternSpec::Local { window: w }),
        "s2" => Ok(PatternSpec::S2 { window: w }),
        "scca_fixed" => Ok(PatternSpec::SccaFixed { window: w }),
        "scca_flow" => Ok(PatternSpec::SccaFlow { window: w }),
        "sda" => Ok(PatternSpec::Sda { theta }),
        "longmixed" => PatternSpec::long_mixed_default(heads, w),
        other => Err(Error::Config(format!(
            "unknown pattern `{other}` (expected full, local, s2, scca_fixed, scca_flow, sda, longmixed)"
        ))),
    }
}

fn resolve_shape(args: &ShapeArgs, file: &FileCfg) -> Result<Shape, Error> {
    let pattern: String = required(args.pattern.clone(), file, "pattern")?;
    let n = or_default(args.n, file, "n", 64)?;
    let w = or_default(args.w, file, "w", 16)?;
    let heads = or_default(args.heads, file, "heads", 4)?;
    let d = or_default(args.d, file, "d", 16)?;
    let theta = or_default(args.theta, file, "theta", 2)?;
    let batch = or_default(args.batch, file, "batch", 1)?;
    let causal = args.causal || file.flag("causal")?;
    let seed = or_default(args.seed, file, "seed", 0)?;
    let spec = build_spec(&pattern, w, theta, heads)?;
    let cfg = AttnConfig::new(batch, heads, n, d, spec.window().unwrap_or(n), causal)?;
    Ok(Shape { spec, cfg, seed })
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_verify(shape: &Shape) -> Result<i32, Error> {
    // validate pattern/config before generating any data
    let mask = build_mask(&shape.spec, &shape.cfg)?;
    let [q, k, v] = gen_qkv::<f64>(&shape.cfg, shape.seed);
    let got = forward_spec(&shape.spec, &shape.cfg, &q, &k, &v, false, true)?.out;
    let want = masked_full_oracle(&q, &k, &v, &mask)?;
    let err = got.max_abs_diff(&want)?;
    println!(
        "pattern={} n={} w_or_theta={} heads={} d={} causal={} max_abs_error={:e}",
        shape.spec.label(),
        shape.cfg.seq_len,
        shape.spec.w_or_theta(),
        shape.cfg.heads,
        shape.cfg.head_dim,
        shape.cfg.causal,
        err
    );
    if err < ORACLE_TOLERANCE {
        println!("verify: PASS (tolerance {ORACLE_TOLERANCE:e})");
        Ok(0)
    } else {
        println!("verify: FAIL (tolerance {ORACLE_TOLERANCE:e})");
        Ok(1)
    }
}

fn cmd_mask(shape: &Shape, out: &Path) -> Result<i32, Error> {
    let mask = build_mask(&shape.spec, &shape.cfg)?;
    mask.write_files(out)?;
    println!(
        "wrote {} head masks and mask.csv to {}",
        mask.heads(),
        out.display()
    );
    Ok(0)
}

fn cmd_reach(shape: &Shape, layers: usize, out: Option<&Path>) -> Result<i32, Error> {
    if layers == 0 {
        return Err(Error::Config("--layers must be >= 1".into()));
    }
    let mask = build_mask(&shape.spec, &shape.cfg)?;
    let report = reachability(&mask, layers);
    let mut text = String::from("pattern,N,w_or_theta,h,layer,coverage,min_reach,max_reach\n");
    for layer in &report.per_layer {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            shape.spec.label(),
            shape.cfg.seq_len,
            shape.spec.w_or_theta(),
            shape.cfg.heads,
            layer.layer,
            layer.coverage,
            layer.min_reach,
            layer.max_reach
        ));
    }
    write_or_print(out, &text)?;
    Ok(0)
}

fn cmd_flops(shape: &Shape, out: Option<&Path>) -> Result<i32, Error> {
    let est = flop_estimate(&shape.spec, &shape.cfg)?;
    let mut text =
        String::from("pattern,N,w_or_theta,h,D,score_mas,weighted_sum_mas,total_mas,ratio_to_full\n");
    text.push_str(&format!(
        "{},{},{},{},{},{},{},{},{}\n",
        shape.spec.label(),
        shape.cfg.seq_len,
        shape.spec.w_or_theta(),
        shape.cfg.heads,
        shape.cfg.head_dim,
        est.score_mas,
        est.weighted_sum_mas,
        est.total_mas,
        est.ratio_to_full
    ));
    write_or_print(out, &text)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    shape: &Shape,
    ns: &[usize],
    reps: usize,
    warmup: usize,
    precision: Precision,
    parallel_gen: bool,
    out: Option<&Path>,
) -> Result<i32, Error> {
    let opts = BenchOptions {
        reps,
        warmup,
        seed: shape.seed,
        parallel_gen,
    };
    let mut text = String::from(BENCH_CSV_HEADER);
    text.push('\n');
    for &n in ns {
        let cfg = AttnConfig::new(
            shape.cfg.batch,
            shape.cfg.heads,
            n,
            shape.cfg.head_dim,
            shape.spec.window().unwrap_or(n),
            shape.cfg.causal,
        )?;
        let row = match precision {
            Precision::Single => bench_pattern::<f32>(&shape.spec, &cfg, &opts)?,
            Precision::Double => bench_pattern::<f64>(&shape.spec, &cfg, &opts)?,
        };
        if let Some(warning) = &row.warning {
            eprintln!("warning: n={n}: {warning}");
        }
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    write_or_print(out, &text)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    shape: &Shape,
    corpus_path: &Path,
    steps: usize,
    context: usize,
    layers: usize,
    dim: usize,
    pi_scale: f64,
    tc: TrainConfig,
    ckpt: &Path,
    loss_csv: &Path,
) -> Result<i32, Error> {
    let corpus = fs::read(corpus_path)?;
    let mut cfg =
        ModelConfig::with_pattern(256, layers, dim, shape.cfg.heads, context, shape.spec.clone())?;
    cfg.pi_scale = pi_scale;
    cfg.validate()?;
    let mut model = Model::new(cfg, shape.seed)?;
    let (_, losses) = train(&mut model, &corpus, &tc)?;
    checkpoint::save(&model, ckpt)?;
    fs::write(loss_csv, loss_curve_csv(&losses))?;
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} bytes; final loss {final_loss}; checkpoint {} loss curve {}",
        steps,
        corpus.len(),
        ckpt.display(),
        loss_csv.display()
    );
    Ok(0)
}

fn cmd_eval(
    ckpt: &Path,
    corpus_path: &Path,
    context: usize,
    stride: usize,
    out: Option<&Path>,
) -> Result<i32, Error> {
    let model = checkpoint::load(ckpt)?;
    let corpus = fs::read(corpus_path)?;
    let report = eval_perplexity(&model, &corpus, context, stride)?;
    let text = format!("{}\n{}\n", PplReport::CSV_HEADER, report.to_csv_line());
    write_or_print(out, &text)?;
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    let file = FileCfg::load(cli.config.as_deref())?;
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => std::env::var("CSAT_THREADS")
            .ok()
            .and_then(|s| s.parse().ok()),
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // ignore failure: the pool can only be installed once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }

    match &cli.cmd {
        Cmd::Verify(args) => cmd_verify(&resolve_shape(args, &file)?),
        Cmd::Mask { shape, out } => {
            let resolved = resolve_shape(shape, &file)?;
            let out: PathBuf = required(out.clone(), &file, "out")?;
            cmd_mask(&resolved, &out)
        }
        Cmd::Reach { shape, layers, out } => {
            let resolved = resolve_shape(shape, &file)?;
            let layers = or_default(*layers, &file, "layers", 4)?;
            let out = resolve(out.clone(), &file, "out")?;
            cmd_reach(&resolved, layers, out.as_deref())
        }
        Cmd::Flops { shape, out } => {
            let resolved = resolve_shape(shape, &file)?;
            let out = resolve(out.clone(), &file, "out")?;
            cmd_flops(&resolved, out.as_deref())
        }
        Cmd::Bench {
            shape,
            ns,
            reps,
            warmup,
            precision,
            parallel_gen,
            out,
        } => {
            let resolved = resolve_shape(shape, &file)?;
            let ns_text: Option<String> = resolve(ns.clone(), &file, "ns")?;
            let ns: Vec<usize> = match ns_text {
                Some(list) => list
                    .split(',')
                    .map(|tok| {
                        tok.trim().parse::<usize>().map_err(|_| {
                            Error::Config(format!("bad sequence length `{tok}` in --ns"))
                        })
                    })
                    .collect::<Result<_, _>>()?,
                None => vec![resolved.cfg.seq_len],
            };
            let reps = or_default(*reps, &file, "reps", 10)?;
            let warmup = or_default(*warmup, &file, "warmup", 1)?;
            let precision = match or_default(precision.clone(), &file, "precision", "single".into())?
                .as_str()
            {
                "single" => Precision::Single,
                "double" => Precision::Double,
                other => {
                    return Err(Error::Config(format!(
                        "precision must be single or double, got `{other}`"
                    )))
                }
            };
            let parallel_gen = *parallel_gen || file.flag("parallel_gen")?;
            let out = resolve(out.clone(), &file, "out")?;
            cmd_bench(&resolved, &ns, reps, warmup, precision, parallel_gen, out.as_deref())
        }
        Cmd::Train {
            shape,
            corpus,
            steps,
            context,
            layers,
            dim,
            lr,
            warmup,
            weight_decay,
            pi_scale,
            ckpt,
            loss_csv,
        } => {
            let resolved = resolve_shape(shape, &file)?;
            let corpus: PathBuf = required(corpus.clone(), &file, "corpus")?;
            let steps = required(*steps, &file, "steps")?;
            let context = or_default(*context, &file, "context", 32)?;
            let layers = or_default(*layers, &file, "layers", 2)?;
            let dim = or_default(*dim, &file, "dim", 64)?;
            let defaults = TrainConfig::default();
            let tc = TrainConfig {
                steps,
                lr: or_default(*lr, &file, "lr", defaults.lr)?,
                warmup: or_default(*warmup, &file, "warmup", defaults.warmup)?,
                weight_decay: or_default(*weight_decay, &file, "weight_decay", defaults.weight_decay)?,
                seed: resolved.seed,
            };
            let pi_scale = or_default(*pi_scale, &file, "pi_scale", 1.0)?;
            let ckpt = or_default(ckpt.clone(), &file, "ckpt", PathBuf::from("model.csat"))?;
            let loss_csv = or_default(loss_csv.clone(), &file, "loss_csv", PathBuf::from("loss.csv"))?;
            cmd_train(
                &resolved, &corpus, steps, context, layers, dim, pi_scale, tc, &ckpt, &loss_csv,
            )
        }
        Cmd::Eval {
            ckpt,
            corpus,
            context,
            stride,
            out,
        } => {
            let ckpt: PathBuf = required(ckpt.clone(), &file, "ckpt")?;
            let corpus: PathBuf = required(corpus.clone(), &file, "corpus")?;
            let context = required(*context, &file, "context")?;
            let stride = required(*stride, &file, "stride")?;
            let out = resolve(out.clone(), &file, "out")?;
            cmd_eval(&ckpt, &corpus, context, stride, out.as_deref())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    };
    std::process::exit(code);
}
