//! `gain`: train, evaluate and profile GAIN on the synthetic segmentation set.
//!
//! Exit status: 0 on success, 1 for invalid input (flags, config, arguments),
//! 2 for runtime failures (I/O, divergence, failing gradient checks).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gain_core::attention::{registry, write_attention, KeySource};
use gain_core::config::Config;
use gain_core::cost::{ablation_matrix, bench_time, parse_axes, write_ablation, BenchResult};
use gain_core::gradsuite::full_suite;
use gain_core::net::{load_checkpoint, save_checkpoint, Gain};
use gain_core::nn::Ctx;
use gain_core::train::{evaluate, generate_dataset, generate_sample, make_batch, miou, train, val_spec, write_log};
use gain_core::Graph;
use serde_json::json;

#[derive(Parser)]
#[command(name = "gain", version, about = "Guided attentive interpolation network: training and cost analysis")]
struct Cli {
    /// Config file of `key = value` lines (see docs/config.md).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the synthetic set; writes train_log.csv, checkpoint.bin, config.cfg, summary.json.
    Train {
        /// Overrides `train.iters`.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Confusion matrix and mIoU of a checkpoint; writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Number of images (default: train.val_samples or data.num_samples).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Wall-clock timing of one GAI module; writes bench.json and bench_timings.json.
    Bench {
        /// Also time full attention with high-resolution keys and report the speed-up.
        #[arg(long)]
        compare: bool,
    },
    /// Itemised analytic FLOPs of the network at `flops.input`; writes flops.json and flops.txt.
    Flops,
    /// Finite-difference gradient suite; writes gradcheck.txt, fails unless every check passes.
    Gradcheck,
    /// Trains every configuration of an ablation sweep; writes ablation.csv.
    Ablate {
        /// Overrides `ablate.axes`.
        #[arg(long)]
        axes: Option<String>,
        /// Overrides `train.iters` for every row.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Attention weights of chosen query pixels on one validation image; writes attention_<module>.csv.
    DumpAttn {
        /// Query pixels on the stride-8 grid, `h,w;h,w;...`.
        #[arg(long)]
        points: String,
        /// Trained weights (default: the seeded initialisation).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "up4")]
        module: String,
        /// Recurrence step (default: the last).
        #[arg(long)]
        step: Option<usize>,
        /// Index of the validation image.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

/// Bad user input that the core library cannot see (flags, files).
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some() || c.downcast_ref::<gain_core::Error>().is_some_and(|e| e.is_validation())
    })
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            Config::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn json_text(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serialises");
    s.push('\n');
    s
}

fn cmd_train(cfg: &mut Config, out: &Path, iters: Option<usize>) -> Result<()> {
    if let Some(n) = iters {
        cfg.train.iters = n;
    }
    cfg.validate()?;
    let (net, outcome) = train(&cfg.net, &cfg.data, &cfg.train)?;
    let mut log = Vec::new();
    write_log(&outcome.log, &mut log)?;
    write(out, "train_log.csv", log)?;
    save_checkpoint(&outcome.store, &out.join("checkpoint.bin"))?;
    write(out, "config.cfg", cfg.to_text())?;

    // Same number of images as the validation split, drawn from training data.
    let train_set = generate_dataset(&cfg.data.with_seed(cfg.data.seed, cfg.train.val_samples.min(cfg.data.num_samples)))?;
    let train_miou = miou(&evaluate(&net, &outcome.store, &train_set, cfg.train.batch)?).mean;
    let summary = json!({
        "seed": cfg.train.seed,
        "iters": cfg.train.iters,
        "upsampler": cfg.net.upsampler(),
        "final_val_miou": outcome.final_val_miou,
        "train_subset_miou": train_miou,
        "parameters": outcome.store.num_trainable(),
    });
    write(out, "summary.json", json_text(&summary))?;
    println!(
        "trained {} iterations ({}): val mIoU {:.4}, train-subset mIoU {:.4}",
        cfg.train.iters,
        cfg.net.upsampler(),
        outcome.final_val_miou,
        train_miou
    );
    Ok(())
}

fn load_net(cfg: &Config, checkpoint: Option<&Path>) -> Result<(Gain, gain_core::nn::ParamStore)> {
    let (net, mut store) = Gain::build(cfg.net.clone(), cfg.train.seed)?;
    if let Some(path) = checkpoint {
        if !path.exists() {
            return Err(usage(format!("checkpoint {} does not exist", path.display())));
        }
        load_checkpoint(&mut store, path).with_context(|| format!("loading {}", path.display()))?;
    }
    Ok((net, store))
}

fn cmd_eval(cfg: &Config, out: &Path, checkpoint: &Path, split: Split, samples: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let (net, store) = load_net(cfg, Some(checkpoint))?;
    let (name, spec) = match split {
        Split::Val => ("val", val_spec(&cfg.data, samples.unwrap_or(cfg.train.val_samples))),
        Split::Train => ("train", cfg.data.with_seed(cfg.data.seed, samples.unwrap_or(cfg.data.num_samples))),
    };
    let set = generate_dataset(&spec)?;
    let cm = evaluate(&net, &store, &set, cfg.train.batch)?;
    let r = miou(&cm);
    let k = cm.classes();
    let rows: Vec<Vec<u64>> = cm.counts().chunks(k).map(<[u64]>::to_vec).collect();
    let report = json!({
        "split": name,
        "samples": set.len(),
        "confusion": rows,
        "per_class_iou": r.per_class,
        "miou": r.mean,
        "empty": r.empty,
    });
    write(out, "eval.json", json_text(&report))?;
    println!("{name}: mIoU {:.4} over {} images", r.mean, set.len());
    Ok(())
}

fn timing_free(r: &BenchResult) -> serde_json::Value {
    json!({
        "config_id": r.config_id,
        "repeats": r.repeats,
        "warmups": r.warmups,
        "affinity_elements": r.affinity_elements,
        "flops": r.flops,
    })
}

fn cmd_bench(cfg: &Config, out: &Path, compare: bool) -> Result<()> {
    cfg.validate()?;
    let mut configs = vec![cfg.bench_config()];
    if compare {
        let mut full = cfg.bench_config();
        full.gai.attention = "full".into();
        full.gai.key_source = KeySource::HighRes;
        configs.push(full);
    }
    let mut results = Vec::new();
    for b in &configs {
        let r = bench_time(b, cfg.bench_repeats, cfg.bench_warmups, cfg.train.seed)?;
        println!(
            "{}: median {:.2} ms (mean {:.2}, min {:.2}, std {:.2}) over {} repeats; {} affinity elements, {} FLOPs",
            r.config_id, r.median_ms, r.mean_ms, r.min_ms, r.std_ms, r.repeats, r.affinity_elements, r.flops
        );
        results.push(r);
    }
    if let [a, b] = results.as_slice() {
        println!("speed-up of {} over {}: {:.2}x", a.config_id, b.config_id, b.median_ms / a.median_ms);
    }
    let counts: Vec<_> = results.iter().map(timing_free).collect();
    write(out, "bench.json", json_text(&json!(counts)))?;
    write(out, "bench_timings.json", json_text(&serde_json::to_value(&results)?))?;
    Ok(())
}

fn cmd_flops(cfg: &Config, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (net, _) = Gain::build(cfg.net.clone(), cfg.train.seed)?;
    let report = net.flops(cfg.flops_input);
    write(out, "flops.json", report.to_json() + "\n")?;
    write(out, "flops.txt", report.render())?;
    let (h, w) = cfg.flops_input;
    let gai: u64 = ["gai4", "gai5"].iter().map(|m| report.module_excluding_resize(m)).sum();
    println!("input {h}x{w}: network {:.3} GFLOPs excluding resize", report.total_excluding_resize as f64 / 1e9);
    if cfg.net.use_gai {
        println!("GAI modules: {:.3} GFLOPs excluding resize", gai as f64 / 1e9);
        let (hk, wk) = match cfg.net.gai.key_source {
            KeySource::LowRes => (h / 16, w / 16),
            KeySource::HighRes => (h / 8, w / 8),
        };
        println!(
            "full / criss-cross attention FLOPs at keys {hk}x{wk}: {}/{} = {:.3}",
            hk * wk,
            hk + wk - 1,
            (hk * wk) as f64 / (hk + wk - 1) as f64
        );
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &Config, out: &Path) -> Result<()> {
    let suite = full_suite(cfg.train.seed);
    let mut text = String::new();
    for e in &suite {
        let line = format!(
            "{:<28} {} max rel. error {:.3e} (tolerance {:.0e})",
            e.name,
            if e.passed() { "PASS" } else { "FAIL" },
            e.report.max_rel_error(),
            e.report.tolerance
        );
        println!("{line}");
        text += &line;
        text.push('\n');
    }
    write(out, "gradcheck.txt", text)?;
    let failed: Vec<_> = suite.iter().filter(|e| !e.passed()).map(|e| e.name).collect();
    if !failed.is_empty() {
        anyhow::bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_ablate(cfg: &mut Config, out: &Path, axes: Option<&str>, iters: Option<usize>) -> Result<()> {
    if let Some(a) = axes {
        cfg.ablate_axes = parse_axes(a)?;
    }
    if let Some(n) = iters {
        cfg.train.iters = n;
    }
    cfg.validate()?;
    let rows = ablation_matrix(&cfg.net, &cfg.ablate_axes, &cfg.data, &cfg.train, |r| match r.miou {
        Some(m) => println!("row {}: {} mIoU {m:.4}", r.row, r.config),
        None => println!("row {}: {} failed: {}", r.row, r.config, r.status),
    });
    let mut csv = Vec::new();
    write_ablation(&rows, &mut csv)?;
    write(out, "ablation.csv", csv)?;
    let failed = rows.iter().filter(|r| r.miou.is_none()).count();
    if failed > 0 {
        anyhow::bail!("{failed} of {} ablation rows failed", rows.len());
    }
    Ok(())
}

fn parse_points(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (h, w) = p.split_once(',').ok_or_else(|| usage(format!("query point `{p}` is not `h,w`")))?;
            let n = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(format!("query point `{p}` is not `h,w`")));
            Ok((n(h)?, n(w)?))
        })
        .collect()
}

struct DumpArgs<'a> {
    points: &'a str,
    checkpoint: Option<&'a Path>,
    module: &'a str,
    step: Option<usize>,
    sample: usize,
}

fn cmd_dump_attn(cfg: &Config, out: &Path, args: DumpArgs<'_>) -> Result<()> {
    cfg.validate()?;
    let points = parse_points(args.points)?;
    if points.is_empty() {
        return Err(usage("--points needs at least one query pixel"));
    }
    if !cfg.net.use_gai {
        return Err(usage("dump-attn needs net.use_gai = true"));
    }
    let (net, mut store) = load_net(cfg, args.checkpoint)?;
    let sample = generate_sample(&val_spec(&cfg.data, args.sample + 1), args.sample);
    let (image, _) = make_batch(std::slice::from_ref(&sample), &[0])?;
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, &mut store, false);
    let x = ctx.input(image);
    let traces = net.attention_traces(&mut ctx, x)?;
    let (_, trace) = traces
        .iter()
        .find(|(name, _)| *name == args.module)
        .ok_or_else(|| usage(format!("unknown module `{}` (expected up4 or up5)", args.module)))?;
    let last = trace.affinities.len() - 1;
    let step = args.step.unwrap_or(last);
    if step > last {
        return Err(usage(format!("--step {step} exceeds the last recurrence step {last}")));
    }
    let kernel = registry().get(&cfg.net.gai.attention)?;
    let mut csv = Vec::new();
    write_attention(&g, kernel.as_ref(), &trace.affinities[step], &points, &mut csv)?;
    let path = write(out, &format!("attention_{}.csv", args.module), csv)?;
    println!("wrote {} query points to {}", points.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::Train { iters } => cmd_train(&mut cfg, out, *iters),
        Cmd::Eval {
            checkpoint,
            split,
            samples,
        } => cmd_eval(&cfg, out, checkpoint, *split, *samples),
        Cmd::Bench { compare } => cmd_bench(&cfg, out, *compare),
        Cmd::Flops => cmd_flops(&cfg, out),
        Cmd::Gradcheck => cmd_gradcheck(&cfg, out),
        Cmd::Ablate { axes, iters } => cmd_ablate(&mut cfg, out, axes.as_deref(), *iters),
        Cmd::DumpAttn {
            points,
            checkpoint,
            module,
            step,
            sample,
        } => cmd_dump_attn(
            &cfg,
            out,
            DumpArgs {
                points,
                checkpoint: checkpoint.as_deref(),
                module,
                step: *step,
                sample: *sample,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
