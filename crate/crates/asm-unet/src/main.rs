//! Command-line front end: data generation, training, evaluation,
//! gradient checking, scan timing, and the ablation/branch sweeps.
//!
//! Exit codes: 0 success, 1 validation or assertion failure, 2 usage
//! error (the argument parser exits with 2 on its own).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use asm_unet::checkpoint;
use asm_unet::config::{RunConfig, PRESETS};
use asm_unet::gradcheck;
use asm_unet::infer;
use asm_unet::metrics::{self, MetricsReport};
use asm_unet::params::ParamStore;
use asm_unet::ssm;
use asm_unet::synth::{self, Split};
use asm_unet::train::{self, Dataset, Trainer};
use asm_unet::unet::UNet3d;
use asm_unet::volume::Dims3;
use asm_unet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "asm-unet",
    about = "Adaptive-scan Mamba segmentation on synthetic 3D duct trees",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset plus a manifest with 4:3:3 splits.
    GenData {
        /// Number of cases; defaults to data.n_cases from the config.
        #[arg(long)]
        cases: Option<usize>,
        /// Output directory for SVOL pairs and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; defaults to data.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Optional config supplying data.dim and the radius range.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; resumes from OUT/latest.ckpt when present.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window evaluation of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional CSV destination; the table always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; exit 0 iff every group passes.
    Gradcheck {
        /// Restrict to one module: ssm, asm, unet, or loss.
        #[arg(long)]
        module: Option<String>,
    },
    /// Time the selective scan across sequence lengths; CSV on stdout.
    BenchScan {
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "1024,2048,4096,8192")]
        lengths: String,
    },
    /// Train and evaluate one ablation preset; omit --preset to list them.
    Ablate {
        /// m1 (block off) .. m5 (both scores, three branches).
        #[arg(long)]
        preset: Option<String>,
        /// Print the preset's effective config instead of training.
        #[arg(long, default_value_t = false)]
        dump_config: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base config the preset is applied on top of.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate across branch counts; table plus CSV.
    BranchSweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated branch counts.
        #[arg(long, default_value = "0,1,3")]
        branches: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { cases, out, seed, config } => cmd_gen_data(cases, &out, seed, config),
        Cmd::Train { config, data, out } => cmd_train(&config, &data, &out),
        Cmd::Eval { checkpoint, data, split, out } => {
            cmd_eval(&checkpoint, &data, &split, out.as_deref())
        }
        Cmd::Gradcheck { module } => cmd_gradcheck(module.as_deref()),
        Cmd::BenchScan { lengths } => cmd_bench_scan(&lengths),
        Cmd::Ablate { preset, dump_config, data, out, config } => {
            cmd_ablate(preset.as_deref(), dump_config, data.as_deref(), out.as_deref(), config)
        }
        Cmd::BranchSweep { data, out, config, branches } => {
            cmd_branch_sweep(&data, &out, config, &branches)
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::invalid(format!("cannot read config {}: {e}", p.display()))
            })?;
            RunConfig::parse(&text)
        }
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    train::load_dataset(dir)
        .map_err(|e| Error::invalid(format!("dataset at {}: {e}", dir.display())))
}

/// ASM_SCAN_THREADS caps batch-sample parallelism; unset or 1 is serial.
fn scan_threads() -> Result<usize> {
    match std::env::var("ASM_SCAN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::invalid(format!("ASM_SCAN_THREADS='{v}' is not a count")))?;
            if n == 0 {
                return Err(Error::invalid("ASM_SCAN_THREADS must be at least 1"));
            }
            Ok(n)
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid(format!(
            "unknown split '{other}' (expected train, val or test)"
        ))),
    }
}

/// Fresh trainer, or one resumed from OUT/latest.ckpt. A resumed run
/// must have been started from the same config.
fn trainer_for(cfg: &RunConfig, out_dir: &Path) -> Result<Trainer> {
    let latest = train::latest_checkpoint_path(out_dir);
    let mut tr = if latest.is_file() {
        println!("resuming from {}", latest.display());
        let ckpt = checkpoint::load(&latest)?;
        let tr = Trainer::resume(&ckpt)?;
        if tr.cfg != *cfg {
            return Err(Error::Config(format!(
                "config mismatch: {} was trained with different settings; \
                 pass the original config or use a fresh --out directory",
                latest.display()
            )));
        }
        tr
    } else {
        Trainer::new(cfg.clone())?
    };
    tr.n_threads = scan_threads()?;
    Ok(tr)
}

/// Train under `out_dir`, then report on the chosen split. Returns the
/// split's per-case rows and their mean.
fn train_and_eval(
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<(Vec<(String, MetricsReport)>, MetricsReport, f64)> {
    let mut tr = trainer_for(cfg, out_dir)?;
    tr.run(data, Some(out_dir), &mut |line| println!("{line}"))?;
    let rows = tr.per_case_reports(&data.test)?;
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let mean = MetricsReport::mean(&reports);
    let mean_fg =
        reports.iter().map(|r| r.avg_fine_with_hard).sum::<f64>() / reports.len() as f64;
    std::fs::write(out_dir.join("test_metrics.csv"), metrics::csv(&rows))?;
    Ok((rows, mean, mean_fg))
}

fn parse_len_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("'{s}' is not a length")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    cases: Option<usize>,
    out: &Path,
    seed: Option<u64>,
    config: Option<PathBuf>,
) -> Result<()> {
    let cfg = read_config(config.as_deref())?;
    let n = cases.unwrap_or(cfg.data.n_cases);
    let master = seed.unwrap_or(cfg.data.seed);
    let dims = Dims3::cube(cfg.data.dim);
    let plans =
        synth::generate_dataset(out, n, master, dims, (cfg.data.radius_lo, cfg.data.radius_hi))?;
    let count = |s: Split| plans.iter().filter(|p| p.split == s).count();
    println!(
        "wrote {} cases ({} train / {} val / {} test) to {}",
        plans.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = read_config(Some(config))?;
    let ds = load_data(data)?;
    let mut tr = trainer_for(&cfg, out)?;
    let outcome = tr.run(&ds, Some(out), &mut |line| println!("{line}"))?;
    println!(
        "done: {} epochs, best val fg dice {:.4}{}",
        outcome.epochs_run,
        outcome.best_val,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let which = parse_split(split)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;

    // weights only; evaluation has no use for optimizer state
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
    use rand::SeedableRng;
    let net = UNet3d::new(&mut store, &mut rng, cfg.net.clone())?;
    ckpt.restore_into(&mut store)?;

    let ds = load_data(data)?;
    let cases = ds.split(which);
    if cases.is_empty() {
        return Err(Error::invalid(format!("split '{split}' is empty")));
    }
    let patch = Dims3::cube(cfg.train.patch_size);
    let stride = (cfg.train.patch_size / 2).max(1);
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = infer::predict_labels(&net, &store, &case.image, patch, stride)?;
        rows.push((format!("case_{:03}", case.id), metrics::report(&pred, &case.labels)?));
    }
    print!("{}", metrics::table(&rows));
    if let Some(path) = out {
        std::fs::write(path, metrics::csv(&rows))?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(module: Option<&str>) -> Result<()> {
    let names = gradcheck::suites_for_module(module)?;
    let mut failed = 0usize;
    for name in names {
        let report = gradcheck::run_suite(name)?;
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        println!("suite {name}: {verdict} (tolerance {:.0e})", report.tolerance);
        for g in &report.groups {
            println!("  {:<28} max rel err {:.3e}  ({} values)", g.name, g.max_rel_err, g.n_checked);
        }
        if !report.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} gradient suite(s) out of tolerance")));
    }
    Ok(())
}

fn cmd_bench_scan(lengths: &str) -> Result<()> {
    let lengths = parse_len_list(lengths)?;
    let rows = ssm::bench_scan(&lengths)?;
    print!("{}", ssm::bench_csv(&rows));
    // near-linear growth gate, applied to exact-doubling neighbors
    let (lo, hi) = ssm::DOUBLING_RATIO_BAND;
    for pair in rows.windows(2) {
        if pair[1].s == 2 * pair[0].s {
            let ratio = pair[1].median_secs / pair[0].median_secs;
            if !(lo..=hi).contains(&ratio) {
                return Err(Error::invalid(format!(
                    "scan time ratio {:.2} for s {} -> {} outside [{lo}, {hi}]",
                    ratio, pair[0].s, pair[1].s
                )));
            }
        }
    }
    Ok(())
}

fn cmd_ablate(
    preset: Option<&str>,
    dump_config: bool,
    data: Option<&Path>,
    out: Option<&Path>,
    config: Option<PathBuf>,
) -> Result<()> {
    let base = read_config(config.as_deref())?;

    let Some(preset) = preset else {
        // five-row overview of what each preset toggles
        println!("{:<6} {:>9} {:>16} {:>3} {:>3}", "preset", "branches", "score_mode", "IS", "GS");
        for name in PRESETS {
            let mut cfg = base.clone();
            cfg.apply_preset(name)?;
            let mode = cfg.net.asm.score_mode;
            let has = |on: bool| if on { "x" } else { "-" };
            use asm_unet::asm::ScoreMode;
            let is = matches!(mode, ScoreMode::Both | ScoreMode::IndividualOnly);
            let gs = matches!(mode, ScoreMode::Both | ScoreMode::GroupOnly);
            println!(
                "{name:<6} {:>9} {:>16} {:>3} {:>3}",
                cfg.net.asm.n_branches,
                mode.as_str(),
                has(is),
                has(gs)
            );
        }
        return Ok(());
    };

    let mut cfg = base;
    cfg.apply_preset(preset)?;
    if dump_config {
        print!("{}", cfg.serialize());
        return Ok(());
    }
    let (data, out) = match (data, out) {
        (Some(d), Some(o)) => (d, o),
        _ => return Err(Error::invalid("ablate needs --data and --out to train")),
    };
    let ds = load_data(data)?;
    let run_dir = out.join(preset);
    let (_, mean, mean_fg) = train_and_eval(&cfg, &ds, &run_dir)?;

    // upsert this preset's row into the cross-preset summary
    let summary = out.join("ablation.csv");
    let header = "preset,n_branches,score_mode,mean_fg_dice,avg_coarse,avg_fine_wo_hard,avg_fine_w_hard";
    let mut rows: Vec<(String, String)> = Vec::new();
    if summary.is_file() {
        let text = std::fs::read_to_string(&summary)?;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != header {
                    return Err(Error::Format(format!("unexpected header in {}", summary.display())));
                }
                continue;
            }
            if let Some((name, _)) = line.split_once(',') {
                rows.push((name.to_string(), line.to_string()));
            }
        }
    }
    let line = format!(
        "{preset},{},{},{:.6},{:.6},{:.6},{:.6}",
        cfg.net.asm.n_branches,
        cfg.net.asm.score_mode.as_str(),
        mean_fg,
        mean.avg_coarse,
        mean.avg_fine_without_hard,
        mean.avg_fine_with_hard
    );
    rows.retain(|(name, _)| name != preset);
    rows.push((preset.to_string(), line));
    rows.sort();
    let mut text = String::from(header);
    text.push('\n');
    for (_, line) in &rows {
        text.push_str(line);
        text.push('\n');
    }
    std::fs::write(&summary, &text)?;

    println!("\n{:<8} {:>12} {:>10} {:>14} {:>13}", "preset", "mean_fg_dice", "Avg.Coarse", "Fine(w/o Hard)", "Fine(w/ Hard)");
    for (_, line) in &rows {
        let f: Vec<&str> = line.split(',').collect();
        println!("{:<8} {:>12} {:>10} {:>14} {:>13}", f[0], f[3], f[4], f[5], f[6]);
    }
    Ok(())
}

fn cmd_branch_sweep(
    data: &Path,
    out: &Path,
    config: Option<PathBuf>,
    branches: &str,
) -> Result<()> {
    let base = read_config(config.as_deref())?;
    let counts = parse_len_list(branches)?;
    if counts.is_empty() {
        return Err(Error::invalid("branch sweep needs at least one count"));
    }
    let ds = load_data(data)?;
    let mut lines = Vec::new();
    for &n in &counts {
        let mut cfg = base.clone();
        cfg.net.asm.n_branches = n;
        cfg.validate()?;
        println!("== n_branches = {n} ==");
        let run_dir = out.join(format!("branches_{n}"));
        let (_, mean, mean_fg) = train_and_eval(&cfg, &ds, &run_dir)?;
        lines.push(format!(
            "{n},{:.6},{:.6},{:.6},{:.6}",
            mean_fg, mean.avg_coarse, mean.avg_fine_without_hard, mean.avg_fine_with_hard
        ));
    }
    let mut csv =
        String::from("n_branches,mean_fg_dice,avg_coarse,avg_fine_wo_hard,avg_fine_w_hard\n");
    for line in &lines {
        csv.push_str(line);
        csv.push('\n');
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("branch_sweep.csv"), &csv)?;
    println!("\n{:<10} {:>12} {:>10} {:>14} {:>13}", "branches", "mean_fg_dice", "Avg.Coarse", "Fine(w/o Hard)", "Fine(w/ Hard)");
    for line in &lines {
        let f: Vec<&str> = line.split(',').collect();
        println!("{:<10} {:>12} {:>10} {:>14} {:>13}", f[0], f[1], f[2], f[3], f[4]);
    }
    Ok(())
}
