use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use attnguide::grad::FaultInjection;
use attnguide::io::{read_map_file, write_trajectory, ExperimentConfig};
use attnguide::report::{
    all_subjects, analyze, region_table, sweep_gradcheck, sweep_tokens, RegionRow,
};
use attnguide::{
    AttentionStack, Cell, GradCheckConfig, GradCheckReport, MetricKind, Metrics, Objective, Wrt,
};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

/// Aggregation and isolation guidance over cross-attention maps.
#[derive(Parser)]
#[command(name = "attnguide", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Loss breakdown, Moran's I, pairwise distances and regions of a map file.
    Analyze {
        /// AMAP file.
        map: PathBuf,
        /// JSON experiment config giving token roles, weights and region rules.
        /// Without one every token is a plain subject with default settings.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
        /// Also write the region table as CSV.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Grouping regions of every subject and attribute map, as CSV.
    Regions {
        map: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Step whose region rules apply (matters for scheduled radii).
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Runs the guidance loop and writes trajectory.csv plus PGM heatmaps.
    Simulate {
        /// JSON experiment config; the built-in demo when omitted.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR", required_unless_present = "print_config")]
        out: Option<PathBuf>,
        /// Use this metric for both aggregation and isolation.
        #[arg(long)]
        metric: Option<MetricKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the effective config as JSON and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Analytic against central-difference gradients on seeded random stacks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = WrtArg::Both)]
        wrt: WrtArg,
        /// Add an error to one analytic entry; the check must then fail.
        #[arg(long)]
        corrupt: bool,
        #[arg(long)]
        json: bool,
    },
    /// Final metrics of paired runs under each metric, one CSV row per run.
    Compare {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "euc,cos")]
        metrics: Vec<MetricKind>,
        /// Runs per metric, seeded from the config seed upward.
        #[arg(long, default_value_t = 16)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WrtArg {
    Values,
    Logits,
    Both,
}

/// Bad input: exits with status 2 rather than 1.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input<T>(what: &Path, r: attnguide::Result<T>) -> Result<T> {
    r.map_err(|e| InputError(format!("{}: {e}", what.display())).into())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => input(p, ExperimentConfig::load(p)),
        None => Ok(ExperimentConfig::demo()),
    }
}

fn load_stack(
    map: &Path,
    config: Option<&Path>,
    step: usize,
) -> Result<(AttentionStack, Objective)> {
    let stack = input(map, read_map_file(map))?;
    let objective = match config {
        Some(p) => {
            let sim = load_config(Some(p))?.sim_config();
            let obj = input(p, sim.objective(step))?;
            input(p, obj.check(&stack))?;
            obj
        }
        None => Objective::new(all_subjects(&stack)),
    };
    Ok((stack, objective))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn region_csv(rows: &[RegionRow]) -> String {
    let mut out =
        String::from("token,index,center_row,center_col,radius,centroid_h,centroid_w,count,mass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.token,
            r.index,
            r.center.row,
            r.center.col,
            r.radius,
            opt(r.centroid.map(|c| c.h)),
            opt(r.centroid.map(|c| c.w)),
            r.count,
            r.mass
        );
    }
    out
}

fn cmd_analyze(map: &Path, config: Option<&Path>, json: bool, csv: Option<&Path>) -> Result<bool> {
    let (stack, objective) = load_stack(map, config, 0)?;
    let moran = match config {
        Some(p) => load_config(Some(p))?.moran,
        None => Default::default(),
    };
    let rep = analyze(&stack, &objective, moran)?;
    if let Some(path) = csv {
        fs::write(path, region_csv(&rep.regions))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
        return Ok(true);
    }
    let l = &rep.loss;
    println!(
        "loss total={} agg_sub={} iso={} max={} agg_attr={}",
        l.total, l.agg_sub, l.iso, l.max, l.agg_attr
    );
    for (token, share) in &l.per_token {
        println!("share {token}={share}");
    }
    for (token, m) in &rep.morans_i {
        println!(
            "morans_i {token}={}",
            m.map(|x| x.to_string())
                .unwrap_or_else(|| "undefined".into())
        );
    }
    for p in &rep.pairs {
        println!(
            "pair {} {} distance={} d_over_dmax={} iso_loss={}",
            p.first, p.second, p.distance, p.d_over_dmax, p.iso_loss
        );
    }
    print!("{}", region_csv(&rep.regions));
    Ok(true)
}

fn cmd_regions(map: &Path, config: Option<&Path>, step: usize) -> Result<bool> {
    let (stack, objective) = load_stack(map, config, step)?;
    print!("{}", region_csv(&region_table(&stack, &objective)?));
    Ok(true)
}

fn with_metric(mut cfg: ExperimentConfig, metric: MetricKind) -> ExperimentConfig {
    cfg.metrics = Metrics {
        aggregation: metric,
        isolation: metric,
    };
    cfg
}

fn cmd_simulate(
    config: Option<&Path>,
    out: Option<&Path>,
    metric: Option<MetricKind>,
    seed: Option<u64>,
    print_config: bool,
) -> Result<bool> {
    let mut cfg = load_config(config)?;
    if let Some(m) = metric {
        cfg = with_metric(cfg, m);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if print_config {
        println!("{}", cfg.to_json());
        return Ok(true);
    }
    let out = out.expect("clap requires --out");
    let sim = cfg.sim_config();
    let traj = attnguide::run(&sim, &cfg.blobs)?;
    write_trajectory(out, &traj, &sim).with_context(|| format!("writing to {}", out.display()))?;
    let f = &traj.final_state;
    println!(
        "wrote {} steps to {}; final total={} d_over_dmax={} overlap_ratio={}",
        traj.records.len(),
        out.display(),
        f.loss.total,
        f.d_over_dmax,
        f.overlap_ratio
    );
    Ok(true)
}

fn cmd_gradcheck(
    seeds: u64,
    eps: f64,
    tol: f64,
    wrt: WrtArg,
    corrupt: bool,
    json: bool,
) -> Result<bool> {
    if !(eps > 0.0 && tol > 0.0) {
        return Err(InputError("--eps and --tol must be > 0".into()).into());
    }
    let modes: &[Wrt] = match wrt {
        WrtArg::Values => &[Wrt::AttentionValues],
        WrtArg::Logits => &[Wrt::LatentLogits],
        WrtArg::Both => &[Wrt::AttentionValues, Wrt::LatentLogits],
    };
    let fault = corrupt.then_some(FaultInjection {
        token: 1,
        cell: Cell::new(7, 9),
        delta: 1e-3,
    });
    let jobs: Vec<(u64, Wrt)> = (0..seeds)
        .flat_map(|s| modes.iter().map(move |&w| (s, w)))
        .collect();
    let results: Vec<(u64, Wrt, GradCheckReport)> = jobs
        .par_iter()
        .map(|&(seed, wrt)| {
            let cfg = GradCheckConfig {
                eps,
                rel_tol: tol,
                wrt,
                fault: fault.clone(),
                ..GradCheckConfig::default()
            };
            sweep_gradcheck(seed, &cfg).map(|r| (seed, wrt, r))
        })
        .collect::<attnguide::Result<_>>()?;
    let passed = results.iter().filter(|r| r.2.pass).count();
    if json {
        let rows: Vec<_> = results
            .iter()
            .map(|(seed, wrt, rep)| serde_json::json!({ "seed": seed, "wrt": wrt, "report": rep }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        let tokens = sweep_tokens();
        println!(
            "tokens {}",
            tokens
                .iter()
                .map(|t| t.id.as_str())
                .collect::<Vec<_>>()
                .join(",")
        );
        for (seed, wrt, rep) in &results {
            let worst = rep
                .worst
                .as_ref()
                .map(|w| format!(" worst={}@{},{}", w.token, w.cell.row, w.cell.col))
                .unwrap_or_default();
            println!(
                "seed={seed} wrt={} cells={} max_abs_err={:e} max_rel_err={:e}{worst} {}",
                match wrt {
                    Wrt::AttentionValues => "values",
                    Wrt::LatentLogits => "logits",
                },
                rep.cells_checked,
                rep.max_abs_err,
                rep.max_rel_err,
                if rep.pass { "ok" } else { "FAIL" }
            );
        }
        println!("gradcheck: {passed}/{} passed", results.len());
    }
    Ok(passed == results.len())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn cmd_compare(config: Option<&Path>, metrics: &[MetricKind], seeds: u64) -> Result<bool> {
    let base = load_config(config)?;
    let jobs: Vec<(MetricKind, u64)> = metrics
        .iter()
        .flat_map(|&m| (0..seeds).map(move |i| (m, base.seed + i)))
        .collect();
    let rows: Vec<String> = jobs
        .par_iter()
        .map(|&(metric, seed)| -> Result<String> {
            let mut cfg = with_metric(base.clone(), metric);
            cfg.seed = seed;
            let traj = attnguide::run(&cfg.sim_config(), &cfg.blobs)?;
            let f = &traj.final_state;
            let spread = mean(f.centroid_spread.values().copied());
            let moran = mean(f.morans_i.values().filter_map(|m| *m));
            let l = &f.loss;
            Ok(format!(
                "{},{seed},{},{},{},{},{},{spread},{moran},{},{}",
                metric.short(),
                l.total,
                l.agg_sub,
                l.iso,
                l.max,
                l.agg_attr,
                f.d_over_dmax,
                f.overlap_ratio
            ))
        })
        .collect::<Result<_>>()?;
    println!("metric,seed,total,agg_sub,iso,max,agg_attr,centroid_spread,morans_i,d_over_dmax,overlap_ratio");
    for r in rows {
        println!("{r}");
    }
    Ok(true)
}

fn set_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ATTNGUIDE_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            InputError(format!(
                "ATTNGUIDE_THREADS must be a positive integer, got {v:?}"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    set_threads()?;
    match cli.command {
        Command::Analyze {
            map,
            config,
            json,
            csv,
        } => cmd_analyze(&map, config.as_deref(), json, csv.as_deref()),
        Command::Regions { map, config, step } => cmd_regions(&map, config.as_deref(), step),
        Command::Simulate {
            config,
            out,
            metric,
            seed,
            print_config,
        } => cmd_simulate(
            config.as_deref(),
            out.as_deref(),
            metric,
            seed,
            print_config,
        ),
        Command::Gradcheck {
            seeds,
            eps,
            tol,
            wrt,
            corrupt,
            json,
        } => cmd_gradcheck(seeds, eps, tol, wrt, corrupt, json),
        Command::Compare {
            config,
            metrics,
            seeds,
        } => cmd_compare(config.as_deref(), &metrics, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<InputError>().is_some() {
                2
            } else {
                1
            })
        }
    }
}
