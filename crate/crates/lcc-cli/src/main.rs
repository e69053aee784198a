use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lcc::config::Protocol;
use lcc::metrics::{self, Convergence};
use lcc::sim::{RunOutput, Simulator};
use lcc::ScenarioConfig;

#[derive(Parser)]
#[command(name = "lcc", about = "LCC overlay multicast simulator and metrics runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one scenario; write metrics CSV and the event log.
    Run {
        config: PathBuf,
        /// Output directory (defaults to the config's stem).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario across a seed range and write an aggregate CSV.
    Sweep {
        config: PathBuf,
        /// Inclusive seed range, e.g. 1..5
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired-seed comparison of two scenarios.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        /// Inclusive seed range, e.g. 1..5
        #[arg(long, default_value = "1..5")]
        seeds: String,
    },
    /// Validate a scenario config without running it.
    Validate { config: PathBuf },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Sweep { config, seeds, out } => cmd_sweep(&config, &seeds, out),
        Command::Compare { config_a, config_b, seeds } => cmd_compare(&config_a, &config_b, &seeds),
        Command::Validate { config } => {
            load_config(&config)?;
            println!("ok: {}", config.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScenarioConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("seed range must look like 1..5, got `{s}`"))?;
    let a: u64 = a.trim().parse().context("bad range start")?;
    let b: u64 = b.trim().parse().context("bad range end")?;
    if b < a {
        bail!("empty seed range {s}");
    }
    Ok((a..=b).collect())
}

fn out_dir_for(config: &Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        PathBuf::from(format!("out_{stem}"))
    })
}

fn execute(cfg: ScenarioConfig) -> Result<RunOutput> {
    let sim = Simulator::new(cfg).context("building simulator")?;
    Ok(sim.run())
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out_dir_for(config, out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let output = execute(cfg)?;
    fs::write(dir.join("metrics.csv"), output.metrics_csv())?;
    if let Some(log) = &output.event_log {
        fs::write(dir.join("events.log"), log)?;
    }
    fs::write(dir.join("summary.txt"), summary_text(&output))?;
    println!("{}", summary_text(&output).trim_end());
    if !output.violations.is_empty() {
        eprintln!("invariant violations: {}", output.violations.len());
        for v in output.violations.iter().take(10) {
            eprintln!("  {v}");
        }
        bail!("run finished with invariant violations");
    }
    Ok(())
}

fn summary_text(o: &RunOutput) -> String {
    let mut s = String::new();
    s.push_str(&format!("duration_s: {:.1}\n", o.duration_s));
    s.push_str(&format!("live_nodes: {}\n", o.live_nodes));
    s.push_str(&format!("leaders: {}\n", o.leaders));
    s.push_str(&format!("clusters: {}\n", o.clusters));
    s.push_str(&format!(
        "final_ardp: {}\n",
        o.final_ardp.map(|a| format!("{a:.4}")).unwrap_or_else(|| "na".into())
    ));
    s.push_str(&format!("connected_fraction: {:.4}\n", o.connected_fraction));
    s.push_str(&format!("control_bytes: {}\n", o.total_control_bytes));
    let conv = metrics::convergence_time(&o.snapshots, 2.0, o.last_join_s);
    match conv {
        Convergence::At(t) => s.push_str(&format!("convergence_s: {t:.1}\n")),
        Convergence::NotConverged { final_ardp } => s.push_str(&format!(
            "convergence_s: not_converged (final ardp {})\n",
            final_ardp.map(|a| format!("{a:.4}")).unwrap_or_else(|| "na".into())
        )),
    }
    for (i, r) in o.recovery_reports.iter().enumerate() {
        s.push_str(&format!(
            "recovery[{i}]: affected={} mean_s={} max_s={} censored={} clusters {}/{}\n",
            r.affected,
            r.mean_resume_s().map(|v| format!("{v:.2}")).unwrap_or_else(|| "na".into()),
            r.max_resume_s().map(|v| format!("{v:.2}")).unwrap_or_else(|| "na".into()),
            r.censored,
            r.clusters_recovered,
            r.clusters_affected,
        ));
    }
    s
}

struct SeedRow {
    seed: u64,
    final_ardp: Option<f64>,
    convergence_s: Option<f64>,
    stress_mean: Option<f64>,
    adjust_rate: f64,
    control_kbps: f64,
    mean_requested: f64,
    accuracy: Option<f64>,
    mean_recovery_s: Option<f64>,
}

fn seed_row(cfg: &ScenarioConfig, seed: u64) -> Result<SeedRow> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.event_log = false;
    let o = execute(cfg)?;
    let conv = match metrics::convergence_time(&o.snapshots, 2.0, o.last_join_s) {
        Convergence::At(t) => Some(t),
        Convergence::NotConverged { .. } => None,
    };
    let post: Vec<&lcc::metrics::MetricSnapshot> =
        o.snapshots.iter().filter(|s| s.at_s > o.last_join_s).collect();
    let adjust_rate = mean_of(post.iter().map(|s| s.adjustments_per_node_per_hour));
    let control_kbps = mean_of(post.iter().map(|s| s.control_kbps_per_node));
    let stress_mean = {
        let vals: Vec<f64> = post.iter().filter_map(|s| s.stress_mean).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let joins: Vec<&lcc::sim::accounting::JoinRecord> = o.join_records.iter().collect();
    let mean_requested = mean_of(joins.iter().map(|j| j.requested_count as f64));
    let with_scope = joins.iter().filter(|j| j.nearest_in_scope).count();
    let accuracy = if with_scope > 0 {
        Some(joins.iter().filter(|j| j.joined_nearest).count() as f64 / with_scope as f64)
    } else {
        None
    };
    let recoveries: Vec<f64> = o.recovery_reports.iter().filter_map(|r| r.mean_resume_s()).collect();
    let mean_recovery_s = if recoveries.is_empty() {
        None
    } else {
        Some(recoveries.iter().sum::<f64>() / recoveries.len() as f64)
    };
    Ok(SeedRow {
        seed,
        final_ardp: o.final_ardp,
        convergence_s: conv,
        stress_mean,
        adjust_rate,
        control_kbps,
        mean_requested,
        accuracy,
        mean_recovery_s,
    })
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

const SWEEP_HEADER: &str =
    "seed,final_ardp,convergence_s,stress_mean,adjust_per_node_hour,control_kbps_per_node,mean_requested,locating_accuracy,mean_recovery_s";

fn row_csv(r: &SeedRow) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "na".into())
    }
    format!(
        "{},{},{},{},{:.6},{:.6},{:.6},{},{}",
        r.seed,
        opt(r.final_ardp),
        opt(r.convergence_s),
        opt(r.stress_mean),
        r.adjust_rate,
        r.control_kbps,
        r.mean_requested,
        opt(r.accuracy),
        opt(r.mean_recovery_s),
    )
}

fn cmd_sweep(config: &Path, seeds: &str, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds = parse_seed_range(seeds)?;
    let dir = out_dir_for(config, out);
    fs::create_dir_all(&dir)?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for seed in seeds {
        let row = seed_row(&cfg, seed)?;
        csv.push_str(&row_csv(&row));
        csv.push('\n');
        println!("seed {seed} done");
    }
    let path = dir.join("sweep.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_compare(config_a: &Path, config_b: &Path, seeds: &str) -> Result<()> {
    let cfg_a = load_config(config_a)?;
    let cfg_b = load_config(config_b)?;
    let seeds = parse_seed_range(seeds)?;
    let name = |c: &ScenarioConfig, p: &Path| {
        format!(
            "{} ({})",
            p.file_stem().and_then(|s| s.to_str()).unwrap_or("?"),
            match c.protocol {
                Protocol::Lcc => "lcc",
                Protocol::Flat => "flat",
            }
        )
    };
    println!("comparing {} vs {} over seeds {seeds:?}", name(&cfg_a, config_a), name(&cfg_b, config_b));
    println!("seed,metric,a,b");
    for &seed in &seeds {
        let a = seed_row(&cfg_a, seed)?;
        let b = seed_row(&cfg_b, seed)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "na".into());
        println!("{seed},convergence_s,{},{}", fmt(a.convergence_s), fmt(b.convergence_s));
        println!("{seed},final_ardp,{},{}", fmt(a.final_ardp), fmt(b.final_ardp));
        println!("{seed},adjust_per_node_hour,{:.4},{:.4}", a.adjust_rate, b.adjust_rate);
        println!("{seed},control_kbps_per_node,{:.4},{:.4}", a.control_kbps, b.control_kbps);
        println!("{seed},stress_mean,{},{}", fmt(a.stress_mean), fmt(b.stress_mean));
    }
    Ok(())
}
