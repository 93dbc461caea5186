//! `fdcoop`: runs scenario configs, the built-in examples, the fixed-gain
//! baseline and the verification suite, writing CSV and gnuplot artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fdcoop_core::config::{Built, ScenarioConfig};
use fdcoop_core::export;
use fdcoop_core::scenarios::{self, Example2Options};
use fdcoop_core::sim::{self, Scenario};
use fdcoop_core::verification;

const OUT_ENV: &str = "FDCOOP_OUT_DIR";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(
    name = "fdcoop",
    version,
    about = "Distributed adaptive estimation and cooperative control simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OutDir {
    /// Output directory; falls back to the config's `outputs.dir`.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize gains (unless explicit), integrate and write artifacts.
    Simulate {
        /// Scenario config; repeat for several scenarios.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
        /// Run the scenarios in parallel, each into `OUT/<config stem>`.
        #[arg(long)]
        sweep: bool,
    },
    /// Write the gain set and its feasibility report.
    DesignGains {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Six robots carrying a load around a directed ring.
    Example1 {
        #[command(flatten)]
        out: OutDir,
        /// Zero every noise waveform and use the monotone gain law.
        #[arg(long)]
        noise_free: bool,
    },
    /// Sensor network observing a chain plant.
    Example2 {
        #[command(flatten)]
        out: OutDir,
        /// 100 sensors and a 100th-order plant instead of 20.
        #[arg(long)]
        full_scale: bool,
        /// First graph seed tried; later seeds are used until strongly connected.
        #[arg(long, default_value_t = scenarios::EXAMPLE2_DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        noisy: bool,
    },
    /// Fixed-gain estimator with user-supplied coupling, next to the adaptive run.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// Global coupling gain; overrides `baseline.gamma` in the config.
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run the property suites; exit status is nonzero on any failure.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate {
            config,
            out,
            dt,
            t_final,
            sweep,
        } => simulate(&config, out.out, dt, t_final, sweep)?,
        Command::DesignGains { config, out } => {
            let cfg = load(&config)?;
            let dir = out_dir(out.out, &cfg)?;
            let built = cfg.build()?;
            for p in write_design(&dir, &built)? {
                println!("{}", p.display());
            }
        }
        Command::Example1 { out, noise_free } => {
            let cfg = if noise_free {
                scenarios::example1_noise_free_config()
            } else {
                scenarios::example1_config()
            };
            run_config(&cfg, &out_dir(out.out, &cfg)?, &[])?;
        }
        Command::Example2 {
            out,
            full_scale,
            seed,
            noisy,
        } => {
            let opts = Example2Options {
                n: if full_scale { 100 } else { 20 },
                noisy,
                seed,
            };
            let cfg = scenarios::example2_config(opts)?;
            let used = cfg.graph.generator.as_ref().map_or(seed, |g| g.seed);
            run_config(
                &cfg,
                &out_dir(out.out, &cfg)?,
                &[format!("graph seed: {used}")],
            )?;
        }
        Command::Baseline { config, gamma, out } => {
            let cfg = load(&config)?;
            baseline(&cfg, gamma, &out_dir(out.out, &cfg)?)?;
        }
        Command::Verify => return Ok(verify()),
    }
    Ok(ExitCode::SUCCESS)
}

fn load(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn out_dir(cli: Option<PathBuf>, cfg: &ScenarioConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.outputs.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            anyhow!("no output directory: pass --out, set {OUT_ENV}, or set outputs.dir")
        })
}

fn simulate(
    paths: &[PathBuf],
    out: Option<PathBuf>,
    dt: Option<f64>,
    t_final: Option<f64>,
    sweep: bool,
) -> Result<()> {
    let mut configs = Vec::with_capacity(paths.len());
    for p in paths {
        let mut cfg = load(p)?;
        if let Some(dt) = dt {
            cfg.integrator.dt = dt;
        }
        if let Some(t) = t_final {
            cfg.integrator.t_final = t;
        }
        configs.push(cfg);
    }
    let mut jobs = Vec::with_capacity(configs.len());
    for (p, cfg) in paths.iter().zip(&configs) {
        let base = out_dir(out.clone(), cfg)?;
        let dir = if paths.len() > 1 {
            let stem = p
                .file_stem()
                .ok_or_else(|| anyhow!("config path {} has no file name", p.display()))?;
            base.join(stem)
        } else {
            base
        };
        jobs.push((p, cfg, dir));
    }
    if !sweep {
        for (p, cfg, dir) in &jobs {
            run_config(cfg, dir, &[]).with_context(|| format!("scenario {}", p.display()))?;
        }
        return Ok(());
    }
    // each worker owns its scenario and output directory
    let results: Vec<(String, Result<()>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(p, cfg, dir)| {
                scope.spawn(move || (p.display().to_string(), run_config(cfg, dir, &[])))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| ("?".into(), Err(anyhow!("worker panicked"))))
            })
            .collect()
    });
    let mut failed = 0;
    for (name, r) in results {
        if let Err(e) = r {
            eprintln!("scenario {name}: {e:#}");
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} scenarios failed", jobs.len());
    }
    Ok(())
}

fn synthesis_lines(built: &Built) -> Vec<String> {
    let mut lines = Vec::new();
    if let Some(d) = &built.design {
        lines.push(format!(
            "synthesis: T1 shrink steps {}, T2 scale {:e}",
            d.t1_shrinks, d.t2_scale
        ));
    }
    if let Some(r) = &built.distributed {
        lines.push(format!(
            "distributed design: flow time {}, reconstruction error {:e}",
            r.flow_time, r.reconstruction_error
        ));
    }
    lines
}

fn write_design(dir: &Path, built: &Built) -> Result<Vec<PathBuf>> {
    let s = &built.scenario;
    let gains = dir.join(export::GAINS_FILE);
    export::write_atomic(&gains, export::gains_text(&s.gains).as_bytes())?;
    let design = built
        .design
        .as_ref()
        .or_else(|| built.distributed.as_ref().map(|r| &r.node_designs[0]));
    let report = match design {
        Some(d) => export::feasibility_text(d),
        None => {
            let m = s.gains.hurwitz_margins(&s.plant)?;
            format!(
                "explicit gains\nspectral abscissa (Hurwitz iff < 0):\n  A + BK       {:e}\n  A + FC       {:e}\n  A + BK + FC  {:e}\n",
                m[0], m[1], m[2]
            )
        }
    };
    let feas = dir.join(export::FEASIBILITY_FILE);
    export::write_atomic(&feas, report.as_bytes())?;
    Ok(vec![gains, feas])
}

fn run_config(cfg: &ScenarioConfig, dir: &Path, extra: &[String]) -> Result<()> {
    let started = Instant::now();
    let built = cfg.build()?;
    let s = &built.scenario;
    let traj = sim::integrate(s)?;
    let m = sim::extract_metrics(&traj, s)?;
    let mut lines = synthesis_lines(&built);
    lines.extend_from_slice(extra);
    export::write_atomic(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    write_design(dir, &built)?;
    export::write_run(dir, s, &traj, &m, &cfg.outputs.formats, &lines)?;
    report(s, &m, dir, started);
    Ok(())
}

fn report(s: &Scenario, m: &sim::Metrics, dir: &Path, started: Instant) {
    let last = m.times.len() - 1;
    println!(
        "{}: t = {} |x| = {:e} e_a = {:e} ({:.1} s) -> {}",
        if s.name.is_empty() {
            "scenario"
        } else {
            &s.name
        },
        m.times[last],
        m.state_norm[last],
        m.avg_est_error[last],
        started.elapsed().as_secs_f64(),
        dir.display()
    );
}

fn baseline(cfg: &ScenarioConfig, gamma: Option<f64>, dir: &Path) -> Result<()> {
    let started = Instant::now();
    let built = cfg.build()?;
    let model = cfg.baseline_model(&built, gamma)?;
    let s = &built.scenario;

    let adaptive = sim::integrate(s)?;
    let am = sim::extract_metrics(&adaptive, s)?;
    let adaptive_dir = dir.join("adaptive");
    export::write_run(
        &adaptive_dir,
        s,
        &adaptive,
        &am,
        &cfg.outputs.formats,
        &synthesis_lines(&built),
    )?;

    let traj = sim::integrate_baseline(s, &model)
        .with_context(|| format!("baseline with gamma = {}", model.gamma))?;
    let m = sim::extract_metrics(&traj, s)?;
    let adaptive_max = am
        .gain_final
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let last = am.times.len() - 1;
    let lines = vec![
        "comparison: fixed-gain baseline vs adaptive".to_string(),
        format!("baseline gamma: {}", model.gamma),
        format!("adaptive max_i gain(t_final): {adaptive_max:.6}"),
        format!(
            "adaptive avg_est_error(t_final): {:e}",
            am.avg_est_error[last]
        ),
    ];
    export::write_run(dir, s, &traj, &m, &cfg.outputs.formats, &lines)?;
    report(s, &m, dir, started);
    println!(
        "baseline gamma {} vs adaptive max gain {adaptive_max:.6}",
        model.gamma
    );
    Ok(())
}

fn verify() -> ExitCode {
    let started = Instant::now();
    let report = verification::run_all();
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!("{:.1} s", started.elapsed().as_secs_f64());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        eprintln!("failed: {}", names.join(", "));
        ExitCode::FAILURE
    }
}
