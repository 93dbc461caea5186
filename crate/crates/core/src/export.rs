//! Run artifacts: trajectory and metrics CSVs, text summaries, gain files and
//! gnuplot scripts. Every file is written to a temporary sibling and renamed.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::OutputFormat;
use crate::error::Result;
use crate::linalg::Mat;
use crate::sim::{Metrics, Scenario, Trajectory};
use crate::synthesis::{GainDesign, GainSet};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const GNUPLOT_FILE: &str = "plots.gp";
pub const GAINS_FILE: &str = "gains.txt";
pub const FEASIBILITY_FILE: &str = "feasibility.txt";

/// Replaces `path` with `bytes` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn trajectory_header(traj: &Trajectory) -> Vec<String> {
    let lay = &traj.layout;
    let mut h = vec!["t".to_string()];
    h.extend((1..=lay.n).map(|k| format!("x_{k}")));
    for i in 1..=lay.n_nodes {
        h.extend((1..=lay.n).map(|k| format!("xhat_{i}_{k}")));
        h.push(format!("gamma_{i}"));
        h.extend((1..=lay.input_dims[i - 1]).map(|k| format!("u_{i}_{k}")));
    }
    h
}

/// Columns `t, x_1..n`, then per node `xhat_i_1..n, gamma_i, u_i_1..p_i`.
pub fn trajectory_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(trajectory_header(traj))?;
    let mut rec = Vec::new();
    for k in 0..traj.len() {
        rec.clear();
        rec.push(num(traj.times[k]));
        rec.extend(traj.x(k).iter().map(|&v| num(v)));
        for i in 0..traj.layout.n_nodes {
            rec.extend(traj.x_hat(k, i).iter().map(|&v| num(v)));
            rec.push(num(traj.gain(k, i)));
            rec.extend(traj.u(k, i).iter().map(|&v| num(v)));
        }
        w.write_record(&rec)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Columns `t, state_norm, avg_est_error, est_error_1..N, output_err_max`.
pub fn metrics_csv(m: &Metrics) -> Result<Vec<u8>> {
    let nn = m.est_error.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "state_norm".into(), "avg_est_error".into()];
    header.extend((1..=nn).map(|i| format!("est_error_{i}")));
    header.push("output_err_max".into());
    w.write_record(&header)?;
    for k in 0..m.times.len() {
        let mut rec = vec![
            num(m.times[k]),
            num(m.state_norm[k]),
            num(m.avg_est_error[k]),
        ];
        rec.extend(m.est_error.iter().map(|s| num(s[k])));
        let out_max = m
            .output_err
            .iter()
            .flatten()
            .map(|s| s[k])
            .fold(0.0, f64::max);
        rec.push(num(out_max));
        w.write_record(&rec)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn summary_text(s: &Scenario, m: &Metrics, extra: &[String]) -> String {
    let last = m.times.len() - 1;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario: {}",
        if s.name.is_empty() { "-" } else { &s.name }
    );
    let _ = writeln!(
        out,
        "nodes: {}  plant order: {}  edges: {}",
        s.graph.n_nodes(),
        s.plant.n(),
        s.graph.edges().len()
    );
    let _ = writeln!(out, "mode: {:?}  mu: {}", s.nodes.mode, s.nodes.mu);
    let _ = writeln!(
        out,
        "integrator: {:?} dt = {} t_final = {} samples = {}",
        s.integrator.method,
        s.integrator.dt,
        s.integrator.t_final,
        m.times.len()
    );
    let _ = writeln!(out, "t_final: {}", m.times[last]);
    let _ = writeln!(out, "state_norm(t_final): {:e}", m.state_norm[last]);
    let max_est = m.est_error.iter().map(|s| s[last]).fold(0.0, f64::max);
    let _ = writeln!(out, "max_i est_error(t_final): {max_est:e}");
    let _ = writeln!(out, "avg_est_error(t_final): {:e}", m.avg_est_error[last]);
    if !m.output_err.is_empty() {
        let oe = m
            .output_err
            .iter()
            .flatten()
            .map(|s| s[last])
            .fold(0.0, f64::max);
        let _ = writeln!(out, "max_ij output_err(t_final): {oe:e}");
    }
    let _ = writeln!(
        out,
        "residual_bound (sup |x|^2, last 10%): {:e}",
        m.residual_bound
    );
    let gains: Vec<String> = m.gain_final.iter().map(|g| format!("{g:.6}")).collect();
    let _ = writeln!(out, "gain(t_final): [{}]", gains.join(", "));
    let _ = writeln!(
        out,
        "max_i gain(t_final): {:.6}",
        m.gain_final
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    );
    for line in extra {
        let _ = writeln!(out, "{line}");
    }
    out
}

fn write_matrix(out: &mut String, label: &str, m: &Mat) {
    let _ = writeln!(out, "{label} {}x{}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| num(m[(r, c)])).collect();
        let _ = writeln!(out, "  {}", row.join(" "));
    }
}

/// Labeled row-major blocks `K_i` then `F_i`, 1-based.
pub fn gains_text(g: &GainSet) -> String {
    let mut out = String::new();
    for (i, k) in g.controller_gains().iter().enumerate() {
        write_matrix(&mut out, &format!("K_{}", i + 1), k);
    }
    for (i, f) in g.estimator_gains().iter().enumerate() {
        write_matrix(&mut out, &format!("F_{}", i + 1), f);
    }
    out
}

pub fn feasibility_text(d: &GainDesign) -> String {
    let mut out = String::new();
    let names = ["A + BK", "A + FC", "A + BK + FC"];
    let _ = writeln!(out, "spectral abscissa (Hurwitz iff < 0):");
    for (name, m) in names.iter().zip(d.hurwitz_margins) {
        let _ = writeln!(out, "  {name:<12} {m:e}");
    }
    match &d.lmi {
        Some(l) => {
            let _ = writeln!(out, "LMI max eigenvalues (feasible iff all < 0):");
            let lmis = [
                "AP + PA^T - BB^T",
                "QA + A^TQ - C^TC",
                "QA + A^TQ - C^TC + QBK + (BK)^TQ",
            ];
            for (name, m) in lmis.iter().zip(l.margins) {
                let _ = writeln!(out, "  {name:<34} {m:e}");
            }
            let _ = writeln!(out, "LMIs feasible: {}", l.feasible);
        }
        None => {
            let _ = writeln!(out, "LMIs: not applicable (estimator-only design)");
        }
    }
    if let Some(k) = &d.kappa {
        let _ = writeln!(
            out,
            "kappa condition: lhs {:e} > rhs {:e} (kappa1 {:e}): {}",
            k.lhs,
            k.rhs,
            k.kappa1,
            k.holds()
        );
    }
    let _ = writeln!(out, "T1 shrink steps: {}", d.t1_shrinks);
    let _ = writeln!(out, "T2 scale: {:e}", d.t2_scale);
    let res: Vec<String> = d.care_residuals.iter().map(|r| format!("{r:e}")).collect();
    let _ = writeln!(
        out,
        "Riccati residuals (relative to weight): [{}]",
        res.join(", ")
    );
    out
}

/// Standalone gnuplot script reading the trajectory and metrics CSVs.
pub fn gnuplot_script(s: &Scenario, traj: &Trajectory) -> String {
    let header = trajectory_header(traj);
    let col = |name: &str| header.iter().position(|h| h == name).map(|p| p + 1);
    let lay = &traj.layout;
    let mut out = String::new();
    let _ = writeln!(out, "# gnuplot -p {GNUPLOT_FILE}");
    let _ = writeln!(out, "set datafile separator ','");
    let _ = writeln!(out, "set key outside right");
    let _ = writeln!(out, "set xlabel 't [s]'");
    let _ = writeln!(out, "set terminal pngcairo size 1000,600");

    let _ = writeln!(out, "\nset output 'state.png'\nset title 'plant state'");
    let parts: Vec<String> = (1..=lay.n)
        .filter_map(|k| col(&format!("x_{k}")))
        .map(|c| format!("'{TRAJECTORY_FILE}' every ::1 using 1:{c} with lines title columnhead"))
        .collect();
    let _ = writeln!(out, "plot {}", parts.join(", \\\n     "));

    let _ = writeln!(out, "\nset output 'estimation_error.png'\nset title 'estimation error per node'\nset logscale y");
    let parts: Vec<String> = (1..=lay.n_nodes)
        .map(|i| {
            format!(
                "'{METRICS_FILE}' every ::1 using 1:{} with lines title 'node {i}'",
                3 + i
            )
        })
        .collect();
    let _ = writeln!(out, "plot {}", parts.join(", \\\n     "));
    let _ = writeln!(out, "unset logscale y");

    let _ = writeln!(
        out,
        "\nset output 'gains.png'\nset title 'adaptive coupling gains'"
    );
    let parts: Vec<String> = (1..=lay.n_nodes)
        .filter_map(|i| col(&format!("gamma_{i}")))
        .map(|c| format!("'{TRAJECTORY_FILE}' every ::1 using 1:{c} with lines title columnhead"))
        .collect();
    let _ = writeln!(out, "plot {}", parts.join(", \\\n     "));

    if lay.input_dims.iter().any(|&p| p > 0) {
        let _ = writeln!(out, "\nset output 'inputs.png'\nset title 'control inputs'");
        let mut parts = Vec::new();
        for i in 1..=lay.n_nodes {
            for k in 1..=lay.input_dims[i - 1] {
                if let Some(c) = col(&format!("u_{i}_{k}")) {
                    parts.push(format!(
                        "'{TRAJECTORY_FILE}' every ::1 using 1:{c} with lines title columnhead"
                    ));
                }
            }
        }
        let _ = writeln!(out, "plot {}", parts.join(", \\\n     "));
    }

    let _ = writeln!(
        out,
        "\nset output 'average_error.png'\nset title 'average estimation error ({})'\nset logscale y",
        s.name
    );
    let _ = writeln!(
        out,
        "plot '{METRICS_FILE}' every ::1 using 1:3 with lines title 'e_a'"
    );
    out
}

/// Writes the requested artifacts into `dir` and returns their paths.
pub fn write_run(
    dir: &Path,
    s: &Scenario,
    traj: &Trajectory,
    m: &Metrics,
    formats: &[OutputFormat],
    extra: &[String],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for f in formats {
        let (name, bytes) = match f {
            OutputFormat::Trajectory => (TRAJECTORY_FILE, trajectory_csv(traj)?),
            OutputFormat::Metrics => (METRICS_FILE, metrics_csv(m)?),
            OutputFormat::Summary => (SUMMARY_FILE, summary_text(s, m, extra).into_bytes()),
            OutputFormat::Gnuplot => (GNUPLOT_FILE, gnuplot_script(s, traj).into_bytes()),
        };
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
