//! CSV and JSON writers, the run manifest, and the refinement ladder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::run::{run, Outcome, RunOptions};
use crate::spec::{ProblemSpec, SCHEMA_VERSION};
use crate::CliError;

/// Regimes are written 1-based.
pub fn control_csv(o: &Outcome, export: usize) -> String {
    let u = &o.control;
    let m = u.m();
    let mut s = String::from("scenario,particle,time,regime");
    for i in 1..=m {
        let _ = write!(s, ",u_{i}");
    }
    for i in 1..=m {
        let _ = write!(s, ",mean_u_{i}");
    }
    s.push('\n');
    let np = export.min(u.particles());
    for e in &o.state {
        for p in 0..np {
            for k in 0..o.grid.nodes() {
                let _ = write!(s, "{},{},{},{}", e.scenario, p, o.grid.time(k), e.regime(k) + 1);
                for v in u.at(e.scenario, k, p).iter().chain(u.mean(e.scenario, k)) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
    }
    s
}

pub fn state_csv(o: &Outcome, export: usize) -> String {
    let n = o.state.first().map_or(0, |e| e.n);
    let mut s = String::from("scenario,particle,time,regime");
    for i in 1..=n {
        let _ = write!(s, ",x_{i}");
    }
    for i in 1..=n {
        let _ = write!(s, ",mean_x_{i}");
    }
    s.push('\n');
    for e in &o.state {
        for p in 0..export.min(e.particles) {
            for k in 0..o.grid.nodes() {
                let _ = write!(s, "{},{},{},{}", e.scenario, p, o.grid.time(k), e.regime(k) + 1);
                for v in e.x(k, p).iter().chain(e.mean(k).iter()) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Picard sweeps, then the outer profile iterations of iterate mode.
pub fn iterations_csv(o: &Outcome) -> String {
    let mut s = String::from("kind,index,lambda,error,ratio\n");
    for r in &o.history {
        let ratio = r.ratio.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "picard,{},{},{},{}", r.sweep, r.lambda, r.error, ratio);
    }
    let outer = &o.results.iterations.outer;
    for (i, e) in outer.iter().enumerate() {
        let ratio = if i > 0 { (e / outer[i - 1]).to_string() } else { String::new() };
        let _ = writeln!(s, "outer,{},,{e},{ratio}", i + 1);
    }
    s
}

pub fn residuals_csv(o: &Outcome) -> String {
    let mut s = format!("node,time,{}\n", o.residual_header);
    for (k, row) in o.residual_rows.iter().enumerate() {
        let _ = write!(s, "{k}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Software {
    pub name: &'static str,
    pub version: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub software: Software,
    pub command: String,
    pub spec_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub seconds: f64,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects files for one output directory and writes the manifest last.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::malformed(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::malformed(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(FileEntry { name: name.into(), sha256: sha256_hex(contents), bytes: contents.len() });
        Ok(())
    }

    pub fn finish(mut self, command: &str, spec_bytes: &[u8], seed: u64, seconds: f64) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            software: Software { name: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION") },
            command: command.into(),
            spec_sha256: sha256_hex(spec_bytes),
            seed,
            threads: rayon::current_num_threads(),
            seconds,
            files: std::mem::take(&mut self.files),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(self.dir.join("manifest.json"), json)?;
        Ok(manifest)
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("results serialize");
    out.push(b'\n');
    out
}

/// Runs `solve` and writes every output. Returns the outcome; the caller maps
/// non-convergence to its exit code.
pub fn solve_to_dir(spec: &ProblemSpec, spec_bytes: &[u8], out: &Path, opts: RunOptions) -> Result<Outcome, CliError> {
    let outcome = run(spec, opts)?;
    let export = spec.numerics.export_particles;
    let mut dir = OutputDir::create(out)?;
    dir.write("results.json", &to_json(&outcome.results))?;
    dir.write("control.csv", control_csv(&outcome, export).as_bytes())?;
    dir.write("state.csv", state_csv(&outcome, export).as_bytes())?;
    dir.write("iterations.csv", iterations_csv(&outcome).as_bytes())?;
    dir.write("residuals.csv", residuals_csv(&outcome).as_bytes())?;
    if let Some(dev) = outcome.deviation_csv() {
        dir.write("deviation.csv", dev.as_bytes())?;
    }
    dir.finish("solve", spec_bytes, outcome.results.seed, outcome.seconds)?;
    Ok(outcome)
}

/// Parses `dt:N,dt:N,...`.
pub fn parse_ladder(s: &str) -> Result<Vec<(f64, usize)>, CliError> {
    let rungs: Vec<(f64, usize)> = s
        .split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            let (dt, n) = r.split_once(':').ok_or_else(|| CliError::malformed(format!("ladder rung {r:?} is not dt:N")))?;
            let dt: f64 = dt.trim().parse().map_err(|_| CliError::malformed(format!("bad dt in {r:?}")))?;
            let n: usize = n.trim().parse().map_err(|_| CliError::malformed(format!("bad N in {r:?}")))?;
            if !(dt > 0.0) || n == 0 {
                return Err(CliError::malformed(format!("rung {r:?} needs dt > 0 and N > 0")));
            }
            Ok((dt, n))
        })
        .collect::<Result<_, _>>()?;
    if rungs.is_empty() {
        return Err(CliError::malformed("empty refinement ladder"));
    }
    Ok(rungs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub rung: usize,
    pub dt: f64,
    pub particles: usize,
    pub converged: bool,
    pub sweeps: usize,
    pub stationarity: Option<f64>,
    /// this rung's stationarity residual over the previous rung's
    pub residual_ratio: Option<f64>,
    pub fixed_point_gap: f64,
    pub gain: Option<f64>,
    pub j: f64,
    pub se: f64,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn ladder_csv(rows: &[LadderRow]) -> String {
    let mut s = String::from("rung,dt,particles,converged,sweeps,stationarity,residual_ratio,fixed_point_gap,gain,J,SE,runtime_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            r.rung,
            r.dt,
            r.particles,
            r.converged,
            r.sweeps,
            opt(r.stationarity),
            opt(r.residual_ratio),
            r.fixed_point_gap,
            opt(r.gain),
            r.j,
            r.se,
            r.seconds
        );
    }
    s
}

/// One solve per rung with `dt` and the particle count replaced.
pub fn convergence(spec: &ProblemSpec, ladder: &[(f64, usize)], opts: RunOptions) -> Result<Vec<LadderRow>, CliError> {
    if ladder.is_empty() {
        return Err(CliError::malformed("empty refinement ladder"));
    }
    let mut rows: Vec<LadderRow> = Vec::with_capacity(ladder.len());
    for (i, &(dt, n)) in ladder.iter().enumerate() {
        let mut s = spec.clone();
        s.numerics.dt = dt;
        s.numerics.particles = n;
        let started = Instant::now();
        let o = run(&s, opts)?;
        let r = &o.results;
        let stationarity = r.residual_norms.stationarity;
        let prev = rows.last().and_then(|p| p.stationarity);
        rows.push(LadderRow {
            rung: i + 1,
            dt,
            particles: n,
            converged: r.converged,
            sweeps: r.iterations.picard_sweeps,
            stationarity,
            residual_ratio: stationarity.zip(prev).map(|(a, b)| a / b),
            fixed_point_gap: r.residual_norms.fixed_point_gap,
            gain: r.gain_estimates.as_ref().map(|g| g.gain),
            j: r.j,
            se: r.se,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn convergence_to_dir(
    spec: &ProblemSpec,
    spec_bytes: &[u8],
    ladder: &[(f64, usize)],
    out: &Path,
    opts: RunOptions,
) -> Result<Vec<LadderRow>, CliError> {
    let started = Instant::now();
    let rows = convergence(spec, ladder, opts)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("convergence.csv", ladder_csv(&rows).as_bytes())?;
    let seed = opts.seed_override.unwrap_or(spec.numerics.seed);
    dir.finish("convergence", spec_bytes, seed, started.elapsed().as_secs_f64())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_parsing() {
        assert_eq!(parse_ladder("0.04:256, 0.02:1024").unwrap(), vec![(0.04, 256), (0.02, 1024)]);
        assert_eq!(parse_ladder("").unwrap_err().code, crate::EXIT_MALFORMED);
        assert!(parse_ladder("0.1").is_err());
        assert!(parse_ladder("0:10").is_err());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
