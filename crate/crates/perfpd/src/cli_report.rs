//! Command-line front end: argument parsing, the run manifest, CSV output,
//! and run-directory orchestration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, Command};

use crate::estimator::ZetaSchedule;
use crate::experiments::{build_linreg, build_portfolio, ComparisonConfig, StrategyTable};
use crate::solver::{Strategy, TrajectoryRecord};
use crate::{Error, Result};

/// Everything a run needs, resolved from defaults, config file, environment,
/// and flags (in increasing precedence). Serialized into each run directory
/// so the run can be reproduced from the manifest alone.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub experiment: String,
    pub t_horizon: u64,
    pub n_samples: usize,
    pub epsilon: f64,
    pub eta: f64,
    pub delta: f64,
    pub strategies: Vec<Strategy>,
    pub replicas: u64,
    pub seed: u64,
    pub stride: u64,
    pub out: String,
    pub version: String,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Incomplete,
    Complete,
}

impl RunStatus {
    fn name(self) -> &'static str {
        match self {
            RunStatus::Incomplete => "incomplete",
            RunStatus::Complete => "complete",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "incomplete" => Ok(RunStatus::Incomplete),
            "complete" => Ok(RunStatus::Complete),
            other => Err(Error::Config(format!("unknown status '{other}'"))),
        }
    }
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            experiment: "linreg".into(),
            t_horizon: 100_000,
            n_samples: 0, // 0 means "derive from T"
            epsilon: 1.0,
            eta: 5e-3,
            delta: 1.0,
            strategies: Strategy::ALL.to_vec(),
            replicas: 20,
            seed: 0,
            stride: 0,
            out: "runs".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: RunStatus::Incomplete,
        }
    }
}

impl RunManifest {
    /// The sample-pool size actually used: `--n-samples` if given, else `⌈√T⌉`.
    pub fn effective_n(&self) -> usize {
        if self.n_samples > 0 {
            self.n_samples
        } else {
            (self.t_horizon as f64).sqrt().ceil() as usize
        }
    }
}

fn cli_command() -> Command {
    Command::new("perfpd")
        .about("Primal-dual learning under decision-dependent data")
        .disable_help_flag(false)
        .arg(opt("experiment", "linreg or portfolio"))
        .arg(opt("T", "horizon (number of deployment steps)"))
        .arg(opt("n-samples", "initial sample-pool size (default ceil(sqrt(T)))"))
        .arg(opt("epsilon", "distribution-shift sensitivity"))
        .arg(opt("eta", "primal-dual step size (default 5e-3)"))
        .arg(opt("delta", "dual regularization (default 1)"))
        .arg(opt("strategies", "comma-separated subset of adaptive,stable-point,known-a"))
        .arg(opt("replicas", "number of averaged replica runs"))
        .arg(opt("seed", "base RNG seed (env PERFPD_SEED when absent)"))
        .arg(opt("stride", "record every stride-th step (0 = auto)"))
        .arg(opt("out", "parent directory for run output"))
        .arg(opt("config", "key=value file supplying any of the above"))
}

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .help(help)
        .action(ArgAction::Set)
        .num_args(1)
}

/// Parses the command line into a manifest.
///
/// Precedence, lowest to highest: built-in defaults, `--config` file,
/// `PERFPD_SEED` (seed only), explicit flags. Malformed flags or values
/// surface as [`Error::Usage`]; the binary maps those to exit code 2.
pub fn parse_cli<I, T>(args: I) -> Result<RunManifest>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli_command()
        .try_get_matches_from(args)
        .map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                Error::Usage(format!("__display__{e}"))
            }
            _ => Error::Usage(e.to_string()),
        })?;

    let mut man = RunManifest::default();
    if let Some(path) = matches.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.as_str(), e))?;
        apply_keys(&mut man, &text, true)?;
    }
    if matches.get_one::<String>("seed").is_none() {
        if let Ok(v) = std::env::var("PERFPD_SEED") {
            man.seed = parse_num(&v, "PERFPD_SEED")?;
        }
    }

    let mut flag_text = String::new();
    for key in [
        "experiment",
        "T",
        "n-samples",
        "epsilon",
        "eta",
        "delta",
        "strategies",
        "replicas",
        "seed",
        "stride",
        "out",
    ] {
        if let Some(v) = matches.get_one::<String>(key) {
            let canon = match key {
                "n-samples" => "n_samples",
                other => other,
            };
            let _ = writeln!(flag_text, "{canon} = {v}");
        }
    }
    apply_keys(&mut man, &flag_text, true)?;
    Ok(man)
}

fn parse_num<N: std::str::FromStr>(v: &str, key: &str) -> Result<N> {
    v.trim()
        .parse::<N>()
        .map_err(|_| Error::Usage(format!("invalid value '{v}' for {key}")))
}

/// Applies `key = value` lines to a manifest. `strict` rejects unknown keys.
fn apply_keys(man: &mut RunManifest, text: &str, strict: bool) -> Result<()> {
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Usage(format!("expected key = value, got '{line}'")));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "experiment" => {
                if value != "linreg" && value != "portfolio" {
                    return Err(Error::Usage(format!(
                        "unknown experiment '{value}' (expected linreg or portfolio)"
                    )));
                }
                man.experiment = value.into();
            }
            "T" => man.t_horizon = parse_num(value, key)?,
            "n_samples" => man.n_samples = parse_num(value, key)?,
            "epsilon" => man.epsilon = parse_num(value, key)?,
            "eta" => man.eta = parse_num(value, key)?,
            "delta" => man.delta = parse_num(value, key)?,
            "strategies" => {
                let mut parsed = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        return Err(Error::Usage("empty strategy name".into()));
                    }
                    parsed.push(Strategy::parse(part)?);
                }
                if parsed.is_empty() {
                    return Err(Error::Usage("strategy list is empty".into()));
                }
                man.strategies = parsed;
            }
            "replicas" => man.replicas = parse_num(value, key)?,
            "seed" => man.seed = parse_num(value, key)?,
            "stride" => man.stride = parse_num(value, key)?,
            "out" => man.out = value.into(),
            "version" => man.version = value.into(),
            "status" => man.status = RunStatus::parse(value)?,
            other if strict => {
                return Err(Error::Usage(format!("unknown key '{other}'")));
            }
            _ => {}
        }
    }
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes a manifest; [`read_manifest`] restores it exactly
/// (floats round-trip through the 17-significant-digit form).
pub fn write_manifest(man: &RunManifest, path: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# perfpd run manifest");
    let _ = writeln!(s, "experiment = {}", man.experiment);
    let _ = writeln!(s, "T = {}", man.t_horizon);
    let _ = writeln!(s, "n_samples = {}", man.n_samples);
    let _ = writeln!(s, "epsilon = {}", fmt_f(man.epsilon));
    let _ = writeln!(s, "eta = {}", fmt_f(man.eta));
    let _ = writeln!(s, "delta = {}", fmt_f(man.delta));
    let names: Vec<&str> = man.strategies.iter().map(|st| st.name()).collect();
    let _ = writeln!(s, "strategies = {}", names.join(","));
    let _ = writeln!(s, "replicas = {}", man.replicas);
    let _ = writeln!(s, "seed = {}", man.seed);
    let _ = writeln!(s, "stride = {}", man.stride);
    let _ = writeln!(s, "out = {}", man.out);
    let _ = writeln!(s, "version = {}", man.version);
    let _ = writeln!(s, "status = {}", man.status.name());
    fs::write(path, s).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut man = RunManifest::default();
    apply_keys(&mut man, &text, false).map_err(|e| match e {
        Error::Usage(msg) => Error::Config(msg),
        other => other,
    })?;
    Ok(man)
}

/// Writes trajectory rows as CSV: header
/// `t,pr,regret_rel,vio_rel,dec_dev,param_err,g_1..g_m`, one row per record
/// in ascending `t`, floats with 17 significant digits, trailing newline.
/// `m` fixes the header when `rows` is empty.
pub fn write_csv(rows: &[TrajectoryRecord], m: usize, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("t,pr,regret_rel,vio_rel,dec_dev,param_err");
    for i in 1..=m {
        let _ = write!(s, ",g_{i}");
    }
    s.push('\n');
    for row in rows {
        debug_assert_eq!(row.g.len(), m);
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            row.t,
            fmt_f(row.pr),
            fmt_f(row.regret_rel),
            fmt_f(row.vio_rel),
            fmt_f(row.dec_dev),
            fmt_f(row.param_err)
        );
        for g in row.g.iter() {
            let _ = write!(s, ",{}", fmt_f(*g));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// One summary line per strategy: final-row metrics plus the largest
/// time-averaged constraint violation.
pub fn write_summary(tables: &[StrategyTable], t_horizon: u64, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str(
        "strategy,queries,t_final,regret_rel,vio_rel,dec_dev,param_err,max_time_avg_vio\n",
    );
    for table in tables {
        let last = table.rows.last();
        let max_avg_vio = table
            .final_vio
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            / t_horizon.max(1) as f64;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            table.strategy.name(),
            table.queries_per_run,
            last.map(|r| r.t).unwrap_or(0),
            fmt_f(last.map(|r| r.regret_rel).unwrap_or(f64::NAN)),
            fmt_f(last.map(|r| r.vio_rel).unwrap_or(f64::NAN)),
            fmt_f(last.map(|r| r.dec_dev).unwrap_or(f64::NAN)),
            fmt_f(last.map(|r| r.param_err).unwrap_or(f64::NAN)),
            fmt_f(max_avg_vio)
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Creates the run directory (timestamp plus seed), executes the comparison,
/// and writes `manifest.txt`, one `<strategy>.csv` per strategy, and
/// `summary.csv`. The manifest is written up front with status `incomplete`
/// and flipped to `complete` only after every artifact landed, so an
/// interrupted run is recognizable.
pub fn run_from_manifest(man: &RunManifest) -> Result<PathBuf> {
    let exp = match man.experiment.as_str() {
        "linreg" => build_linreg(man.seed, 10, 0.5, 3, man.epsilon)?,
        "portfolio" => build_portfolio(man.seed, 10, man.epsilon)?,
        other => return Err(Error::Config(format!("unknown experiment '{other}'"))),
    };

    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut run_dir = PathBuf::from(&man.out).join(format!("run-{stamp}-seed{}", man.seed));
    let mut attempt = 1;
    while run_dir.exists() {
        attempt += 1;
        run_dir = PathBuf::from(&man.out).join(format!("run-{stamp}-seed{}-{attempt}", man.seed));
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.clone(), e))?;

    let manifest_path = run_dir.join("manifest.txt");
    let mut man_out = man.clone();
    man_out.status = RunStatus::Incomplete;
    write_manifest(&man_out, &manifest_path)?;

    let cc = ComparisonConfig {
        t_horizon: man.t_horizon,
        n_pool: man.effective_n(),
        replicas: man.replicas,
        seed: man.seed,
        eta: man.eta,
        delta: man.delta,
        zeta: ZetaSchedule::RecipOffset { offset: 10.0 },
        stride: man.stride,
    };
    let tables = crate::experiments::run_comparison(&exp, &man.strategies, &cc)?;

    let m = exp.problem.constraints.m();
    for table in &tables {
        let path = run_dir.join(format!("{}.csv", table.strategy.name()));
        write_csv(&table.rows, m, &path)?;
    }
    write_summary(&tables, man.t_horizon, &run_dir.join("summary.csv"))?;

    man_out.status = RunStatus::Complete;
    write_manifest(&man_out, &manifest_path)?;
    Ok(run_dir)
}

/// Entry point used by the `perfpd` binary. Returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let man = match parse_cli(args) {
        Ok(man) => man,
        Err(Error::Usage(msg)) => {
            if let Some(text) = msg.strip_prefix("__display__") {
                println!("{text}");
                return 0;
            }
            eprintln!("{msg}");
            eprintln!("run with --help for usage");
            return 2;
        }
        Err(other) => {
            eprintln!("error: {other}");
            return 1;
        }
    };
    match run_from_manifest(&man) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
