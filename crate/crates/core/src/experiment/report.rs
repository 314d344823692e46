//! CSV, manifest and plot-script output, and side-by-side comparison of
//! summary files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Experiment, ExperimentError};

/// One `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub rows: usize,
    pub avg_delay_ms: f64,
    /// Mean of the per-unit ELF over attack units.
    pub avg_elf_attack_pct: f64,
    /// Mean of the per-unit fairness over attack units.
    pub mean_fairness: f64,
    pub mean_q: f64,
    pub attack_units: usize,
    pub degraded_units: usize,
    pub saturated_units: usize,
    pub served_ratio: f64,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub policy: String,
    pub rows: usize,
    pub attack_onsets: Vec<u64>,
    pub recoveries: usize,
    pub reoptimizations: usize,
    pub skipped_attacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub horizon: usize,
    pub runs: Vec<ManifestRun>,
    pub config: BTreeMap<String, String>,
}

fn version() -> String {
    match option_env!("EDGEFAIL_GIT_REV") {
        Some(rev) => format!("v{}-g{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn metrics_header(services: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "state", "policy", "avg_delay_ms"].iter().map(|s| s.to_string()).collect();
    h.extend((0..services).map(|s| format!("s{s}_delay_ms")));
    h.extend(["avg_elf_pct", "fairness", "q_value"].iter().map(|s| s.to_string()));
    h
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let context = context.into();
    move |e| ExperimentError::Io { context, message: e.to_string() }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io { context: format!("writing {}", path.display()), message: e.to_string() }
}

fn write_metrics(exp: &Experiment, path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(metrics_header(exp.config.service_costs.len())).map_err(csv_err(path))?;
    for run in &exp.runs {
        for r in &run.history {
            let mut rec = vec![r.time.to_string(), r.state.to_string(), run.policy.to_string(), r.avg_delay.to_string()];
            rec.extend(r.per_service_delay.iter().map(|d| d.to_string()));
            rec.extend([r.avg_elf.to_string(), r.fairness.to_string(), r.q_value.to_string()]);
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))
}

fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))
}

fn plot_script(exp: &Experiment) -> String {
    let delay_col = 4;
    let elf_col = 5 + exp.config.service_costs.len();
    let mut s = String::from(
        "# gnuplot -p plot.gp\nset datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\nset multiplot layout 3,1\n",
    );
    for (col, label) in [(delay_col, "delay (ms)"), (elf_col, "ELF (%)"), (elf_col + 1, "fairness")] {
        s.push_str(&format!("set ylabel '{label}'\nplot "));
        let series: Vec<String> = exp
            .runs
            .iter()
            .map(|r| {
                format!(
                    "'metrics.csv' using 1:(strcol(3) eq '{p}' ? ${col} : 1/0) with lines title '{p}'",
                    p = r.policy
                )
            })
            .collect();
        s.push_str(&series.join(", \\\n     "));
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

/// Writes `metrics.csv`, `summary.csv`, `manifest.json` and optionally
/// `plot.gp` into `dir`. Returns the written paths.
pub fn write_artifacts(exp: &Experiment, dir: &Path, plot: bool) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let metrics = dir.join("metrics.csv");
    let summary = dir.join("summary.csv");
    let manifest = dir.join("manifest.json");
    write_metrics(exp, &metrics)?;
    write_summary(&exp.summaries(), &summary)?;
    let m = Manifest {
        tool: "edgefail".into(),
        version: version(),
        config_hash: exp.config_hash.clone(),
        seed: exp.config.seed,
        dataset: exp.dataset.id.clone(),
        horizon: exp.config.horizon,
        runs: exp
            .runs
            .iter()
            .map(|r| ManifestRun {
                policy: r.policy.to_string(),
                rows: r.history.len(),
                attack_onsets: r.attack_onsets.clone(),
                recoveries: r.recoveries,
                reoptimizations: r.reoptimizations,
                skipped_attacks: r.skipped_attacks,
            })
            .collect(),
        config: exp.config.hashed_entries(),
    };
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&manifest, json + "\n").map_err(io_err(format!("writing {}", manifest.display())))?;
    let mut out = vec![metrics, summary, manifest];
    if plot {
        let gp = dir.join("plot.gp");
        fs::write(&gp, plot_script(exp)).map_err(io_err(format!("writing {}", gp.display())))?;
        out.push(gp);
    }
    Ok(out)
}

/// A summary row with where it came from. `config` holds the sibling
/// manifest's config when one is present, for diffs.
#[derive(Debug, Clone)]
pub struct LoadedSummary {
    pub source: PathBuf,
    pub row: SummaryRow,
    pub config: Option<BTreeMap<String, String>>,
}

/// Reads every row of each summary file. A path may also name a run
/// directory containing `summary.csv`.
pub fn load_summaries(paths: &[PathBuf]) -> Result<Vec<LoadedSummary>, ExperimentError> {
    let mut out = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join("summary.csv") } else { p.clone() };
        let read_err = |e: csv::Error| ExperimentError::Io { context: format!("reading {}", file.display()), message: e.to_string() };
        let mut r = csv::Reader::from_path(&file).map_err(read_err)?;
        let config = file
            .parent()
            .map(|d| d.join("manifest.json"))
            .and_then(|m| fs::read_to_string(m).ok())
            .and_then(|s| serde_json::from_str::<Manifest>(&s).ok())
            .map(|m| m.config);
        for row in r.deserialize::<SummaryRow>() {
            out.push(LoadedSummary { source: file.clone(), row: row.map_err(read_err)?, config: config.clone() });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Better {
    Lower,
    Higher,
}

const METRICS: &[(&str, Better)] = &[
    ("avg_delay_ms", Better::Lower),
    ("avg_elf_attack_pct", Better::Lower),
    ("mean_fairness", Better::Higher),
    ("mean_q", Better::Higher),
    ("served_ratio", Better::Higher),
];

fn metric(r: &SummaryRow, name: &str) -> f64 {
    match name {
        "avg_delay_ms" => r.avg_delay_ms,
        "avg_elf_attack_pct" => r.avg_elf_attack_pct,
        "mean_fairness" => r.mean_fairness,
        "mean_q" => r.mean_q,
        "served_ratio" => r.served_ratio,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Side-by-side view of two or more runs of the same setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// `(metric, values per column)`.
    pub values: Vec<(String, Vec<f64>)>,
    /// Column index of the unique best value per metric, `None` on ties.
    pub winners: Vec<Option<usize>>,
}

impl Comparison {
    /// `value - first column` for every metric and column.
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|(_, v)| v.iter().map(|x| x - v[0]).collect()).collect()
    }

    pub fn winner_of(&self, metric: &str) -> Option<&str> {
        let i = self.values.iter().position(|(m, _)| m == metric)?;
        self.winners[i].map(|c| self.labels[c].as_str())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(14) + 2;
        write!(f, "{:<20}", "metric")?;
        for l in &self.labels {
            write!(f, "{l:>w$}")?;
        }
        for l in &self.labels[1..] {
            write!(f, "{:>w$}", format!("d({l})"))?;
        }
        writeln!(f)?;
        for (((name, vals), win), deltas) in self.values.iter().zip(&self.winners).zip(self.deltas()) {
            write!(f, "{name:<20}")?;
            for (c, v) in vals.iter().enumerate() {
                let flag = if *win == Some(c) { "*" } else { " " };
                write!(f, "{:>w$}", format!("{v:.4}{flag}"))?;
            }
            for d in &deltas[1..] {
                write!(f, "{:>w$}", format!("{d:+.4}"))?;
            }
            writeln!(f)?;
        }
        write!(f, "* best value for the metric")
    }
}

fn setup_diff(a: &LoadedSummary, b: &LoadedSummary) -> String {
    let mut lines = Vec::new();
    if let (Some(ca), Some(cb)) = (&a.config, &b.config) {
        let keys: std::collections::BTreeSet<&String> = ca.keys().chain(cb.keys()).collect();
        for k in keys {
            let (va, vb) = (ca.get(k), cb.get(k));
            if va != vb {
                let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "<unset>".into());
                lines.push(format!("  {k}: {} vs {}", show(va), show(vb)));
            }
        }
    }
    for (name, va, vb) in [
        ("config_hash", &a.row.config_hash, &b.row.config_hash),
        ("dataset", &a.row.dataset, &b.row.dataset),
        ("seed", &a.row.seed.to_string(), &b.row.seed.to_string()),
        ("rows", &a.row.rows.to_string(), &b.row.rows.to_string()),
    ] {
        if va != vb {
            lines.push(format!("  {name}: {va} vs {vb}"));
        }
    }
    format!("{} vs {}:\n{}", a.source.display(), b.source.display(), lines.join("\n"))
}

/// Compares runs that share a config hash, seed and dataset; refuses with a
/// diff otherwise.
pub fn compare(runs: &[LoadedSummary]) -> Result<Comparison, ExperimentError> {
    if runs.len() < 2 {
        return Err(ExperimentError::Mismatch { diff: format!("need at least 2 summaries, got {}", runs.len()) });
    }
    let first = &runs[0];
    for other in &runs[1..] {
        let same = other.row.config_hash == first.row.config_hash
            && other.row.dataset == first.row.dataset
            && other.row.seed == first.row.seed
            && other.row.rows == first.row.rows;
        if !same {
            return Err(ExperimentError::Mismatch { diff: setup_diff(first, other) });
        }
    }
    let mut labels: Vec<String> = Vec::new();
    for r in runs {
        let base = r.row.policy.clone();
        let n = labels.iter().filter(|l| l.split('#').next() == Some(base.as_str())).count();
        labels.push(if n == 0 { base } else { format!("{base}#{}", n + 1) });
    }
    let mut values = Vec::new();
    let mut winners = Vec::new();
    for &(name, better) in METRICS {
        let vals: Vec<f64> = runs.iter().map(|r| metric(&r.row, name)).collect();
        let best = match better {
            Better::Lower => vals.iter().cloned().fold(f64::INFINITY, f64::min),
            Better::Higher => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        };
        let at_best: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] == best).collect();
        winners.push(if at_best.len() == 1 { Some(at_best[0]) } else { None });
        values.push((name.to_string(), vals));
    }
    Ok(Comparison { labels, values, winners })
}
