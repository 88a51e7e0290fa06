use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pixelworld::Suite;

use super::metrics::{read_metrics, RunRecord, METRICS_FILE};
use super::train::{final_results, train_run, RunSummary, CONFIG_FILE, SUMMARY_FILE};
use super::{RunConfig, Variant};

pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_TXT: &str = "table.txt";

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Runs trained concurrently.
    pub jobs: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            variants: Variant::ABLATION.to_vec(),
            jobs: 1,
        }
    }
}

pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{variant}_s{seed}")
}

/// A finished run directory.
#[derive(Clone, Debug)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<RunRecord>,
}

/// Mean and spread over seeds of the final-step return for one cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableCell {
    pub variant: Variant,
    pub suite: Suite,
    /// Completed runs contributing to the cell.
    pub seeds: usize,
    pub failed_runs: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    /// `mean / train mean` of the same variant; absent for the train suite
    /// and when the train mean is not positive.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryTable {
    pub variants: Vec<Variant>,
    pub suites: Vec<Suite>,
    pub cells: Vec<TableCell>,
}

impl SummaryTable {
    pub fn cell(&self, variant: Variant, suite: Suite) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.variant == variant && c.suite == suite)
    }

    /// Build the table from finished runs. Final-step values are recomputed
    /// from each run's metrics; failed runs are counted but not averaged.
    pub fn from_runs(runs: &[RunEntry], variants: &[Variant]) -> Result<SummaryTable> {
        let mut suites: Vec<Suite> = runs.iter().flat_map(|r| r.records.iter().map(|x| x.suite)).collect();
        suites.sort();
        suites.dedup();
        let mut cells = Vec::new();
        for &variant in variants {
            let mine: Vec<&RunEntry> = runs.iter().filter(|r| r.summary.variant == variant).collect();
            let failed = mine.iter().filter(|r| !r.summary.completed()).count();
            let mut per_suite: BTreeMap<Suite, Vec<f64>> = BTreeMap::new();
            for run in mine.iter().filter(|r| r.summary.completed()) {
                let (_, finals, _) = final_results(&run.records)?;
                for (suite, res) in finals {
                    per_suite.entry(suite).or_default().push(res.mean);
                }
            }
            let stat = |xs: &[f64]| {
                let n = xs.len();
                if n == 0 {
                    return (f64::NAN, f64::NAN);
                }
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                (mean, var.sqrt())
            };
            let train_mean = per_suite.get(&Suite::Train).map(|xs| stat(xs).0);
            for &suite in &suites {
                let xs = per_suite.get(&suite).map(Vec::as_slice).unwrap_or(&[]);
                let (mean, std) = stat(xs);
                let ratio = match (suite, train_mean) {
                    (Suite::Train, _) => None,
                    (_, Some(t)) if t > 0.0 && mean.is_finite() => Some(mean / t),
                    _ => None,
                };
                cells.push(TableCell {
                    variant,
                    suite,
                    seeds: xs.len(),
                    failed_runs: failed,
                    mean,
                    std,
                    ratio,
                });
            }
        }
        Ok(SummaryTable {
            variants: variants.to_vec(),
            suites,
            cells,
        })
    }

    /// Long format, one row per (variant, suite).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,suite,seeds,failed_runs,mean_return,std_return,ratio\n");
        for c in &self.cells {
            let ratio = c.ratio.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.variant, c.suite, c.seeds, c.failed_runs, c.mean, c.std, ratio
            );
        }
        out
    }

    /// Aligned text: suites as rows, variants as columns.
    pub fn to_text(&self) -> String {
        let cell_text = |c: Option<&TableCell>| -> String {
            let Some(c) = c else { return "-".into() };
            if c.seeds == 0 {
                return "failed".into();
            }
            let mut s = format!("{:.3} ± {:.3}", c.mean, c.std);
            if let Some(r) = c.ratio {
                let _ = write!(s, " ({r:.2})");
            }
            if c.failed_runs > 0 {
                let _ = write!(s, " [{} failed]", c.failed_runs);
            }
            s
        };
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["suite".to_string()];
        header.extend(self.variants.iter().map(|v| v.to_string()));
        grid.push(header);
        for &suite in &self.suites {
            let mut row = vec![suite.to_string()];
            row.extend(self.variants.iter().map(|&v| cell_text(self.cell(v, suite))));
            grid.push(row);
        }
        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str("mean ± std of final-step return over seeds; (ratio) = suite mean / train mean\n");
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [(TABLE_CSV, self.to_csv()), (TABLE_TXT, self.to_text())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Load finished runs (those with a summary) from `dirs`; unfinished ones are skipped.
pub fn collect_runs(dirs: &[PathBuf]) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    for dir in dirs {
        if !dir.join(SUMMARY_FILE).exists() {
            log::warn!("skipping {}: no {SUMMARY_FILE}", dir.display());
            continue;
        }
        out.push(RunEntry {
            summary: RunSummary::load(dir)?,
            records: read_metrics(&dir.join(METRICS_FILE))?,
            dir: dir.clone(),
        });
    }
    Ok(out)
}

/// Every immediate subdirectory of `root` holding a metrics file.
fn run_dirs_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Build and write the table for every run found under `root`. Variants are
/// listed in canonical order, restricted to those present.
pub fn summarize_dir(root: &Path) -> Result<SummaryTable> {
    let runs = collect_runs(&run_dirs_under(root)?)?;
    if runs.is_empty() {
        return Err(Error::Schema(format!("no finished runs under {}", root.display())));
    }
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| runs.iter().any(|r| r.summary.variant == *v))
        .collect();
    let table = SummaryTable::from_runs(&runs, &variants)?;
    table.write(root)?;
    Ok(table)
}

fn reusable(dir: &Path, cfg: &RunConfig) -> bool {
    let same_cfg = RunConfig::load(&dir.join(CONFIG_FILE)).is_ok_and(|c| &c == cfg);
    same_cfg && RunSummary::load(dir).is_ok_and(|s| s.completed())
}

/// Train every (variant, seed) pair under `out_root` and emit the table.
/// Completed runs with an identical config are reused; failed runs appear
/// in the table as failures.
pub fn ablate(base: &RunConfig, opts: &AblateOptions, out_root: &Path) -> Result<SummaryTable> {
    if opts.seeds.len() < 2 {
        return Err(Error::config("an ablation needs at least two seeds"));
    }
    if opts.variants.is_empty() {
        return Err(Error::config("an ablation needs at least one variant"));
    }
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let jobs: Vec<(RunConfig, PathBuf)> = opts
        .variants
        .iter()
        .flat_map(|&v| opts.seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| (base.with_variant(v).with_seed(s), out_root.join(run_dir_name(v, s))))
        .collect();
    for (cfg, _) in &jobs {
        cfg.validate()?;
    }
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..opts.jobs.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, dir)) = jobs.get(i) else { break };
                if first_error.lock().unwrap().is_some() {
                    break;
                }
                if reusable(dir, cfg) {
                    log::info!("reusing {}", dir.display());
                    continue;
                }
                if let Err(e) = train_run(cfg, dir) {
                    first_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let dirs: Vec<PathBuf> = jobs.iter().map(|(_, d)| d.clone()).collect();
    let runs = collect_runs(&dirs)?;
    let table = SummaryTable::from_runs(&runs, &opts.variants)?;
    table.write(out_root)?;
    Ok(table)
}
