//! Single training runs and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use dyadformer::data::{load_manifest, sample_dataset, SessionRecord, Split, REFERENCE_MAX_T};
use dyadformer::evaluation::{mse_part, mse_seq, PredictionRecord};
use dyadformer::model::{Dyadformer, ModelConfig, ModelVariant, Participant};
use dyadformer::training::{collect_predictions, train, write_log, TrainOutcome};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.dyck";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn load_sessions(manifest: &Path) -> Result<Vec<Arc<SessionRecord>>> {
    let sessions = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if sessions.is_empty() {
        bail!("{} lists no sessions", manifest.display());
    }
    Ok(sessions.into_iter().map(Arc::new).collect())
}

pub fn warn_long_window(t: usize) {
    if t > REFERENCE_MAX_T {
        eprintln!("warning: window T = {t} is longer than any evaluated in the reference experiments (max {REFERENCE_MAX_T})");
    }
}

/// One point of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub variant: ModelVariant,
    /// Depth of every encoder; `None` keeps the configured depths.
    pub layers: Option<usize>,
    pub window: usize,
    pub seed: u64,
}

impl CellSpec {
    pub fn dir_name(&self) -> String {
        let l = self.layers.map_or_else(|| "-".to_string(), |l| l.to_string());
        format!("{}_L{l}_T{}_seed{}", self.variant.key(), self.window, self.seed)
    }
}

/// Model settings for a cell: profile and overrides, the grid's depth, and
/// the dataset's feature widths.
pub fn cell_model_config(cfg: &RunConfig, spec: &CellSpec, sessions: &[Arc<SessionRecord>]) -> Result<ModelConfig> {
    let mut m = cfg.model_config_for(spec.variant)?;
    if let (Some(l), false) = (spec.layers, spec.variant == ModelVariant::BertBaseline) {
        m.l_aud = l;
        m.l_xm = l;
        m.l_sbj = l;
        m.l_xs = l;
    }
    if let Some(s) = sessions.first() {
        (m.d_v, m.d_a, m.d_m) = s.widths();
    }
    m.validate()?;
    Ok(m)
}

/// Trains one model; the training and validation splits are sampled with
/// the configured strides.
pub fn fit(cfg: &RunConfig, spec: &CellSpec, sessions: &[Arc<SessionRecord>]) -> Result<(Dyadformer, TrainOutcome)> {
    let model = Dyadformer::new(cell_model_config(cfg, spec, sessions)?)?;
    let train_set = sample_dataset(sessions, Split::Train, spec.window, cfg.data.stride);
    let val_set = sample_dataset(sessions, Split::Val, spec.window, cfg.data.eval_stride);
    let mut tc = cfg.train.clone();
    tc.seed = spec.seed;
    let init = model.init_params(spec.seed)?;
    let outcome = train(&model, init, &train_set, &val_set, &tc).with_context(|| format!("training {}", spec.dir_name()))?;
    Ok((model, outcome))
}

pub fn predict_split(
    model: &Dyadformer,
    outcome: &TrainOutcome,
    sessions: &[Arc<SessionRecord>],
    split: Split,
    window: usize,
    stride: usize,
) -> Result<Vec<PredictionRecord>> {
    let samples = sample_dataset(sessions, split, window, stride);
    if samples.is_empty() {
        bail!("no {split:?} sequences of length {window}");
    }
    Ok(collect_predictions(model, &outcome.checkpoint.params, &samples, &Participant::BOTH)?)
}

pub fn save_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    outcome.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    write_log(dir.join(LOG_FILE), &outcome.state.log)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub spec: CellSpec,
    pub mse_seq: f64,
    pub mse_part: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

/// Train, save under `dir`, and score on the test split.
pub fn run_cell(cfg: &RunConfig, spec: &CellSpec, sessions: &[Arc<SessionRecord>], dir: &Path) -> Result<CellResult> {
    let (model, outcome) = fit(cfg, spec, sessions)?;
    save_run(dir, &outcome)?;
    let records = predict_split(&model, &outcome, sessions, Split::Test, spec.window, cfg.data.eval_stride)?;
    Ok(CellResult {
        spec: *spec,
        mse_seq: mse_seq(&records)?.avg,
        mse_part: mse_part(&records)?.avg,
        epochs: outcome.state.log.len(),
        best_epoch: outcome.state.best_epoch,
    })
}

/// Rows of the summary: one per variant and depth, BERT once.
pub fn grid_rows(cfg: &RunConfig) -> Vec<(ModelVariant, Option<usize>)> {
    let mut rows = Vec::new();
    for &v in &cfg.ablate.variants {
        if v == ModelVariant::BertBaseline {
            if !rows.contains(&(v, None)) {
                rows.push((v, None));
            }
            continue;
        }
        for &l in &cfg.ablate.layers {
            if !rows.contains(&(v, Some(l))) {
                rows.push((v, Some(l)));
            }
        }
    }
    rows
}

pub fn grid_cells(cfg: &RunConfig) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for (variant, layers) in grid_rows(cfg) {
        for &window in &cfg.ablate.windows {
            for &seed in &cfg.seeds {
                cells.push(CellSpec {
                    variant,
                    layers,
                    window,
                    seed,
                });
            }
        }
    }
    cells
}

pub struct GridOutcome {
    pub cells: Vec<(CellSpec, Result<CellResult, String>)>,
    pub summary: Summary,
}

impl GridOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|(_, r)| r.is_err()).count()
    }
}

/// Runs every cell with up to `jobs` worker threads. A failing cell is
/// recorded and the rest of the grid still runs.
pub fn ablate_grid(cfg: &RunConfig, sessions: &[Arc<SessionRecord>], out: &Path, jobs: usize) -> Result<GridOutcome> {
    if cfg.seeds.is_empty() || cfg.ablate.windows.is_empty() || grid_rows(cfg).is_empty() {
        bail!("empty grid: need at least one variant, depth, window and seed");
    }
    for &t in &cfg.ablate.windows {
        warn_long_window(t);
    }
    let cells = grid_cells(cfg);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult, String>>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = cells.get(i) else { break };
                let dir = cell_dir(out, spec);
                let r = run_cell(cfg, spec, sessions, &dir).map_err(|e| format!("{e:#}"));
                match &r {
                    Ok(c) => eprintln!("{}: mse_seq {:.4} mse_part {:.4}", spec.dir_name(), c.mse_seq, c.mse_part),
                    Err(e) => eprintln!("{}: FAILED: {e}", spec.dir_name()),
                }
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let cells: Vec<_> = cells
        .into_iter()
        .zip(results.into_inner().expect("no worker panicked"))
        .map(|(s, r)| (s, r.expect("every cell ran")))
        .collect();
    let summary = Summary::build(cfg, &cells);
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.txt"), summary.render_text())?;
    fs::write(out.join("summary.csv"), summary.render_csv())?;
    fs::write(out.join("cells.csv"), render_cells(&cells))?;
    Ok(GridOutcome { cells, summary })
}

/// Seed-averaged metric of one (row, window) cell; `None` if any seed failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub mean: Option<f64>,
    pub num_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<(ModelVariant, Option<usize>)>,
    pub windows: Vec<usize>,
    /// `[metric][row][window]`, metric 0 = MSE_seq, 1 = MSE_part.
    pub values: [Vec<Vec<SummaryCell>>; 2],
}

const METRICS: [(&str, &str); 2] = [("mse_seq", "MSE_seq"), ("mse_part", "MSE_part")];

impl Summary {
    pub fn build(cfg: &RunConfig, cells: &[(CellSpec, Result<CellResult, String>)]) -> Self {
        let rows = grid_rows(cfg);
        let windows = cfg.ablate.windows.clone();
        let values = std::array::from_fn(|m| {
            rows.iter()
                .map(|&(variant, layers)| {
                    windows
                        .iter()
                        .map(|&window| {
                            let runs: Vec<&Result<CellResult, String>> = cells
                                .iter()
                                .filter(|(s, _)| s.variant == variant && s.layers == layers && s.window == window)
                                .map(|(_, r)| r)
                                .collect();
                            let ok: Vec<f64> = runs
                                .iter()
                                .filter_map(|r| r.as_ref().ok())
                                .map(|c| if m == 0 { c.mse_seq } else { c.mse_part })
                                .collect();
                            let mean = (ok.len() == runs.len() && !ok.is_empty())
                                .then(|| ok.iter().sum::<f64>() / ok.len() as f64);
                            SummaryCell {
                                mean,
                                num_seeds: runs.len(),
                            }
                        })
                        .collect()
                })
                .collect()
        });
        Self { rows, windows, values }
    }

    fn row_label(row: &(ModelVariant, Option<usize>)) -> (String, String) {
        (row.0.label().to_string(), row.1.map_or_else(|| "-".to_string(), |l| l.to_string()))
    }

    /// One table per metric, rows per variant and depth, columns per window;
    /// the lowest value of each column is wrapped in `**`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (m, (_, label)) in METRICS.iter().enumerate() {
            let seeds = self.values[m].first().and_then(|r| r.first()).map_or(0, |c| c.num_seeds);
            let _ = writeln!(out, "{label} (test split, mean over {seeds} seeds)");
            let _ = write!(out, "{:<10} {:>3}", "Model", "L");
            for t in &self.windows {
                let _ = write!(out, " {:>10}", format!("T={t}"));
            }
            out.push('\n');
            let best: Vec<Option<f64>> = (0..self.windows.len())
                .map(|w| {
                    self.values[m]
                        .iter()
                        .filter_map(|r| r[w].mean)
                        .min_by(f64::total_cmp)
                })
                .collect();
            for (row, cells) in self.rows.iter().zip(&self.values[m]) {
                let (name, l) = Self::row_label(row);
                let _ = write!(out, "{name:<10} {l:>3}");
                for (c, b) in cells.iter().zip(&best) {
                    let text = match c.mean {
                        Some(v) if Some(v) == *b => format!("**{v:.4}**"),
                        Some(v) => format!("{v:.4}"),
                        None => "fail".to_string(),
                    };
                    let _ = write!(out, " {text:>10}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// `variant,layers,window,metric,value,num_seeds`; failed cells have an
    /// empty value.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("variant,layers,window,metric,value,num_seeds\n");
        for (m, (key, _)) in METRICS.iter().enumerate() {
            for (row, cells) in self.rows.iter().zip(&self.values[m]) {
                let l = row.1.map_or_else(String::new, |l| l.to_string());
                for (t, c) in self.windows.iter().zip(cells) {
                    let v = c.mean.map_or_else(String::new, |v| format!("{v}"));
                    let _ = writeln!(out, "{},{l},{t},{key},{v},{}", row.0.key(), c.num_seeds);
                }
            }
        }
        out
    }
}

/// Per-seed results: `variant,layers,window,seed,mse_seq,mse_part,epochs,best_epoch,error`.
pub fn render_cells(cells: &[(CellSpec, Result<CellResult, String>)]) -> String {
    let mut out = String::from("variant,layers,window,seed,mse_seq,mse_part,epochs,best_epoch,error\n");
    for (s, r) in cells {
        let l = s.layers.map_or_else(String::new, |l| l.to_string());
        let _ = write!(out, "{},{l},{},{},", s.variant.key(), s.window, s.seed);
        match r {
            Ok(c) => {
                let _ = writeln!(out, "{},{},{},{},", c.mse_seq, c.mse_part, c.epochs, c.best_epoch);
            }
            Err(e) => {
                let _ = writeln!(out, ",,,,\"{}\"", e.replace('"', "'"));
            }
        }
    }
    out
}

pub fn cell_dir(out: &Path, spec: &CellSpec) -> PathBuf {
    out.join("cells").join(spec.dir_name())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(variant: ModelVariant, window: usize, seed: u64, v: f64) -> (CellSpec, Result<CellResult, String>) {
        let spec = CellSpec {
            variant,
            layers: Some(1),
            window,
            seed,
        };
        (
            spec,
            Ok(CellResult {
                spec,
                mse_seq: v,
                mse_part: 2.0 * v,
                epochs: 1,
                best_epoch: 1,
            }),
        )
    }

    fn grid_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.ablate.variants = vec![ModelVariant::TfV, ModelVariant::DfXm];
        cfg.ablate.windows = vec![3, 6];
        cfg.seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn grid_enumerates_rows_windows_seeds() {
        let mut cfg = grid_config();
        cfg.ablate.variants.push(ModelVariant::BertBaseline);
        cfg.ablate.layers = vec![1, 2];
        let rows = grid_rows(&cfg);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4], (ModelVariant::BertBaseline, None));
        assert_eq!(grid_cells(&cfg).len(), 5 * 2 * 2);
    }

    #[test]
    fn summary_averages_seeds_and_bolds_column_minimum() {
        let cfg = grid_config();
        let cells = vec![
            result(ModelVariant::TfV, 3, 0, 1.0),
            result(ModelVariant::TfV, 3, 1, 2.0),
            result(ModelVariant::TfV, 6, 0, 0.5),
            result(ModelVariant::TfV, 6, 1, 0.25),
            result(ModelVariant::DfXm, 3, 0, 0.75),
            result(ModelVariant::DfXm, 3, 1, 0.5),
            result(ModelVariant::DfXm, 6, 0, 1.0),
            (
                CellSpec {
                    variant: ModelVariant::DfXm,
                    layers: Some(1),
                    window: 6,
                    seed: 1,
                },
                Err("diverged".into()),
            ),
        ];
        let s = Summary::build(&cfg, &cells);
        assert_eq!(s.values[0][0][0].mean, Some(1.5));
        assert_eq!(s.values[1][0][0].mean, Some(3.0));
        assert_eq!(s.values[0][0][1].mean, Some(0.375));
        assert_eq!(s.values[0][1][0].mean, Some(0.625));
        assert_eq!(s.values[0][1][1].mean, None);
        let text = s.render_text();
        assert!(text.contains("**0.6250**"), "{text}");
        assert!(text.contains("**0.3750**"), "{text}");
        assert!(text.contains("fail"));
        assert!(!text.contains("**1.5000**"));
        let csv = s.render_csv();
        assert!(csv.contains("TF_V,1,3,mse_seq,1.5,2\n"), "{csv}");
        assert!(csv.contains("DF_XM,1,6,mse_seq,,2\n"), "{csv}");
        assert!(render_cells(&cells).contains("\"diverged\""));
    }
}
