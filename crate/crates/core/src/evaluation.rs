//! Sequence- and participant-level metrics and per-task report tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::model::{OceanVector, NUM_TRAITS, TRAIT_NAMES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no prediction records")]
    Empty,
    #[error("correlation needs at least two participants, got {0}")]
    TooFewParticipants(usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Prediction for one participant on one T-window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    pub task: Task,
    pub participant_id: String,
    pub sequence_start: usize,
    pub prediction: OceanVector,
    pub ground_truth: OceanVector,
}

/// Per-trait values plus their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraitMetrics {
    pub per_trait: [f64; NUM_TRAITS],
    pub avg: f64,
}

impl TraitMetrics {
    fn from_traits(per_trait: [f64; NUM_TRAITS]) -> Self {
        let avg = per_trait.iter().sum::<f64>() / NUM_TRAITS as f64;
        Self { per_trait, avg }
    }
}

/// Mean squared error over all records, per trait.
pub fn mse_seq(records: &[PredictionRecord]) -> Result<TraitMetrics> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut acc = [0.0; NUM_TRAITS];
    for r in records {
        for (i, a) in acc.iter_mut().enumerate() {
            let e = r.prediction.0[i] - r.ground_truth.0[i];
            *a += e * e;
        }
    }
    let n = records.len() as f64;
    Ok(TraitMetrics::from_traits(acc.map(|s| s / n)))
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// A participant's median prediction and ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticipantAggregate {
    pub prediction: OceanVector,
    pub ground_truth: OceanVector,
    pub num_sequences: usize,
}

/// Per participant, per trait median over that participant's records.
pub fn aggregate_participant(records: &[PredictionRecord]) -> BTreeMap<String, ParticipantAggregate> {
    let mut grouped: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.participant_id.as_str()).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(id, rs)| {
            let prediction = OceanVector(std::array::from_fn(|i| {
                let mut col: Vec<f64> = rs.iter().map(|r| r.prediction.0[i]).collect();
                median(&mut col)
            }));
            let agg = ParticipantAggregate {
                prediction,
                ground_truth: rs[0].ground_truth,
                num_sequences: rs.len(),
            };
            (id.to_string(), agg)
        })
        .collect()
}

/// Squared error of the aggregated predictions, averaged over participants.
pub fn mse_part(records: &[PredictionRecord]) -> Result<TraitMetrics> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let agg = aggregate_participant(records);
    let mut acc = [0.0; NUM_TRAITS];
    for a in agg.values() {
        for (i, s) in acc.iter_mut().enumerate() {
            let e = a.prediction.0[i] - a.ground_truth.0[i];
            *s += e * e;
        }
    }
    let n = agg.len() as f64;
    Ok(TraitMetrics::from_traits(acc.map(|s| s / n)))
}

/// Sample Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between aggregated predictions and ground truths, per trait.
/// Traits whose correlation is undefined are `None`.
pub fn pearson_part(records: &[PredictionRecord]) -> Result<[Option<f64>; NUM_TRAITS]> {
    let agg = aggregate_participant(records);
    if agg.len() < 2 {
        return Err(EvalError::TooFewParticipants(agg.len()));
    }
    Ok(std::array::from_fn(|i| {
        let x: Vec<f64> = agg.values().map(|a| a.prediction.0[i]).collect();
        let y: Vec<f64> = agg.values().map(|a| a.ground_truth.0[i]).collect();
        pearson(&x, &y)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "mse_seq")]
    MseSeq,
    #[serde(rename = "mse_part")]
    MsePart,
    #[serde(rename = "pearson_part")]
    PearsonPart,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MseSeq, Metric::MsePart, Metric::PearsonPart];

    pub fn key(self) -> &'static str {
        match self {
            Metric::MseSeq => "mse_seq",
            Metric::MsePart => "mse_part",
            Metric::PearsonPart => "pearson_part",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::MseSeq => "MSE_seq",
            Metric::MsePart => "MSE_part",
            Metric::PearsonPart => "Pearson",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: Metric,
    pub values: [Option<f64>; NUM_TRAITS],
    /// Signed mean of the defined trait values.
    pub avg: Option<f64>,
}

impl MetricRow {
    fn new(metric: Metric, values: [Option<f64>; NUM_TRAITS]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let avg = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self { metric, values, avg }
    }

    pub fn get(&self, metric_trait: Option<usize>) -> Option<f64> {
        match metric_trait {
            Some(i) => self.values[i],
            None => self.avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    /// Task name or `Overall`.
    pub group: String,
    pub num_records: usize,
    pub num_participants: usize,
    pub rows: Vec<MetricRow>,
}

impl GroupReport {
    pub fn row(&self, metric: Metric) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    /// One block per task with records, then the overall block.
    Task,
    Overall,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub groups: Vec<GroupReport>,
    /// Groups left out for lack of records.
    pub notices: Vec<String>,
}

pub const OVERALL: &str = "Overall";

fn group_report(group: &str, records: &[PredictionRecord]) -> Result<GroupReport> {
    let seq = mse_seq(records)?;
    let part = mse_part(records)?;
    let pearson = pearson_part(records).unwrap_or([None; NUM_TRAITS]);
    Ok(GroupReport {
        group: group.to_string(),
        num_records: records.len(),
        num_participants: aggregate_participant(records).len(),
        rows: vec![
            MetricRow::new(Metric::MseSeq, seq.per_trait.map(Some)),
            MetricRow::new(Metric::MsePart, part.per_trait.map(Some)),
            MetricRow::new(Metric::PearsonPart, pearson),
        ],
    })
}

pub fn report_table(records: &[PredictionRecord], group_by: GroupBy) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut report = MetricsReport::default();
    if group_by == GroupBy::Task {
        for task in Task::ALL {
            let subset: Vec<PredictionRecord> = records.iter().filter(|r| r.task == task).cloned().collect();
            if subset.is_empty() {
                report.notices.push(format!("no records for task {task}; block omitted"));
                continue;
            }
            report.groups.push(group_report(task.name(), &subset)?);
        }
    }
    report.groups.push(group_report(OVERALL, records)?);
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// Aligned text table: one block per group, three metric rows each.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:<9}", "Task", "Metric");
        for name in TRAIT_NAMES {
            let _ = write!(out, " {name:>8}");
        }
        let _ = writeln!(out, " {:>8}", "Avg");
        for g in &self.groups {
            for (k, row) in g.rows.iter().enumerate() {
                let label = if k == 0 { g.group.as_str() } else { "" };
                let _ = write!(out, "{label:<8} {:<9}", row.metric.label());
                for v in row.values {
                    let _ = write!(out, " {:>8}", cell(v));
                }
                let _ = writeln!(out, " {:>8}", cell(row.avg));
            }
        }
        for n in &self.notices {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    /// `task,trait,metric,value` rows; undefined values are left empty.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("task,trait,metric,value\n");
        for g in &self.groups {
            for row in &g.rows {
                let cells = TRAIT_NAMES.iter().zip(row.values).chain(std::iter::once((&"Avg", row.avg)));
                for (name, v) in cells {
                    let value = v.map_or_else(String::new, |x| format!("{x}"));
                    let _ = writeln!(out, "{},{name},{},{value}", g.group, row.metric.key());
                }
            }
        }
        out
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Mean and population standard deviation of the predictions, per trait.
pub fn prediction_spread(records: &[PredictionRecord]) -> Result<[(f64, f64); NUM_TRAITS]> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = records.len() as f64;
    Ok(std::array::from_fn(|i| {
        let mean = records.iter().map(|r| r.prediction.0[i]).sum::<f64>() / n;
        let var = records.iter().map(|r| (r.prediction.0[i] - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }))
}

pub fn render_spread(spread: &[(f64, f64); NUM_TRAITS]) -> String {
    let mut out = String::from("prediction mean ± std:");
    for (name, (m, s)) in TRAIT_NAMES.iter().zip(spread) {
        let _ = write!(out, " {name} {m:.3} ± {s:.3}");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn record(pid: &str, task: Task, pred: [f64; 5], truth: [f64; 5]) -> PredictionRecord {
        PredictionRecord {
            session_id: format!("s_{pid}"),
            task,
            participant_id: pid.into(),
            sequence_start: 0,
            prediction: OceanVector(pred),
            ground_truth: OceanVector(truth),
        }
    }

    fn random_records(n: usize, participants: usize, seed: u64) -> Vec<PredictionRecord> {
        let mut rng = RngStream::new(seed);
        let truths: Vec<[f64; 5]> = (0..participants).map(|_| std::array::from_fn(|_| rng.normal())).collect();
        (0..n)
            .map(|k| {
                let p = rng.below(participants);
                let mut r = record(
                    &format!("p{p:02}"),
                    Task::ALL[p % 4],
                    std::array::from_fn(|_| rng.normal()),
                    truths[p],
                );
                r.sequence_start = k;
                r
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let recs = vec![record("a", Task::Talk, [1.0; 5], [1.0; 5]), record("b", Task::Talk, [2.0; 5], [2.0; 5])];
        assert_eq!(mse_seq(&recs).unwrap().avg, 0.0);
        assert_eq!(mse_part(&recs).unwrap().avg, 0.0);
        assert!(mse_seq(&[]).is_err());
        assert!(mse_part(&[]).is_err());
    }

    #[test]
    fn unit_errors() {
        let r = mse_seq(&[record("a", Task::Talk, [1.0; 5], [0.0; 5])]).unwrap();
        assert_eq!(r.per_trait, [1.0; 5]);
        assert_eq!(r.avg, 1.0);
        let r = mse_part(&[record("a", Task::Talk, [0.0, 0.0, 0.0, 0.0, 1.0], [0.0; 5])]).unwrap();
        assert_eq!(r.per_trait[4], 1.0);
        assert!((r.avg - 0.2).abs() < 1e-15);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&mut [1.0, 100.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [7.0]), 7.0);
        let recs: Vec<_> = [1.0, 2.0, 100.0]
            .iter()
            .map(|&v| record("a", Task::Lego, [v; 5], [0.0; 5]))
            .collect();
        assert_eq!(aggregate_participant(&recs)["a"].prediction.0, [2.0; 5]);
    }

    #[test]
    fn pearson_extremes_and_missing() {
        let truths = [[1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 1.0, 0.0, 1.0, 3.0], [0.0, 5.0, 1.0, 2.0, 2.0]];
        let same: Vec<_> = truths.iter().enumerate().map(|(i, t)| record(&format!("p{i}"), Task::Talk, *t, *t)).collect();
        for v in pearson_part(&same).unwrap() {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
        let neg: Vec<_> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| record(&format!("p{i}"), Task::Talk, t.map(|x| -x), *t))
            .collect();
        for v in pearson_part(&neg).unwrap() {
            assert!((v.unwrap() + 1.0).abs() < 1e-12);
        }
        let flat: Vec<_> = truths.iter().enumerate().map(|(i, t)| record(&format!("p{i}"), Task::Talk, [0.5; 5], *t)).collect();
        assert_eq!(pearson_part(&flat).unwrap(), [None; 5]);
        assert!(matches!(pearson_part(&same[..1]), Err(EvalError::TooFewParticipants(1))));
    }

    #[test]
    fn pearson_matches_textbook_fixture() {
        // x = predictions, y = truths of five participants
        let x = [0.3, -1.2, 0.8, 2.0, -0.4];
        let y = [0.1, -0.9, 1.1, 1.5, 0.2];
        // r = (nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))
        let n = 5.0;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let expected = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        let recs: Vec<_> = (0..5).map(|i| record(&format!("p{i}"), Task::Ghost, [x[i]; 5], [y[i]; 5])).collect();
        let got = pearson_part(&recs).unwrap();
        for v in got {
            assert!((v.unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sequence_participant_reduces_to_sequence_error() {
        let recs = random_records(1, 1, 3);
        assert_eq!(mse_part(&recs).unwrap(), mse_seq(&recs).unwrap());
    }

    #[test]
    fn duplicating_a_participant_wholesale_changes_nothing() {
        let recs = random_records(60, 8, 4);
        let mut dup = recs.clone();
        dup.extend(recs.iter().filter(|r| r.participant_id == "p03").cloned());
        assert_eq!(mse_part(&recs).unwrap(), mse_part(&dup).unwrap());
    }

    #[test]
    fn report_blocks_and_averages() {
        let recs = random_records(200, 20, 5);
        let report = report_table(&recs, GroupBy::Task).unwrap();
        let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["Animals", "Ghost", "Lego", "Talk", OVERALL]);
        for g in &report.groups {
            assert_eq!(g.rows.len(), 3);
            for row in &g.rows {
                let defined: Vec<f64> = row.values.iter().flatten().copied().collect();
                let mean = defined.iter().sum::<f64>() / defined.len() as f64;
                assert!((row.avg.unwrap() - mean).abs() <= 1e-12);
            }
        }
        let csv = report.render_csv();
        assert_eq!(csv.lines().count(), 1 + 5 * 3 * 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("Animals,O,mse_seq,"));
        assert_eq!(report.render_text(), report_table(&recs, GroupBy::Task).unwrap().render_text());
    }

    #[test]
    fn single_task_gives_one_block_plus_overall() {
        let recs: Vec<_> = random_records(30, 4, 6)
            .into_iter()
            .map(|mut r| {
                r.task = Task::Lego;
                r
            })
            .collect();
        let report = report_table(&recs, GroupBy::Task).unwrap();
        assert_eq!(report.groups.len(), 2);
        assert_eq!(report.notices.len(), 3);
        assert_eq!(report_table(&recs, GroupBy::Overall).unwrap().groups.len(), 1);
    }

    #[test]
    fn golden_rendering() {
        let recs = vec![
            record("a", Task::Talk, [1.0, 0.0, 0.0, 0.0, 0.0], [0.0; 5]),
            record("b", Task::Talk, [0.0, 2.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 1.0]),
        ];
        let text = report_table(&recs, GroupBy::Overall).unwrap().render_text();
        let expected = "\
Task     Metric           O        C        E        A        N      Avg
Overall  MSE_seq     1.0000   2.0000   0.0000   0.0000   0.5000   0.7000
         MSE_part    1.0000   2.0000   0.0000   0.0000   0.5000   0.7000
         Pearson    -1.0000      n/a      n/a      n/a      n/a  -1.0000
";
        assert_eq!(text, expected);
    }

    #[test]
    fn spread_of_constant_predictions_is_zero() {
        let recs = vec![record("a", Task::Talk, [0.5; 5], [0.0; 5]), record("b", Task::Talk, [0.5; 5], [1.0; 5])];
        let s = prediction_spread(&recs).unwrap();
        assert!(s.iter().all(|&(m, sd)| m == 0.5 && sd == 0.0));
        assert!(render_spread(&s).contains("O 0.500 ± 0.000"));
    }

    fn brute_mse_seq(recs: &[PredictionRecord], i: usize) -> f64 {
        let mut s = 0.0;
        for r in recs {
            s += (r.prediction.0[i] - r.ground_truth.0[i]).powi(2);
        }
        s / recs.len() as f64
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(seed in 0u64..500, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let recs = random_records(40, 10, seed);
            let scaled: Vec<_> = recs.iter().cloned().map(|mut r| {
                r.prediction = OceanVector(r.prediction.0.map(|v| a * v + b));
                r
            }).collect();
            let p = pearson_part(&recs).unwrap();
            let q = pearson_part(&scaled).unwrap();
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() <= 1e-12);
            }
        }

        #[test]
        fn mse_seq_matches_brute_force(seed in 0u64..1000) {
            let recs = random_records(25, 5, seed);
            let m = mse_seq(&recs).unwrap();
            for i in 0..5 {
                prop_assert_eq!(m.per_trait[i].to_bits(), brute_mse_seq(&recs, i).to_bits());
            }
        }
    }
}
