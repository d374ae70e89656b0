//! Session-outcome and per-maneuver evaluation.
//!
//! Undefined ratios are `None` and render as `n/a`; they are never folded
//! into a zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anticipation::{score_session, session_trajectory, Context, Onset, Outcome, PredictionEvent, Predictor, Timeline};
use crate::error::{Error, Result};
use crate::fusion::PredictionTrajectory;
use crate::sample::{EventSet, Maneuver, SequenceSample};
use crate::synth::split_folds;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tp: usize,
    pub fp: usize,
    pub fpp: usize,
    pub mp: usize,
}

impl OutcomeCounts {
    pub fn new(tp: usize, fp: usize, fpp: usize, mp: usize) -> Self {
        OutcomeCounts { tp, fp, fpp, mp }
    }

    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Tp => self.tp += 1,
            Outcome::Fp => self.fp += 1,
            Outcome::Fpp => self.fpp += 1,
            Outcome::Mp => self.mp += 1,
        }
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a PredictionEvent>) -> Self {
        let mut c = OutcomeCounts::default();
        for e in events {
            c.add(e.outcome);
        }
        c
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `Pr = tp/(tp+fp+fpp)`, `Re = tp/(tp+fp+mp)`.
pub fn precision_recall(c: OutcomeCounts) -> (Option<f64>, Option<f64>) {
    (ratio(c.tp, c.tp + c.fp + c.fpp), ratio(c.tp, c.tp + c.fp + c.mp))
}

/// Harmonic mean; zero when both inputs are zero.
pub fn f1(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

/// Unweighted means of `tp[m]/predicted[m]` and `tp[m]/actual[m]`.
/// Terms with a zero denominator are skipped with a warning.
pub fn macro_precision_recall(tp: &[usize], predicted: &[usize], actual: &[usize]) -> Result<(Option<f64>, Option<f64>)> {
    if tp.len() != predicted.len() || tp.len() != actual.len() {
        return Err(Error::Invalid("per-maneuver count vectors differ in length".into()));
    }
    let mean = |den: &[usize], what: &str| {
        let terms: Vec<f64> = tp
            .iter()
            .zip(den)
            .enumerate()
            .filter_map(|(m, (t, d))| {
                let r = ratio(*t, *d);
                if r.is_none() {
                    log::warn!("macro {what}: maneuver {m} has no {what} denominator; excluded");
                }
                r
            })
            .collect();
        (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
    };
    Ok((mean(predicted, "precision"), mean(actual, "recall")))
}

/// Rows are predictions, columns are ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub events: EventSet,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(events: &EventSet) -> Self {
        Confusion {
            events: events.clone(),
            counts: vec![vec![0; events.len()]; events.len()],
        }
    }

    pub fn add(&mut self, predicted: usize, actual: usize) {
        self.counts[predicted][actual] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            r.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
    }

    /// Each row divided by its total; the diagonal is per-maneuver precision.
    pub fn row_normalized(&self) -> Vec<Vec<Option<f64>>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|c| ratio(*c, n)).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self.events.events().iter().map(|m| m.name()).collect();
        let mut s = format!("predicted\\actual,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    /// Macro scores over every maneuver except straight.
    pub fn macro_scores(&self) -> (Option<f64>, Option<f64>) {
        let k = self.events.straight();
        let idx: Vec<usize> = (0..self.events.len()).filter(|&m| m != k).collect();
        let tp: Vec<usize> = idx.iter().map(|&m| self.counts[m][m]).collect();
        let pred: Vec<usize> = idx.iter().map(|&m| self.counts[m].iter().sum()).collect();
        let act: Vec<usize> = idx.iter().map(|&m| self.counts.iter().map(|r| r[m]).sum()).collect();
        macro_precision_recall(&tp, &pred, &act).expect("aligned vectors")
    }
}

/// Per-session predictions, computed once and re-scored per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Sessions {
    pub events: EventSet,
    pub items: Vec<(PredictionTrajectory, Vec<Onset>)>,
}

impl Sessions {
    /// Each sample is one session whose maneuver begins after its last step.
    pub fn from_samples(predictor: &dyn Predictor, samples: &[SequenceSample], context: Context) -> Result<Self> {
        let events = predictor.events().clone();
        let items = samples
            .iter()
            .map(|s| {
                if !events.contains(s.label) {
                    return Err(Error::Invalid(format!("sample {} has label {} outside the event set", s.id, s.label)));
                }
                let tl = Timeline::from_sample(s);
                Ok((session_trajectory(predictor, &tl, context)?, tl.onsets))
            })
            .collect::<Result<_>>()?;
        Ok(Sessions { events, items })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_th: f64,
    pub sessions: usize,
    pub counts: OutcomeCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Mean seconds between commitment and onset over true predictions.
    pub time_to_maneuver: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub confusion: Confusion,
}

/// The prediction a session is charged with in the confusion matrix.
fn session_prediction(events: &[PredictionEvent], onsets: &[Onset]) -> Option<Maneuver> {
    if let Some(e) = events.iter().find(|e| matches!(e.outcome, Outcome::Tp | Outcome::Fp)) {
        return e.predicted;
    }
    if onsets.is_empty() {
        return events.iter().find(|e| e.outcome == Outcome::Fpp).and_then(|e| e.predicted);
    }
    None
}

pub fn evaluate(sessions: &Sessions, p_th: f64) -> Result<EvalReport> {
    let ev = &sessions.events;
    let mut counts = OutcomeCounts::default();
    let mut confusion = Confusion::new(ev);
    let mut ttm = Vec::new();
    for (traj, onsets) in &sessions.items {
        let events = score_session(traj, onsets, ev, p_th)?;
        for e in &events {
            counts.add(e.outcome);
            if e.outcome == Outcome::Tp {
                ttm.extend(e.time_to_maneuver);
            }
        }
        if onsets.len() <= 1 {
            let actual = onsets.first().map_or(Maneuver::Straight, |o| o.maneuver);
            let predicted = session_prediction(&events, onsets).unwrap_or(Maneuver::Straight);
            let idx = |m| ev.index_of(m).ok_or_else(|| Error::Invalid(format!("{m} outside the event set")));
            confusion.add(idx(predicted)?, idx(actual)?);
        }
    }
    let (precision, recall) = precision_recall(counts);
    let (macro_precision, macro_recall) = confusion.macro_scores();
    Ok(EvalReport {
        p_th,
        sessions: sessions.items.len(),
        counts,
        precision,
        recall,
        f1: f1(precision, recall),
        time_to_maneuver: (!ttm.is_empty()).then(|| ttm.iter().sum::<f64>() / ttm.len() as f64),
        macro_precision,
        macro_recall,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<EvalReport>,
    /// Index of the highest-F1 row (lowest threshold on ties).
    pub best: usize,
}

impl Sweep {
    pub fn best(&self) -> &EvalReport {
        &self.rows[self.best]
    }
}

fn best_index(scores: impl Iterator<Item = Option<f64>>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        let v = s.unwrap_or(f64::NEG_INFINITY);
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn threshold_sweep(sessions: &Sessions, grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let rows = grid.iter().map(|&p| evaluate(sessions, p)).collect::<Result<Vec<_>>>()?;
    let best = best_index(rows.iter().map(|r| r.f1));
    Ok(Sweep { rows, best })
}

/// `{0.20, 0.25, …, 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (4..=19).map(|k| k as f64 * 0.05).collect()
}

/// Mean and standard error (sample sd / √n) of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return MeanSe { mean: None, se: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = (n > 1).then(|| {
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / (n as f64).sqrt()
        });
        MeanSe { mean: Some(mean), se, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub label: String,
    pub p_th: f64,
    pub folds: Vec<EvalReport>,
    pub precision: MeanSe,
    pub recall: MeanSe,
    pub f1: MeanSe,
    pub time_to_maneuver: MeanSe,
    pub macro_precision: MeanSe,
    pub macro_recall: MeanSe,
    /// Mean F1 across folds for each grid threshold.
    pub grid_f1: Vec<(f64, Option<f64>)>,
}

/// k-fold cross-validation. `train` sees only the training folds (and may
/// augment them); test folds are scored as-is. One threshold, the one with
/// the best mean F1 across folds, is reported for every fold.
pub fn cross_validate(
    label: &str,
    dataset: &[SequenceSample],
    k: usize,
    seed: u64,
    grid: &[f64],
    context: Context,
    train: &mut dyn FnMut(usize, &[SequenceSample]) -> Result<Box<dyn Predictor>>,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let folds = split_folds(dataset.len(), k, seed)?;
    let mut sweeps = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let train_set: Vec<SequenceSample> = (0..dataset.len())
            .filter(|i| test_idx.binary_search(i).is_err())
            .map(|i| dataset[i].clone())
            .collect();
        let test_set: Vec<SequenceSample> = test_idx.iter().map(|&i| dataset[i].clone()).collect();
        let predictor = train(f, &train_set)?;
        let sessions = Sessions::from_samples(predictor.as_ref(), &test_set, context)?;
        let sweep = threshold_sweep(&sessions, grid)?;
        log::info!(
            "{label} fold {}/{k}: best p_th {:.2} F1 {}",
            f + 1,
            sweep.best().p_th,
            fmt_opt(sweep.best().f1)
        );
        sweeps.push(sweep);
    }
    let grid_f1: Vec<(f64, Option<f64>)> = grid
        .iter()
        .enumerate()
        .map(|(g, &p)| (p, MeanSe::of(sweeps.iter().map(|s| s.rows[g].f1)).mean))
        .collect();
    let best = best_index(grid_f1.iter().map(|(_, f)| *f));
    let fold_reports: Vec<EvalReport> = sweeps.into_iter().map(|mut s| s.rows.swap_remove(best)).collect();
    let stat = |f: fn(&EvalReport) -> Option<f64>| MeanSe::of(fold_reports.iter().map(f));
    Ok(CvReport {
        label: label.to_string(),
        p_th: grid[best],
        precision: stat(|r| r.precision),
        recall: stat(|r| r.recall),
        f1: stat(|r| r.f1),
        time_to_maneuver: stat(|r| r.time_to_maneuver),
        macro_precision: stat(|r| r.macro_precision),
        macro_recall: stat(|r| r.macro_recall),
        folds: fold_reports,
        grid_f1,
    })
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn fmt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn fmt_pct_se(m: &MeanSe) -> String {
    match (m.mean, m.se) {
        (Some(v), Some(se)) => format!("{:5.1} ± {:.1}", 100.0 * v, 100.0 * se),
        (Some(v), None) => format!("{:5.1}", 100.0 * v),
        _ => "n/a".into(),
    }
}

/// Any report the CLI can write and re-render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Eval(EvalReport),
    Sweep(Sweep),
    Xval { reports: Vec<CvReport> },
}

const EVAL_HEADER: &str = "p_th,sessions,tp,fp,fpp,mp,precision,recall,f1,time_to_maneuver_s,macro_precision,macro_recall";

fn eval_csv_row(r: &EvalReport) -> String {
    let c = r.counts;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.p_th,
        r.sessions,
        c.tp,
        c.fp,
        c.fpp,
        c.mp,
        fmt_csv(r.precision),
        fmt_csv(r.recall),
        fmt_csv(r.f1),
        fmt_csv(r.time_to_maneuver),
        fmt_csv(r.macro_precision),
        fmt_csv(r.macro_recall)
    )
}

impl Report {
    pub fn to_csv(&self) -> String {
        match self {
            Report::Eval(r) => format!("{EVAL_HEADER}\n{}\n", eval_csv_row(r)),
            Report::Sweep(s) => {
                let mut out = format!("{EVAL_HEADER},best\n");
                for (i, r) in s.rows.iter().enumerate() {
                    let _ = writeln!(out, "{},{}", eval_csv_row(r), i == s.best);
                }
                out
            }
            Report::Xval { reports } => {
                let mut out = String::from("label,fold,");
                out.push_str(EVAL_HEADER);
                out.push('\n');
                for cv in reports {
                    for (f, r) in cv.folds.iter().enumerate() {
                        let _ = writeln!(out, "{},{},{}", cv.label, f + 1, eval_csv_row(r));
                    }
                }
                out
            }
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Report::Eval(r) => eval_text(r),
            Report::Sweep(s) => {
                let mut out = String::from("  p_th  precision  recall      F1\n");
                for (i, r) in s.rows.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{} {:.2}  {:>9}  {:>6}  {:>6}",
                        if i == s.best { '*' } else { ' ' },
                        r.p_th,
                        fmt_opt(r.precision),
                        fmt_opt(r.recall),
                        fmt_opt(r.f1)
                    );
                }
                out
            }
            Report::Xval { reports } => {
                let mut out = format!(
                    "{:<16} {:>5}  {:>14}  {:>14}  {:>14}  {:>12}\n",
                    "setting/method", "p_th", "Pr (%)", "Re (%)", "F1 (%)", "ttm (s)"
                );
                for cv in reports {
                    let ttm = match (cv.time_to_maneuver.mean, cv.time_to_maneuver.se) {
                        (Some(m), Some(se)) => format!("{m:.2} ± {se:.2}"),
                        (Some(m), None) => format!("{m:.2}"),
                        _ => "n/a".into(),
                    };
                    let _ = writeln!(
                        out,
                        "{:<16} {:>5.2}  {:>14}  {:>14}  {:>14}  {:>12}",
                        cv.label,
                        cv.p_th,
                        fmt_pct_se(&cv.precision),
                        fmt_pct_se(&cv.recall),
                        fmt_pct_se(&cv.f1),
                        ttm
                    );
                }
                out
            }
        }
    }
}

fn eval_text(r: &EvalReport) -> String {
    let c = r.counts;
    let mut s = String::new();
    let _ = writeln!(s, "threshold         {:.2}", r.p_th);
    let _ = writeln!(s, "sessions          {}", r.sessions);
    let _ = writeln!(s, "tp/fp/fpp/mp      {}/{}/{}/{}", c.tp, c.fp, c.fpp, c.mp);
    let _ = writeln!(s, "precision         {}", fmt_opt(r.precision));
    let _ = writeln!(s, "recall            {}", fmt_opt(r.recall));
    let _ = writeln!(s, "F1                {}", fmt_opt(r.f1));
    let _ = writeln!(s, "time-to-maneuver  {}", r.time_to_maneuver.map_or("n/a".into(), |t| format!("{t:.2} s")));
    let _ = writeln!(s, "macro precision   {}", fmt_opt(r.macro_precision));
    let _ = writeln!(s, "macro recall      {}", fmt_opt(r.macro_recall));
    s.push_str("confusion (rows predicted, columns actual, row-normalized):\n");
    let names: Vec<&str> = r.confusion.events.events().iter().map(|m| m.name()).collect();
    let _ = writeln!(s, "{:>12} {}", "", names.iter().map(|n| format!("{n:>11}")).collect::<String>());
    for (name, row) in names.iter().zip(r.confusion.row_normalized()) {
        let cells: String = row.iter().map(|v| format!("{:>11}", v.map_or("-".into(), |x| format!("{x:.2}")))).collect();
        let _ = writeln!(s, "{name:>12} {cells}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anticipation::ReplayPredictor;
    use crate::sample::Setting;

    #[test]
    fn precision_recall_examples() {
        let (p, r) = precision_recall(OutcomeCounts::new(8, 1, 1, 2));
        assert_eq!(p, Some(0.8));
        assert!((r.unwrap() - 8.0 / 11.0).abs() < 1e-15);
        assert_eq!(precision_recall(OutcomeCounts::new(5, 0, 0, 0)), (Some(1.0), Some(1.0)));
        assert_eq!(precision_recall(OutcomeCounts::default()), (None, None));
        assert_eq!(precision_recall(OutcomeCounts::new(0, 0, 0, 3)), (None, Some(0.0)));
    }

    #[test]
    fn f1_identity() {
        for (p, r) in [(0.8, 8.0 / 11.0), (0.1, 0.9), (1.0, 1.0)] {
            assert!((f1(Some(p), Some(r)).unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }
        assert_eq!(f1(Some(0.0), Some(0.0)), Some(0.0));
        assert_eq!(f1(None, Some(0.5)), None);
    }

    #[test]
    fn macro_examples() {
        let (p, _) = macro_precision_recall(&[3, 1], &[4, 2], &[3, 1]).unwrap();
        assert_eq!(p, Some(0.625));
        assert_eq!(macro_precision_recall(&[2, 5], &[2, 5], &[2, 5]).unwrap(), (Some(1.0), Some(1.0)));
        assert_eq!(macro_precision_recall(&[3], &[4], &[6]).unwrap(), (Some(0.75), Some(0.5)));
        // An undefined term is skipped.
        assert_eq!(macro_precision_recall(&[3, 0], &[4, 0], &[3, 1]).unwrap().0, Some(0.75));
        assert!(macro_precision_recall(&[1], &[1, 2], &[1]).is_err());
    }

    #[test]
    fn standard_error() {
        let m = MeanSe::of([Some(0.5); 5]);
        assert_eq!((m.mean, m.se), (Some(0.5), Some(0.0)));
        let m = MeanSe::of([Some(1.0), Some(3.0), None]);
        assert_eq!(m.n, 2);
        assert!((m.se.unwrap() - 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    fn row(k: usize, p: f64, n: usize) -> Vec<f64> {
        let mut v = vec![(1.0 - p) / (n - 1) as f64; n];
        v[k] = p;
        v
    }

    /// Sessions whose predictor commits to `predicted` with probability `p`
    /// at step 2 of 4.
    fn constructed(events: &EventSet, plan: &[(Maneuver, Maneuver)]) -> Sessions {
        let n = events.len();
        let items = plan
            .iter()
            .map(|&(pred, actual)| {
                let straight = row(events.straight(), 0.9, n);
                let mut y = vec![straight; 4];
                y[2] = row(events.index_of(pred).unwrap(), 0.9, n);
                let onsets = if actual == Maneuver::Straight {
                    vec![]
                } else {
                    vec![Onset { step: 3, maneuver: actual }]
                };
                (PredictionTrajectory { y }, onsets)
            })
            .collect();
        Sessions { events: events.clone(), items }
    }

    #[test]
    fn confusion_diagonal_is_precision() {
        use Maneuver::*;
        let ev = EventSet::for_setting(Setting::All);
        let plan = [
            (LeftLane, LeftLane),
            (LeftLane, LeftLane),
            (LeftLane, RightLane),
            (RightLane, RightLane),
            (LeftTurn, LeftTurn),
            (LeftTurn, Straight),
            (RightTurn, RightTurn),
            (Straight, LeftTurn),
            (Straight, Straight),
        ];
        let r = evaluate(&constructed(&ev, &plan), 0.5).unwrap();
        let norm = r.confusion.row_normalized();
        let expected = [2.0 / 3.0, 1.0, 0.5, 1.0];
        for (m, e) in expected.iter().enumerate() {
            assert!((norm[m][m].unwrap() - e).abs() < 1e-15);
        }
        assert_eq!(r.counts, OutcomeCounts::new(5, 1, 1, 1));
        let totals: usize = r.confusion.counts.iter().flatten().sum();
        assert_eq!(totals, plan.len());
        let (mp, _) = r.confusion.macro_scores();
        assert!((mp.unwrap() - expected.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_maneuver_definitions_agree() {
        use Maneuver::*;
        let ev = EventSet::new(vec![LeftLane, Straight]).unwrap();
        let plan = [(LeftLane, LeftLane), (LeftLane, LeftLane), (Straight, LeftLane)];
        let r = evaluate(&constructed(&ev, &plan), 0.5).unwrap();
        assert_eq!(r.precision, r.macro_precision);
        assert_eq!(r.recall, r.macro_recall);
    }

    #[test]
    fn sweep_flags_best_f1() {
        use Maneuver::*;
        let ev = EventSet::for_setting(Setting::All);
        let sessions = constructed(&ev, &[(LeftLane, LeftLane), (RightTurn, RightTurn), (LeftTurn, Straight)]);
        let grid: Vec<f64> = (2..=9).map(|k| k as f64 / 10.0).collect();
        let s = threshold_sweep(&sessions, &grid).unwrap();
        assert_eq!(s.rows.len(), 8);
        for r in &s.rows {
            assert!(s.best().f1.unwrap() >= r.f1.unwrap_or(0.0));
        }
        // Perfect below the 0.9 confidence, nothing above it.
        let perfect = constructed(&ev, &[(LeftLane, LeftLane), (RightTurn, RightTurn)]);
        let s = threshold_sweep(&perfect, &grid).unwrap();
        assert!(s.rows[..7].iter().all(|r| r.f1 == Some(1.0)));
        assert_eq!(s.rows[7].precision, None);
        assert!(threshold_sweep(&perfect, &[]).is_err());
    }

    #[test]
    fn cross_validation_keeps_test_folds_verbatim() {
        let ev = EventSet::for_setting(Setting::All);
        let data = crate::synth::generate(&crate::synth::ScenarioConfig::default(), 50).unwrap();
        let mut seen_test = Vec::new();
        let r = cross_validate("replay", &data, 5, 3, &[0.5], Context::FullPrefix, &mut |_, train| {
            assert_eq!(train.len(), 40);
            for s in train {
                assert!(data.contains(s));
            }
            seen_test.push(train.len());
            Ok(Box::new(ReplayPredictor { events: ev.clone(), outputs: vec![row(4, 0.9, 5); 20] }))
        })
        .unwrap();
        assert_eq!(r.folds.len(), 5);
        assert_eq!(r.folds.iter().map(|f| f.sessions).sum::<usize>(), 50);
        // Never commits: everything is missed.
        assert_eq!(r.recall.mean, Some(0.0));
        assert_eq!(r.precision.mean, None);
        let text = Report::Xval { reports: vec![r] }.to_text();
        assert!(text.contains("replay"));
    }

    #[test]
    fn report_serde_round_trip() {
        use Maneuver::*;
        let ev = EventSet::for_setting(Setting::Lane);
        let r = evaluate(&constructed(&ev, &[(LeftLane, LeftLane), (RightLane, Straight)]), 0.5).unwrap();
        let rep = Report::Eval(r);
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&json).unwrap(), rep);
        assert!(rep.to_csv().starts_with(EVAL_HEADER));
        assert!(rep.to_text().contains("confusion"));
    }
}
