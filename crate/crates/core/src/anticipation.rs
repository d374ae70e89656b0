//! Threshold-based streaming anticipation and the session protocol.
//!
//! A predictor turns each new `(x_t, z_t)` into a distribution over the
//! event set. The anticipator commits to the first non-straight argmax whose
//! probability strictly exceeds `p_th`. In a session, a commitment sticks
//! for the next [`STICK_STEPS`] steps or until a maneuver starts.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::aio_hmm::{posterior_from_logliks, ForwardFilter, ManeuverHmms};
use crate::error::{ensure_dim, Error, Result};
use crate::features::Standardizer;
use crate::fusion::{FusionRnnModel, FusionStream, PredictionTrajectory};
use crate::numerics::argmax;
use crate::sample::{EventSet, Maneuver, SequenceSample, STEP_SECONDS};

/// Steps a commitment sticks for: ⌈5 s / 0.8 s⌉.
pub const STICK_STEPS: usize = 7;

/// Steps in a 5 s context window.
pub const FIVE_SECOND_WINDOW: usize = 7;

/// Incremental source of per-step event probabilities.
pub trait PredictorStream {
    fn push(&mut self, x: &[f64], z: &[f64]) -> Result<Vec<f64>>;
}

pub trait Predictor {
    fn events(&self) -> &EventSet;
    /// A fresh stream positioned before the first step.
    fn open(&self) -> Result<Box<dyn PredictorStream + '_>>;
}

/// Fusion or concatenation RNN with its outside-stream scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnPredictor {
    pub model: FusionRnnModel,
    pub events: EventSet,
    pub x_norm: Standardizer,
}

struct RnnStream<'a> {
    inner: FusionStream<'a>,
    x_norm: &'a Standardizer,
}

impl PredictorStream for RnnStream<'_> {
    fn push(&mut self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("x_t", self.x_norm.mean.len(), x.len())?;
        self.inner.push(&self.x_norm.apply(x), z)
    }
}

impl Predictor for RnnPredictor {
    fn events(&self) -> &EventSet {
        &self.events
    }

    fn open(&self) -> Result<Box<dyn PredictorStream + '_>> {
        Ok(Box::new(RnnStream {
            inner: self.model.stream(),
            x_norm: &self.x_norm,
        }))
    }
}

/// One HMM per event, compared by prefix likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmPredictor {
    pub hmms: ManeuverHmms,
    pub x_norm: Standardizer,
}

struct HmmStream<'a> {
    filters: Vec<ForwardFilter<'a>>,
    prior: Option<&'a [f64]>,
    x_norm: &'a Standardizer,
}

impl PredictorStream for HmmStream<'_> {
    fn push(&mut self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("x_t", self.x_norm.mean.len(), x.len())?;
        let x = self.x_norm.apply(x);
        let lls = self
            .filters
            .iter_mut()
            .map(|f| f.push(&x, z))
            .collect::<Result<Vec<_>>>()?;
        posterior_from_logliks(&lls, self.prior)
    }
}

impl Predictor for HmmPredictor {
    fn events(&self) -> &EventSet {
        &self.hmms.events
    }

    fn open(&self) -> Result<Box<dyn PredictorStream + '_>> {
        Ok(Box::new(HmmStream {
            filters: self.hmms.models.iter().map(|m| m.filter()).collect::<Result<_>>()?,
            prior: self.hmms.prior.as_deref(),
            x_norm: &self.x_norm,
        }))
    }
}

/// Re-runs a fresh stream over only the most recent `window` steps.
struct Windowed<'a> {
    predictor: &'a dyn Predictor,
    window: usize,
    buf: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl PredictorStream for Windowed<'_> {
    fn push(&mut self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if self.buf.len() == self.window {
            self.buf.pop_front();
        }
        self.buf.push_back((x.to_vec(), z.to_vec()));
        let mut s = self.predictor.open()?;
        let mut y = Vec::new();
        for (x, z) in &self.buf {
            y = s.push(x, z)?;
        }
        Ok(y)
    }
}

/// How much history each prediction sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    #[default]
    FullPrefix,
    /// Only the last `n` steps.
    Window(usize),
}

pub fn open_stream<'a>(predictor: &'a dyn Predictor, context: Context) -> Result<Box<dyn PredictorStream + 'a>> {
    match context {
        Context::FullPrefix => predictor.open(),
        Context::Window(0) => Err(Error::Config("context window must be at least one step".into())),
        Context::Window(window) => Ok(Box::new(Windowed {
            predictor,
            window,
            buf: VecDeque::with_capacity(window),
        })),
    }
}

/// Per-step predictions for a whole sequence.
pub fn predict_trajectory(predictor: &dyn Predictor, xs: &[Vec<f64>], zs: &[Vec<f64>], context: Context) -> Result<PredictionTrajectory> {
    if xs.is_empty() {
        return Err(Error::Empty("observation streams"));
    }
    ensure_dim("stream length", xs.len(), zs.len())?;
    let mut s = open_stream(predictor, context)?;
    let y = xs.iter().zip(zs).map(|(x, z)| s.push(x, z)).collect::<Result<_>>()?;
    Ok(PredictionTrajectory { y })
}

/// Commitment rule of a single step: the argmax (lowest index on ties) if
/// it is not straight and strictly exceeds `p_th`.
pub fn commitment(y: &[f64], straight: usize, p_th: f64) -> Option<usize> {
    let k = argmax(y);
    (k != straight && y[k] > p_th).then_some(k)
}

/// First committing step (0-based) and its event.
pub fn commit_step(traj: &PredictionTrajectory, straight: usize, p_th: f64) -> Option<(usize, usize)> {
    traj.y
        .iter()
        .enumerate()
        .find_map(|(t, y)| commitment(y, straight, p_th).map(|k| (t, k)))
}

fn check_threshold(p_th: f64) -> Result<()> {
    if !(p_th > 0.0 && p_th <= 1.0) {
        return Err(Error::Config(format!("p_th must lie in (0, 1], got {p_th}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipationResult {
    /// Event index; straight when nothing was committed.
    pub maneuver: usize,
    /// 1-based commitment step.
    pub t_pred: Option<usize>,
    /// `T − t_pred` in steps.
    pub steps_before: Option<usize>,
    pub trajectory: PredictionTrajectory,
}

impl AnticipationResult {
    pub fn seconds_before(&self) -> Option<f64> {
        self.steps_before.map(|s| s as f64 * STEP_SECONDS)
    }

    pub fn from_trajectory(trajectory: PredictionTrajectory, straight: usize, p_th: f64) -> Result<Self> {
        check_threshold(p_th)?;
        if trajectory.is_empty() {
            return Err(Error::Empty("prediction trajectory"));
        }
        let len = trajectory.len();
        let (maneuver, t_pred, steps_before) = match commit_step(&trajectory, straight, p_th) {
            Some((t, k)) => (k, Some(t + 1), Some(len - (t + 1))),
            None => (straight, None, None),
        };
        Ok(AnticipationResult {
            maneuver,
            t_pred,
            steps_before,
            trajectory,
        })
    }
}

/// Walks the streams step by step and commits at the first confident
/// maneuver prediction.
pub fn anticipate(predictor: &dyn Predictor, xs: &[Vec<f64>], zs: &[Vec<f64>], p_th: f64, context: Context) -> Result<AnticipationResult> {
    check_threshold(p_th)?;
    let traj = predict_trajectory(predictor, xs, zs, context)?;
    AnticipationResult::from_trajectory(traj, predictor.events().straight(), p_th)
}

/// A maneuver whose last pre-maneuver observation is `step` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Onset {
    pub step: usize,
    pub maneuver: Maneuver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub xs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    pub onsets: Vec<Onset>,
}

impl Timeline {
    /// A labeled sample whose maneuver (if any) begins right after its last step.
    pub fn from_sample(s: &SequenceSample) -> Self {
        let onsets = if s.label == Maneuver::Straight || s.is_empty() {
            Vec::new()
        } else {
            vec![Onset {
                step: s.len() - 1,
                maneuver: s.label,
            }]
        };
        Timeline {
            xs: s.xs.clone(),
            zs: s.zs.clone(),
            onsets,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.xs.is_empty() {
            return Err(Error::Empty("timeline"));
        }
        ensure_dim("timeline streams", self.xs.len(), self.zs.len())?;
        for w in self.onsets.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Invalid(format!("onsets at steps {} and {} overlap or are unsorted", w[0].step, w[1].step)));
            }
        }
        if let Some(o) = self.onsets.last() {
            if o.step >= self.xs.len() {
                return Err(Error::Invalid(format!("onset at step {} is past the timeline end", o.step)));
            }
        }
        if self.onsets.iter().any(|o| o.maneuver == Maneuver::Straight) {
            return Err(Error::Invalid("driving straight cannot be an onset".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Tp,
    Fp,
    Fpp,
    Mp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub outcome: Outcome,
    pub predicted: Option<Maneuver>,
    pub actual: Option<Maneuver>,
    pub commit_step: Option<usize>,
    pub onset_step: Option<usize>,
    /// Seconds between commitment and onset, for tp and fp.
    pub time_to_maneuver: Option<f64>,
}

/// Predictions along a timeline; the stream restarts after every onset.
pub fn session_trajectory(predictor: &dyn Predictor, timeline: &Timeline, context: Context) -> Result<PredictionTrajectory> {
    timeline.validate()?;
    let mut y = Vec::with_capacity(timeline.xs.len());
    let mut stream = open_stream(predictor, context)?;
    let mut next = timeline.onsets.iter().peekable();
    for t in 0..timeline.xs.len() {
        y.push(stream.push(&timeline.xs[t], &timeline.zs[t])?);
        if next.peek().is_some_and(|o| o.step == t) {
            next.next();
            stream = open_stream(predictor, context)?;
        }
    }
    Ok(PredictionTrajectory { y })
}

/// Applies the stick-with-prediction protocol to a fixed trajectory.
pub fn score_session(traj: &PredictionTrajectory, onsets: &[Onset], events: &EventSet, p_th: f64) -> Result<Vec<PredictionEvent>> {
    check_threshold(p_th)?;
    let straight = events.straight();
    let mut out = Vec::new();
    let mut covered = vec![false; onsets.len()];
    let mut t = 0;
    while t < traj.len() {
        let Some(k) = commitment(&traj.y[t], straight, p_th) else {
            t += 1;
            continue;
        };
        let predicted = events.get(k);
        // Onsets that follow the commitment within the sticking window.
        let hit = onsets
            .iter()
            .enumerate()
            .find(|(_, o)| o.step >= t && o.step <= t + STICK_STEPS);
        match hit {
            Some((i, o)) => {
                covered[i] = true;
                out.push(PredictionEvent {
                    outcome: if o.maneuver == predicted { Outcome::Tp } else { Outcome::Fp },
                    predicted: Some(predicted),
                    actual: Some(o.maneuver),
                    commit_step: Some(t),
                    onset_step: Some(o.step),
                    time_to_maneuver: Some((o.step - t) as f64 * STEP_SECONDS),
                });
                t = o.step + 1;
            }
            None => {
                out.push(PredictionEvent {
                    outcome: Outcome::Fpp,
                    predicted: Some(predicted),
                    actual: None,
                    commit_step: Some(t),
                    onset_step: None,
                    time_to_maneuver: None,
                });
                t += STICK_STEPS + 1;
            }
        }
    }
    for (o, c) in onsets.iter().zip(covered) {
        if !c {
            out.push(PredictionEvent {
                outcome: Outcome::Mp,
                predicted: None,
                actual: Some(o.maneuver),
                commit_step: None,
                onset_step: Some(o.step),
                time_to_maneuver: None,
            });
        }
    }
    out.sort_by_key(|e| e.commit_step.or(e.onset_step));
    Ok(out)
}

pub fn run_session(predictor: &dyn Predictor, timeline: &Timeline, p_th: f64, context: Context) -> Result<Vec<PredictionEvent>> {
    check_threshold(p_th)?;
    let traj = session_trajectory(predictor, timeline, context)?;
    score_session(&traj, &timeline.onsets, predictor.events(), p_th)
}

/// Fixed per-step outputs; useful for protocol checks and replay.
pub struct ReplayPredictor {
    pub events: EventSet,
    pub outputs: Vec<Vec<f64>>,
}

struct Replay<'a> {
    outputs: &'a [Vec<f64>],
    t: usize,
}

impl PredictorStream for Replay<'_> {
    fn push(&mut self, _x: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
        let y = self
            .outputs
            .get(self.t)
            .cloned()
            .ok_or_else(|| Error::Invalid("replay exhausted".into()))?;
        self.t += 1;
        Ok(y)
    }
}

impl Predictor for ReplayPredictor {
    fn events(&self) -> &EventSet {
        &self.events
    }

    fn open(&self) -> Result<Box<dyn PredictorStream + '_>> {
        Ok(Box::new(Replay {
            outputs: &self.outputs,
            t: 0,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, Rng};
    use crate::sample::Setting;

    fn all() -> EventSet {
        EventSet::for_setting(Setting::All)
    }

    fn traj(rows: Vec<Vec<f64>>) -> PredictionTrajectory {
        PredictionTrajectory { y: rows }
    }

    #[test]
    fn commits_at_first_confident_step() {
        let y = traj(vec![vec![0.1, 0.6, 0.1, 0.1, 0.1]; 5]);
        let r = AnticipationResult::from_trajectory(y, 4, 0.5).unwrap();
        assert_eq!(r.maneuver, 1);
        assert_eq!(r.t_pred, Some(1));
        assert_eq!(r.steps_before, Some(4));
        assert!((r.seconds_before().unwrap() - 3.2).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let y = traj(vec![vec![0.0, 1.0, 0.0, 0.0, 0.0]; 3]);
        let r = AnticipationResult::from_trajectory(y.clone(), 4, 1.0).unwrap();
        assert_eq!((r.maneuver, r.t_pred), (4, None));
        let half = traj(vec![vec![0.5, 0.5, 0.0]]);
        assert_eq!(commit_step(&half, 2, 0.5), None);
        assert_eq!(commit_step(&half, 2, 0.49), Some((0, 0)));
        assert!(AnticipationResult::from_trajectory(y.clone(), 4, 0.0).is_err());
        assert!(AnticipationResult::from_trajectory(y, 4, 1.5).is_err());
    }

    #[test]
    fn uniform_never_commits() {
        let y = traj(vec![vec![0.2; 5]; 8]);
        for p in [0.2000001, 0.3, 0.9] {
            assert_eq!(AnticipationResult::from_trajectory(y.clone(), 4, p).unwrap().t_pred, None);
        }
    }

    #[test]
    fn straight_argmax_blocks_commitment() {
        let y = traj(vec![vec![0.3, 0.0, 0.0, 0.0, 0.7], vec![0.45, 0.0, 0.0, 0.0, 0.55], vec![0.8, 0.0, 0.0, 0.0, 0.2]]);
        let r = AnticipationResult::from_trajectory(y, 4, 0.25).unwrap();
        assert_eq!((r.maneuver, r.t_pred, r.steps_before), (0, Some(3), Some(0)));
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let y = traj(vec![vec![0.4, 0.4, 0.2]]);
        assert_eq!(commit_step(&y, 2, 0.3), Some((0, 0)));
        // Straight ties with a maneuver at a lower index: the maneuver wins.
        let y = traj(vec![vec![0.5, 0.0, 0.5]]);
        assert_eq!(commit_step(&y, 2, 0.3), Some((0, 0)));
    }

    #[test]
    fn commitment_step_monotone_in_threshold() {
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let len = rng.int_inclusive(1, 15);
            let y = traj(
                (0..len)
                    .map(|_| softmax(&(0..5).map(|_| rng.uniform(-3.0, 3.0)).collect::<Vec<_>>()).unwrap())
                    .collect(),
            );
            let mut last = 0;
            for k in 1..=20 {
                let p = k as f64 / 20.0;
                let step = commit_step(&y, 4, p).map_or(len, |(t, _)| t);
                assert!(step >= last);
                last = step;
            }
        }
    }

    fn replay(rows: Vec<Vec<f64>>) -> ReplayPredictor {
        ReplayPredictor { events: all(), outputs: rows }
    }

    fn straight_row() -> Vec<f64> {
        vec![0.05, 0.05, 0.05, 0.05, 0.8]
    }

    fn left_lane_row() -> Vec<f64> {
        vec![0.9, 0.025, 0.025, 0.025, 0.025]
    }

    fn timeline(len: usize, onsets: Vec<Onset>) -> Timeline {
        Timeline {
            xs: vec![vec![0.0]; len],
            zs: vec![vec![0.0]; len],
            onsets,
        }
    }

    #[test]
    fn session_true_prediction_four_steps_early() {
        let mut rows = vec![straight_row(); 6];
        for r in rows.iter_mut().skip(1) {
            *r = left_lane_row();
        }
        let p = replay(rows);
        let tl = timeline(6, vec![Onset { step: 5, maneuver: Maneuver::LeftLane }]);
        let ev = run_session(&p, &tl, 0.7, Context::FullPrefix).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].outcome, Outcome::Tp);
        assert!((ev[0].time_to_maneuver.unwrap() - 3.2).abs() < 1e-12);
    }

    #[test]
    fn session_wrong_maneuver_is_fp() {
        let mut rows = vec![straight_row(); 6];
        rows[3] = left_lane_row();
        let ev = score_session(&traj(rows), &[Onset { step: 5, maneuver: Maneuver::RightTurn }], &all(), 0.7).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].outcome, Outcome::Fp);
        assert_eq!(ev[0].actual, Some(Maneuver::RightTurn));
    }

    #[test]
    fn session_fpp_and_mp() {
        let mut rows = vec![straight_row(); 30];
        rows[2] = left_lane_row();
        let ev = score_session(&traj(rows.clone()), &[], &all(), 0.7).unwrap();
        assert_eq!(ev.iter().map(|e| e.outcome).collect::<Vec<_>>(), vec![Outcome::Fpp]);

        let ev = score_session(&traj(vec![straight_row(); 30]), &[Onset { step: 20, maneuver: Maneuver::LeftTurn }], &all(), 0.7).unwrap();
        assert_eq!(ev.iter().map(|e| e.outcome).collect::<Vec<_>>(), vec![Outcome::Mp]);

        // Committed too early: the window expires before the onset.
        let ev = score_session(&traj(rows), &[Onset { step: 20, maneuver: Maneuver::LeftLane }], &all(), 0.7).unwrap();
        assert_eq!(ev.iter().map(|e| e.outcome).collect::<Vec<_>>(), vec![Outcome::Fpp, Outcome::Mp]);
    }

    #[test]
    fn session_sticks_for_seven_steps() {
        // Confident every step: commitments at 0, 8, 16 with no onsets.
        let ev = score_session(&traj(vec![left_lane_row(); 20]), &[], &all(), 0.7).unwrap();
        let steps: Vec<usize> = ev.iter().map(|e| e.commit_step.unwrap()).collect();
        assert_eq!(steps, vec![0, 8, 16]);
        // The onset ends the sticking window early and predictions resume.
        let onsets = [Onset { step: 3, maneuver: Maneuver::LeftLane }, Onset { step: 6, maneuver: Maneuver::LeftLane }];
        let ev = score_session(&traj(vec![left_lane_row(); 7]), &onsets, &all(), 0.7).unwrap();
        let got: Vec<(Outcome, Option<usize>)> = ev.iter().map(|e| (e.outcome, e.commit_step)).collect();
        assert_eq!(got, vec![(Outcome::Tp, Some(0)), (Outcome::Tp, Some(4))]);
        // An onset exactly seven steps after commitment is still covered.
        let ev = score_session(&traj(vec![left_lane_row(); 8]), &[Onset { step: 7, maneuver: Maneuver::LeftLane }], &all(), 0.7).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].time_to_maneuver, Some(7.0 * STEP_SECONDS));
    }

    #[test]
    fn session_rejects_bad_onsets() {
        let p = replay(vec![straight_row(); 5]);
        let tl = timeline(5, vec![Onset { step: 3, maneuver: Maneuver::LeftLane }, Onset { step: 3, maneuver: Maneuver::LeftTurn }]);
        assert!(run_session(&p, &tl, 0.5, Context::FullPrefix).is_err());
        let tl = timeline(5, vec![Onset { step: 9, maneuver: Maneuver::LeftLane }]);
        assert!(run_session(&p, &tl, 0.5, Context::FullPrefix).is_err());
    }

    #[test]
    fn stream_restarts_after_onset() {
        let p = replay(vec![straight_row(), left_lane_row(), straight_row()]);
        let tl = timeline(4, vec![Onset { step: 1, maneuver: Maneuver::LeftLane }]);
        let t = session_trajectory(&p, &tl, Context::FullPrefix).unwrap();
        assert_eq!(t.y[2], straight_row());
        assert_eq!(t.y[3], left_lane_row());
    }

    #[test]
    fn rnn_stream_matches_batch_prefixes() {
        use crate::fusion::{Arch, ModelDims};
        let mut rng = Rng::new(3);
        let dims = ModelDims { x_dim: 2, z_dim: 3, hidden: 4, fusion_width: 4, events: 5 };
        let model = FusionRnnModel::init(Arch::Fusion, dims, &mut rng).unwrap();
        let x_norm = Standardizer { mean: vec![1.0, -1.0], scale: vec![2.0, 0.5] };
        let p = RnnPredictor { model: model.clone(), events: all(), x_norm: x_norm.clone() };
        let xs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let zs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
        let streamed = predict_trajectory(&p, &xs, &zs, Context::FullPrefix).unwrap();
        let (batch, _) = model.forward(&x_norm.apply_seq(&xs), &zs).unwrap();
        assert_eq!(streamed, batch);
        // A window as long as the sequence changes nothing.
        assert_eq!(predict_trajectory(&p, &xs, &zs, Context::Window(6)).unwrap(), batch);
        let w2 = predict_trajectory(&p, &xs, &zs, Context::Window(2)).unwrap();
        let (tail, _) = model.forward(&x_norm.apply_seq(&xs[4..]), &zs[4..]).unwrap();
        assert_eq!(w2.y[5], tail.y[1]);
    }
}
