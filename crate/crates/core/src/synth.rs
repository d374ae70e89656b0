//! Seeded synthetic maneuver scenarios.
//!
//! Each sample is a short run of aggregated 0.8 s steps ending at the
//! maneuver onset. Drivers glance toward the maneuver side a few steps before
//! it (turns end with a glance the other way for cross traffic); the road
//! context constrains which maneuvers are possible. Features are written at
//! the aggregated step level and normalized through
//! [`features::normalize_inside`](crate::features::normalize_inside).
//!
//! Every sample consumes the same number of random draws whatever its label,
//! so with `cue_strength = 0` samples of different labels drawn from the same
//! generator state are identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize_inside, outside_features, FeatureMode};
use crate::numerics::Rng;
use crate::sample::{EventSet, Maneuver, SequenceSample, Setting};

/// Steps of speed history before the first emitted step.
const SPEED_WARMUP: usize = 6;
/// Steps in the 5 s speed window (`⌈5 / 0.8⌉`).
const SPEED_WINDOW: usize = 7;

/// Per-step φ-sum of a driver looking straight ahead.
const NEUTRAL: [f64; 9] = [1.0, 6.0, 6.0, 1.0, 3.5, 3.5, 3.5, 3.5, 2.0];
const LEFT_GLANCE: [f64; 9] = [6.0, 2.0, 0.0, 0.0, 0.0, 4.0, 4.0, 0.0, 3.0];
const RIGHT_GLANCE: [f64; 9] = [0.0, 0.0, 2.0, 6.0, 4.0, 0.0, 0.0, 4.0, 3.0];

/// Event proportions of the reference corpus: 274 lane changes, 131 turns,
/// 295 straight, split evenly between left and right.
const REFERENCE_COUNTS: [(Maneuver, f64); 5] = [
    (Maneuver::LeftLane, 137.0),
    (Maneuver::RightLane, 137.0),
    (Maneuver::LeftTurn, 65.5),
    (Maneuver::RightTurn, 65.5),
    (Maneuver::Straight, 295.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub setting: Setting,
    pub min_len: usize,
    pub max_len: usize,
    /// Steps before the end at which the inside cue starts.
    pub lead_min: usize,
    pub lead_max: usize,
    pub cue_strength: f64,
    pub noise_sigma: f64,
    /// Per-step probability of a distraction glance in a random direction.
    pub inside_nuisance: f64,
    /// Per-step probability of flipping each free binary road flag.
    pub outside_nuisance: f64,
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            setting: Setting::All,
            min_len: 6,
            max_len: 12,
            lead_min: 2,
            lead_max: 5,
            cue_strength: 1.0,
            noise_sigma: 0.5,
            inside_nuisance: 0.0,
            outside_nuisance: 0.0,
            feature_mode: FeatureMode::Histogram,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Defaults with per-modality nuisance enabled.
    pub fn with_nuisance(seed: u64) -> Self {
        ScenarioConfig {
            inside_nuisance: 0.08,
            outside_nuisance: 0.05,
            seed,
            ..ScenarioConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.lead_min < 1 || self.lead_min > self.lead_max {
            return bad("need 1 <= lead_min <= lead_max");
        }
        if self.lead_max >= self.min_len {
            return bad("lead times must be shorter than the shortest sequence");
        }
        if !(self.noise_sigma >= 0.0) || !(self.cue_strength >= 0.0) {
            return bad("noise_sigma and cue_strength must be non-negative");
        }
        for p in [self.inside_nuisance, self.outside_nuisance] {
            if !(0.0..=1.0).contains(&p) {
                return bad("nuisance levels are probabilities");
            }
        }
        Ok(())
    }

    pub fn events(&self) -> EventSet {
        EventSet::for_setting(self.setting)
    }
}

/// Label counts for `n` samples in reference proportions (largest remainder).
pub fn class_plan(events: &EventSet, n: usize) -> Vec<Maneuver> {
    let weights: Vec<(Maneuver, f64)> = REFERENCE_COUNTS
        .iter()
        .copied()
        .filter(|(m, _)| events.contains(*m))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let exact: Vec<f64> = weights.iter().map(|(_, w)| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    weights
        .iter()
        .zip(counts)
        .flat_map(|((m, _), c)| std::iter::repeat_n(*m, c))
        .collect()
}

pub fn generate(cfg: &ScenarioConfig, n: usize) -> Result<Vec<SequenceSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut labels = class_plan(&cfg.events(), n);
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_one(cfg, label, format!("synth-{:06}", i), &mut rng))
        .collect()
}

/// Random draws for one sample, taken in a fixed order regardless of label.
struct Draws {
    len: usize,
    lead: usize,
    lane_u: [f64; 2],
    approach: usize,
    straight_artifact_u: f64,
    run_start_u: f64,
    run_len: usize,
    highway_u: f64,
    base_speed_u: f64,
    speed_noise: Vec<f64>,
    inside_noise: Vec<[f64; 9]>,
    glance_u: Vec<[f64; 2]>,
    flip_u: Vec<[f64; 3]>,
}

impl Draws {
    fn take(cfg: &ScenarioConfig, rng: &mut Rng) -> Self {
        let len = rng.int_inclusive(cfg.min_len, cfg.max_len);
        let lead = rng.int_inclusive(cfg.lead_min, cfg.lead_max);
        let lane_u = [rng.unit(), rng.unit()];
        let approach = rng.int_inclusive(0, 2);
        let straight_artifact_u = rng.unit();
        let run_start_u = rng.unit();
        let run_len = rng.int_inclusive(2, 4);
        let highway_u = rng.unit();
        let base_speed_u = rng.unit();
        let speed_noise = (0..SPEED_WARMUP + len).map(|_| rng.normal()).collect();
        let mut inside_noise = Vec::with_capacity(len);
        let mut glance_u = Vec::with_capacity(len);
        let mut flip_u = Vec::with_capacity(len);
        for _ in 0..len {
            let mut v = [0.0; 9];
            v.iter_mut().for_each(|x| *x = rng.normal());
            inside_noise.push(v);
            glance_u.push([rng.unit(), rng.unit()]);
            flip_u.push([rng.unit(), rng.unit(), rng.unit()]);
        }
        Draws {
            len,
            lead,
            lane_u,
            approach,
            straight_artifact_u,
            run_start_u,
            run_len,
            highway_u,
            base_speed_u,
            speed_noise,
            inside_noise,
            glance_u,
            flip_u,
        }
    }
}

fn generate_one(cfg: &ScenarioConfig, label: Maneuver, id: String, rng: &mut Rng) -> Result<SequenceSample> {
    let d = Draws::take(cfg, rng);
    let signal = cfg.cue_strength > 0.0;
    // Without signal every sample follows the straight-driving context with
    // both lanes present, so labels carry no information.
    let context = if signal { label } else { Maneuver::Straight };
    let len = d.len;
    let onset = len - d.lead;

    // Lane availability.
    let (mut lane_left, mut lane_right) = (d.lane_u[0] < 0.6, d.lane_u[1] < 0.6);
    match context {
        Maneuver::LeftLane => lane_left = true,
        Maneuver::RightLane => lane_right = true,
        _ => {}
    }
    if !signal {
        lane_left = true;
        lane_right = true;
    }

    // Road artifact flag per step.
    let artifact: Vec<bool> = match context {
        Maneuver::LeftTurn | Maneuver::RightTurn => {
            let from = onset.saturating_sub(d.approach);
            (0..len).map(|t| t >= from).collect()
        }
        Maneuver::Straight if d.straight_artifact_u < 0.3 => {
            let start = (d.run_start_u * len as f64) as usize;
            (0..len).map(|t| t >= start && t < start + d.run_len).collect()
        }
        _ => vec![false; len],
    };

    // Latent speed, km/h.
    let (base, decel) = match context {
        Maneuver::LeftLane | Maneuver::RightLane => (70.0 + 40.0 * d.base_speed_u, 0.0),
        Maneuver::LeftTurn | Maneuver::RightTurn => (25.0 + 25.0 * d.base_speed_u, 3.0),
        _ if d.highway_u < 0.5 => (70.0 + 40.0 * d.base_speed_u, 0.0),
        _ => (25.0 + 35.0 * d.base_speed_u, 0.0),
    };
    let mut speed = Vec::with_capacity(SPEED_WARMUP + len);
    let mut s = base;
    for (k, eps) in d.speed_noise.iter().enumerate() {
        let t = k as isize - SPEED_WARMUP as isize;
        if t >= onset as isize - d.approach as isize {
            s -= decel;
        }
        s = (s + 2.0 * eps).max(5.0);
        speed.push(s);
    }

    let mut xs = Vec::with_capacity(len);
    let mut zs = Vec::with_capacity(len);
    for t in 0..len {
        let flips = d.flip_u[t].map(|u| u < cfg.outside_nuisance);
        let left = if context == Maneuver::LeftLane { true } else { lane_left ^ flips[0] };
        let right = if context == Maneuver::RightLane { true } else { lane_right ^ flips[1] };
        let near = artifact[t] ^ flips[2];
        let k = SPEED_WARMUP + t;
        let window = &speed[k + 1 - SPEED_WINDOW..=k];
        xs.push(outside_features(left, right, near, window)?.to_vec());

        let mut phi = NEUTRAL;
        if signal && label != Maneuver::Straight && t >= onset {
            let progress = (t - onset + 1) as f64 / d.lead as f64;
            let amp = cfg.cue_strength * (0.6 + 0.4 * progress);
            let check_steps = if label.is_turn() { d.lead / 3 } else { 0 };
            let toward = t < len - check_steps;
            let look_left = label.is_left() == toward;
            add_glance(&mut phi, look_left, amp);
        }
        if signal && d.glance_u[t][0] < cfg.inside_nuisance {
            add_glance(&mut phi, d.glance_u[t][1] < 0.5, 0.8 * cfg.cue_strength);
        }
        for (v, e) in phi.iter_mut().zip(&d.inside_noise[t]) {
            *v = (*v + cfg.noise_sigma * e).max(0.0);
        }
        let mut z = phi.to_vec();
        if cfg.feature_mode == FeatureMode::HeadPose {
            // Summed yaw over the window follows the glance direction.
            let yaw = 2.0 * (z[0] - z[3]);
            z.extend([yaw, 0.0, 0.0]);
        }
        zs.push(normalize_inside(z));
    }

    let cue_onset = (label != Maneuver::Straight).then_some(onset);
    Ok(SequenceSample {
        id,
        xs,
        zs,
        label,
        meta: Some(serde_json::json!({ "cue_onset": cue_onset })),
    })
}

fn add_glance(phi: &mut [f64; 9], left: bool, amp: f64) {
    let g = if left { &LEFT_GLANCE } else { &RIGHT_GLANCE };
    for (v, d) in phi.iter_mut().zip(g) {
        *v += amp * d;
    }
}

/// Uniform random partition of `0..n` into `k` folds of near-equal size.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Invalid("need at least 2 folds".into()));
    }
    if k > n {
        return Err(Error::Invalid(format!("{k} folds requested for {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (j, i) in idx.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::HISTOGRAM_DIM;

    /// Majority vote of glance direction over the cue steps, then turn versus
    /// lane change from the final road-artifact flag.
    fn oracle(s: &SequenceSample) -> Maneuver {
        let (mut left, mut right) = (0, 0);
        for z in &s.zs {
            let d = z[0] - z[3];
            if d > 1e-9 {
                left += 1;
            } else if d < -1e-9 {
                right += 1;
            }
        }
        if left == 0 && right == 0 {
            return Maneuver::Straight;
        }
        let turn = s.xs.last().unwrap()[2] == 1.0;
        match (left > right, turn) {
            (true, false) => Maneuver::LeftLane,
            (false, false) => Maneuver::RightLane,
            (true, true) => Maneuver::LeftTurn,
            (false, true) => Maneuver::RightTurn,
        }
    }

    #[test]
    fn noiseless_data_is_separable() {
        let cfg = ScenarioConfig {
            noise_sigma: 0.0,
            cue_strength: 5.0,
            seed: 17,
            ..Default::default()
        };
        let data = generate(&cfg, 400).unwrap();
        for s in &data {
            assert_eq!(oracle(s), s.label, "{}", s.id);
        }
    }

    #[test]
    fn constraints_and_shapes() {
        let cfg = ScenarioConfig::with_nuisance(3);
        let data = generate(&cfg, 300).unwrap();
        for s in &data {
            assert_eq!(s.xs.len(), s.zs.len());
            assert!((cfg.min_len..=cfg.max_len).contains(&s.len()));
            for (x, z) in s.xs.iter().zip(&s.zs) {
                assert_eq!(x.len(), 6);
                assert_eq!(z.len(), HISTOGRAM_DIM);
                assert!((z.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
                assert!(x[5] <= x[3] && x[3] <= x[4]);
                match s.label {
                    Maneuver::LeftLane => assert_eq!(x[0], 1.0),
                    Maneuver::RightLane => assert_eq!(x[1], 1.0),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = ScenarioConfig { seed: 9, ..Default::default() };
        assert_eq!(generate(&cfg, 50).unwrap(), generate(&cfg, 50).unwrap());
        let other = ScenarioConfig { seed: 10, ..Default::default() };
        assert_ne!(generate(&cfg, 50).unwrap(), generate(&other, 50).unwrap());
    }

    #[test]
    fn no_signal_means_label_independent_features() {
        let cfg = ScenarioConfig {
            cue_strength: 0.0,
            inside_nuisance: 0.2,
            outside_nuisance: 0.1,
            ..Default::default()
        };
        let samples: Vec<SequenceSample> = Maneuver::ALL
            .iter()
            .map(|&m| generate_one(&cfg, m, "s".into(), &mut Rng::new(4)).unwrap())
            .collect();
        for s in &samples[1..] {
            assert_eq!(s.xs, samples[0].xs);
            assert_eq!(s.zs, samples[0].zs);
        }
    }

    #[test]
    fn class_balance() {
        let plan = class_plan(&EventSet::for_setting(Setting::All), 700);
        let count = |m| plan.iter().filter(|&&p| p == m).count();
        assert_eq!(plan.len(), 700);
        assert_eq!(count(Maneuver::LeftLane) + count(Maneuver::RightLane), 274);
        assert_eq!(count(Maneuver::LeftTurn) + count(Maneuver::RightTurn), 131);
        assert_eq!(count(Maneuver::Straight), 295);
        assert_eq!(class_plan(&EventSet::for_setting(Setting::Lane), 10).len(), 10);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ScenarioConfig { lead_max: 6, ..Default::default() };
        assert!(generate(&cfg, 5).is_err());
        assert!(generate(&ScenarioConfig::default(), 0).is_err());
        let cfg = ScenarioConfig { noise_sigma: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_pose_mode_dimension() {
        let cfg = ScenarioConfig { feature_mode: FeatureMode::HeadPose, ..Default::default() };
        let data = generate(&cfg, 10).unwrap();
        assert!(data.iter().all(|s| s.zs.iter().all(|z| z.len() == 12)));
    }

    #[test]
    fn folds() {
        let f = split_folds(10, 5, 1).unwrap();
        assert!(f.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(f, split_folds(10, 5, 1).unwrap());
        assert!(split_folds(3, 5, 1).is_err());
        assert!(split_folds(3, 1, 1).is_err());
    }
}
