//! Sequence-to-sequence anticipation training.
//!
//! Every step of a training sequence is labeled with the maneuver that ends
//! it. The exponential loss weights step `t` of `T` by `e^{−λ(T−t)}`, so late
//! mistakes cost more than early ones; the uniform loss weights all steps 1.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::fusion::{Arch, FusionRnnModel, ModelDims, PredictionTrajectory};
use crate::numerics::{finite_diff_grad, Parameters, Rng};
use crate::sample::SequenceSample;

pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Uniform,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    /// λ in `e^{−λ(T−t)}`; 1.0 weights by raw step count.
    pub time_scale: f64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation_factor: f64,
    pub prob_floor: f64,
    /// Global-norm gradient clipping; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: LossMode::Exponential,
            time_scale: 1.0,
            learning_rate: 1e-4,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            epochs: 10,
            seed: 0,
            augmentation_factor: 1.0,
            prob_floor: DEFAULT_PROB_FLOOR,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad(format!("rmsprop_decay must be in (0,1), got {}", self.rmsprop_decay));
        }
        if !(self.time_scale > 0.0) {
            return bad(format!("time_scale must be > 0, got {}", self.time_scale));
        }
        if !(self.augmentation_factor >= 1.0) {
            return bad(format!("augmentation_factor must be >= 1, got {}", self.augmentation_factor));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) || !(self.rmsprop_epsilon > 0.0) {
            return bad("prob_floor and rmsprop_epsilon must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

/// Weight of step `t` (1-based) in a sequence of length `len`.
pub fn step_weight(mode: LossMode, time_scale: f64, t: usize, len: usize) -> f64 {
    match mode {
        LossMode::Uniform => 1.0,
        LossMode::Exponential => (-time_scale * (len - t) as f64).exp(),
    }
}

/// `Σ_t −w_t log y_t^k` with the default probability floor.
pub fn anticipation_loss(y: &PredictionTrajectory, k: usize, mode: LossMode, time_scale: f64) -> Result<f64> {
    loss_terms(y, k, mode, time_scale, DEFAULT_PROB_FLOOR).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the pre-softmax logits.
///
/// For a softmax output, `∂(−log y^k)/∂logits = y − e_k`; a step whose
/// probability sits below the floor contributes a constant and no gradient.
pub fn loss_terms(
    y: &PredictionTrajectory,
    k: usize,
    mode: LossMode,
    time_scale: f64,
    floor: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if y.is_empty() {
        return Err(Error::Empty("prediction trajectory"));
    }
    let events = y.y[0].len();
    if k >= events {
        return Err(Error::Invalid(format!("target {k} out of range for {events} events")));
    }
    let len = y.len();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(len);
    for (i, yt) in y.y.iter().enumerate() {
        ensure_dim("trajectory step", events, yt.len())?;
        if yt.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prediction at step {}", i + 1)));
        }
        let w = step_weight(mode, time_scale, i + 1, len);
        let p = yt[k];
        loss -= w * p.max(floor).ln();
        let g = if p >= floor {
            yt.iter()
                .enumerate()
                .map(|(j, q)| w * (q - if j == k { 1.0 } else { 0.0 }))
                .collect()
        } else {
            vec![0.0; events]
        };
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Per-coordinate RMSprop state.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub acc: Vec<f64>,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmsProp {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        RmsProp {
            acc: vec![0.0; num_params],
            learning_rate: cfg.learning_rate,
            decay: cfg.rmsprop_decay,
            epsilon: cfg.rmsprop_epsilon,
        }
    }

    /// `acc ← ρ·acc + (1−ρ)·g²;  p ← p − lr·g / (√acc + ε)`.
    ///
    /// A non-finite gradient rejects the whole step and leaves both the
    /// parameters and the accumulator untouched.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        ensure_dim("rmsprop accumulator", self.acc.len(), g.len())?;
        ensure_dim("rmsprop params", self.acc.len(), params.num_params())?;
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            log::warn!("rejecting RMSprop step: gradient coordinate {i} is {}", g[i]);
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        let mut offset = 0;
        for block in params.blocks_mut() {
            for p in block.iter_mut() {
                let gi = g[offset];
                let a = &mut self.acc[offset];
                *a = self.decay * *a + (1.0 - self.decay) * gi * gi;
                *p -= self.learning_rate * gi / (a.sqrt() + self.epsilon);
                offset += 1;
            }
        }
        Ok(())
    }
}

/// Adds random contiguous sub-sequences (length ≥ 2, same label) until the
/// dataset holds `⌈factor·n⌉` samples. Originals come first, unchanged.
pub fn augment(dataset: &[SequenceSample], factor: f64, seed: u64) -> Result<Vec<SequenceSample>> {
    if !(factor >= 1.0) {
        return Err(Error::Invalid(format!("augmentation factor must be >= 1, got {factor}")));
    }
    if let Some(s) = dataset.iter().find(|s| s.len() < 2) {
        return Err(Error::Invalid(format!("sample {} is shorter than 2 steps", s.id)));
    }
    // Tolerate representation error in factors such as 2250/700.
    let target = ((factor * dataset.len() as f64) - 1e-9).ceil() as usize;
    let mut out = dataset.to_vec();
    let mut rng = Rng::new(seed);
    let mut serial = 0usize;
    while out.len() < target {
        let src = &dataset[rng.index(dataset.len())];
        // Uniform over pairs i < j.
        let a = rng.index(src.len());
        let mut b = rng.index(src.len() - 1);
        if b >= a {
            b += 1;
        }
        let (i, j) = (a.min(b), a.max(b));
        out.push(src.slice(i, j, format!("{}+aug{serial}", src.id)));
        serial += 1;
    }
    Ok(out)
}

/// One training sequence with its target index, streams already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub xs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub model: FusionRnnModel,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// `epoch,mean_loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", e + 1, l));
        }
        s
    }
}

/// Loss of one example and the gradient of that loss for every parameter.
pub fn example_gradient(model: &FusionRnnModel, ex: &Example, cfg: &TrainConfig) -> Result<(f64, FusionRnnModel)> {
    let (traj, tape) = model.forward(&ex.xs, &ex.zs)?;
    let (loss, dlogits) = loss_terms(&traj, ex.target, cfg.loss_mode, cfg.time_scale, cfg.prob_floor)?;
    let grads = model.backward(&tape, &dlogits)?;
    Ok((loss, grads))
}

fn clip(grads: &mut FusionRnnModel, max_norm: f64) {
    let norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for b in grads.blocks_mut() {
            b.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Per-sample RMSprop over `epochs` shuffled passes.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`] carrying the model as it stood at the start of the
/// failing epoch.
pub fn train(examples: &[Example], mut model: FusionRnnModel, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    model.validate()?;
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut opt = RmsProp::new(model.num_params(), cfg);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let last_good = model.clone();
        let diverged = |model| Error::Diverged {
            epoch,
            last_good: Box::new(model),
        };
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let (loss, mut grads) = match example_gradient(&model, &examples[i], cfg) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => {
                    log::warn!("epoch {epoch}: non-finite {what}");
                    return Err(diverged(last_good));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(last_good));
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            if opt.step(&mut model, &grads).is_err() {
                return Err(diverged(last_good));
            }
            total += loss;
        }
        let mean = total / examples.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        model,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Architecture and layer widths of a model to be trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub hidden: usize,
    pub fusion_width: usize,
}

impl ModelSpec {
    pub fn dims(&self, x_dim: usize, z_dim: usize, events: usize) -> ModelDims {
        ModelDims {
            x_dim,
            z_dim,
            hidden: self.hidden,
            fusion_width: self.fusion_width,
            events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for relative gradient error. Central differences at
/// eps 1e-5 resolve a derivative only to about 1e-10 absolute, so smaller
/// coordinates are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the backpropagated loss gradient against central differences
/// over the flattened parameter vector, reporting the worst coordinate of
/// each block.
pub fn gradient_check(
    model: &FusionRnnModel,
    ex: &Example,
    cfg: &TrainConfig,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = example_gradient(model, ex, cfg)?;
    let analytic = grads.flatten();
    let numeric = finite_diff_grad(
        |flat| {
            let mut probe = model.clone();
            probe.set_flat(flat).expect("same layout");
            match probe.forward(&ex.xs, &ex.zs) {
                Ok((traj, _)) => loss_terms(&traj, ex.target, cfg.loss_mode, cfg.time_scale, cfg.prob_floor)
                    .map_or(f64::NAN, |(l, _)| l),
                Err(_) => f64::NAN,
            }
        },
        &model.flatten(),
        eps,
    )?;
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (name, block) in model.blocks() {
        let n = block.len();
        let max_rel_err = analytic[offset..offset + n]
            .iter()
            .zip(&numeric[offset..offset + n])
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        blocks.push(BlockError { name, max_rel_err });
        offset += n;
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        blocks,
        max_rel_err,
        tolerance: tol,
        passed: max_rel_err <= tol,
    })
}

/// Random model and sequence for a self-contained gradient check.
pub fn gradcheck_fixture(arch: Arch, hidden: usize, len: usize, events: usize, seed: u64) -> Result<(FusionRnnModel, Example)> {
    let mut rng = Rng::new(seed);
    let dims = ModelDims {
        x_dim: 6,
        z_dim: 9,
        hidden,
        fusion_width: hidden,
        events,
    };
    let mut model = FusionRnnModel::init(arch, dims, &mut rng)?;
    // Non-zero biases so no block sits at a symmetric point.
    for b in model.blocks_mut() {
        for v in b.iter_mut() {
            *v += rng.uniform(-0.1, 0.1);
        }
    }
    let mut draw = |d: usize| -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
    };
    let xs = draw(6);
    let zs = draw(9);
    let target = rng.index(events);
    Ok((model, Example { xs, zs, target }))
}
