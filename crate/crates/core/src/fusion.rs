//! Two-stream sensory-fusion RNN and the single-stream concatenation variant.
//!
//! Fusion mode runs one LSTM per stream, concatenates the hidden states and
//! passes them through a `tanh` fusion layer before the softmax head:
//!
//! ```text
//! e_t = tanh(W_f [h_t^x; h_t^z] + b_f)
//! y_t = softmax(W_y e_t + b_y)
//! ```
//!
//! Concat mode (S-RNN) feeds `[x_t; z_t]` to a single LSTM and reads the head
//! directly off its hidden state.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::lstm::{lstm_backward, lstm_forward, lstm_step, LstmParams, LstmState, LstmTape};
use crate::numerics::{softmax_unchecked, Mat, Parameters, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Fusion,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub x_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    /// Width of the fusion layer; ignored in concat mode.
    pub fusion_width: usize,
    pub events: usize,
}

impl ModelDims {
    /// 64-unit streams and fusion layer over the 6-d outside / 9-d inside features.
    pub fn standard(events: usize) -> Self {
        ModelDims {
            x_dim: 6,
            z_dim: 9,
            hidden: 64,
            fusion_width: 64,
            events,
        }
    }

    fn validate(&self, arch: Arch) -> Result<()> {
        let mut sizes = vec![self.x_dim, self.z_dim, self.hidden, self.events];
        if arch == Arch::Fusion {
            sizes.push(self.fusion_width);
        }
        if sizes.contains(&0) {
            return Err(Error::Config(format!("zero-sized model dimension: {self:?}")));
        }
        Ok(())
    }
}

/// Fully connected layer `W v + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, input: usize) -> Self {
        Dense {
            w: Mat::zeros(out, input),
            b: vec![0.0; out],
        }
    }

    fn init(out: usize, input: usize, rng: &mut Rng) -> Self {
        Dense {
            w: Mat::uniform(out, input, 1.0 / (input as f64).sqrt(), rng),
            b: vec![0.0; out],
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        self.w.matvec_acc(v, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRnnModel {
    pub arch: Arch,
    pub dims: ModelDims,
    /// Outside stream in fusion mode; the single `[x; z]` stream in concat mode.
    pub lstm_x: LstmParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lstm_z: Option<LstmParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Dense>,
    pub output: Dense,
}

impl FusionRnnModel {
    pub fn zeros(arch: Arch, dims: ModelDims) -> Result<Self> {
        dims.validate(arch)?;
        Ok(match arch {
            Arch::Fusion => FusionRnnModel {
                arch,
                dims,
                lstm_x: LstmParams::zeros(dims.x_dim, dims.hidden),
                lstm_z: Some(LstmParams::zeros(dims.z_dim, dims.hidden)),
                fusion: Some(Dense::zeros(dims.fusion_width, 2 * dims.hidden)),
                output: Dense::zeros(dims.events, dims.fusion_width),
            },
            Arch::Concat => FusionRnnModel {
                arch,
                dims,
                lstm_x: LstmParams::zeros(dims.x_dim + dims.z_dim, dims.hidden),
                lstm_z: None,
                fusion: None,
                output: Dense::zeros(dims.events, dims.hidden),
            },
        })
    }

    /// Seeded uniform initialization (`±1/√fan_in`, zero biases).
    pub fn init(arch: Arch, dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate(arch)?;
        Ok(match arch {
            Arch::Fusion => FusionRnnModel {
                arch,
                dims,
                lstm_x: LstmParams::init(dims.x_dim, dims.hidden, rng),
                lstm_z: Some(LstmParams::init(dims.z_dim, dims.hidden, rng)),
                fusion: Some(Dense::init(dims.fusion_width, 2 * dims.hidden, rng)),
                output: Dense::init(dims.events, dims.fusion_width, rng),
            },
            Arch::Concat => FusionRnnModel {
                arch,
                dims,
                lstm_x: LstmParams::init(dims.x_dim + dims.z_dim, dims.hidden, rng),
                lstm_z: None,
                fusion: None,
                output: Dense::init(dims.events, dims.hidden, rng),
            },
        })
    }

    /// Zero-valued model of the same shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Structural consistency between `dims`, `arch` and the parameter blocks.
    pub fn validate(&self) -> Result<()> {
        let expected = FusionRnnModel::zeros(self.arch, self.dims)?;
        let have = self.blocks();
        let want = expected.blocks();
        if have.len() != want.len() {
            return Err(Error::Config("parameter block layout does not match arch".into()));
        }
        for ((name, a), (_, b)) in have.iter().zip(&want) {
            if a.len() != b.len() {
                return Err(Error::Config(format!(
                    "block {name}: expected {} values, got {}",
                    b.len(),
                    a.len()
                )));
            }
        }
        self.lstm_x.validate()?;
        if let Some(z) = &self.lstm_z {
            z.validate()?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> ParamCount {
        let blocks: Vec<(String, usize)> = self
            .blocks()
            .into_iter()
            .map(|(name, b)| (name, b.len()))
            .collect();
        let total = blocks.iter().map(|(_, n)| n).sum();
        ParamCount { blocks, total }
    }

    fn check_streams(&self, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Empty("input streams"));
        }
        ensure_dim("stream length", xs.len(), zs.len())?;
        for (x, z) in xs.iter().zip(zs) {
            ensure_dim("x_t", self.dims.x_dim, x.len())?;
            ensure_dim("z_t", self.dims.z_dim, z.len())?;
        }
        Ok(())
    }

    /// Runs the whole sequence, returning per-step distributions and the tape
    /// needed by [`FusionRnnModel::backward`].
    pub fn forward(&self, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<(PredictionTrajectory, FusionTape)> {
        self.check_streams(xs, zs)?;
        let len = xs.len();
        let (hidden, tape_x, tape_z) = match self.arch {
            Arch::Fusion => {
                let (sx, tx) = lstm_forward(&self.lstm_x, xs)?;
                let lstm_z = self.lstm_z.as_ref().expect("fusion mode has lstm_z");
                let (sz, tz) = lstm_forward(lstm_z, zs)?;
                let hidden: Vec<Vec<f64>> = sx
                    .iter()
                    .zip(&sz)
                    .map(|(a, b)| [a.h.as_slice(), b.h.as_slice()].concat())
                    .collect();
                (hidden, tx, Some(tz))
            }
            Arch::Concat => {
                let joined: Vec<Vec<f64>> = xs
                    .iter()
                    .zip(zs)
                    .map(|(x, z)| [x.as_slice(), z.as_slice()].concat())
                    .collect();
                let (s, t) = lstm_forward(&self.lstm_x, &joined)?;
                (s.into_iter().map(|s| s.h).collect(), t, None)
            }
        };
        let mut features = Vec::with_capacity(len);
        let mut y = Vec::with_capacity(len);
        for h in &hidden {
            let e = self.head_input(h);
            y.push(softmax_unchecked(&self.output.apply(&e)));
            features.push(e);
        }
        Ok((
            PredictionTrajectory { y },
            FusionTape {
                lstm_x: tape_x,
                lstm_z: tape_z,
                hidden,
                features,
            },
        ))
    }

    fn head_input(&self, hidden: &[f64]) -> Vec<f64> {
        match &self.fusion {
            Some(f) => f.apply(hidden).into_iter().map(f64::tanh).collect(),
            None => hidden.to_vec(),
        }
    }

    /// Reverse pass given `∂loss/∂logits` at every step.
    pub fn backward(&self, tape: &FusionTape, dlogits: &[Vec<f64>]) -> Result<FusionRnnModel> {
        ensure_dim("backward steps", tape.features.len(), dlogits.len())?;
        let h = self.dims.hidden;
        let mut grads = self.zeros_like();
        let mut dh_x = Vec::with_capacity(dlogits.len());
        let mut dh_z = Vec::with_capacity(dlogits.len());
        for ((dl, e), hid) in dlogits.iter().zip(&tape.features).zip(&tape.hidden) {
            ensure_dim("backward logits", self.dims.events, dl.len())?;
            grads.output.w.outer_acc(dl, e);
            crate::numerics::axpy(1.0, dl, &mut grads.output.b);
            let mut de = vec![0.0; e.len()];
            self.output.w.matvec_t_acc(dl, &mut de);
            match (&self.fusion, &mut grads.fusion) {
                (Some(f), Some(gf)) => {
                    let da: Vec<f64> = de.iter().zip(e).map(|(d, e)| d * (1.0 - e * e)).collect();
                    gf.w.outer_acc(&da, hid);
                    crate::numerics::axpy(1.0, &da, &mut gf.b);
                    let mut dcat = vec![0.0; 2 * h];
                    f.w.matvec_t_acc(&da, &mut dcat);
                    dh_z.push(dcat.split_off(h));
                    dh_x.push(dcat);
                }
                _ => dh_x.push(de),
            }
        }
        let (gx, _) = lstm_backward(&self.lstm_x, &tape.lstm_x, &dh_x)?;
        grads.lstm_x = gx;
        if let (Some(p), Some(tz)) = (&self.lstm_z, &tape.lstm_z) {
            let (gz, _) = lstm_backward(p, tz, &dh_z)?;
            grads.lstm_z = Some(gz);
        }
        Ok(grads)
    }

    /// Incremental evaluator: one `push` per step, reusing the recurrent state.
    pub fn stream(&self) -> FusionStream<'_> {
        let h = self.dims.hidden;
        FusionStream {
            model: self,
            state_x: LstmState::zeros(h),
            state_z: self.lstm_z.as_ref().map(|_| LstmState::zeros(h)),
        }
    }
}

impl Parameters for FusionRnnModel {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        let x_prefix = match self.arch {
            Arch::Fusion => "lstm_x",
            Arch::Concat => "lstm",
        };
        out.extend(
            self.lstm_x
                .blocks()
                .into_iter()
                .map(|(n, b)| (format!("{x_prefix}.{n}"), b)),
        );
        if let Some(z) = &self.lstm_z {
            out.extend(z.blocks().into_iter().map(|(n, b)| (format!("lstm_z.{n}"), b)));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.W_f".into(), f.w.as_slice()));
            out.push(("fusion.b_f".into(), &f.b));
        }
        out.push(("output.W_y".into(), self.output.w.as_slice()));
        out.push(("output.b_y".into(), &self.output.b));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.lstm_x.blocks_mut();
        if let Some(z) = &mut self.lstm_z {
            out.extend(z.blocks_mut());
        }
        if let Some(f) = &mut self.fusion {
            out.push(f.w.as_mut_slice());
            out.push(&mut f.b);
        }
        out.push(self.output.w.as_mut_slice());
        out.push(&mut self.output.b);
        out
    }
}

/// Per-step event distributions `y_1..y_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrajectory {
    pub y: Vec<Vec<f64>>,
}

impl PredictionTrajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Forward-pass cache.
#[derive(Debug, Clone)]
pub struct FusionTape {
    pub lstm_x: LstmTape,
    pub lstm_z: Option<LstmTape>,
    /// LSTM output fed to the head: `[h^x; h^z]` (fusion) or `h` (concat).
    pub hidden: Vec<Vec<f64>>,
    /// Head input: fusion activations `e_t`, or `h_t` in concat mode.
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
}

pub struct FusionStream<'a> {
    model: &'a FusionRnnModel,
    state_x: LstmState,
    state_z: Option<LstmState>,
}

impl FusionStream<'_> {
    /// Consumes `(x_t, z_t)` and returns `y_t`.
    pub fn push(&mut self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        ensure_dim("x_t", m.dims.x_dim, x.len())?;
        ensure_dim("z_t", m.dims.z_dim, z.len())?;
        let hidden = match (&m.lstm_z, &mut self.state_z) {
            (Some(pz), Some(sz)) => {
                let (nx, _) = lstm_step(&m.lstm_x, x, &self.state_x)?;
                let (nz, _) = lstm_step(pz, z, sz)?;
                let cat = [nx.h.as_slice(), nz.h.as_slice()].concat();
                self.state_x = nx;
                *sz = nz;
                cat
            }
            _ => {
                let joined = [x, z].concat();
                let (n, _) = lstm_step(&m.lstm_x, &joined, &self.state_x)?;
                let h = n.h.clone();
                self.state_x = n;
                h
            }
        };
        let e = m.head_input(&hidden);
        Ok(softmax_unchecked(&m.output.apply(&e)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn dims(hidden: usize) -> ModelDims {
        ModelDims {
            x_dim: 3,
            z_dim: 4,
            hidden,
            fusion_width: hidden,
            events: 5,
        }
    }

    fn streams(len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = Rng::new(seed);
        let xs = (0..len).map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let zs = (0..len).map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        (xs, zs)
    }

    #[test]
    fn zero_model_is_uniform() {
        for arch in [Arch::Fusion, Arch::Concat] {
            let m = FusionRnnModel::zeros(arch, dims(4)).unwrap();
            let (xs, zs) = streams(5, 1);
            let (traj, _) = m.forward(&xs, &zs).unwrap();
            for y in &traj.y {
                assert!(y.iter().all(|p| (p - 0.2).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn outputs_are_distributions() {
        let mut rng = Rng::new(2);
        let m = FusionRnnModel::init(Arch::Fusion, dims(6), &mut rng).unwrap();
        let (xs, zs) = streams(9, 3);
        let (traj, _) = m.forward(&xs, &zs).unwrap();
        assert_eq!(traj.len(), 9);
        for y in &traj.y {
            assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fusion_and_concat_differ() {
        let (xs, zs) = streams(6, 30);
        let f = FusionRnnModel::init(Arch::Fusion, dims(8), &mut Rng::new(3)).unwrap();
        let c = FusionRnnModel::init(Arch::Concat, dims(8), &mut Rng::new(3)).unwrap();
        let (yf, _) = f.forward(&xs, &zs).unwrap();
        let (yc, _) = c.forward(&xs, &zs).unwrap();
        assert_ne!(yf, yc);

        // Same conclusion with the inside stream silenced.
        let quiet = vec![vec![0.0; 4]; 6];
        let (yf, _) = f.forward(&xs, &quiet).unwrap();
        let (yc, _) = c.forward(&xs, &quiet).unwrap();
        assert_ne!(yf, yc);
    }

    #[test]
    fn rejects_mismatched_streams() {
        let m = FusionRnnModel::zeros(Arch::Fusion, dims(2)).unwrap();
        let (xs, zs) = streams(4, 1);
        assert!(m.forward(&xs, &zs[..3]).is_err());
        assert!(m.forward(&[], &[]).is_err());
        assert!(m.forward(&xs, &xs).is_err());
    }

    #[test]
    fn stream_matches_batch_forward() {
        for arch in [Arch::Fusion, Arch::Concat] {
            let m = FusionRnnModel::init(arch, dims(5), &mut Rng::new(8)).unwrap();
            let (xs, zs) = streams(7, 4);
            let (traj, _) = m.forward(&xs, &zs).unwrap();
            let mut s = m.stream();
            for t in 0..7 {
                assert_eq!(s.push(&xs[t], &zs[t]).unwrap(), traj.y[t]);
            }
        }
    }

    #[test]
    fn param_count_by_hand() {
        let d = ModelDims {
            x_dim: 1,
            z_dim: 1,
            hidden: 1,
            fusion_width: 1,
            events: 5,
        };
        let m = FusionRnnModel::zeros(Arch::Fusion, d).unwrap();
        // Each LSTM: W 4·1·1 + U 4·1·1 + V 3 + b 4 = 15; fusion 1·2 + 1; head 5·1 + 5.
        assert_eq!(m.param_count().total, 15 + 15 + 3 + 10);
        let doubled = FusionRnnModel::zeros(Arch::Fusion, ModelDims { hidden: 2, ..d }).unwrap();
        assert!(doubled.param_count().total > 2 * m.param_count().total);
        assert!(FusionRnnModel::zeros(Arch::Fusion, ModelDims { hidden: 0, ..d }).is_err());
    }

    #[test]
    fn default_size_count() {
        let m = FusionRnnModel::zeros(Arch::Fusion, ModelDims::standard(5)).unwrap();
        // 18368 (outside LSTM) + 19136 (inside LSTM) + 8256 (fusion) + 325 (head)
        assert_eq!(m.param_count().total, 46_085);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let m = FusionRnnModel::init(Arch::Fusion, dims(4), &mut Rng::new(1)).unwrap();
        let (xs, zs) = streams(4, 2);
        let (_, tape) = m.forward(&xs, &zs).unwrap();
        let g = m.backward(&tape, &vec![vec![0.0; 5]; 4]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(m.backward(&tape, &vec![vec![0.0; 5]; 3]).is_err());
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let m = FusionRnnModel::init(Arch::Fusion, dims(4), &mut Rng::new(5)).unwrap();
        let (xs, zs) = streams(3, 6);
        let (_, tape) = m.forward(&xs, &zs).unwrap();
        let mut rng = Rng::new(9);
        let parts: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|t| {
                (0..3)
                    .map(|s| {
                        if s == t {
                            (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect()
                        } else {
                            vec![0.0; 5]
                        }
                    })
                    .collect()
            })
            .collect();
        let total: Vec<Vec<f64>> = (0..3).map(|t| parts[t][t].clone()).collect();
        let g_total = m.backward(&tape, &total).unwrap().flatten();
        let mut g_sum = vec![0.0; g_total.len()];
        for p in &parts {
            for (a, b) in g_sum.iter_mut().zip(m.backward(&tape, p).unwrap().flatten()) {
                *a += b;
            }
        }
        for (a, b) in g_total.iter().zip(&g_sum) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for arch in [Arch::Fusion, Arch::Concat] {
            let m = FusionRnnModel::init(arch, dims(6), &mut Rng::new(12)).unwrap();
            let (xs, zs) = streams(6, 13);
            let mut rng = Rng::new(14);
            let weights: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            // Linear functional of the logits: Σ_t w_t · log y_t is smooth and
            // exercises every path; its logit gradient is w_t − (Σw_t) y_t.
            let objective = |q: &FusionRnnModel| -> f64 {
                let (traj, _) = q.forward(&xs, &zs).unwrap();
                traj.y
                    .iter()
                    .zip(&weights)
                    .map(|(y, w)| y.iter().zip(w).map(|(p, w)| w * p.ln()).sum::<f64>())
                    .sum()
            };
            let (traj, tape) = m.forward(&xs, &zs).unwrap();
            let dl: Vec<Vec<f64>> = traj
                .y
                .iter()
                .zip(&weights)
                .map(|(y, w)| {
                    let s: f64 = w.iter().sum();
                    w.iter().zip(y).map(|(w, p)| w - s * p).collect()
                })
                .collect();
            let analytic = m.backward(&tape, &dl).unwrap().flatten();
            let numeric = finite_diff_grad(
                |flat| {
                    let mut q = m.clone();
                    q.set_flat(flat).unwrap();
                    objective(&q)
                },
                &m.flatten(),
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{arch:?}: {a} vs {n}");
            }
        }
    }
}
