//! Peephole LSTM cell, forward unrolling and backpropagation through time.
//!
//! ```text
//! i_t = σ(W_i x_t + U_i h_{t−1} + V_i ⊙ c_{t−1} + b_i)
//! f_t = σ(W_f x_t + U_f h_{t−1} + V_f ⊙ c_{t−1} + b_f)
//! c_t = f_t ⊙ c_{t−1} + i_t ⊙ tanh(W_c x_t + U_c h_{t−1} + b_c)
//! o_t = σ(W_o x_t + U_o h_{t−1} + V_o ⊙ c_t + b_o)
//! h_t = o_t ⊙ tanh(c_t)
//! ```
//!
//! The peephole weights `V_*` are diagonal and stored as vectors. The output
//! gate reads the *updated* cell `c_t`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{sigmoid, Mat, Parameters, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_i: Mat,
    pub w_f: Mat,
    pub w_c: Mat,
    pub w_o: Mat,
    pub u_i: Mat,
    pub u_f: Mat,
    pub u_c: Mat,
    pub u_o: Mat,
    pub v_i: Vec<f64>,
    pub v_f: Vec<f64>,
    pub v_o: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Mat::zeros(hidden, input);
        let u = || Mat::zeros(hidden, hidden);
        let v = || vec![0.0; hidden];
        LstmParams {
            w_i: w(),
            w_f: w(),
            w_c: w(),
            w_o: w(),
            u_i: u(),
            u_f: u(),
            u_c: u(),
            u_o: u(),
            v_i: v(),
            v_f: v(),
            v_o: v(),
            b_i: v(),
            b_f: v(),
            b_c: v(),
            b_o: v(),
        }
    }

    /// Uniform init in `[−r, r]`, `r = 1/√fan_in` with fan-in `input + hidden`.
    /// Biases start at zero.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let r = 1.0 / ((input + hidden) as f64).sqrt();
        let mut p = LstmParams::zeros(input, hidden);
        for m in [&mut p.w_i, &mut p.w_f, &mut p.w_c, &mut p.w_o] {
            *m = Mat::uniform(hidden, input, r, rng);
        }
        for m in [&mut p.u_i, &mut p.u_f, &mut p.u_c, &mut p.u_o] {
            *m = Mat::uniform(hidden, hidden, r, rng);
        }
        for v in [&mut p.v_i, &mut p.v_f, &mut p.v_o] {
            v.iter_mut().for_each(|x| *x = rng.uniform(-r, r));
        }
        p
    }

    pub fn input_size(&self) -> usize {
        self.w_i.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_i.rows()
    }

    /// Checks that every block agrees on the input and hidden sizes.
    pub fn validate(&self) -> Result<()> {
        let (n, h) = (self.input_size(), self.hidden_size());
        if h == 0 || n == 0 {
            return Err(Error::Config("LSTM sizes must be positive".into()));
        }
        for m in [&self.w_i, &self.w_f, &self.w_c, &self.w_o] {
            ensure_dim("LSTM W rows", h, m.rows())?;
            ensure_dim("LSTM W cols", n, m.cols())?;
        }
        for m in [&self.u_i, &self.u_f, &self.u_c, &self.u_o] {
            ensure_dim("LSTM U rows", h, m.rows())?;
            ensure_dim("LSTM U cols", h, m.cols())?;
        }
        for v in [
            &self.v_i, &self.v_f, &self.v_o, &self.b_i, &self.b_f, &self.b_c, &self.b_o,
        ] {
            ensure_dim("LSTM vector", h, v.len())?;
        }
        Ok(())
    }
}

impl Parameters for LstmParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("W_i".into(), self.w_i.as_slice()),
            ("W_f".into(), self.w_f.as_slice()),
            ("W_c".into(), self.w_c.as_slice()),
            ("W_o".into(), self.w_o.as_slice()),
            ("U_i".into(), self.u_i.as_slice()),
            ("U_f".into(), self.u_f.as_slice()),
            ("U_c".into(), self.u_c.as_slice()),
            ("U_o".into(), self.u_o.as_slice()),
            ("V_i".into(), &self.v_i),
            ("V_f".into(), &self.v_f),
            ("V_o".into(), &self.v_o),
            ("b_i".into(), &self.b_i),
            ("b_f".into(), &self.b_f),
            ("b_c".into(), &self.b_c),
            ("b_o".into(), &self.b_o),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_i.as_mut_slice(),
            self.w_f.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.u_i.as_mut_slice(),
            self.u_f.as_mut_slice(),
            self.u_c.as_mut_slice(),
            self.u_o.as_mut_slice(),
            &mut self.v_i,
            &mut self.v_f,
            &mut self.v_o,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    /// `tanh` of the candidate pre-activation.
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Per-step caches for a whole sequence.
#[derive(Debug, Clone, Default)]
pub struct LstmTape {
    pub steps: Vec<StepCache>,
}

impl LstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn lstm_step(p: &LstmParams, x: &[f64], prev: &LstmState) -> Result<(LstmState, StepCache)> {
    ensure_dim("lstm_step input", p.input_size(), x.len())?;
    ensure_dim("lstm_step h", p.hidden_size(), prev.h.len())?;
    ensure_dim("lstm_step c", p.hidden_size(), prev.c.len())?;
    Ok(step_unchecked(p, x, &prev.h, &prev.c))
}

fn step_unchecked(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (LstmState, StepCache) {
    let n = p.hidden_size();
    let affine = |w: &Mat, u: &Mat, b: &[f64]| {
        let mut a = b.to_vec();
        w.matvec_acc(x, &mut a);
        u.matvec_acc(h_prev, &mut a);
        a
    };
    let mut i = affine(&p.w_i, &p.u_i, &p.b_i);
    let mut f = affine(&p.w_f, &p.u_f, &p.b_f);
    let mut g = affine(&p.w_c, &p.u_c, &p.b_c);
    let mut o = affine(&p.w_o, &p.u_o, &p.b_o);
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut h = vec![0.0; n];
    for k in 0..n {
        i[k] = sigmoid(i[k] + p.v_i[k] * c_prev[k]);
        f[k] = sigmoid(f[k] + p.v_f[k] * c_prev[k]);
        g[k] = g[k].tanh();
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        o[k] = sigmoid(o[k] + p.v_o[k] * c[k]);
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
    let state = LstmState {
        h: h.clone(),
        c: c.clone(),
    };
    let cache = StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        o,
        c,
        tanh_c,
        h,
    };
    (state, cache)
}

/// Unrolls the cell over `xs` from the zero state.
pub fn lstm_forward(p: &LstmParams, xs: &[Vec<f64>]) -> Result<(Vec<LstmState>, LstmTape)> {
    if xs.is_empty() {
        return Err(Error::Empty("LSTM input sequence"));
    }
    for x in xs {
        ensure_dim("lstm_forward input", p.input_size(), x.len())?;
    }
    let mut state = LstmState::zeros(p.hidden_size());
    let mut states = Vec::with_capacity(xs.len());
    let mut tape = LstmTape {
        steps: Vec::with_capacity(xs.len()),
    };
    for x in xs {
        let (next, cache) = step_unchecked(p, x, &state.h, &state.c);
        tape.steps.push(cache);
        states.push(next.clone());
        state = next;
    }
    Ok((states, tape))
}

/// Reverse pass for `Σ_t dh_t · h_t`.
///
/// Returns parameter gradients (same shape as `p`) and the gradient with
/// respect to every input `x_t`.
pub fn lstm_backward(
    p: &LstmParams,
    tape: &LstmTape,
    dh: &[Vec<f64>],
) -> Result<(LstmParams, Vec<Vec<f64>>)> {
    ensure_dim("lstm_backward steps", tape.len(), dh.len())?;
    let n = p.hidden_size();
    for d in dh {
        ensure_dim("lstm_backward dh", n, d.len())?;
    }
    let mut grads = LstmParams::zeros(p.input_size(), n);
    let mut dxs = vec![Vec::new(); tape.len()];
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut da_i = vec![0.0; n];
    let mut da_f = vec![0.0; n];
    let mut da_g = vec![0.0; n];
    let mut da_o = vec![0.0; n];

    for (t, s) in tape.steps.iter().enumerate().rev() {
        for k in 0..n {
            let dh_k = dh[t][k] + dh_next[k];
            da_o[k] = dh_k * s.tanh_c[k] * s.o[k] * (1.0 - s.o[k]);
            let dc = dh_k * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k])
                + dc_next[k]
                + da_o[k] * p.v_o[k];
            da_i[k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
            da_f[k] = dc * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
            da_g[k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
            dc_next[k] = dc * s.f[k] + da_i[k] * p.v_i[k] + da_f[k] * p.v_f[k];

            grads.v_i[k] += da_i[k] * s.c_prev[k];
            grads.v_f[k] += da_f[k] * s.c_prev[k];
            grads.v_o[k] += da_o[k] * s.c[k];
            grads.b_i[k] += da_i[k];
            grads.b_f[k] += da_f[k];
            grads.b_c[k] += da_g[k];
            grads.b_o[k] += da_o[k];
        }
        grads.w_i.outer_acc(&da_i, &s.x);
        grads.w_f.outer_acc(&da_f, &s.x);
        grads.w_c.outer_acc(&da_g, &s.x);
        grads.w_o.outer_acc(&da_o, &s.x);
        grads.u_i.outer_acc(&da_i, &s.h_prev);
        grads.u_f.outer_acc(&da_f, &s.h_prev);
        grads.u_c.outer_acc(&da_g, &s.h_prev);
        grads.u_o.outer_acc(&da_o, &s.h_prev);

        let mut dx = vec![0.0; p.input_size()];
        p.w_i.matvec_t_acc(&da_i, &mut dx);
        p.w_f.matvec_t_acc(&da_f, &mut dx);
        p.w_c.matvec_t_acc(&da_g, &mut dx);
        p.w_o.matvec_t_acc(&da_o, &mut dx);
        dxs[t] = dx;

        dh_next.fill(0.0);
        p.u_i.matvec_t_acc(&da_i, &mut dh_next);
        p.u_f.matvec_t_acc(&da_f, &mut dh_next);
        p.u_c.matvec_t_acc(&da_g, &mut dh_next);
        p.u_o.matvec_t_acc(&da_o, &mut dh_next);
    }
    Ok((grads, dxs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straight-line transcription of the cell equations, one unit at a time.
    fn reference_step(p: &LstmParams, x: &[f64], h0: &[f64], c0: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = p.hidden_size();
        let row = |m: &Mat, k: usize, v: &[f64]| -> f64 {
            let mut s = 0.0;
            for j in 0..v.len() {
                s += m.get(k, j) * v[j];
            }
            s
        };
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        for k in 0..n {
            let i = sig(row(&p.w_i, k, x) + row(&p.u_i, k, h0) + p.v_i[k] * c0[k] + p.b_i[k]);
            let f = sig(row(&p.w_f, k, x) + row(&p.u_f, k, h0) + p.v_f[k] * c0[k] + p.b_f[k]);
            c[k] = f * c0[k] + i * (row(&p.w_c, k, x) + row(&p.u_c, k, h0) + p.b_c[k]).tanh();
            let o = sig(row(&p.w_o, k, x) + row(&p.u_o, k, h0) + p.v_o[k] * c[k] + p.b_o[k]);
            h[k] = o * c[k].tanh();
        }
        (h, c)
    }

    fn random_params(input: usize, hidden: usize, seed: u64) -> LstmParams {
        let mut rng = Rng::new(seed);
        let mut p = LstmParams::init(input, hidden, &mut rng);
        for b in [&mut p.b_i, &mut p.b_f, &mut p.b_c, &mut p.b_o] {
            b.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        p
    }

    fn random_seq(len: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_params_from_zero_state() {
        let p = LstmParams::zeros(3, 4);
        let (s, cache) = lstm_step(&p, &[0.3, -2.0, 7.0], &LstmState::zeros(4)).unwrap();
        assert!(cache.i.iter().chain(&cache.f).chain(&cache.o).all(|g| *g == 0.5));
        assert!(s.c.iter().chain(&s.h).all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = LstmParams::zeros(2, 3);
        let prev = LstmState {
            h: vec![0.4, -0.1, 0.9],
            c: vec![1.0, -2.0, 0.25],
        };
        let (s, _) = lstm_step(&p, &[1.0, 1.0], &prev).unwrap();
        for k in 0..3 {
            assert_eq!(s.c[k], 0.5 * prev.c[k]);
            assert_eq!(s.h[k], 0.5 * (0.5 * prev.c[k]).tanh());
        }
    }

    #[test]
    fn step_matches_transcription() {
        let p = random_params(3, 4, 7);
        let mut rng = Rng::new(70);
        let x = [0.5, -1.2, 0.8];
        let h0: Vec<f64> = (0..4).map(|_| rng.uniform(-0.9, 0.9)).collect();
        let c0: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let (s, _) = lstm_step(&p, &x, &LstmState { h: h0.clone(), c: c0.clone() }).unwrap();
        let (h, c) = reference_step(&p, &x, &h0, &c0);
        for k in 0..4 {
            assert!((s.h[k] - h[k]).abs() <= 1e-12);
            assert!((s.c[k] - c[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let p = LstmParams::zeros(3, 4);
        assert!(lstm_step(&p, &[1.0], &LstmState::zeros(4)).is_err());
        assert!(lstm_step(&p, &[1.0; 3], &LstmState::zeros(2)).is_err());
        assert!(matches!(lstm_forward(&p, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn forward_single_step_equals_lstm_step() {
        let p = random_params(2, 3, 1);
        let (states, tape) = lstm_forward(&p, &[vec![0.1, 0.2]]).unwrap();
        let (s, _) = lstm_step(&p, &[0.1, 0.2], &LstmState::zeros(3)).unwrap();
        assert_eq!(states[0], s);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn zero_params_keep_h_zero() {
        let p = LstmParams::zeros(2, 3);
        let (states, _) = lstm_forward(&p, &vec![vec![1.0, -1.0]; 6]).unwrap();
        assert!(states.iter().all(|s| s.h.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn constant_input_settles() {
        let p = random_params(3, 4, 5);
        let xs = vec![vec![0.2, -0.4, 0.6]; 201];
        let (states, _) = lstm_forward(&p, &xs).unwrap();
        let delta = |t: usize| {
            states[t]
                .h
                .iter()
                .zip(&states[t - 1].h)
                .chain(states[t].c.iter().zip(&states[t - 1].c))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        assert!(delta(200) < delta(5), "{} vs {}", delta(200), delta(5));
    }

    #[test]
    fn gates_in_open_interval_and_cell_reproducible() {
        let p = random_params(3, 5, 9);
        let mut rng = Rng::new(90);
        let (_, tape) = lstm_forward(&p, &random_seq(12, 3, &mut rng)).unwrap();
        for s in &tape.steps {
            for k in 0..5 {
                for g in [s.i[k], s.f[k], s.o[k]] {
                    assert!(g > 0.0 && g < 1.0);
                }
                assert_eq!(s.c[k], s.f[k] * s.c_prev[k] + s.i[k] * s.g[k]);
                assert!(s.h[k].abs() < 1.0);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(2, 3, 4);
        let mut rng = Rng::new(40);
        let (_, tape) = lstm_forward(&p, &random_seq(5, 2, &mut rng)).unwrap();
        let (g, dx) = lstm_backward(&p, &tape, &vec![vec![0.0; 3]; 5]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(dx.iter().flatten().all(|v| *v == 0.0));
        assert!(lstm_backward(&p, &tape, &vec![vec![0.0; 3]; 4]).is_err());
    }

    fn check_bptt(seed: u64, len: usize, hidden: usize, tol: f64) {
        let input = 3;
        let p = random_params(input, hidden, seed);
        let mut rng = Rng::new(seed ^ 0xABCD);
        let xs = random_seq(len, input, &mut rng);
        let weights = random_seq(len, hidden, &mut rng);
        let objective = |q: &LstmParams, xs: &[Vec<f64>]| -> f64 {
            let (states, _) = lstm_forward(q, xs).unwrap();
            states
                .iter()
                .zip(&weights)
                .map(|(s, w)| s.h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (_, tape) = lstm_forward(&p, &xs).unwrap();
        let (grads, dxs) = lstm_backward(&p, &tape, &weights).unwrap();

        let numeric = finite_diff_grad(
            |flat| {
                let mut q = p.clone();
                q.set_flat(flat).unwrap();
                objective(&q, &xs)
            },
            &p.flatten(),
            1e-5,
        )
        .unwrap();
        let analytic = grads.flatten();
        let mut offset = 0;
        for (name, block) in p.blocks() {
            let n = block.len();
            let err = max_rel_err(&analytic[offset..offset + n], &numeric[offset..offset + n]);
            assert!(err <= tol, "seed {seed} T={len} block {name}: {err:e}");
            offset += n;
        }

        let flat_x: Vec<f64> = xs.iter().flatten().copied().collect();
        let numeric_x = finite_diff_grad(
            |fx| {
                let seq: Vec<Vec<f64>> = fx.chunks(input).map(<[f64]>::to_vec).collect();
                objective(&p, &seq)
            },
            &flat_x,
            1e-5,
        )
        .unwrap();
        let analytic_x: Vec<f64> = dxs.iter().flatten().copied().collect();
        assert!(max_rel_err(&analytic_x, &numeric_x) <= tol);
    }

    fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn bptt_single_step_matches_finite_differences() {
        check_bptt(3, 1, 4, 1e-6);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        check_bptt(11, 8, 8, 1e-4);
        for seed in 0..5u64 {
            for len in 3..=10 {
                for hidden in [4, 8] {
                    check_bptt(100 + seed, len, hidden, 1e-4);
                }
            }
        }
    }

    #[test]
    fn forward_backward_deterministic() {
        let p = random_params(3, 4, 21);
        let mut rng = Rng::new(5);
        let xs = random_seq(6, 3, &mut rng);
        let dh = random_seq(6, 4, &mut rng);
        let (s1, t1) = lstm_forward(&p, &xs).unwrap();
        let (s2, t2) = lstm_forward(&p, &xs).unwrap();
        assert_eq!(s1, s2);
        let (g1, _) = lstm_backward(&p, &t1, &dh).unwrap();
        let (g2, _) = lstm_backward(&p, &t2, &dh).unwrap();
        assert_eq!(g1, g2);
    }
}
