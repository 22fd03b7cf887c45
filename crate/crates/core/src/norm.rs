//! Spectral normalization by power iteration and batch normalization.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{SlotKind, Visit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass mode threaded through every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, persistent state (running stats, power-iteration
    /// vectors) is updated.
    Train,
    /// Batch statistics, state left untouched. Used when a network
    /// participates in another network's update step.
    Frozen,
    /// Running statistics, state left untouched.
    Eval,
}

const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent left singular-vector estimate for one normalized weight.
#[derive(Clone, Debug)]
pub struct SpectralState<T: Scalar> {
    prefix: String,
    pub u: Tensor<T>,
    pub n_power_iterations: usize,
}

impl<T: Scalar> SpectralState<T> {
    pub fn init(prefix: impl Into<String>, rows: usize, rng: &mut Rng) -> Self {
        let raw: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        SpectralState {
            prefix: prefix.into(),
            u: Tensor::new(vec![rows], raw.iter().map(|v| T::from_f64(v / norm)).collect()),
            n_power_iterations: 1,
        }
    }
}

impl<T: Scalar> Visit<T> for SpectralState<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        f(format!("{}.sn_u", self.prefix), SlotKind::State, &self.u);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        f(format!("{}.sn_u", self.prefix), SlotKind::State, &mut self.u);
    }
}

fn l2_normalize<T: Scalar>(v: &mut [T]) -> Result<()> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm < SIGMA_FLOOR {
        return Err(Error::DegenerateWeight { sigma: norm });
    }
    let inv = T::from_f64(1.0 / norm);
    for x in v.iter_mut() {
        *x = *x * inv;
    }
    Ok(())
}

/// Runs `iters` power-iteration steps on the matrix view `[rows, cols]` of
/// `w`, starting from `u0`. Returns `(u, v, sigma)` with `sigma = u^T W v`.
pub fn power_iterate<T: Scalar>(
    w: &Tensor<T>,
    u0: &Tensor<T>,
    iters: usize,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    if u0.len() != rows {
        return Err(Error::invalid(
            "power_iterate",
            format!("u has {} entries, weight has {rows} rows", u0.len()),
        ));
    }
    let wd = w.data();
    let mut u = u0.data().to_vec();
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters.max(1) {
        // v = normalize(W^T u)
        for x in v.iter_mut() {
            *x = T::zero();
        }
        for r in 0..rows {
            let ur = u[r];
            for c in 0..cols {
                v[c] = v[c] + wd[r * cols + c] * ur;
            }
        }
        l2_normalize(&mut v)?;
        // u = normalize(W v)
        for (r, x) in u.iter_mut().enumerate() {
            let mut acc = T::zero();
            for c in 0..cols {
                acc = acc + wd[r * cols + c] * v[c];
            }
            *x = acc;
        }
        l2_normalize(&mut u)?;
    }
    let mut sigma = T::zero();
    for r in 0..rows {
        let mut acc = T::zero();
        for c in 0..cols {
            acc = acc + wd[r * cols + c] * v[c];
        }
        sigma = sigma + u[r] * acc;
    }
    Ok((Tensor::new(vec![rows], u), Tensor::new(vec![cols], v), sigma))
}

/// Value-level spectral normalization: `w_hat = w / sigma` with `sigma`
/// estimated by `iters` power-iteration steps. Returns the normalized weight,
/// the updated `u`, and the estimate.
pub fn spectral_normalize_value<T: Scalar>(
    w: &Tensor<T>,
    state: &SpectralState<T>,
    iters: usize,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let (u, _v, sigma) = power_iterate(w, &state.u, iters)?;
    if sigma.as_f64().abs() < SIGMA_FLOOR {
        return Err(Error::DegenerateWeight {
            sigma: sigma.as_f64(),
        });
    }
    let inv = T::one() / sigma;
    Ok((w.map(|x| x * inv), u, sigma))
}

/// Graph-recorded spectral normalization of a weight node.
///
/// The power iteration runs outside the tape; the division `w / sigma` with
/// `sigma = u^T W v` is recorded with `u`, `v` held as constants of the step,
/// so gradients flow through both the numerator and the estimate. The
/// persistent `u` advances only in [`Mode::Train`].
pub fn spectral_normalize<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    state: &mut SpectralState<T>,
    mode: Mode,
) -> Result<Var> {
    let wv = g.value(w).clone();
    let rows = wv.shape()[0];
    let cols = wv.len() / rows;
    let (u, v, sigma) = power_iterate(&wv, &state.u, state.n_power_iterations)?;
    if sigma.as_f64().abs() < SIGMA_FLOOR {
        return Err(Error::DegenerateWeight {
            sigma: sigma.as_f64(),
        });
    }
    if mode == Mode::Train {
        state.u = u.clone();
    }
    // sigma = u^T W v = <W, u v^T> as a differentiable function of W.
    let mut uv = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ur = u.data()[r];
        for c in 0..cols {
            uv.push(ur * v.data()[c]);
        }
    }
    let uv_node = g.constant(Tensor::new(wv.shape().to_vec(), uv));
    let prod = g.mul(w, uv_node)?;
    let sigma_node = g.sum_all(prod);
    g.div_by_scalar(w, sigma_node)
}

/// Learnable affine plus running statistics for one batch-norm site.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Scalar> {
    prefix: String,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn init(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNormState {
            prefix: prefix.into(),
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

impl<T: Scalar> Visit<T> for BatchNormState<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        f(format!("{}.scale", self.prefix), SlotKind::Param, &self.scale);
        f(format!("{}.shift", self.prefix), SlotKind::Param, &self.shift);
        f(
            format!("{}.running_mean", self.prefix),
            SlotKind::State,
            &self.running_mean,
        );
        f(
            format!("{}.running_var", self.prefix),
            SlotKind::State,
            &self.running_var,
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        f(format!("{}.scale", self.prefix), SlotKind::Param, &mut self.scale);
        f(format!("{}.shift", self.prefix), SlotKind::Param, &mut self.shift);
        f(
            format!("{}.running_mean", self.prefix),
            SlotKind::State,
            &mut self.running_mean,
        );
        f(
            format!("{}.running_var", self.prefix),
            SlotKind::State,
            &mut self.running_var,
        );
    }
}

/// Batch normalization over `(N, H, W)` per channel. Train/Frozen modes use
/// batch statistics (Train also folds them into the running estimates with
/// `running = momentum * running + (1 - momentum) * batch`); Eval normalizes
/// by the running statistics.
pub fn batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    st: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Train | Mode::Frozen => {
            let scale = g.param(&format!("{}.scale", st.prefix), &st.scale);
            let shift = g.param(&format!("{}.shift", st.prefix), &st.shift);
            let (y, mean, var) = g.batch_norm_train(x, scale, shift, st.epsilon)?;
            if mode == Mode::Train {
                let m = T::from_f64(st.momentum);
                let one_m = T::from_f64(1.0 - st.momentum);
                let blend = |running: &Tensor<T>, batch: &Tensor<T>| {
                    Tensor::new(
                        running.shape().to_vec(),
                        running
                            .data()
                            .iter()
                            .zip(batch.data())
                            .map(|(&r, &b)| m * r + one_m * b)
                            .collect(),
                    )
                };
                st.running_mean = blend(&st.running_mean, &mean);
                st.running_var = blend(&st.running_var, &var);
            }
            Ok(y)
        }
        Mode::Eval => {
            let c = st.channels();
            let mut k = Vec::with_capacity(c);
            let mut b = Vec::with_capacity(c);
            for ch in 0..c {
                let inv = (st.running_var.data()[ch] + T::from_f64(st.epsilon))
                    .sqrt()
                    .recip();
                let kc = st.scale.data()[ch] * inv;
                k.push(kc);
                b.push(st.shift.data()[ch] - st.running_mean.data()[ch] * kc);
            }
            let kn = g.constant(Tensor::new(vec![1, c, 1, 1], k));
            let bn = g.constant(Tensor::new(vec![1, c, 1, 1], b));
            let scaled = g.mul(x, kn)?;
            g.add(scaled, bn)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_sigma_is_largest_entry() {
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut rng = Rng::new(20);
        let st = SpectralState::init("t", 2, &mut rng);
        let (w_hat, _, sigma) = spectral_normalize_value(&w, &st, 100).unwrap();
        assert!((sigma - 3.0).abs() < 1e-6, "sigma {sigma}");
        for (got, want) in w_hat.data().iter().zip(w.data()) {
            assert!((got - want / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_sigma_weight_is_fixed_point() {
        // Orthogonal-ish: rotation matrix has all singular values 1.
        let (c, s) = (0.6_f64, 0.8_f64);
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![c, -s, s, c]).unwrap();
        let mut rng = Rng::new(21);
        let st = SpectralState::init("t", 2, &mut rng);
        let (w_hat, _, _) = spectral_normalize_value(&w, &st, 50).unwrap();
        assert!(w_hat.max_abs_diff(&w) < 1e-3);
    }

    #[test]
    fn zero_weight_is_degenerate() {
        let w = Tensor::<f64>::zeros(&[3, 3]);
        let mut rng = Rng::new(22);
        let st = SpectralState::init("t", 3, &mut rng);
        assert!(matches!(
            spectral_normalize_value(&w, &st, 10),
            Err(Error::DegenerateWeight { .. })
        ));
    }

    #[test]
    fn u_stays_unit_norm() {
        let mut rng = Rng::new(23);
        let w = Tensor::<f64>::new(
            vec![8, 8],
            (0..64).map(|_| rng.range(-1.0, 1.0)).collect(),
        );
        let st = SpectralState::init("t", 8, &mut rng);
        let (_, u, _) = spectral_normalize_value(&w, &st, 7).unwrap();
        let norm: f64 = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eval_batch_norm_with_unit_stats_is_identity() {
        let mut st = BatchNormState::<f64>::init("bn", 3);
        st.running_mean = Tensor::zeros(&[3]);
        st.running_var = Tensor::full(&[3], 1.0);
        let x = Tensor::from_vec(&[1, 3, 1, 2], vec![0.5, -0.25, 1.0, 2.0, -1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let y = batch_norm(&mut g, xv, &mut st, Mode::Eval).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn train_updates_running_stats_frozen_does_not() {
        let mut rng = Rng::new(24);
        let x = Tensor::<f64>::new(
            vec![2, 1, 2, 2],
            (0..8).map(|_| rng.range(0.0, 4.0)).collect(),
        );
        let mut st = BatchNormState::<f64>::init("bn", 1);
        let before = st.running_mean.clone();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        batch_norm(&mut g, xv, &mut st, Mode::Frozen).unwrap();
        assert_eq!(st.running_mean.data(), before.data());
        batch_norm(&mut g, xv, &mut st, Mode::Train).unwrap();
        assert!(st.running_mean.data()[0] != 0.0);
        assert!(st.running_var.data()[0] >= 0.0);
    }
}
