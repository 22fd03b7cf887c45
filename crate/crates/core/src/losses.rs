//! Classical losses (L1, L2, perceptual) and the least-squares adversarial
//! objective. The total generator loss is
//! `adversarial_weight * adversarial + lambda_classical * classical`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassicalKind {
    L1,
    L2,
    Perceptual,
}

impl ClassicalKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassicalKind::L1 => "l1",
            ClassicalKind::L2 => "l2",
            ClassicalKind::Perceptual => "perceptual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(ClassicalKind::L1),
            "l2" => Ok(ClassicalKind::L2),
            "perceptual" => Ok(ClassicalKind::Perceptual),
            other => Err(Error::invalid("loss", format!("unknown classical loss {other:?}"))),
        }
    }

    /// Conventional weight for this loss when mixed with the adversarial
    /// term.
    pub fn default_lambda(self) -> f64 {
        match self {
            ClassicalKind::L1 | ClassicalKind::L2 => 100.0,
            ClassicalKind::Perceptual => 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub classical_kind: ClassicalKind,
    pub lambda_classical: f64,
    pub adversarial_weight: f64,
}

impl LossWeights {
    pub fn new(kind: ClassicalKind) -> Self {
        LossWeights {
            classical_kind: kind,
            lambda_classical: kind.default_lambda(),
            adversarial_weight: 1.0,
        }
    }
}

fn check_same_shape<T: Scalar>(op: &'static str, g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, r: Var, s: Var) -> Result<Var> {
    check_same_shape("l1_loss", g, r, s)?;
    let d = g.sub(r, s)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Mean squared difference.
pub fn l2_loss<T: Scalar>(g: &mut Graph<T>, r: Var, s: Var) -> Result<Var> {
    check_same_shape("l2_loss", g, r, s)?;
    let d = g.sub(r, s)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Fixed (non-trainable) convolutional feature stack standing in for a
/// pretrained perceptual backbone: three stride-2 layers of widths 16/32/64
/// with seed-deterministic weights, frozen for the life of a run.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Scalar> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn init(rng: &mut Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for cout in Self::WIDTHS {
            let n = cout * cin * 9;
            weights.push(Tensor::new(
                vec![cout, cin, 3, 3],
                (0..n).map(|_| T::from_f64(rng.truncated_normal(0.1))).collect(),
            ));
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        FeatureExtractor { weights, biases }
    }

    /// `[N,3,H,W] -> [N,64,H/8,W/8]`, differentiable w.r.t. the input only.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wn = g.constant(w.clone());
            let bn = g.constant(b.clone());
            h = g.conv2d(h, wn, bn, 2, Padding::Same)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

/// Mean squared difference in feature space.
pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<T>,
    r: Var,
    s: Var,
    phi: &FeatureExtractor<T>,
) -> Result<Var> {
    check_same_shape("perceptual_loss", g, r, s)?;
    let fr = phi.features(g, r)?;
    let fs = phi.features(g, s)?;
    let d = g.sub(fr, fs)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

pub fn classical_loss<T: Scalar>(
    g: &mut Graph<T>,
    kind: ClassicalKind,
    r: Var,
    s: Var,
    phi: &FeatureExtractor<T>,
) -> Result<Var> {
    match kind {
        ClassicalKind::L1 => l1_loss(g, r, s),
        ClassicalKind::L2 => l2_loss(g, r, s),
        ClassicalKind::Perceptual => perceptual_loss(g, r, s, phi),
    }
}

/// Least-squares generator objective: `0.5 * mean((d_fake - 1)^2)`.
pub fn adversarial_g_loss<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    let one = g.constant(Tensor::scalar(T::one()));
    let d = g.sub(d_fake, one)?;
    let sq = g.mul(d, d)?;
    let m = g.mean_all(sq);
    let half = g.constant(Tensor::scalar(T::from_f64(0.5)));
    g.mul(m, half)
}

/// Least-squares discriminator objective:
/// `0.5 * mean((d_real - 1)^2) + 0.5 * mean(d_fake^2)`.
pub fn adversarial_d_loss<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    check_same_shape("adversarial_d_loss", g, d_real, d_fake)?;
    let one = g.constant(Tensor::scalar(T::one()));
    let dr = g.sub(d_real, one)?;
    let dr2 = g.mul(dr, dr)?;
    let real_term = g.mean_all(dr2);
    let df2 = g.mul(d_fake, d_fake)?;
    let fake_term = g.mean_all(df2);
    let sum = g.add(real_term, fake_term)?;
    let half = g.constant(Tensor::scalar(T::from_f64(0.5)));
    g.mul(sum, half)
}

/// Value-level evaluation of both adversarial objectives from raw patch
/// scores; returns `(g_loss, d_loss)`.
pub fn adversarial_losses<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<(T, T)> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "adversarial_losses",
            lhs: d_real.shape().to_vec(),
            rhs: d_fake.shape().to_vec(),
        });
    }
    let n = T::from_usize(d_real.len());
    let half = T::from_f64(0.5);
    let mean_sq = |t: &Tensor<T>, shift: T| -> T {
        t.data().iter().map(|&v| (v - shift) * (v - shift)).sum::<T>() / n
    };
    let g_loss = half * mean_sq(d_fake, T::one());
    let d_loss = half * (mean_sq(d_real, T::one()) + mean_sq(d_fake, T::zero()));
    Ok((g_loss, d_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    }

    fn eval_loss(
        f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
        a: &Tensor<f64>,
        b: &Tensor<f64>,
    ) -> f64 {
        let mut g = Graph::new();
        let va = g.leaf(a.clone(), false);
        let vb = g.leaf(b.clone(), false);
        let l = f(&mut g, va, vb).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn identical_inputs_have_zero_loss() {
        let mut rng = Rng::new(60);
        let x = random_tensor(&mut rng, &[1, 3, 8, 8]);
        assert_eq!(eval_loss(l1_loss, &x, &x), 0.0);
        assert_eq!(eval_loss(l2_loss, &x, &x), 0.0);
        let phi = FeatureExtractor::init(&mut rng);
        assert_eq!(eval_loss(|g, a, b| perceptual_loss(g, a, b, &phi), &x, &x), 0.0);
    }

    #[test]
    fn constant_difference_values() {
        let a = Tensor::full(&[2, 3, 4, 4], 0.75);
        let b = Tensor::full(&[2, 3, 4, 4], 0.25);
        assert!((eval_loss(l1_loss, &a, &b) - 0.5).abs() < 1e-12);
        assert!((eval_loss(l2_loss, &a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_loop_oracle() {
        let mut rng = Rng::new(61);
        let a = random_tensor(&mut rng, &[2, 3, 5, 5]);
        let b = random_tensor(&mut rng, &[2, 3, 5, 5]);
        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            acc += (x - y).abs();
        }
        let oracle = acc / a.len() as f64;
        assert!((eval_loss(l1_loss, &a, &b) - oracle).abs() < 1e-7);
    }

    #[test]
    fn symmetry_and_scale_identity() {
        let mut rng = Rng::new(62);
        let a = random_tensor(&mut rng, &[1, 3, 6, 6]);
        let b = random_tensor(&mut rng, &[1, 3, 6, 6]);
        assert_eq!(eval_loss(l1_loss, &a, &b), eval_loss(l1_loss, &b, &a));
        assert_eq!(eval_loss(l2_loss, &a, &b), eval_loss(l2_loss, &b, &a));
        let scale = 3.0;
        let sa = a.map(|v| v * scale);
        let sb = b.map(|v| v * scale);
        let lhs = eval_loss(l2_loss, &sa, &sb);
        let rhs = scale * scale * eval_loss(l2_loss, &a, &b);
        assert!((lhs - rhs).abs() < 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
        let b = g.leaf(Tensor::zeros(&[1, 3, 5, 5]), false);
        assert!(l1_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn perfect_discriminator_has_zero_loss() {
        let d_real = Tensor::full(&[1, 1, 4, 4], 1.0);
        let d_fake = Tensor::zeros(&[1, 1, 4, 4]);
        let (_, d) = adversarial_losses(&d_real, &d_fake).unwrap();
        assert_eq!(d, 0.0);

        let fooled = Tensor::full(&[1, 1, 4, 4], 1.0);
        let (g_loss, _) = adversarial_losses(&d_real, &fooled).unwrap();
        assert_eq!(g_loss, 0.0);
    }

    #[test]
    fn adversarial_graph_route_matches_formula() {
        let mut rng = Rng::new(63);
        let d_real = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let d_fake = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let (g_want, d_want) = adversarial_losses(&d_real, &d_fake).unwrap();

        let mut g = Graph::new();
        let vr = g.leaf(d_real, false);
        let vf = g.leaf(d_fake, false);
        let gl = adversarial_g_loss(&mut g, vf).unwrap();
        let dl = adversarial_d_loss(&mut g, vr, vf).unwrap();
        assert!((g.value(gl).item().unwrap() - g_want).abs() < 1e-7);
        assert!((g.value(dl).item().unwrap() - d_want).abs() < 1e-7);
    }

    #[test]
    fn g_loss_decreases_as_fake_scores_approach_one() {
        let base = Tensor::full(&[1, 1, 2, 2], 0.2);
        let closer = Tensor::full(&[1, 1, 2, 2], 0.6);
        let real = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (g_far, _) = adversarial_losses(&real, &base).unwrap();
        let (g_near, _) = adversarial_losses(&real, &closer).unwrap();
        assert!(g_near < g_far);
    }

    #[test]
    fn feature_extractor_is_seed_deterministic_and_loss_nonnegative() {
        let a = FeatureExtractor::<f64>::init(&mut Rng::new(64));
        let b = FeatureExtractor::<f64>::init(&mut Rng::new(64));
        let mut rng = Rng::new(65);
        let x = random_tensor(&mut rng, &[1, 3, 8, 8]);
        let y = random_tensor(&mut rng, &[1, 3, 8, 8]);
        let la = eval_loss(|g, r, s| perceptual_loss(g, r, s, &a), &x, &y);
        let lb = eval_loss(|g, r, s| perceptual_loss(g, r, s, &b), &x, &y);
        assert_eq!(la, lb);
        assert!(la >= 0.0);
    }
}
