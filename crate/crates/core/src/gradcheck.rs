//! Central finite-difference verification of analytic gradients.
//!
//! Run these checks in `f64`: the comparisons need headroom that training
//! precision does not have.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Checks the gradient of a scalar-valued function of one tensor against
/// central finite differences at every coordinate. Returns the maximum
/// relative error `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// over all coordinates.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_sampled(f, x, step, None)
}

/// Like [`finite_diff_check`], but probing only `max_coords` deterministically
/// sampled coordinates when given. Composite blocks with many thousands of
/// coordinates are checked this way to keep the suite fast.
pub fn finite_diff_check_sampled<T, F>(
    f: F,
    x: &Tensor<T>,
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }

    // Analytic gradient.
    let mut graph = Graph::new();
    let input = graph.leaf(x.clone(), true);
    let out = f(&mut graph, input)?;
    if graph.value(out).len() != 1 {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("f must be scalar-valued, got {:?}", graph.shape(out)),
        ));
    }
    let grads = graph.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let o = f(&mut g, v)?;
        Ok(g.value(o).item()?.as_f64())
    };

    let coords: Vec<usize> = match max_coords {
        Some(k) if k < x.len() => {
            let mut all: Vec<usize> = (0..x.len()).collect();
            let mut sampler = Rng::new(0x5eed_c0de ^ x.len() as u64);
            sampler.shuffle(&mut all);
            all.truncate(k);
            all
        }
        _ => (0..x.len()).collect(),
    };

    let mut max_err = 0.0_f64;
    let mut data = x.data().to_vec();
    for &i in &coords {
        let orig = data[i];
        data[i] = orig + T::from_f64(step);
        let plus = eval(&Tensor::new(x.shape().to_vec(), data.clone()))?;
        data[i] = orig - T::from_f64(step);
        let minus = eval(&Tensor::new(x.shape().to_vec(), data.clone()))?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic.data()[i].as_f64(), numeric);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// Finite-difference check against a *named parameter* of a recorded model.
/// `f` receives the graph plus the current value of the probed tensor and
/// must wire that value in under `param_name` (typically by substituting it
/// into a parameter struct before calling the block). The analytic side reads
/// the named gradient; the numeric side perturbs the value.
pub fn finite_diff_check_named<T, F>(
    f: F,
    x: &Tensor<T>,
    param_name: &str,
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Tensor<T>) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    let mut graph = Graph::new();
    let out = f(&mut graph, x)?;
    let grads = graph.backward(out)?;
    let named = graph.named_gradients(&grads);
    let analytic = named.get(param_name).cloned().ok_or_else(|| {
        Error::invalid(
            "finite_diff_check",
            format!("no parameter named {param_name} in the graph"),
        )
    })?;

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let o = f(&mut g, t)?;
        Ok(g.value(o).item()?.as_f64())
    };

    let coords: Vec<usize> = match max_coords {
        Some(k) if k < x.len() => {
            let mut all: Vec<usize> = (0..x.len()).collect();
            let mut sampler = Rng::new(0x9a7a_11e1 ^ x.len() as u64);
            sampler.shuffle(&mut all);
            all.truncate(k);
            all
        }
        _ => (0..x.len()).collect(),
    };

    let mut max_err = 0.0_f64;
    let mut data = x.data().to_vec();
    for &i in &coords {
        let orig = data[i];
        data[i] = orig + T::from_f64(step);
        let plus = eval(&Tensor::new(x.shape().to_vec(), data.clone()))?;
        data[i] = orig - T::from_f64(step);
        let minus = eval(&Tensor::new(x.shape().to_vec(), data.clone()))?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic.data()[i].as_f64(), numeric);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// Finite-difference check of a function of several named tensors, probing
/// each tensor in turn while holding the others fixed. `build` receives the
/// graph plus one node per tensor, in order. Returns the maximum relative
/// error over every probed coordinate of every tensor.
pub fn finite_diff_check_multi<T, F>(
    build: F,
    tensors: &[Tensor<T>],
    step: f64,
    max_coords_per_tensor: Option<usize>,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut max_err = 0.0_f64;
    for probe in 0..tensors.len() {
        let err = finite_diff_check_sampled(
            |g, x| {
                let vars: Vec<Var> = tensors
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == probe { x } else { g.leaf(t.clone(), false) })
                    .collect();
                build(g, &vars)
            },
            &tensors[probe],
            step,
            max_coords_per_tensor,
        )?;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
