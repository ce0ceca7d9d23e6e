//! Central finite-difference checks of reverse-mode gradients.
//!
//! The checked quantity is `L = sum(w * f(inputs))` for a fixed seeded
//! projection `w`, so any tensor-valued `f` reduces to a scalar whose
//! gradient exercises every output element.

use rand::Rng;

use super::{ops, Graph, Result, Tensor, Var};
use crate::rng::seeded;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn relative_error(a: &Tensor, n: &Tensor) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(n.data()) {
        diff += (x as f64 - y as f64).powi(2);
        na += (x as f64).powi(2);
        nn += (y as f64).powi(2);
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Compares reverse-mode gradients of `f` with respect to every input
/// against central differences with step `eps`. Inputs are registered as
/// trainable leaves.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f32, seed: u64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    // Forward once to learn the output shape and draw the projection.
    let probe = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_shape = f(&probe, &vars)?.shape();
    let mut rng = seeded(seed);
    let w = Tensor::from_fn(out_shape.clone(), |_| rng.gen_range(-1.0f32..1.0));

    let value = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&g, &vars)?.value();
        Ok(y.data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let graph = Graph::new();
    let params: Vec<Var<'_>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let y = f(&graph, &params)?;
    let n = y.value().len() as f32;
    let wv = graph.constant(w.clone());
    let root = ops::scale(ops::reduce_mean(ops::mul(y, wv)?)?, n);
    let mut grads = graph.backward(root)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .map(|&p| grads.take(p).expect("param gradient"))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            let (hi, lo) = (orig + eps, orig - eps);
            xs[k].data_mut()[i] = hi;
            let plus = value(&xs)?;
            xs[k].data_mut()[i] = lo;
            let minus = value(&xs)?;
            xs[k].data_mut()[i] = orig;
            // Divide by the step actually taken after f32 rounding.
            g.data_mut()[i] = ((plus - minus) / (hi as f64 - lo as f64)) as f32;
        }
        numeric.push(g);
    }
    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        rel_errors,
        analytic,
        numeric,
    })
}
