//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest of the per-input errors.
    pub max_rel_error: f64,
    /// `|analytic - fd|_2 / max(|analytic|_2, |fd|_2, 1e-8)` for each input.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares reverse-mode gradients of `op` against central differences.
///
/// `op` maps the input variables to an output of any shape. The checked
/// scalar is `sum_i w_i * out_i`; with `weight_seed = None` all weights are
/// one, otherwise they are drawn uniformly from [-1, 1] so that every output
/// element contributes with a different sign and size. The finite-difference
/// objective is accumulated in f64 and divided by the step actually
/// representable in f32.
pub fn grad_check<F>(op: F, inputs: &[Tensor], step: f32, weight_seed: Option<u64>) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NnError>,
{
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(NnError::Shape(format!("finite-difference step must be positive, got {step}")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let weights = match weight_seed {
        None => Tensor::ones(g.shape(out).to_vec()),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(g.shape(out).to_vec(), |_| rng.random_range(-1.0f32..1.0))
        }
    };
    let wv = g.input(weights.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let objective = |xs: &[Tensor]| -> Result<f64, NnError> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let vals = g.value(out);
        if !vals.all_finite() {
            return Err(NnError::NonFinite("forward output".into()));
        }
        Ok(vals
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic: Vec<f64> = match grads.get(v) {
            Some(a) => a.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; n],
        };
        let mut fd = vec![0.0f64; n];
        for k in 0..n {
            let x0 = inputs[i].data()[k];
            let xp = x0 + step;
            let xm = x0 - step;
            xs[i].data_mut()[k] = xp;
            let fp = objective(&xs)?;
            xs[i].data_mut()[k] = xm;
            let fm = objective(&xs)?;
            xs[i].data_mut()[k] = x0;
            fd[k] = (fp - fm) / (xp as f64 - xm as f64);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let denom = norm(&analytic).max(norm(&fd)).max(1e-8);
        per_input.push(norm(&diff) / denom);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_gradient_two() {
        let x = Tensor::ones(vec![2, 3]);
        let report = grad_check(
            |g, v| {
                let sq = g.square(v[0]);
                Ok(g.sum(sq))
            },
            &[x.clone()],
            0.25,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        let mut g = Graph::new();
        let v = g.input_with_grad(x);
        let sq = g.square(v);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(v).unwrap().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp has zero gradient outside its range, so a step straddling the
        // kink at 0 disagrees with the one-sided analytic value.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = grad_check(|g, v| Ok(g.clamp(v[0], 0.0, 1.0)), &[x], 1e-2, None).unwrap();
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::ones(vec![1]);
        assert!(grad_check(|g, v| Ok(g.square(v[0])), &[x], 0.0, None).is_err());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let x = Tensor::full(vec![1], 100.0);
        let r = grad_check(|g, v| Ok(g.exp(v[0])), &[x], 1e-3, None);
        assert!(matches!(r, Err(NnError::NonFinite(_))));
    }
}
