//! Central finite-difference verification of vector-Jacobian products.
//!
//! For an operation `f` and a random projection `r` of its output, the
//! scalar `s(x) = ⟨r, f(x)⟩` has gradient `vjp(r)`. Every scalar component
//! of every input is perturbed by `±eps` and the resulting difference
//! quotient compared against that gradient. The reported error per
//! component is `|g_a − g_fd| / max(1, |g_a|, |g_fd|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    /// Number of scalar components probed.
    pub components: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn random_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let mut r = t.zeros_like();
    for i in 0..r.scalar_count() {
        r.set_flat(i, rng.random_range(-1.0..1.0));
    }
    r
}

/// Checks an arbitrary function against a hand-supplied VJP.
///
/// `vjp(inputs, output, projection)` must return one cotangent per input,
/// laid out like the input.
pub fn gradcheck_fn<F, G>(
    name: &str,
    f: F,
    vjp: G,
    inputs: &[Tensor],
    eps: f64,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&[Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("gradcheck step must be positive, got {eps}")));
    }
    let non_finite = || Error::NonFinite { op: name.to_string() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let out = f(inputs)?;
    if !out.is_finite() {
        return Err(non_finite());
    }
    let projection = random_like(&out, &mut rng);
    let analytic = vjp(inputs, &out, &projection)?;
    if analytic.len() != inputs.len() {
        return Err(Error::shape("gradcheck", format!("{name}: vjp returned {} cotangents for {} inputs", analytic.len(), inputs.len())));
    }

    let mut point = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut components = 0;
    for (k, ga) in analytic.iter().enumerate() {
        if !ga.same_layout(&inputs[k]) {
            return Err(Error::shape("gradcheck", format!("{name}: cotangent {k} has the wrong layout")));
        }
        if !ga.is_finite() {
            return Err(non_finite());
        }
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].scalar_count() {
            let x0 = inputs[k].get_flat(i);
            point[k].set_flat(i, x0 + eps);
            let plus = f(&point)?.dot(&projection);
            point[k].set_flat(i, x0 - eps);
            let minus = f(&point)?.dot(&projection);
            point[k].set_flat(i, x0);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(non_finite());
            }
            let fd = (plus - minus) / (2.0 * eps);
            let a = ga.get_flat(i);
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
            components += 1;
        }
        per_input.push(worst);
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        components,
    })
}

/// Checks a registered [`Op`] at the given input point.
pub fn gradcheck(op: &dyn Op, inputs: &[Tensor], eps: f64, seed: u64) -> Result<GradcheckReport> {
    gradcheck_fn(
        op.name(),
        |xs| {
            let refs: Vec<&Tensor> = xs.iter().collect();
            op.forward(&refs)
        },
        |xs, out, r| {
            let refs: Vec<&Tensor> = xs.iter().collect();
            let wants = vec![true; xs.len()];
            let grads = op.vjp(&refs, out, r, &wants)?;
            Ok(grads
                .into_iter()
                .zip(xs)
                .map(|(g, x)| g.unwrap_or_else(|| x.zeros_like()))
                .collect())
        },
        inputs,
        eps,
        seed,
    )
}
