use super::{Rng, Tensor};
use crate::error::{bail, Result};

/// A scalar objective over a parameter list.
///
/// Closures returning `(loss, grads)` implement this directly; types that
/// can compute the loss more cheaply without gradients override
/// [`Objective::loss`].
pub trait Objective {
    fn loss_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;

    fn loss(&mut self, params: &[Tensor]) -> Result<f64> {
        self.loss_and_grad(params).map(|(l, _)| l)
    }
}

impl<F> Objective for F
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    fn loss_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self(params)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per tensor (random subset plus
    /// the coordinate with the largest analytic gradient). `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// where `floor = rel_floor * max |analytic|` over the tensor.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_tensor: None,
            rel_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorGradError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub loss: f64,
    pub tensors: Vec<TensorGradError>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        for (t, n) in self.tensors.iter_mut().zip(names) {
            t.name = n.as_ref().to_string();
        }
        self
    }

    /// The `k` tensors with the largest error, worst first.
    pub fn worst(&self, k: usize) -> Vec<&TensorGradError> {
        let mut v: Vec<_> = self.tensors.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(k);
        v
    }
}

/// Compares reverse-mode gradients from `objective` with central finite
/// differences, per parameter tensor.
pub fn check_gradients<O: Objective>(mut objective: O, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradReport> {
    let (loss, grads) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        bail!(Numerical, "gradient check: loss is {loss} at the base point");
    }
    if grads.len() != params.len() {
        bail!(Dimension, "objective returned {} gradients for {} parameters", grads.len(), params.len());
    }
    let mut rng = Rng::new(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradReport { loss, tensors: Vec::with_capacity(params.len()) };

    for (ti, grad) in grads.iter().enumerate() {
        if grad.shape() != params[ti].shape() {
            bail!(
                Dimension,
                "gradient {ti} has shape {:?}, parameter has {:?}",
                grad.shape(),
                params[ti].shape()
            );
        }
        let g = grad.data();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < g.len() => {
                let argmax = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
                let mut picked = vec![argmax];
                while picked.len() < k {
                    let i = rng.below(g.len());
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                picked
            }
            _ => (0..g.len()).collect(),
        };
        let floor = (opts.rel_floor * grad.max_abs()).max(1e-10);
        let mut entry = TensorGradError {
            name: format!("param{ti}"),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + opts.eps;
            let plus = objective.loss(&work)?;
            work[ti].data_mut()[i] = orig - opts.eps;
            let minus = objective.loss(&work)?;
            work[ti].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                bail!(Numerical, "gradient check: non-finite loss perturbing tensor {ti} index {i}");
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = g[i];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let err = (analytic - numeric).abs() / denom;
            if err > entry.max_rel_error || (err.is_nan() && !entry.max_rel_error.is_nan()) {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        report.tensors.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_gradients(
            |p: &[Tensor]| {
                let v = p[0].data();
                let loss = v.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum();
                let g = v.iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect();
                Ok((loss, vec![Tensor::new(&[3], g)?]))
            },
            &[x],
            &GradCheckOptions { eps: 1e-4, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_gradients(
            |p: &[Tensor]| {
                let v = p[0].data();
                let loss = v.iter().map(|x| x * x).sum();
                // wrong by a factor of 1.1
                let g = v.iter().map(|x| 2.2 * x).collect();
                Ok((loss, vec![Tensor::new(&[3], g)?]))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() > 1e-2);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = check_gradients(
            |p: &[Tensor]| Ok((f64::NAN, vec![p[0].clone()])),
            &[x],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(crate::Error::Numerical(_))));
    }
}
