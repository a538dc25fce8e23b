//! Softmax regression and the local SGD loop run by each client.

use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(other) {
            *s += a * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ModelVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A finite-sum objective `(1/n) sum_j f(x, j)` evaluated on sample batches.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn num_samples(&self) -> usize;

    /// Mean loss and its gradient over `batch` (indices in `0..num_samples`).
    fn loss_and_grad(&self, x: &[f64], batch: &[usize]) -> Result<(f64, ModelVector)>;

    fn full_loss_and_grad(&self, x: &[f64]) -> Result<(f64, ModelVector)> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.loss_and_grad(x, &all)
    }
}

/// Parameter layout of multiclass logistic regression: a `C x f` weight
/// matrix (row-major) followed by `C` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxLayout {
    pub features: usize,
    pub classes: usize,
}

impl SoftmaxLayout {
    pub fn for_dataset(data: &Dataset) -> Self {
        Self {
            features: data.num_features(),
            classes: data.num_classes(),
        }
    }

    pub fn dim(&self) -> usize {
        self.classes * self.features + self.classes
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::arg(format!(
                "model has {} parameters, layout needs {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Writes the class probabilities of one feature row into `out`.
    fn probs_into(&self, x: &[f64], row: &[f32], out: &mut [f64]) {
        let f = self.features;
        let bias = &x[self.classes * f..];
        for (c, o) in out.iter_mut().enumerate() {
            let w = &x[c * f..(c + 1) * f];
            let dot: f64 = w.iter().zip(row).map(|(a, &b)| a * b as f64).sum();
            *o = dot + bias[c];
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}

/// Probability rows for each feature row in `rows`.
pub fn softmax_probs(layout: SoftmaxLayout, x: &[f64], rows: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    layout.check(x)?;
    rows.iter()
        .map(|row| {
            if row.len() != layout.features {
                return Err(Error::arg(format!(
                    "feature row has width {}, model expects {}",
                    row.len(),
                    layout.features
                )));
            }
            let mut p = vec![0.0; layout.classes];
            layout.probs_into(x, row, &mut p);
            Ok(p)
        })
        .collect()
}

/// Cross-entropy of softmax regression over a subset of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxObjective<'a> {
    data: &'a Dataset,
    indices: Option<&'a [usize]>,
    layout: SoftmaxLayout,
}

impl<'a> SoftmaxObjective<'a> {
    /// Objective over every row of `data`.
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            data,
            indices: None,
            layout: SoftmaxLayout::for_dataset(data),
        }
    }

    /// Objective over the rows listed in `indices` (a client shard).
    pub fn on_shard(data: &'a Dataset, indices: &'a [usize]) -> Self {
        Self {
            data,
            indices: Some(indices),
            layout: SoftmaxLayout::for_dataset(data),
        }
    }

    pub fn layout(&self) -> SoftmaxLayout {
        self.layout
    }

    fn sample(&self, j: usize) -> usize {
        match self.indices {
            Some(idx) => idx[j],
            None => j,
        }
    }
}

impl Objective for SoftmaxObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn num_samples(&self) -> usize {
        self.indices.map_or(self.data.len(), <[usize]>::len)
    }

    fn loss_and_grad(&self, x: &[f64], batch: &[usize]) -> Result<(f64, ModelVector)> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        self.layout.check(x)?;
        let (f, classes) = (self.layout.features, self.layout.classes);
        let mut grad = ModelVector::zeros(self.layout.dim());
        let mut probs = vec![0.0; classes];
        let mut loss = 0.0;
        for &j in batch {
            let i = self.sample(j);
            let row = self.data.row(i);
            let y = self.data.label(i);
            self.layout.probs_into(x, row, &mut probs);
            loss -= probs[y].max(f64::MIN_POSITIVE).ln();
            probs[y] -= 1.0;
            for (c, &err) in probs.iter().enumerate() {
                if err == 0.0 {
                    continue;
                }
                let g = &mut grad[c * f..(c + 1) * f];
                for (gk, &v) in g.iter_mut().zip(row) {
                    *gk += err * v as f64;
                }
                grad[classes * f + c] += err;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }
}

/// `(1/n) sum_j (lambda/2) |x - c_j|^2`; used to check optimizers and
/// constant estimators against closed forms.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub lambda: f64,
    pub centers: Vec<Vec<f64>>,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    fn num_samples(&self) -> usize {
        self.centers.len()
    }

    fn loss_and_grad(&self, x: &[f64], batch: &[usize]) -> Result<(f64, ModelVector)> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut grad = ModelVector::zeros(x.len());
        let mut loss = 0.0;
        for &j in batch {
            for ((g, xi), ci) in grad.iter_mut().zip(x).zip(&self.centers[j]) {
                let r = xi - ci;
                loss += 0.5 * self.lambda * r * r;
                *g += self.lambda * r;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }
}

/// Record of one local SGD run started at `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdTrajectory {
    /// `updates[k]` is `x_k - x_0`; `updates[0]` is all zeros.
    pub updates: Vec<ModelVector>,
    /// Norm of the stochastic gradient taken at step `k` (length = steps).
    pub grad_norms: Vec<f64>,
    /// Sample indices drawn at each step.
    pub batches: Vec<Vec<usize>>,
}

impl SgdTrajectory {
    pub fn steps(&self) -> usize {
        self.updates.len() - 1
    }

    pub fn update(&self, k: usize) -> &ModelVector {
        &self.updates[k]
    }

    pub fn update_norm(&self, k: usize) -> f64 {
        self.updates[k].norm()
    }
}

/// Step-by-step local SGD so callers can stop as soon as a condition holds.
///
/// The iterate is kept as `x0 + delta` and `delta` accumulates `-eta * g_k`
/// in step order, which makes `delta` replayable bit-for-bit from the
/// recorded batches.
pub struct LocalSgd<'a, O: Objective + ?Sized> {
    objective: &'a O,
    x0: &'a [f64],
    eta: f64,
    batch_size: usize,
    rng: SimRng,
    current: Vec<f64>,
    trajectory: SgdTrajectory,
}

impl<'a, O: Objective + ?Sized> LocalSgd<'a, O> {
    pub fn new(
        objective: &'a O,
        x0: &'a [f64],
        eta: f64,
        batch_size: usize,
        rng: SimRng,
    ) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::arg(format!("step size must be positive, got {eta}")));
        }
        if batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if objective.num_samples() == 0 {
            return Err(Error::arg("client shard is empty"));
        }
        if x0.len() != objective.dim() {
            return Err(Error::arg("initial model has the wrong dimension"));
        }
        Ok(Self {
            objective,
            x0,
            eta,
            batch_size,
            rng,
            current: x0.to_vec(),
            trajectory: SgdTrajectory {
                updates: vec![ModelVector::zeros(x0.len())],
                grad_norms: Vec::new(),
                batches: Vec::new(),
            },
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.trajectory.steps()
    }

    /// Takes one step and returns the accumulated update `x_k - x_0`.
    pub fn step(&mut self) -> Result<&ModelVector> {
        let n = self.objective.num_samples();
        let batch: Vec<usize> = (0..self.batch_size)
            .map(|_| self.rng.gen_range(0..n))
            .collect();
        let (_, g) = self.objective.loss_and_grad(&self.current, &batch)?;
        let mut delta = self.trajectory.updates.last().expect("non-empty").clone();
        delta.axpy(-self.eta, &g);
        for ((c, x), d) in self.current.iter_mut().zip(self.x0).zip(delta.iter()) {
            *c = x + d;
        }
        self.trajectory.grad_norms.push(g.norm());
        self.trajectory.batches.push(batch);
        self.trajectory.updates.push(delta);
        Ok(self.trajectory.updates.last().expect("non-empty"))
    }

    pub fn trajectory(&self) -> &SgdTrajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> SgdTrajectory {
        self.trajectory
    }
}

/// Runs `k_max` local SGD steps with minibatches drawn uniformly with
/// replacement from the objective's samples.
pub fn local_sgd<O: Objective + ?Sized>(
    x0: &[f64],
    objective: &O,
    eta: f64,
    k_max: usize,
    batch_size: usize,
    rng: SimRng,
) -> Result<SgdTrajectory> {
    if k_max == 0 {
        return Err(Error::arg("need at least one local step"));
    }
    let mut run = LocalSgd::new(objective, x0, eta, batch_size, rng)?;
    for _ in 0..k_max {
        run.step()?;
    }
    Ok(run.into_trajectory())
}

/// Mean cross-entropy and argmax accuracy on `test`. Ties in the argmax go
/// to the lowest class index.
pub fn evaluate(x: &[f64], test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::arg("empty test set"));
    }
    let layout = SoftmaxLayout::for_dataset(test);
    layout.check(x)?;
    let mut probs = vec![0.0; layout.classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..test.len() {
        layout.probs_into(x, test.row(i), &mut probs);
        let y = test.label(i);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        let mut best = 0;
        for c in 1..probs.len() {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = test.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    use super::*;
    use crate::data::synthetic_logreg;
    use crate::rng::{substream, Purpose};

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn random_point(d: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..d)
            .map(|_| scale * crate::rng::standard_normal(&mut r))
            .collect()
    }

    #[test]
    fn zero_model_gives_uniform_probs_and_ln_c_loss() {
        let ds = synthetic_logreg(4, 40, 5, 3.0, 1).unwrap();
        let layout = SoftmaxLayout::for_dataset(&ds);
        let x = vec![0.0; layout.dim()];
        let rows: Vec<&[f32]> = (0..ds.len()).map(|i| ds.row(i)).collect();
        for p in softmax_probs(layout, &x, &rows).unwrap() {
            for v in p {
                assert_relative_eq!(v, 0.2, epsilon = 1e-15);
            }
        }
        let obj = SoftmaxObjective::new(&ds);
        let (loss, _) = obj.full_loss_and_grad(&x).unwrap();
        assert_relative_eq!(loss, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn probs_are_normalized_and_shift_invariant() {
        let ds = synthetic_logreg(6, 30, 4, 2.0, 2).unwrap();
        let layout = SoftmaxLayout::for_dataset(&ds);
        let x = random_point(layout.dim(), 3, 3.0);
        let mut shifted = x.clone();
        // adding a constant to every bias shifts each logit row by that constant
        for b in &mut shifted[layout.classes * layout.features..] {
            *b += 17.5;
        }
        let rows: Vec<&[f32]> = (0..ds.len()).map(|i| ds.row(i)).collect();
        let p = softmax_probs(layout, &x, &rows).unwrap();
        let q = softmax_probs(layout, &shifted, &rows).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.iter().all(|v| *v >= 0.0));
            for (u, v) in a.iter().zip(b) {
                assert_relative_eq!(u, v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_probs_rejects_shape_mismatch() {
        let layout = SoftmaxLayout {
            features: 3,
            classes: 2,
        };
        let x = vec![0.0; layout.dim()];
        let row = [0.0f32; 2];
        assert!(matches!(
            softmax_probs(layout, &x, &[&row[..]]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            softmax_probs(layout, &x[1..], &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let ds = synthetic_logreg(2, 10, 2, 1.0, 0).unwrap();
        let obj = SoftmaxObjective::new(&ds);
        let x = vec![0.0; obj.dim()];
        assert!(matches!(
            obj.loss_and_grad(&x, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn binary_single_feature_gradient_closed_form() {
        // one sample, feature v, label 1; x = [w0, w1, b0, b1]
        let v = 0.75f32;
        let ds = Dataset::new(vec![v], vec![1], 1, 2).unwrap();
        let obj = SoftmaxObjective::new(&ds);
        let x = [0.3, -0.2, 0.1, 0.4];
        let z0 = 0.3 * v as f64 + 0.1;
        let z1 = -0.2 * v as f64 + 0.4;
        let p1 = z1.exp() / (z0.exp() + z1.exp());
        let p0 = 1.0 - p1;
        let (loss, g) = obj.loss_and_grad(&x, &[0]).unwrap();
        assert_relative_eq!(loss, -p1.ln(), epsilon = 1e-14);
        let expected = [p0 * v as f64, (p1 - 1.0) * v as f64, p0, p1 - 1.0];
        for (a, b) in g.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn sgd_zero_step_rejected_and_tiny_step_vanishes() {
        let ds = synthetic_logreg(3, 20, 2, 2.0, 4).unwrap();
        let obj = SoftmaxObjective::new(&ds);
        let x0 = vec![0.0; obj.dim()];
        assert!(matches!(
            local_sgd(&x0, &obj, 0.0, 3, 4, rng(0)),
            Err(Error::Argument(_))
        ));
        let traj = local_sgd(&x0, &obj, 1e-12, 3, 4, rng(0)).unwrap();
        assert_eq!(traj.update(0).norm(), 0.0);
        assert!(traj.update_norm(3) < 1e-10);
    }

    #[test]
    fn sgd_empty_shard_rejected() {
        let ds = synthetic_logreg(3, 20, 2, 2.0, 4).unwrap();
        let empty: Vec<usize> = Vec::new();
        let obj = SoftmaxObjective::on_shard(&ds, &empty);
        let x0 = vec![0.0; obj.dim()];
        assert!(matches!(
            local_sgd(&x0, &obj, 0.1, 3, 4, rng(0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sgd_one_step_matches_replayed_gradient() {
        let ds = synthetic_logreg(5, 60, 3, 2.0, 5).unwrap();
        let obj = SoftmaxObjective::new(&ds);
        let x0 = random_point(obj.dim(), 8, 0.1);
        let stream = substream(11, 2, 3, Purpose::LocalSgd);
        let traj = local_sgd(&x0, &obj, 0.3, 1, 8, stream.clone()).unwrap();
        // replay: draw the same batch from a copy of the stream
        let mut replay = stream;
        let batch: Vec<usize> = (0..8).map(|_| replay.gen_range(0..ds.len())).collect();
        assert_eq!(batch, traj.batches[0]);
        let (_, g) = obj.loss_and_grad(&x0, &batch).unwrap();
        for (u, gi) in traj.update(1).iter().zip(g.iter()) {
            assert_eq!(*u, -0.3 * gi);
        }
    }

    #[test]
    fn sgd_quadratic_contracts_geometrically() {
        let a = 2.5;
        let obj = QuadraticObjective {
            lambda: 1.0,
            centers: vec![vec![a]; 4],
        };
        let x0 = [-1.0];
        let eta = 0.3;
        let traj = local_sgd(&x0, &obj, eta, 12, 2, rng(1)).unwrap();
        for k in 0..=12 {
            let xk = x0[0] + traj.update(k)[0];
            let expected = (1.0f64 - eta).powi(k as i32) * (x0[0] - a).abs();
            assert_relative_eq!((xk - a).abs(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn evaluate_zero_model_on_balanced_set() {
        let ds = synthetic_logreg(3, 50, 5, 2.0, 6).unwrap();
        let x = vec![0.0; SoftmaxLayout::for_dataset(&ds).dim()];
        let (loss, acc) = evaluate(&x, &ds).unwrap();
        assert_relative_eq!(loss, 5f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(acc, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn evaluate_separable_toy_set() {
        // four points, two classes separated along the first coordinate
        let features = vec![0.0, 0.2, 0.1, 0.9, 1.0, 0.1, 0.9, 0.8];
        let ds = Dataset::new(features, vec![0, 0, 1, 1], 2, 2).unwrap();
        let obj = SoftmaxObjective::new(&ds);
        let mut x = vec![0.0; obj.dim()];
        for _ in 0..2000 {
            let (_, g) = obj.full_loss_and_grad(&x).unwrap();
            for (xi, gi) in x.iter_mut().zip(g.iter()) {
                *xi -= 2.0 * gi;
            }
        }
        let (_, acc) = evaluate(&x, &ds).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn evaluate_is_row_order_invariant() {
        let ds = synthetic_logreg(4, 40, 4, 1.0, 7).unwrap();
        let x = random_point(SoftmaxLayout::for_dataset(&ds).dim(), 9, 1.0);
        let rev: Vec<usize> = (0..ds.len()).rev().collect();
        let (l1, a1) = evaluate(&x, &ds).unwrap();
        let (l2, a2) = evaluate(&x, &ds.subset(&rev).unwrap()).unwrap();
        assert_relative_eq!(l1, l2, epsilon = 1e-12);
        assert_eq!(a1, a2);
    }
}
