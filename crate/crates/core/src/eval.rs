//! Downstream evaluation: linear probe, fine-tuning, classification scores,
//! and generation metrics over encoder features.

use flowfm_tensor::{Adam, AdamState, ParamSet, Tape, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SignalBatch;
use crate::error::{Error, Result};
use crate::model::layers::{Init, Linear};
use crate::model::ModelBundle;
use crate::persist::params_fingerprint;

/// Covariance regularization added before matrix square roots.
pub const COV_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ProbeResult {
    pub fn from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&y, &p) in labels.iter().zip(preds) {
            confusion[y][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let accuracy = if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        };
        Self {
            accuracy,
            macro_f1: macro_f1(&confusion),
            confusion,
        }
    }
}

/// Unweighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let c = confusion.len();
    if c == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let predicted: usize = confusion.iter().map(|row| row[k]).sum();
        let actual: usize = confusion[k].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        if p + r > 0.0 {
            total += 2.0 * p * r / (p + r);
        }
    }
    total / c as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.1 }
    }
}

fn class_count(train: &[usize], eval: &[usize]) -> Result<usize> {
    let classes = train.iter().chain(eval).max().map_or(0, |m| m + 1);
    for c in 0..classes {
        if !train.contains(&c) && eval.contains(&c) {
            return Err(Error::Data(format!("class {c} is absent from the training split")));
        }
    }
    Ok(classes)
}

/// Per-column mean and standard deviation of `[n, d]` features.
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, d] = x.shape()[..] else { unreachable!() };
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    out
}

/// Multinomial logistic regression weights `[d + 1, C]`, bias last.
pub struct LinearClassifier {
    weights: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl LinearClassifier {
    /// Full-batch gradient descent on mean cross-entropy from zero weights.
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let [n, d] = x.shape()[..] else {
            return Err(Error::Invalid(format!("features must be [n, d], got {:?}", x.shape())));
        };
        if n != labels.len() || n == 0 {
            return Err(Error::Invalid(format!("{n} feature rows for {} labels", labels.len())));
        }
        let mut clf = Self {
            weights: vec![0.0; (d + 1) * classes],
            dim: d,
            classes,
        };
        let mut grad = vec![0.0; clf.weights.len()];
        let mut probs = vec![0.0; classes];
        for _ in 0..cfg.epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &y) in x.data().chunks(d).zip(labels) {
                clf.softmax(row, &mut probs);
                for c in 0..classes {
                    let delta = (probs[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
                    for j in 0..d {
                        grad[j * classes + c] += delta * row[j];
                    }
                    grad[d * classes + c] += delta;
                }
            }
            for (w, g) in clf.weights.iter_mut().zip(&grad) {
                *w -= cfg.lr * g;
            }
        }
        Ok(clf)
    }

    fn logits(&self, row: &[f64], out: &mut [f64]) {
        let c = self.classes;
        for k in 0..c {
            let mut z = self.weights[self.dim * c + k];
            for j in 0..self.dim {
                z += row[j] * self.weights[j * c + k];
            }
            out[k] = z;
        }
    }

    fn softmax(&self, row: &[f64], out: &mut [f64]) {
        self.logits(row, out);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        out.iter_mut().for_each(|v| *v /= sum);
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let mut z = vec![0.0; self.classes];
        x.data()
            .chunks(self.dim)
            .map(|row| {
                self.logits(row, &mut z);
                argmax(&z)
            })
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear probe on fixed features. Features are standardized with the
/// training-set statistics before fitting.
pub fn probe_features(
    train: &Tensor,
    train_labels: &[usize],
    eval: &Tensor,
    eval_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let classes = class_count(train_labels, eval_labels)?;
    let (mean, std) = column_stats(train);
    let clf = LinearClassifier::fit(&standardize(train, &mean, &std), train_labels, classes, cfg)?;
    let preds = clf.predict(&standardize(eval, &mean, &std));
    Ok(ProbeResult::from_predictions(eval_labels, &preds, classes))
}

/// Linear probe on the representations of a frozen encoder.
pub fn linear_probe(
    bundle: &ModelBundle,
    train: &SignalBatch,
    eval: &SignalBatch,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let before = params_fingerprint(&bundle.encoder_params);
    let ftrain = bundle.encode(&train.all_tensor())?;
    let feval = bundle.encode(&eval.all_tensor())?;
    let result = probe_features(&ftrain, &train.labels(), &feval, &eval.labels(), cfg)?;
    if params_fingerprint(&bundle.encoder_params) != before {
        return Err(Error::Invalid("encoder parameters changed during probing".into()));
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Trains the encoder and a zero-initialized linear head jointly with
/// minibatch Adam, then scores the eval split. The bundle is not modified.
pub fn fine_tune(
    bundle: &ModelBundle,
    train: &SignalBatch,
    eval: &SignalBatch,
    cfg: &FineTuneConfig,
) -> Result<ProbeResult> {
    let train_labels = train.labels();
    let eval_labels = eval.labels();
    let classes = class_count(&train_labels, &eval_labels)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("fine-tune batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc_params = bundle.encoder_params.clone();
    let mut head_params = ParamSet::new();
    let rep_dim = bundle.encoder.config().rep_dim;
    let head = Linear::new(&mut head_params, "head", rep_dim, classes, true, Init::Zeros, &mut rng);
    let adam = Adam::with_lr(cfg.lr);
    let mut enc_state = AdamState::for_params(enc_params.values());
    let mut head_state = AdamState::for_params(head_params.values());

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let pe = enc_params.bind(&mut tape, true);
            let ph = head_params.bind(&mut tape, true);
            let x = tape.constant(train.tensor(batch));
            let r = bundle.encoder.forward(&mut tape, &pe, x)?;
            let logits = head.forward(&mut tape, &ph, r)?;
            let logp = tape.log_softmax(logits)?;
            let mut onehot = Tensor::zeros([batch.len(), classes]);
            for (i, &idx) in batch.iter().enumerate() {
                onehot.data_mut()[i * classes + train_labels[idx]] = 1.0;
            }
            let onehot = tape.constant(onehot);
            let picked = tape.mul(logp, onehot)?;
            let total = tape.sum(picked);
            let loss = tape.scale(total, -1.0 / batch.len() as f64);
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFinite {
                    what: "fine-tune loss",
                    step: epoch,
                });
            }
            tape.backward(loss)?;
            let ge = enc_params.grads(&tape, &pe);
            let gh = head_params.grads(&tape, &ph);
            adam.step(enc_params.values_mut(), &ge, &mut enc_state)?;
            adam.step(head_params.values_mut(), &gh, &mut head_state)?;
        }
    }

    let tuned = ModelBundle {
        encoder: bundle.encoder.clone(),
        encoder_params: enc_params,
        velocity: bundle.velocity.clone(),
        velocity_params: ParamSet::new(),
    };
    let feats = tuned.encode(&eval.all_tensor())?;
    let mut tape = Tape::new();
    let ph = head_params.bind(&mut tape, false);
    let f = tape.constant(feats);
    let logits = head.forward(&mut tape, &ph, f)?;
    let preds: Vec<usize> = tape.value(logits).data().chunks(classes).map(argmax).collect();
    Ok(ProbeResult::from_predictions(&eval_labels, &preds, classes))
}

fn to_matrix(x: &Tensor) -> Result<DMatrix<f64>> {
    let [n, d] = x.shape()[..] else {
        return Err(Error::Invalid(format!("features must be [n, d], got {:?}", x.shape())));
    };
    Ok(DMatrix::from_row_slice(n, d, x.data()))
}

fn mean_cov(x: &DMatrix<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &Tensor, gen: &Tensor) -> Result<f64> {
    let (a, b) = (to_matrix(real)?, to_matrix(gen)?);
    if a.ncols() != b.ncols() {
        return Err(Error::Invalid(format!(
            "feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let d = a.ncols();
    let (mu_a, cov_a) = mean_cov(&a);
    let (mu_b, cov_b) = mean_cov(&b);
    let eye = DMatrix::<f64>::identity(d, d) * COV_EPS;
    let cov_a = cov_a + &eye;
    let cov_b = cov_b + &eye;
    let sa = sqrt_psd(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its `k`-th nearest other row.
fn knn_radii(x: &[f64], d: usize, k: usize) -> Vec<f64> {
    let n = x.len() / d;
    (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]))
                .collect();
            dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            dists[k - 1]
        })
        .collect()
}

/// Fraction of `query` rows inside the union of `k`-NN balls around `support`.
fn coverage(support: &[f64], radii: &[f64], query: &[f64], d: usize) -> f64 {
    let nq = query.len() / d;
    let inside = (0..nq)
        .filter(|&i| {
            let q = &query[i * d..(i + 1) * d];
            radii
                .iter()
                .enumerate()
                .any(|(j, &r)| sq_dist(q, &support[j * d..(j + 1) * d]) <= r)
        })
        .count();
    inside as f64 / nq as f64
}

/// kNN-manifold precision and recall of generated against real features.
pub fn knn_precision_recall(real: &Tensor, gen: &Tensor, k: usize) -> Result<(f64, f64)> {
    let (a, b) = (to_matrix(real)?, to_matrix(gen)?);
    let d = a.ncols();
    if b.ncols() != d {
        return Err(Error::Invalid(format!("feature dims differ: {d} vs {}", b.ncols())));
    }
    if k == 0 || a.nrows() < k + 1 || b.nrows() < k + 1 {
        return Err(Error::Invalid(format!(
            "kNN precision/recall needs at least {} points per set, got {} and {}",
            k + 1,
            a.nrows(),
            b.nrows()
        )));
    }
    let (r, g) = (real.data(), gen.data());
    let precision = coverage(r, &knn_radii(r, d, k), g, d);
    let recall = coverage(g, &knn_radii(g, d, k), r, d);
    Ok((precision, recall))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_gen: usize,
    /// Name of the network whose features were compared.
    pub feature_space: String,
}

pub fn gen_report(real: &Tensor, gen: &Tensor, k: usize, feature_space: &str) -> Result<GenReport> {
    let fid = fid(real, gen)?;
    let (precision, recall) = knn_precision_recall(real, gen, k)?;
    Ok(GenReport {
        fid,
        precision,
        recall,
        n_real: real.shape()[0],
        n_gen: gen.shape()[0],
        feature_space: feature_space.to_string(),
    })
}

/// Projection onto the leading principal components. Each component's
/// sign makes its largest-magnitude loading positive.
pub fn pca_project(feats: &Tensor, out_dim: usize) -> Result<Tensor> {
    let x = to_matrix(feats)?;
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if out_dim > d {
        return Err(Error::Invalid(format!("cannot project {d} dims onto {out_dim}")));
    }
    let (mean, cov) = mean_cov(&x);
    let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut basis = DMatrix::zeros(d, out_dim);
    for (c, &i) in order.iter().take(out_dim).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        basis.set_column(c, &v);
    }
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let proj = centered * basis;
    let mut data = Vec::with_capacity(n * out_dim);
    for row in proj.row_iter() {
        data.extend(row.iter());
    }
    Ok(Tensor::new([n, out_dim], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[vec![3, 0], vec![0, 4]]), 1.0);
        assert!((macro_f1(&[vec![5, 5], vec![5, 5]]) - 0.5).abs() < 1e-12);
        // class 1 never predicted correctly
        assert!((macro_f1(&[vec![2, 0], vec![2, 0]]) - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_trace_over_total() {
        let r = ProbeResult::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn missing_train_class_is_an_error() {
        assert!(class_count(&[0, 0], &[0, 1]).is_err());
        assert_eq!(class_count(&[0, 1, 2], &[1]).unwrap(), 3);
    }
}
