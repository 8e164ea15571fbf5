//! Classifier training with transition-distribution data augmentation.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::data::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::generator::TransitionGenerator;
use crate::ndiff::{Adadelta, Gradients, Graph, Mode, Tensor};
use crate::training::stream;

/// Produces one perturbed copy of each input row.
pub trait Augmenter {
    fn augment(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

impl Augmenter for TransitionGenerator {
    fn augment(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.transition_sample(x, rng)?.x_tilde)
    }
}

/// Returns the input unchanged.
pub struct Identity;

impl Augmenter for Identity {
    fn augment(&self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(x.clone())
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean cross-entropy of softmax(logits) against `labels`, and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.batch(), logits.row_len());
    if labels.len() != n {
        return Err(Error::invalid("label count differs from batch size"));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        let p = softmax_row(logits.row(i));
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let g = grad.row_mut(i);
        for (j, pj) in p.iter().enumerate() {
            g[j] = (pj - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Convolutional classifier with batch norm, dropout, and input noise.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: Graph,
}

impl Classifier {
    pub fn build(cfg: &Config, sample_shape: &[usize], num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let s = &cfg.semisup;
        let (c0, c1) = match *s.channels {
            [a, b] => (a, b),
            _ => return Err(Error::Config("semisup.channels takes two values".into())),
        };
        let net = Graph::builder("clf", sample_shape)
            .gaussian_noise(s.noise)
            .conv(c0, 5, 1, 2, rng)
            .batch_norm()
            .relu()
            .max_pool()
            .conv(c1, 5, 1, 2, rng)
            .batch_norm()
            .relu()
            .max_pool()
            .flatten()
            .dense(s.fc, rng)
            .batch_norm()
            .relu()
            .dropout(s.dropout)
            .dense(num_classes, rng)
            .build(rng)?;
        let mut clf = Self { net };
        clf.net.reseed(rng.random());
        Ok(clf)
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_shape()[0]
    }

    /// Eval-mode class probabilities; each row sums to one.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.net.infer(x)?;
        let mut out = logits.clone();
        for i in 0..logits.batch() {
            out.row_mut(i).copy_from_slice(&softmax_row(logits.row(i)));
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.net.infer(x)?;
        Ok((0..logits.batch())
            .map(|i| {
                let r = logits.row(i);
                (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0)
            })
            .collect())
    }

    /// Fraction of misclassified samples, evaluated in chunks.
    pub fn error_rate(&self, data: &Dataset) -> Result<f64> {
        let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("error rate needs labels"))?;
        let mut wrong = 0usize;
        for start in (0..data.len()).step_by(500) {
            let end = (start + 500).min(data.len());
            let pred = self.predict(&data.images.slice_batch(start, end)?)?;
            wrong += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p != y).count();
        }
        Ok(wrong as f64 / data.len() as f64)
    }
}

fn class_loss(clf: &mut Classifier, x: &Tensor, y: &[usize], weight: f64, mode: Mode) -> Result<(f64, Gradients)> {
    let (logits, trace) = match mode {
        Mode::Train => clf.net.trace(x, mode)?,
        Mode::Eval => clf.net.trace_frozen(x, mode)?,
    };
    let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
    Ok((weight * loss, clf.net.backprop_with(&trace, &dlogits.scaled(weight), false)?))
}

/// `w_clean·L(x, y) + w_aug·L(x̃, y)` with one augmented draw per sample,
/// and its parameter gradient. The clean pass runs first, so a zero
/// augmentation weight reproduces the plain loss exactly.
pub fn augmented_objective(
    clf: &mut Classifier,
    augmenter: Option<&dyn Augmenter>,
    x: &Tensor,
    y: &[usize],
    weights: (f64, f64),
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let (mut loss, mut grads) = class_loss(clf, x, y, weights.0, mode)?;
    if let (Some(aug), true) = (augmenter, weights.1 != 0.0) {
        let x_tilde = aug.augment(x, rng)?;
        let (l, g) = class_loss(clf, &x_tilde, y, weights.1, mode)?;
        loss += l;
        grads.merge(g)?;
    }
    Ok((loss, grads))
}

/// Value of [`augmented_objective`] with the standard 0.5/0.5 mix.
pub fn augmented_loss(
    clf: &mut Classifier,
    augmenter: &dyn Augmenter,
    x: &Tensor,
    y: &[usize],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    Ok(augmented_objective(clf, Some(augmenter), x, y, (0.5, 0.5), mode, rng)?.0)
}

/// Labeled training subset plus validation and test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub labeled: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let full = cfg.load_full_dataset()?;
        Ok(Self {
            labeled: cfg.semisup.labeled.apply(&full)?,
            val: cfg.semisup.val.apply(&full)?,
            test: cfg.semisup.test.apply(&full)?,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
}

/// Outcome of [`train_classifier`]: the validation-selected model.
#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub classifier: Classifier,
    /// Epoch of the selected model (0 = before training).
    pub best_epoch: usize,
    pub val_error: f64,
    pub test_error: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains on the labeled subset, keeps the epoch with the lowest clean
/// validation error, and reports its test error.
pub fn train_classifier(cfg: &Config, splits: &Splits, augmenter: Option<&dyn Augmenter>, seed: u64) -> Result<ClassifierRun> {
    let s = &cfg.semisup;
    let labeled = &splits.labeled;
    let labels = labeled.labels.as_ref().ok_or_else(|| Error::invalid("labeled subset has no labels"))?;
    if labeled.is_empty() {
        return Err(Error::invalid("labeled subset is empty"));
    }
    let classes = labeled.num_classes.max(splits.val.num_classes).max(splits.test.num_classes);
    let mut clf = Classifier::build(cfg, labeled.sample_shape(), classes, &mut stream(seed, 0))?;
    let mut batch_rng = stream(seed, 1);
    let mut aug_rng = stream(seed, 2);
    let mut opt = Adadelta::new(s.lr, cfg.train.decay, cfg.train.eps);
    let weights = (s.weights[0], s.weights[1]);

    let mut best = (clf.clone(), 0usize, clf.error_rate(&splits.val)?);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_error: best.2,
    }];
    for epoch in 1..=s.epochs {
        let mut total = 0.0;
        let order = epoch_order(labeled.len(), s.batch.min(labeled.len()), &mut batch_rng)?;
        let batches = order.len();
        for idx in order {
            let x = labeled.images.select(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = augmented_objective(&mut clf, augmenter, &x, &y, weights, Mode::Train, &mut aug_rng)
                .map_err(|e| match e {
                    Error::NonFinite(reason) => Error::Divergence { iteration: epoch, reason },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    iteration: epoch,
                    reason: format!("classifier loss {loss}"),
                });
            }
            opt.step(&mut clf.net, &grads)?;
            total += loss;
        }
        let val_error = clf.error_rate(&splits.val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_error,
        });
        if val_error < best.2 {
            best = (clf.clone(), epoch, val_error);
        }
    }
    let (classifier, best_epoch, val_error) = best;
    let test_error = classifier.error_rate(&splits.test)?;
    Ok(ClassifierRun {
        classifier,
        best_epoch,
        val_error,
        test_error,
        history,
    })
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    /// Test error in percent.
    pub error: f64,
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.semisup.channels = vec![2, 3];
        cfg.semisup.fc = 8;
        cfg
    }

    fn tiny_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[n, 1, 8, 8], |_| rng.random_range(0.0..1.0));
        let y = (0..n).map(|i| i % 10).collect();
        (x, y)
    }

    #[test]
    fn uniform_logits_give_ln_ten() {
        let logits = Tensor::zeros(&[4, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 7, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
        assert!(softmax_cross_entropy(&logits, &[0, 3, 7, 10]).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = Classifier::build(&tiny_cfg(), &[1, 8, 8], 10, &mut rng).unwrap();
        let p = clf.probabilities(&tiny_batch(5, 2).0).unwrap();
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_augmentation_equals_plain_loss() {
        let mut clf = Classifier::build(&tiny_cfg(), &[1, 8, 8], 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (x, y) = tiny_batch(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let aug = augmented_loss(&mut clf, &Identity, &x, &y, Mode::Eval, &mut rng).unwrap();
        let plain = class_loss(&mut clf, &x, &y, 1.0, Mode::Eval).unwrap().0;
        assert_eq!(aug, plain);
    }

    #[test]
    fn zero_augmentation_weight_is_the_plain_loss_in_train_mode() {
        let clf = Classifier::build(&tiny_cfg(), &[1, 8, 8], 10, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (x, y) = tiny_batch(6, 7);
        let (mut a, mut b) = (clf.clone(), clf);
        let with = augmented_objective(&mut a, Some(&Identity), &x, &y, (1.0, 0.0), Mode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let without = augmented_objective(&mut b, None, &x, &y, (1.0, 0.0), Mode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(with.0, without.0);
        assert_eq!(with.1.params, without.1.params);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.3, -0.7]).unwrap();
        let y = [2, 0];
        let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
        for i in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = logits.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (softmax_cross_entropy(&p, &y).unwrap().0 - softmax_cross_entropy(&m, &y).unwrap().0) / 2e-6;
            assert!((num - g.data()[i]).abs() < 1e-8);
        }
    }
}
