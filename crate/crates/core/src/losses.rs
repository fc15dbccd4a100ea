//! Twice-differentiable losses with analytic gradients and diagonal
//! Hessians, a finite-difference verifier, and the multiclass adapter that
//! maps ensemble scores onto per-class derivatives.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::tree_model::MulticlassStrategy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} invalid for {loss} loss")]
    InvalidLabel { label: f64, loss: String },
    #[error("prediction has {found} scores, loss expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// First and diagonal second derivatives with respect to each score.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHess {
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

impl GradHess {
    pub fn scalar(g: f64, h: f64) -> Self {
        Self {
            gradient: vec![g],
            hessian: vec![h],
        }
    }
}

type ValueFn = dyn Fn(&[f64], f64) -> f64 + Send + Sync;
type GradHessFn = dyn Fn(&[f64], f64) -> GradHess + Send + Sync;

/// User-supplied loss given as a (value, derivatives) pair.
#[derive(Clone)]
pub struct CustomLoss {
    name: String,
    value: Arc<ValueFn>,
    grad_hess: Arc<GradHessFn>,
}

impl fmt::Debug for CustomLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomLoss").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone)]
pub enum LossKind {
    Logistic,
    LeastSquares,
    MulticlassSoftmax,
    Custom(CustomLoss),
}

#[derive(Debug, Clone)]
pub struct LossSpec {
    kind: LossKind,
    num_classes: u32,
}

/// Relative-error bound a custom loss must meet against finite differences
/// before it is accepted.
pub const CUSTOM_ADMISSION_TOLERANCE: f64 = 1e-5;

impl LossSpec {
    pub fn logistic() -> Self {
        Self {
            kind: LossKind::Logistic,
            num_classes: 1,
        }
    }

    pub fn least_squares() -> Self {
        Self {
            kind: LossKind::LeastSquares,
            num_classes: 1,
        }
    }

    pub fn softmax(num_classes: u32) -> Result<Self, LossError> {
        if num_classes < 2 {
            return Err(LossError::Config(format!(
                "softmax needs at least two classes, got {num_classes}"
            )));
        }
        Ok(Self {
            kind: LossKind::MulticlassSoftmax,
            num_classes,
        })
    }

    /// Admits a custom loss after checking its derivatives against central
    /// differences on a fixed probe grid (labels 0 and 1 for scalar losses,
    /// every class index otherwise).
    pub fn custom(
        name: impl Into<String>,
        num_classes: u32,
        value: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
        grad_hess: impl Fn(&[f64], f64) -> GradHess + Send + Sync + 'static,
    ) -> Result<Self, LossError> {
        if num_classes == 0 {
            return Err(LossError::Config("custom loss needs num_classes >= 1".into()));
        }
        let spec = Self {
            kind: LossKind::Custom(CustomLoss {
                name: name.into(),
                value: Arc::new(value),
                grad_hess: Arc::new(grad_hess),
            }),
            num_classes,
        };
        let err = verify_derivatives(&spec, &admission_probes(num_classes), 1e-5);
        if !(err < CUSTOM_ADMISSION_TOLERANCE) {
            return Err(LossError::Config(format!(
                "custom loss derivatives disagree with finite differences (max rel error {err:e})"
            )));
        }
        Ok(spec)
    }

    pub fn from_name(name: &str, num_classes: u32) -> Result<Self, LossError> {
        match name {
            "logistic" => Ok(Self::logistic()),
            "least_squares" => Ok(Self::least_squares()),
            "softmax" | "multiclass_softmax" => Self::softmax(num_classes),
            other => Err(LossError::Config(format!("unknown loss {other:?}"))),
        }
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        match &self.kind {
            LossKind::Logistic => "logistic",
            LossKind::LeastSquares => "least_squares",
            LossKind::MulticlassSoftmax => "softmax",
            LossKind::Custom(c) => &c.name,
        }
    }

    fn check(&self, prediction: &[f64], label: f64) -> Result<(), LossError> {
        let k = self.num_classes as usize;
        if prediction.len() != k {
            return Err(LossError::Dimension {
                expected: k,
                found: prediction.len(),
            });
        }
        let ok = match self.kind {
            LossKind::Logistic => label == 0.0 || label == 1.0,
            LossKind::LeastSquares | LossKind::Custom(_) => label.is_finite(),
            LossKind::MulticlassSoftmax => class_index(label, k).is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(LossError::InvalidLabel {
                label,
                loss: self.name().to_string(),
            })
        }
    }
}

fn admission_probes(num_classes: u32) -> Vec<(Vec<f64>, f64)> {
    let k = num_classes as usize;
    let labels: Vec<f64> = if k == 1 {
        vec![0.0, 1.0]
    } else {
        (0..k).map(|c| c as f64).collect()
    };
    let mut probes = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..5 {
            let pred = (0..k)
                .map(|c| -2.0 + 0.9 * j as f64 + 0.37 * c as f64 - 0.11 * i as f64)
                .collect();
            probes.push((pred, y));
        }
    }
    probes
}

fn class_index(label: f64, num_classes: usize) -> Option<usize> {
    if label >= 0.0 && label.fract() == 0.0 && (label as usize) < num_classes {
        Some(label as usize)
    } else {
        None
    }
}

pub(crate) fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(f: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(f);
    f.iter().map(|v| (v - lse).exp()).collect()
}

pub fn loss_value(spec: &LossSpec, prediction: &[f64], label: f64) -> Result<f64, LossError> {
    spec.check(prediction, label)?;
    Ok(match &spec.kind {
        LossKind::Logistic => softplus(-(2.0 * label - 1.0) * prediction[0]),
        LossKind::LeastSquares => 0.5 * (prediction[0] - label).powi(2),
        LossKind::MulticlassSoftmax => log_sum_exp(prediction) - prediction[label as usize],
        LossKind::Custom(c) => (c.value)(prediction, label),
    })
}

pub fn grad_hess(spec: &LossSpec, prediction: &[f64], label: f64) -> Result<GradHess, LossError> {
    spec.check(prediction, label)?;
    Ok(match &spec.kind {
        LossKind::Logistic => {
            let p = sigmoid(prediction[0]);
            GradHess::scalar(p - label, p * (1.0 - p))
        }
        LossKind::LeastSquares => GradHess::scalar(prediction[0] - label, 1.0),
        LossKind::MulticlassSoftmax => {
            let p = softmax(prediction);
            let y = label as usize;
            GradHess {
                gradient: p
                    .iter()
                    .enumerate()
                    .map(|(k, pk)| if k == y { pk - 1.0 } else { *pk })
                    .collect(),
                hessian: p.iter().map(|pk| pk * (1.0 - pk)).collect(),
            }
        }
        LossKind::Custom(c) => {
            let gh = (c.grad_hess)(prediction, label);
            if gh.gradient.len() != prediction.len() || gh.hessian.len() != prediction.len() {
                return Err(LossError::Dimension {
                    expected: prediction.len(),
                    found: gh.gradient.len().min(gh.hessian.len()),
                });
            }
            gh
        }
    })
}

/// Maximum relative disagreement between the analytic derivatives and
/// central differences: gradients against differences of the loss value,
/// diagonal Hessians against differences of the analytic gradient.
/// Probes with invalid labels are skipped.
pub fn verify_derivatives(spec: &LossSpec, probe_points: &[(Vec<f64>, f64)], step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(1.0);
    let mut worst = 0.0f64;
    for (pred, label) in probe_points {
        let Ok(gh) = grad_hess(spec, pred, *label) else {
            continue;
        };
        for k in 0..pred.len() {
            let mut up = pred.clone();
            let mut down = pred.clone();
            up[k] += step;
            down[k] -= step;
            let fd_g = (loss_value(spec, &up, *label).unwrap()
                - loss_value(spec, &down, *label).unwrap())
                / (2.0 * step);
            let fd_h = (grad_hess(spec, &up, *label).unwrap().gradient[k]
                - grad_hess(spec, &down, *label).unwrap().gradient[k])
                / (2.0 * step);
            worst = worst
                .max(rel(gh.gradient[k], fd_g))
                .max(rel(gh.hessian[k], fd_h));
        }
    }
    worst
}

pub fn one_vs_rest_labels(label: usize, num_classes: usize) -> Result<Vec<f64>, LossError> {
    if label >= num_classes {
        return Err(LossError::InvalidLabel {
            label: label as f64,
            loss: format!("one-vs-rest over {num_classes} classes"),
        });
    }
    Ok((0..num_classes)
        .map(|k| if k == label { 1.0 } else { 0.0 })
        .collect())
}

/// Maps ensemble score vectors onto a loss under a multiclass strategy.
///
/// One-vs-rest with a scalar loss scores class `k` against the binary label
/// `[y == k]`; with softmax it takes coordinate `k` of the joint derivative.
#[derive(Debug, Clone)]
pub struct Objective {
    loss: LossSpec,
    strategy: MulticlassStrategy,
    num_classes: u32,
}

impl Objective {
    pub fn new(
        loss: LossSpec,
        strategy: MulticlassStrategy,
        num_classes: u32,
    ) -> Result<Self, LossError> {
        let lk = loss.num_classes();
        let ok = match strategy {
            MulticlassStrategy::None => num_classes == 1 && lk == 1,
            MulticlassStrategy::OneVsRest => num_classes >= 2 && (lk == 1 || lk == num_classes),
            MulticlassStrategy::PerClassLeaves => num_classes >= 2 && lk == num_classes,
        };
        if !ok {
            return Err(LossError::Config(format!(
                "loss {} over {lk} classes incompatible with {strategy:?} over {num_classes} classes",
                loss.name()
            )));
        }
        Ok(Self {
            loss,
            strategy,
            num_classes,
        })
    }

    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    pub fn strategy(&self) -> MulticlassStrategy {
        self.strategy
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    fn per_class_binary(&self) -> bool {
        self.strategy == MulticlassStrategy::OneVsRest && self.loss.num_classes() == 1
    }

    fn class_label(&self, label: f64) -> Result<usize, LossError> {
        class_index(label, self.num_classes as usize).ok_or_else(|| LossError::InvalidLabel {
            label,
            loss: format!("{} over {} classes", self.loss.name(), self.num_classes),
        })
    }

    pub fn validate_label(&self, label: f64) -> Result<(), LossError> {
        if self.per_class_binary() {
            self.class_label(label).map(|_| ())
        } else {
            let probe = vec![0.0; self.loss.num_classes() as usize];
            self.loss.check(&probe, label)
        }
    }

    pub fn example_loss(&self, scores: &[f64], label: f64) -> Result<f64, LossError> {
        if self.per_class_binary() {
            let y = self.class_label(label)?;
            let mut total = 0.0;
            for (k, s) in scores.iter().enumerate() {
                total += loss_value(&self.loss, &[*s], if k == y { 1.0 } else { 0.0 })?;
            }
            Ok(total)
        } else {
            loss_value(&self.loss, scores, label)
        }
    }

    pub fn example_grad_hess(&self, scores: &[f64], label: f64) -> Result<GradHess, LossError> {
        if self.per_class_binary() {
            let y = self.class_label(label)?;
            let mut out = GradHess {
                gradient: Vec::with_capacity(scores.len()),
                hessian: Vec::with_capacity(scores.len()),
            };
            for (k, s) in scores.iter().enumerate() {
                let gh = grad_hess(&self.loss, &[*s], if k == y { 1.0 } else { 0.0 })?;
                out.gradient.push(gh.gradient[0]);
                out.hessian.push(gh.hessian[0]);
            }
            Ok(out)
        } else {
            grad_hess(&self.loss, scores, label)
        }
    }

    /// Class probabilities (or the raw score for regression).
    pub fn transform(&self, scores: &[f64]) -> Vec<f64> {
        match self.loss.kind() {
            LossKind::Logistic => scores.iter().map(|s| sigmoid(*s)).collect(),
            LossKind::MulticlassSoftmax => softmax(scores),
            _ => scores.to_vec(),
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self.loss.kind(), LossKind::LeastSquares | LossKind::Custom(_))
            || self.num_classes > 1
    }

    /// Predicted class for classification objectives.
    pub fn predicted_class(&self, scores: &[f64]) -> usize {
        if scores.len() == 1 {
            usize::from(scores[0] > 0.0)
        } else {
            scores
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &s)| {
                    if s > best.1 {
                        (k, s)
                    } else {
                        best
                    }
                })
                .0
        }
    }
}
