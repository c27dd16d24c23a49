//! Multi-window feature fusion and the final maximum-margin classifier.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of each per-window feature block.
pub const BLOCK_DIM: usize = 40;
pub const WINDOWS: usize = 3;
pub const FUSED_DIM: usize = BLOCK_DIM * WINDOWS;
pub const DEFAULT_C: f64 = 1.0;
/// KKT violation at which the solver stops.
pub const SOLVER_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Cover,
    Stego,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Cover => -1.0,
            Label::Stego => 1.0,
        }
    }

    pub fn is_stego(self) -> bool {
        self == Label::Stego
    }

    pub fn from_stego(stego: bool) -> Self {
        if stego {
            Label::Stego
        } else {
            Label::Cover
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub vector: Vec<f64>,
    /// Window sizes of the blocks, largest first.
    pub window_sizes: [usize; WINDOWS],
    pub label: Option<Label>,
}

/// Concatenates three per-window features in descending window-size order.
pub fn fuse(blocks: &[(usize, &[f64])]) -> Result<FusedFeature> {
    if blocks.len() != WINDOWS {
        return Err(Error::input(format!(
            "fusion needs {WINDOWS} feature blocks, got {}",
            blocks.len()
        )));
    }
    if let Some((n, b)) = blocks.iter().find(|(_, b)| b.len() != BLOCK_DIM) {
        return Err(Error::input(format!(
            "feature block for window {n} has {} values, expected {BLOCK_DIM}",
            b.len()
        )));
    }
    let mut sorted: Vec<&(usize, &[f64])> = blocks.iter().collect();
    sorted.sort_by(|a, b| b.0.cmp(&a.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::input("fusion window sizes must be distinct"));
    }
    Ok(FusedFeature {
        vector: sorted.iter().flat_map(|(_, b)| b.iter().copied()).collect(),
        window_sizes: [sorted[0].0, sorted[1].0, sorted[2].0],
        label: None,
    })
}

/// Per-dimension min-max map onto `[0, 1]`; constant dimensions map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows[0].len();
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (k, &v) in row.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Self { min, max }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }
}

/// Solution of the soft-margin linear SVM in the scaled feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `0.5 |w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b))`.
pub fn primal_objective(weights: &[f64], bias: f64, x: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let reg = 0.5 * weights.iter().map(|w| w * w).sum::<f64>();
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| (1.0 - yi * (dot(weights, xi) + bias)).max(0.0))
        .sum();
    reg + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sequential minimal optimization on the dual with second-order working
/// set selection; deterministic for a given input order.
pub fn solve_linear_svm(x: &[Vec<f64>], y: &[f64], c: f64, tol: f64) -> Result<LinearSvm> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::input("training set is empty or mislabelled"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::input(format!("penalty C = {c} must be positive")));
    }
    if !(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)) {
        return Err(Error::input("training set must contain both classes"));
    }
    const TAU: f64 = 1e-12;
    let gram: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| dot(&x[i], &x[j]))
        .collect();
    let k = |i: usize, j: usize| gram[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);
    let max_iter = (100 * n).max(10_000_000);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            let f = -y[t] * grad[t];
            if up(alpha[t], y[t]) && f > gmax {
                gmax = f;
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let f = -y[t] * grad[t];
            gmin = gmin.min(f);
            let b = gmax - f;
            if i != usize::MAX && b > 0.0 {
                let a = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(TAU);
                let obj = -b * b / a;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let (ai, aj) = (alpha[i], alpha[j]);
        let quad = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * di * k(i, t) + y[j] * dj * k(j, t));
        }
    }
    if !converged {
        log::warn!("SVM solver stopped after {iterations} iterations without converging");
    }

    // offset from free vectors, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut free_sum) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    };
    let dim = x[0].len();
    let mut weights = vec![0.0; dim];
    for t in 0..n {
        if alpha[t] != 0.0 {
            let s = alpha[t] * y[t];
            weights.iter_mut().zip(&x[t]).for_each(|(w, v)| *w += s * v);
        }
    }
    Ok(LinearSvm {
        weights,
        bias: -rho,
        iterations,
        converged,
    })
}

/// Trained classifier: scaling fitted on the training rows plus the
/// separating hyperplane in scaled space.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginModel {
    pub c: f64,
    pub window_sizes: [usize; WINDOWS],
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scaler: MinMaxScaler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub stego: bool,
    pub value: f64,
}

pub fn svm_train(features: &[FusedFeature], c: f64) -> Result<MarginModel> {
    let first = features
        .first()
        .ok_or_else(|| Error::input("no training features"))?;
    if features.iter().any(|f| f.window_sizes != first.window_sizes) {
        return Err(Error::input("training features mix window-size orders"));
    }
    let labels = features
        .iter()
        .map(|f| {
            f.label
                .map(Label::sign)
                .ok_or_else(|| Error::input("training feature without label"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<&[f64]> = features.iter().map(|f| f.vector.as_slice()).collect();
    let scaler = MinMaxScaler::fit(&rows);
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
    let svm = solve_linear_svm(&scaled, &labels, c, SOLVER_TOLERANCE)?;
    Ok(MarginModel {
        c,
        window_sizes: first.window_sizes,
        weights: svm.weights,
        bias: svm.bias,
        scaler,
    })
}

impl MarginModel {
    pub fn decision_value(&self, vector: &[f64]) -> f64 {
        dot(&self.weights, &self.scaler.apply(vector)) + self.bias
    }

    /// Stego iff the decision value is non-negative.
    pub fn predict(&self, vector: &[f64]) -> Decision {
        let value = self.decision_value(vector);
        Decision {
            stego: value >= 0.0,
            value,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "C {:.16e}", self.c);
        let _ = writeln!(
            s,
            "windows {} {} {}",
            self.window_sizes[0], self.window_sizes[1], self.window_sizes[2]
        );
        let _ = writeln!(s, "dim {}", self.weights.len());
        s.push_str("weights\n");
        for w in &self.weights {
            let _ = writeln!(s, "{w:.16e}");
        }
        let _ = writeln!(s, "bias {:.16e}", self.bias);
        s.push_str("scale\n");
        for (lo, hi) in self.scaler.min.iter().zip(&self.scaler.max) {
            let _ = writeln!(s, "{lo:.16e} {hi:.16e}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::format(format!("margin model: {what}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {key}")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected {key}, found {line:?}")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let c = num(field("C")?.first().ok_or_else(|| bad("C"))?)?;
        let windows = field("windows")?;
        if windows.len() != WINDOWS {
            return Err(bad("expected three window sizes"));
        }
        let mut window_sizes = [0; WINDOWS];
        for (w, s) in window_sizes.iter_mut().zip(&windows) {
            *w = s.parse().map_err(|_| bad("window size"))?;
        }
        let dim: usize = field("dim")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("dim"))?;
        field("weights")?;
        let mut rest = lines;
        let weights = (0..dim)
            .map(|_| num(rest.next().ok_or_else(|| bad("missing weight"))?))
            .collect::<Result<Vec<_>>>()?;
        let bias_line = rest.next().ok_or_else(|| bad("missing bias"))?;
        let bias = num(bias_line.strip_prefix("bias").ok_or_else(|| bad("expected bias"))?.trim())?;
        if rest.next() != Some("scale") {
            return Err(bad("expected scale section"));
        }
        let (mut min, mut max) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
        for _ in 0..dim {
            let line = rest.next().ok_or_else(|| bad("missing scale bound"))?;
            let mut parts = line.split_whitespace();
            let (lo, hi) = (parts.next(), parts.next());
            match (lo, hi, parts.next()) {
                (Some(lo), Some(hi), None) => {
                    min.push(num(lo)?);
                    max.push(num(hi)?);
                }
                _ => return Err(bad("scale bounds need two values")),
            }
        }
        if rest.next().is_some() {
            return Err(bad("trailing content"));
        }
        Ok(Self {
            c,
            window_sizes,
            weights,
            bias,
            scaler: MinMaxScaler { min, max },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Detection rates. Rates over an empty class are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tpr: f64,
    pub tnr: f64,
    pub acc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// `predictions[i]` and `labels[i]` are true for stego.
pub fn metrics(predictions: &[bool], labels: &[bool]) -> Result<Metrics> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::input("predictions and labels must be non-empty and aligned"));
    }
    let (mut tp, mut tn, mut p, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&pred, &truth) in predictions.iter().zip(labels) {
        if truth {
            p += 1;
            tp += usize::from(pred);
        } else {
            n += 1;
            tn += usize::from(!pred);
        }
    }
    let rate = |hit: usize, total: usize| {
        if total == 0 {
            f64::NAN
        } else {
            hit as f64 / total as f64
        }
    };
    Ok(Metrics {
        tpr: rate(tp, p),
        tnr: rate(tn, n),
        acc: (tp + tn) as f64 / labels.len() as f64,
        positives: p,
        negatives: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(v: f64) -> Vec<f64> {
        vec![v; BLOCK_DIM]
    }

    #[test]
    fn fuse_orders_by_window() {
        let (a, b, c) = (block(1.0), block(2.0), block(3.0));
        let f = fuse(&[(1024, &a), (512, &b), (256, &c)]).unwrap();
        assert_eq!(f.window_sizes, [1024, 512, 256]);
        assert_eq!(f.vector.len(), FUSED_DIM);
        assert_eq!(f.vector[..40], a[..]);
        assert_eq!(f.vector[40..80], b[..]);
        assert_eq!(f.vector[80..], c[..]);
        let g = fuse(&[(256, &c), (1024, &a), (512, &b)]).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn fuse_errors() {
        let a = block(1.0);
        let short = vec![0.0; 39];
        assert!(fuse(&[(1024, &a), (512, &a)]).is_err());
        assert!(fuse(&[(1024, &a), (512, &a), (256, &short)]).is_err());
        assert!(fuse(&[(512, &a), (512, &a), (256, &a)]).is_err());
    }

    #[test]
    fn metric_cases() {
        let labels = [true, true, false, false];
        let m = metrics(&labels, &labels).unwrap();
        assert_eq!((m.tpr, m.tnr, m.acc), (1.0, 1.0, 1.0));
        let m = metrics(&[true; 4], &labels).unwrap();
        assert_eq!((m.tpr, m.tnr, m.acc), (1.0, 0.0, 0.5));
        assert!(metrics(&[true], &labels).is_err());
    }

    #[test]
    fn symmetric_pair() {
        let x = vec![vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let y = vec![-1.0, 1.0];
        let svm = solve_linear_svm(&x, &y, 1e4, 1e-9).unwrap();
        assert!(svm.converged);
        assert!((svm.weights[0] - 1.0).abs() < 1e-3, "{:?}", svm.weights);
        assert!(svm.bias.abs() < 1e-3);
        for (xi, yi) in x.iter().zip(&y) {
            let margin = yi * (dot(&svm.weights, xi) + svm.bias);
            assert!((margin - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(solve_linear_svm(&x, &[1.0, 1.0], 1.0, 1e-6).is_err());
    }

    #[test]
    fn tie_is_stego() {
        let model = MarginModel {
            c: 1.0,
            window_sizes: [3, 2, 1],
            weights: vec![1.0],
            bias: -0.5,
            scaler: MinMaxScaler {
                min: vec![0.0],
                max: vec![2.0],
            },
        };
        // scaled 1.0 / 2 = 0.5, decision 0
        let d = model.predict(&[1.0]);
        assert_eq!(d.value, 0.0);
        assert!(d.stego);
    }

    #[test]
    fn model_text_round_trip() {
        let model = MarginModel {
            c: 0.1,
            window_sizes: [512, 256, 128],
            weights: (0..FUSED_DIM).map(|i| (i as f64).sin() / 3.0).collect(),
            bias: -1.0 / 7.0,
            scaler: MinMaxScaler {
                min: (0..FUSED_DIM).map(|i| -(i as f64) / 9.0).collect(),
                max: (0..FUSED_DIM).map(|i| i as f64 / 11.0 + 1e-3).collect(),
            },
        };
        let text = model.to_text();
        assert!(text.starts_with("C 1.0000000000000001e-1\nwindows 512 256 128\n"));
        assert_eq!(MarginModel::parse(&text).unwrap(), model);
        assert!(MarginModel::parse(&text.replace("bias", "bais")).is_err());
    }
}
