//! Deep features from a trained network and a binary RBF-kernel SVM trained
//! by sequential minimal optimization.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, ModelGraph};
use crate::train::{Blob, SampleSource};
use crate::Label;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-3;

const TAU: f64 = 1e-12;
const FULL_MATRIX_LIMIT: usize = 4096;
const CACHE_BYTES: usize = 256 << 20;

/// One feature row per sample with labels in {-1, +1}.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<i8>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<i8>) -> Result<FeatureMatrix> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} values do not form {} rows of dimension {dim}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| l.abs() != 1) {
            return Err(Error::Param(format!("feature label {l} is not -1 or +1")));
        }
        Ok(FeatureMatrix { dim, data, labels })
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: &[Label]) -> Result<FeatureMatrix> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        FeatureMatrix::new(dim, rows.concat(), labels.iter().map(|&l| sign_of(l)).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            dim: self.dim,
            data: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn sign_of(label: Label) -> i8 {
    if label.is_positive() {
        1
    } else {
        -1
    }
}

pub fn label_of(sign: i8) -> Label {
    if sign > 0 {
        Label::Parasitized
    } else {
        Label::Uninfected
    }
}

/// Activations at the output of `layer` (default: the penultimate dense
/// layer), taken in eval mode. Dense layers apply their ReLU before the
/// output, so the tap is post-activation and before any dropout.
pub fn extract_features(
    model: &ModelGraph,
    layer: Option<usize>,
    data: &dyn SampleSource,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let layer = match layer {
        Some(l) => l,
        None => model
            .topology()
            .penultimate_dense()
            .ok_or_else(|| Error::Param("model has no penultimate dense layer".into()))?,
    };
    if layer >= model.layers().len() {
        return Err(Error::Param(format!("layer {layer} does not exist")));
    }
    if data.is_empty() {
        return Err(Error::Harness("feature extraction set is empty".into()));
    }
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Result<(usize, Vec<f32>)>> = idx
        .par_chunks(batch_size.max(1))
        .map(|c| {
            let out = eval.forward_until(&data.batch(c)?, layer)?;
            let dim = out.data().len() / c.len();
            Ok((dim, out.data().to_vec()))
        })
        .collect();
    let mut values = Vec::new();
    let mut dim = 0;
    for p in parts {
        let (d, v) = p?;
        dim = d;
        values.extend(v);
    }
    FeatureMatrix::new(dim, values, data.labels().into_iter().map(sign_of).collect())
}

/// Per-dimension standardization fitted on training features. Constant
/// dimensions are centred but not scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &FeatureMatrix) -> Result<FeatureScaler> {
        if x.is_empty() {
            return Err(Error::Param("cannot fit a scaler on zero rows".into()));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; x.dim];
        for i in 0..x.len() {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.dim];
        for i in 0..x.len() {
            for ((s, &v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn transform_row(&self, row: &[f32]) -> Result<Vec<f32>> {
        if row.len() != self.mean.len() {
            return Err(Error::Param(format!(
                "feature dimension {} does not match scaler dimension {}",
                row.len(),
                self.mean.len()
            )));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| ((v as f64 - m) / s) as f32)
            .collect())
    }

    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(x.data.len());
        for i in 0..x.len() {
            data.extend(self.transform_row(x.row(i))?);
        }
        FeatureMatrix::new(x.dim, data, x.labels.clone())
    }
}

fn sq_dist(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
}

/// `exp(-gamma * |u - v|^2)`.
pub fn rbf_kernel(u: &[f32], v: &[f32], gamma: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Param(format!("kernel inputs have dimensions {} and {}", u.len(), v.len())));
    }
    Ok((-gamma * sq_dist(u, v)).exp())
}

/// Full Gram matrix, computed row-parallel.
pub fn kernel_matrix(x: &FeatureMatrix, gamma: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    k.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-gamma * sq_dist(x.row(i), x.row(j))).exp();
        }
    });
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> SvmParams {
        SvmParams {
            c: DEFAULT_C,
            gamma: DEFAULT_GAMMA,
            tol: DEFAULT_TOL,
            max_iter: 10_000_000,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.c > 0.0 && self.c.is_finite()) {
            bad.push(format!("c = {}", self.c));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            bad.push(format!("gamma = {}", self.gamma));
        }
        if !(self.tol > 0.0) {
            bad.push(format!("tol = {}", self.tol));
        }
        if self.max_iter == 0 {
            bad.push("max_iter = 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid svm parameters: {}", bad.join(", "))))
        }
    }
}

/// Kernel rows on demand: the whole matrix for small problems, an LRU row
/// cache otherwise.
enum KernelRows<'a> {
    Full { n: usize, k: Vec<f64> },
    Cached {
        x: &'a FeatureMatrix,
        gamma: f64,
        capacity: usize,
        rows: HashMap<usize, Vec<f64>>,
        order: VecDeque<usize>,
    },
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a FeatureMatrix, gamma: f64) -> KernelRows<'a> {
        let n = x.len();
        if n <= FULL_MATRIX_LIMIT {
            KernelRows::Full { n, k: kernel_matrix(x, gamma) }
        } else {
            KernelRows::Cached {
                x,
                gamma,
                capacity: (CACHE_BYTES / (8 * n)).max(2),
                rows: HashMap::new(),
                order: VecDeque::new(),
            }
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        match self {
            KernelRows::Full { n, k } => &k[i * *n..(i + 1) * *n],
            KernelRows::Cached { x, gamma, capacity, rows, order } => {
                if let Some(pos) = order.iter().position(|&r| r == i) {
                    order.remove(pos);
                } else {
                    if rows.len() >= *capacity {
                        if let Some(old) = order.pop_front() {
                            rows.remove(&old);
                        }
                    }
                    let xi = x.row(i);
                    let g = *gamma;
                    let r: Vec<f64> = (0..x.len())
                        .into_par_iter()
                        .map(|j| (-g * sq_dist(xi, x.row(j))).exp())
                        .collect();
                    rows.insert(i, r);
                }
                order.push_back(i);
                &rows[&i]
            }
        }
    }
}

/// Trained binary classifier. `coef[i]` is `alpha_i * y_i` of support vector `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSvmModel {
    pub dim: usize,
    pub support: Vec<f32>,
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
}

impl KernelSvmModel {
    pub fn n_support(&self) -> usize {
        self.coef.len()
    }

    pub fn support_vector(&self, i: usize) -> &[f32] {
        &self.support[i * self.dim..(i + 1) * self.dim]
    }

    /// `sum_i alpha_i y_i K(sv_i, x) + b`.
    pub fn decision(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Param(format!("input dimension {} does not match svm dimension {}", x.len(), self.dim)));
        }
        let s: f64 = self
            .coef
            .iter()
            .enumerate()
            .map(|(i, c)| c * (-self.gamma * sq_dist(self.support_vector(i), x)).exp())
            .sum();
        Ok(s + self.bias)
    }

    /// Label and decision value. A decision value of exactly 0 maps to +1.
    pub fn predict(&self, x: &[f32]) -> Result<(i8, f64)> {
        let f = self.decision(x)?;
        Ok((if f >= 0.0 { 1 } else { -1 }, f))
    }

    pub fn predict_all(&self, x: &FeatureMatrix) -> Result<Vec<(i8, f64)>> {
        (0..x.len()).into_par_iter().map(|i| self.predict(x.row(i))).collect()
    }
}

pub fn svm_predict(model: &KernelSvmModel, x: &[f32]) -> Result<(i8, f64)> {
    model.predict(x)
}

/// Solver output: the model plus the full dual vector and diagnostics.
#[derive(Clone, Debug)]
pub struct SmoSolution {
    pub model: KernelSvmModel,
    /// One dual variable per training row.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    /// Final maximal KKT violation `m(alpha) - M(alpha)`.
    pub gap: f64,
    pub converged: bool,
}

impl SmoSolution {
    /// `sum alpha - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`.
    pub fn dual_objective(&self, x: &FeatureMatrix) -> f64 {
        dual_objective(x, &self.alpha, self.model.gamma)
    }

    /// Largest per-point violation of the KKT conditions, measured on
    /// `y f(x)` against the margin.
    pub fn kkt_residual(&self, x: &FeatureMatrix) -> Result<f64> {
        let c = self.model.c;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let yf = x.labels[i] as f64 * self.model.decision(x.row(i))?;
            let a = self.alpha[i];
            let r = if a <= 0.0 {
                (1.0 - yf).max(0.0)
            } else if a >= c {
                (yf - 1.0).max(0.0)
            } else {
                (yf - 1.0).abs()
            };
            worst = worst.max(r);
        }
        Ok(worst)
    }

    pub fn balance(&self, x: &FeatureMatrix) -> f64 {
        self.alpha.iter().zip(&x.labels).map(|(a, &y)| a * y as f64).sum()
    }
}

pub fn dual_objective(x: &FeatureMatrix, alpha: &[f64], gamma: f64) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            if alpha[j] == 0.0 {
                continue;
            }
            let k = (-gamma * sq_dist(x.row(i), x.row(j))).exp();
            quad += alpha[i] * alpha[j] * (x.labels[i] * x.labels[j]) as f64 * k;
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// SMO with second-order working-pair selection around the maximal
/// violating index. Stops when `m(alpha) - M(alpha) < tol` or after
/// `max_iter` pair updates.
pub fn smo_train(x: &FeatureMatrix, params: &SvmParams) -> Result<SmoSolution> {
    params.validate()?;
    let n = x.len();
    let y: Vec<f64> = x.labels.iter().map(|&l| l as f64).collect();
    if !y.iter().any(|&v| v > 0.0) || !y.iter().any(|&v| v < 0.0) {
        return Err(Error::Training("svm training needs samples of both classes".into()));
    }
    let c = params.c;
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let mut rows = KernelRows::new(x, params.gamma);
    let up = |a: f64, yi: f64| if yi > 0.0 { a < c } else { a > 0.0 };
    let low = |a: f64, yi: f64| if yi > 0.0 { a > 0.0 } else { a < c };

    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    while iterations < params.max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            gap = 0.0;
            break;
        }
        let ki = rows.row(i).to_vec();
        let mut gmin = f64::INFINITY;
        let mut obj_min = f64::INFINITY;
        let mut j = usize::MAX;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            let b = gmax - v;
            if b > 0.0 {
                // RBF diagonal entries are 1.
                let a = (ki[i] + 1.0 - 2.0 * ki[t]).max(TAU);
                let obj = -b * b / a;
                if obj <= obj_min {
                    obj_min = obj;
                    j = t;
                }
            }
        }
        gap = gmax - gmin;
        if gap < params.tol || j == usize::MAX {
            break;
        }
        let kj = rows.row(j).to_vec();
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * ki[j];
        if y[i] != y[j] {
            let quad = (ki[i] + kj[j] + 2.0 * qij).max(TAU);
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
            let quad = (ki[i] + kj[j] - 2.0 * qij).max(TAU);
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
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        iterations += 1;
    }
    let converged = gap < params.tol;
    if !converged {
        log::warn!("smo stopped after {iterations} updates with KKT gap {gap:.3e}");
    }

    // b = -rho, rho averaged over free variables.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
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
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };

    let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    let model = KernelSvmModel {
        dim: x.dim,
        support: sv.iter().flat_map(|&t| x.row(t).iter().copied()).collect(),
        coef: sv.iter().map(|&t| alpha[t] * y[t]).collect(),
        bias: -rho,
        gamma: params.gamma,
        c,
    };
    Ok(SmoSolution {
        model,
        alpha,
        iterations,
        gap,
        converged,
    })
}

/// SVM classification head: tap layer, feature scaler and kernel model.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmHead {
    pub layer: usize,
    pub scaler: FeatureScaler,
    pub model: KernelSvmModel,
}

impl SvmHead {
    /// Fits scaler and SVM on features of `train` taken at `layer`.
    pub fn fit(
        net: &ModelGraph,
        layer: Option<usize>,
        train: &dyn SampleSource,
        params: &SvmParams,
        batch_size: usize,
    ) -> Result<(SvmHead, SmoSolution)> {
        let layer = match layer {
            Some(l) => l,
            None => net
                .topology()
                .penultimate_dense()
                .ok_or_else(|| Error::Param("model has no penultimate dense layer".into()))?,
        };
        let raw = extract_features(net, Some(layer), train, batch_size)?;
        let scaler = FeatureScaler::fit(&raw)?;
        let scaled = scaler.transform(&raw)?;
        let solution = smo_train(&scaled, params)?;
        Ok((
            SvmHead {
                layer,
                scaler,
                model: solution.model.clone(),
            },
            solution,
        ))
    }

    /// Label and decision value for every sample of `data`.
    pub fn predict(&self, net: &ModelGraph, data: &dyn SampleSource, batch_size: usize) -> Result<Vec<(Label, f64)>> {
        let raw = extract_features(net, Some(self.layer), data, batch_size)?;
        let scaled = self.scaler.transform(&raw)?;
        Ok(self
            .model
            .predict_all(&scaled)?
            .into_iter()
            .map(|(s, f)| (label_of(s), f))
            .collect())
    }

    pub fn to_aux(&self) -> Vec<(String, Blob)> {
        let m = &self.model;
        vec![
            (
                "svm.meta".into(),
                Blob::F64 {
                    shape: vec![6],
                    data: vec![self.layer as f64, m.dim as f64, m.gamma, m.c, m.bias, m.n_support() as f64],
                },
            ),
            (
                "svm.scaler.mean".into(),
                Blob::F64 {
                    shape: vec![self.scaler.mean.len()],
                    data: self.scaler.mean.clone(),
                },
            ),
            (
                "svm.scaler.std".into(),
                Blob::F64 {
                    shape: vec![self.scaler.std.len()],
                    data: self.scaler.std.clone(),
                },
            ),
            (
                "svm.support".into(),
                Blob::F32 {
                    shape: vec![m.n_support(), m.dim],
                    data: m.support.clone(),
                },
            ),
            (
                "svm.coef".into(),
                Blob::F64 {
                    shape: vec![m.n_support()],
                    data: m.coef.clone(),
                },
            ),
        ]
    }

    /// Rebuilds the head from checkpoint aux records; `None` when the
    /// checkpoint carries no SVM.
    pub fn from_aux(aux: &[(String, Blob)]) -> Result<Option<SvmHead>> {
        let find = |name: &str| aux.iter().find(|(n, _)| n == name).map(|(_, b)| b);
        let Some(meta) = find("svm.meta") else {
            return Ok(None);
        };
        let f64s = |name: &str| -> Result<Vec<f64>> {
            match find(name) {
                Some(Blob::F64 { data, .. }) => Ok(data.clone()),
                _ => Err(Error::Format(format!("svm record {name} missing or mistyped"))),
            }
        };
        let Blob::F64 { data: meta, .. } = meta else {
            return Err(Error::Format("svm.meta must be f64".into()));
        };
        if meta.len() != 6 {
            return Err(Error::Format("svm.meta must hold 6 values".into()));
        }
        let (dim, nsv) = (meta[1] as usize, meta[5] as usize);
        let support = match find("svm.support") {
            Some(Blob::F32 { data, .. }) => data.clone(),
            _ => return Err(Error::Format("svm record svm.support missing or mistyped".into())),
        };
        let coef = f64s("svm.coef")?;
        let scaler = FeatureScaler {
            mean: f64s("svm.scaler.mean")?,
            std: f64s("svm.scaler.std")?,
        };
        if support.len() != dim * nsv || coef.len() != nsv || scaler.mean.len() != dim || scaler.std.len() != dim {
            return Err(Error::Format("svm records have inconsistent sizes".into()));
        }
        Ok(Some(SvmHead {
            layer: meta[0] as usize,
            scaler,
            model: KernelSvmModel {
                dim,
                support,
                coef,
                bias: meta[4],
                gamma: meta[2],
                c: meta[3],
            },
        }))
    }
}
