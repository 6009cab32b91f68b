//! Randomised gradient checks for every layer kind.
//!
//! Raw layer kernels are checked on their FP64 instantiation with step
//! [`DEFAULT_STEP`]. Graph-level cases run the FP32 model and use a wider
//! step, chosen away from kinks so that rounding noise stays far below the
//! tolerance.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_gradient, finite_diff_gradient_f64, relative_error, relative_error_f32, DEFAULT_STEP};
use crate::layers::{self, dense::DenseGrads};
use crate::model::{FreezeSpec, LayerNode, LayerSpec, ModelGraph, Topology};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::loss::softmax_bce;
use crate::Label;

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 100;

const GRAPH_STEP: f64 = 1e-2;

type Check = dyn Fn(&mut RngStream) -> Result<f64> + Send + Sync;

/// Signature of a dense backward kernel on the FP64 path.
pub type DenseBackward = fn(&[f64], usize, usize, &[f64], &[f64], bool) -> Result<DenseGrads<f64>>;

/// One named family of random instances; each run returns the relative
/// error of that instance.
pub struct GradCase {
    pub name: String,
    check: Box<Check>,
}

impl GradCase {
    pub fn new(name: impl Into<String>, check: impl Fn(&mut RngStream) -> Result<f64> + Send + Sync + 'static) -> GradCase {
        GradCase {
            name: name.into(),
            check: Box::new(check),
        }
    }

    pub fn run_once(&self, stream: &mut RngStream) -> Result<f64> {
        (self.check)(stream)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let status = if c.passed() { "PASS" } else { "FAIL" };
            let _ = write!(s, "{status} {:<20} worst_rel_err={:.3e} instances={}", c.name, c.worst, c.instances);
            if let Some(e) = &c.error {
                let _ = write!(s, " error={e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `instances` random instances of every case. Instance `i` of case `k`
/// draws from its own stream, so results do not depend on execution order.
pub fn run_suite(cases: &[GradCase], instances: usize, seed: u64) -> SuiteReport {
    let root = RngStream::new(seed, 0x4752_4144);
    let cases = cases
        .iter()
        .enumerate()
        .map(|(k, case)| {
            let mut worst = 0.0f64;
            let mut error = None;
            for i in 0..instances {
                let mut s = root.derive(k as u64).derive(i as u64);
                match case.run_once(&mut s) {
                    Ok(e) if e.is_finite() => worst = worst.max(e),
                    Ok(e) => {
                        error = Some(format!("instance {i}: relative error {e}"));
                        break;
                    }
                    Err(e) => {
                        error = Some(format!("instance {i}: {e}"));
                        break;
                    }
                }
            }
            CaseResult {
                name: case.name.clone(),
                instances,
                worst,
                error,
            }
        })
        .collect();
    SuiteReport { cases }
}

/// Every layer kind plus the softmax+BCE composite and a frozen-layer
/// pass-through.
pub fn default_cases() -> Vec<GradCase> {
    vec![
        conv_case(),
        pool_case(),
        relu_case(),
        dense_case_with(layers::dense::dense_backward_raw::<f64>),
        dropout_case(),
        flatten_case(),
        softmax_case(),
        softmax_bce_case(),
        frozen_case(),
    ]
}

fn vec_f64(s: &mut RngStream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| s.uniform(lo, hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Uniform magnitude in `[0.05, 1)` with a random sign, keeping values away
/// from the ReLU kink.
fn off_kink(s: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = s.uniform(0.05, 1.0);
            if s.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn conv_case() -> GradCase {
    GradCase::new("conv2d", |s| {
        let xs = [1 + s.below(2), 1 + s.below(3), 3 + s.below(4), 3 + s.below(4)];
        let ws = [1 + s.below(3), xs[1], 3, 3];
        let (nx, nw, nb) = (xs.iter().product(), ws.iter().product::<usize>(), ws[0]);
        let theta = vec_f64(s, nx + nw + nb, -1.0, 1.0);
        let r = vec_f64(s, xs[0] * ws[0] * xs[2] * xs[3], -1.0, 1.0);
        let loss = |t: &[f64]| {
            let y = layers::conv::conv2d_forward(&t[..nx], xs, &t[nx..nx + nw], ws, &t[nx + nw..]).expect("conv forward");
            dot(&y, &r)
        };
        let g = layers::conv::conv2d_backward_raw(&theta[..nx], xs, &theta[nx..nx + nw], ws, &r, true)?;
        let ana: Vec<f64> = g.dx.expect("dx").into_iter().chain(g.dw).chain(g.db).collect();
        Ok(relative_error(&ana, &finite_diff_gradient_f64(loss, &theta, DEFAULT_STEP)?))
    })
}

fn pool_case() -> GradCase {
    GradCase::new("maxpool2d", |s| {
        let xs = [1 + s.below(2), 1 + s.below(3), 2 + s.below(5), 2 + s.below(5)];
        let n: usize = xs.iter().product();
        // Distinct values spaced well beyond the step so no window changes
        // its winner under perturbation.
        let mut x: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        s.shuffle(&mut x);
        let (y, idx) = layers::pool::maxpool2d_forward(&x, xs)?;
        let r = vec_f64(s, y.len(), -1.0, 1.0);
        let loss = |t: &[f64]| dot(&layers::pool::maxpool2d_forward(t, xs).expect("pool forward").0, &r);
        let ana = layers::pool::maxpool2d_backward_raw(&r, &idx, n)?;
        Ok(relative_error(&ana, &finite_diff_gradient_f64(loss, &x, DEFAULT_STEP)?))
    })
}

fn relu_case() -> GradCase {
    GradCase::new("relu", |s| {
        let n = 1 + s.below(64);
        let x = off_kink(s, n);
        let r = vec_f64(s, n, -1.0, 1.0);
        let loss = |t: &[f64]| dot(&layers::activation::relu_forward(t), &r);
        let ana = layers::activation::relu_backward_raw(&x, &r);
        Ok(relative_error(&ana, &finite_diff_gradient_f64(loss, &x, DEFAULT_STEP)?))
    })
}

/// The dense case with a pluggable backward kernel.
pub fn dense_case_with(backward: DenseBackward) -> GradCase {
    GradCase::new("dense", move |s| {
        let (b, i, o) = (1 + s.below(4), 1 + s.below(8), 1 + s.below(5));
        let (nx, nw) = (b * i, i * o);
        let theta = vec_f64(s, nx + nw + o, -1.0, 1.0);
        let r = vec_f64(s, b * o, -1.0, 1.0);
        let loss = |t: &[f64]| {
            let y = layers::dense::dense_forward(&t[..nx], b, i, &t[nx..nx + nw], &t[nx + nw..]).expect("dense forward");
            dot(&y, &r)
        };
        let g = backward(&theta[..nx], b, i, &theta[nx..nx + nw], &r, true)?;
        let dx = g.dx.ok_or_else(|| Error::Oracle("dense backward returned no input gradient".into()))?;
        let ana: Vec<f64> = dx.into_iter().chain(g.dw).chain(g.db).collect();
        Ok(relative_error(&ana, &finite_diff_gradient_f64(loss, &theta, DEFAULT_STEP)?))
    })
}

fn dropout_case() -> GradCase {
    GradCase::new("dropout", |s| {
        let n = 1 + s.below(64);
        let rate = s.uniform(0.1, 0.9) as f32;
        let mask = layers::dropout::sample_mask(n, rate, s)?;
        let m: Vec<f64> = mask.0.iter().map(|&v| v as f64).collect();
        let x = vec_f64(s, n, -1.0, 1.0);
        let r = vec_f64(s, n, -1.0, 1.0);
        let loss = |t: &[f64]| t.iter().zip(&m).zip(&r).map(|((a, b), c)| a * b * c).sum::<f64>();
        let g = Tensor::from_vec(&[n], r.iter().map(|&v| v as f32).collect())?;
        let ana = mask.apply(&g)?;
        let num = finite_diff_gradient_f64(loss, &x, DEFAULT_STEP)?;
        let ana: Vec<f64> = ana.data().iter().map(|&v| v as f64).collect();
        Ok(relative_error(&ana, &num))
    })
}

fn softmax_case() -> GradCase {
    GradCase::new("softmax", |s| {
        let b = 1 + s.below(6);
        let z = vec_f64(s, 2 * b, -3.0, 3.0);
        let r = vec_f64(s, 2 * b, -1.0, 1.0);
        let loss = |t: &[f64]| dot(&layers::activation::softmax2_forward(t).expect("softmax"), &r);
        let p = layers::activation::softmax2_forward(&z)?;
        let ana = layers::activation::softmax2_backward_raw(&p, &r);
        Ok(relative_error(&ana, &finite_diff_gradient_f64(loss, &z, DEFAULT_STEP)?))
    })
}

fn random_labels(s: &mut RngStream, n: usize) -> Vec<Label> {
    (0..n).map(|_| Label::from_index(s.below(2))).collect()
}

fn softmax_bce_case() -> GradCase {
    GradCase::new("softmax_bce", |s| {
        let b = 1 + s.below(8);
        let z = Tensor::uniform(&[b, 2], -3.0, 3.0, s)?;
        let labels = random_labels(s, b);
        let loss = |t: &Tensor| softmax_bce(&layers::softmax2(t).expect("softmax"), &labels).expect("bce").mean_loss;
        let ana = softmax_bce(&layers::softmax2(&z)?, &labels)?.grad_logits;
        let num = finite_diff_gradient(loss, &z, GRAPH_STEP)?;
        Ok(relative_error_f32(ana.data(), num.data()))
    })
}

fn node(name: &str, label: usize, spec: LayerSpec) -> LayerNode {
    LayerNode {
        name: name.into(),
        label,
        spec,
    }
}

/// Relative error of the graph's input gradient and trainable parameter
/// gradients against the oracle on mean softmax+BCE loss.
fn graph_error(model: &mut ModelGraph, x: &Tensor, labels: &[Label]) -> Result<f64> {
    let loss_at = |m: &ModelGraph, t: &Tensor| softmax_bce(&m.predict(t).expect("forward"), labels).expect("bce").mean_loss;
    let trace = model.forward_trace(x, None)?;
    let out = softmax_bce(trace.output(), labels)?;
    let grads = model.backward(&trace, &out.grad_logits, true, true)?;
    let dx = grads.input.ok_or_else(|| Error::Oracle("no input gradient".into()))?;
    let mut ana: Vec<f32> = dx.data().to_vec();
    let mut num: Vec<f32> = finite_diff_gradient(|t| loss_at(model, t), x, GRAPH_STEP)?.into_data();
    for (pi, g) in grads.params.iter().enumerate() {
        let p = &model.params()[pi];
        match (p.trainable, g) {
            (false, Some(_)) => return Err(Error::Oracle(format!("frozen `{}` received a gradient", p.name))),
            (true, None) => return Err(Error::Oracle(format!("trainable `{}` has no gradient", p.name))),
            (false, None) => continue,
            (true, Some(g)) => {
                let value = p.value.clone();
                let mut probe = model.clone();
                let fd = finite_diff_gradient(
                    |t| {
                        probe.params_mut()[pi].value = t.clone();
                        loss_at(&probe, x)
                    },
                    &value,
                    GRAPH_STEP,
                )?;
                ana.extend_from_slice(g.data());
                num.extend_from_slice(fd.data());
            }
        }
    }
    Ok(relative_error_f32(&ana, &num))
}

fn flatten_case() -> GradCase {
    GradCase::new("flatten", |s| {
        let (c, h, w) = (1 + s.below(3), 1 + s.below(3), 1 + s.below(3));
        let topo = Topology {
            name: "flatten-check".into(),
            input: vec![c, h, w],
            layers: vec![
                node("flatten", 1, LayerSpec::Flatten),
                node(
                    "dense",
                    2,
                    LayerSpec::Dense {
                        inputs: c * h * w,
                        outputs: 2,
                        relu: false,
                    },
                ),
                node("softmax", 3, LayerSpec::Softmax),
            ],
        };
        let mut m = ModelGraph::from_topology(topo, &s.derive(1))?;
        let b = 1 + s.below(3);
        let x = Tensor::uniform(&[b, c, h, w], -1.0, 1.0, s)?;
        let labels = random_labels(s, b);
        graph_error(&mut m, &x, &labels)
    })
}

/// A frozen conv layer below a trainable head: the gradient must pass
/// through unchanged while the frozen parameters receive none.
fn frozen_case() -> GradCase {
    GradCase::new("frozen_passthrough", |s| {
        let (c, o, hw) = (1 + s.below(2), 1 + s.below(3), 3 + s.below(3));
        let topo = Topology {
            name: "frozen-check".into(),
            input: vec![c, hw, hw],
            layers: vec![
                node(
                    "conv",
                    1,
                    LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: o,
                        kernel: 3,
                        relu: false,
                    },
                ),
                node("flatten", 2, LayerSpec::Flatten),
                node(
                    "dense",
                    3,
                    LayerSpec::Dense {
                        inputs: o * hw * hw,
                        outputs: 2,
                        relu: false,
                    },
                ),
                node("softmax", 4, LayerSpec::Softmax),
            ],
        };
        let mut m = ModelGraph::from_topology(topo, &s.derive(1))?;
        m.set_trainable(FreezeSpec::Range(1, 1))?;
        let b = 1 + s.below(3);
        let x = Tensor::uniform(&[b, c, hw, hw], -1.0, 1.0, s)?;
        let labels = random_labels(s, b);
        graph_error(&mut m, &x, &labels)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;

    #[test]
    fn pristine_suite_passes() {
        let report = run_suite(&default_cases(), 10, 0);
        assert!(report.passed(), "{}", report.to_text());
        for kind in LayerKind::ALL {
            assert!(report.cases.iter().any(|c| c.name == kind.name()), "{kind} missing");
        }
    }

    #[test]
    fn sign_bug_is_named() {
        fn broken(x: &[f64], b: usize, i: usize, w: &[f64], g: &[f64], need: bool) -> Result<DenseGrads<f64>> {
            let mut r = layers::dense::dense_backward_raw(x, b, i, w, g, need)?;
            r.dw.iter_mut().for_each(|v| *v = -*v);
            Ok(r)
        }
        let report = run_suite(&[dense_case_with(broken)], 5, 0);
        assert_eq!(report.failures(), vec!["dense"]);
    }
}
