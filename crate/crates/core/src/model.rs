//! Differentiable softmax classifier trained online from bandit feedback.
//!
//! The loss for one instance is the importance-weighted cross entropy
//! `-sum_k delta_k * log p(k|x)`, whose expectation over the policy's
//! randomness equals the full-feedback cross entropy `-log p(y|x)`. Since
//! `delta` has a single support point, the logit-layer gradient is
//! `delta_weight * (p - e_arm)` and everything below it is ordinary
//! backpropagation. Training uses plain SGD on the mean gradient of a
//! batch, with all forward passes taken at the pre-update parameters.
//!
//! Two architectures are available: linear, and one hidden layer with a
//! rectifier. Weights initialize uniformly in `[-1/sqrt(fan_in),
//! 1/sqrt(fan_in)]` from the run's seeded generator; biases start at zero.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{softmax_transform, ProbVector};
use crate::par;
use crate::policy::DeltaEstimate;

/// Probabilities below this are clamped inside the log; the event is
/// reported through a saturation flag instead of an error so a run with
/// extreme importance weights can finish and tell.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    OneHidden { hidden: usize },
}

/// Weight matrices and bias vectors of one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    input_dim: usize,
    classes: usize,
    layers: Layers,
}

#[derive(Debug, Clone, PartialEq)]
enum Layers {
    Linear {
        w: Array2<f64>,
        b: Array1<f64>,
    },
    OneHidden {
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    },
}

/// One real per parameter, in the exact shape of the owning
/// [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    layers: Layers,
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(rng.random_range(-bound..=bound));
    }
    Array2::from_shape_vec((rows, cols), values).expect("shape matches length")
}

impl ModelParameters {
    /// Fresh parameters drawn from `rng`. Fill order is fixed (row-major,
    /// first layer first) so a seed pins the initialization exactly.
    pub fn init<R: Rng>(arch: Architecture, input_dim: usize, classes: usize, rng: &mut R) -> Self {
        assert!(classes >= 2 && input_dim >= 1);
        let layers = match arch {
            Architecture::Linear => Layers::Linear {
                w: uniform_matrix(classes, input_dim, input_dim, rng),
                b: Array1::zeros(classes),
            },
            Architecture::OneHidden { hidden } => {
                assert!(hidden >= 1);
                Layers::OneHidden {
                    w1: uniform_matrix(hidden, input_dim, input_dim, rng),
                    b1: Array1::zeros(hidden),
                    w2: uniform_matrix(classes, hidden, hidden, rng),
                    b2: Array1::zeros(classes),
                }
            }
        };
        Self {
            input_dim,
            classes,
            layers,
        }
    }

    /// All-zero parameters; forward yields the uniform posterior.
    pub fn zeros(arch: Architecture, input_dim: usize, classes: usize) -> Self {
        let layers = match arch {
            Architecture::Linear => Layers::Linear {
                w: Array2::zeros((classes, input_dim)),
                b: Array1::zeros(classes),
            },
            Architecture::OneHidden { hidden } => Layers::OneHidden {
                w1: Array2::zeros((hidden, input_dim)),
                b1: Array1::zeros(hidden),
                w2: Array2::zeros((classes, hidden)),
                b2: Array1::zeros(classes),
            },
        };
        Self {
            input_dim,
            classes,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn architecture(&self) -> Architecture {
        match &self.layers {
            Layers::Linear { .. } => Architecture::Linear,
            Layers::OneHidden { w1, .. } => Architecture::OneHidden { hidden: w1.nrows() },
        }
    }

    /// Logits and softmax posterior for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ProbVector)> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let xv = ArrayView1::from(x);
        let logits: Array1<f64> = match &self.layers {
            Layers::Linear { w, b } => w.dot(&xv) + b,
            Layers::OneHidden { w1, b1, w2, b2 } => {
                let hidden = (w1.dot(&xv) + b1).mapv(|v| v.max(0.0));
                w2.dot(&hidden) + b2
            }
        };
        let logits = logits.to_vec();
        let probs = softmax_transform(&logits)?;
        Ok((logits, probs))
    }

    /// One SGD step: `params <- params - eta1 * grad`, elementwise.
    pub fn sgd_step(&mut self, grad: &GradientBundle, eta1: f64) {
        match (&mut self.layers, &grad.layers) {
            (Layers::Linear { w, b }, Layers::Linear { w: gw, b: gb }) => {
                w.scaled_add(-eta1, gw);
                b.scaled_add(-eta1, gb);
            }
            (
                Layers::OneHidden { w1, b1, w2, b2 },
                Layers::OneHidden {
                    w1: g1,
                    b1: gb1,
                    w2: g2,
                    b2: gb2,
                },
            ) => {
                w1.scaled_add(-eta1, g1);
                b1.scaled_add(-eta1, gb1);
                w2.scaled_add(-eta1, g2);
                b2.scaled_add(-eta1, gb2);
            }
            _ => panic!("gradient shape does not match parameters"),
        }
    }

    /// Named tensors in snapshot order: (name, shape, row-major values).
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        fn mat(a: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
            (vec![a.nrows(), a.ncols()], a.iter().cloned().collect())
        }
        fn vec1(a: &Array1<f64>) -> (Vec<usize>, Vec<f64>) {
            (vec![a.len()], a.to_vec())
        }
        match &self.layers {
            Layers::Linear { w, b } => {
                let (ws, wv) = mat(w);
                let (bs, bv) = vec1(b);
                vec![("w", ws, wv), ("b", bs, bv)]
            }
            Layers::OneHidden { w1, b1, w2, b2 } => {
                let (s1, v1) = mat(w1);
                let (sb1, vb1) = vec1(b1);
                let (s2, v2) = mat(w2);
                let (sb2, vb2) = vec1(b2);
                vec![
                    ("w1", s1, v1),
                    ("b1", sb1, vb1),
                    ("w2", s2, v2),
                    ("b2", sb2, vb2),
                ]
            }
        }
    }
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        let layers = match &params.layers {
            Layers::Linear { w, b } => Layers::Linear {
                w: Array2::zeros(w.dim()),
                b: Array1::zeros(b.len()),
            },
            Layers::OneHidden { w1, b1, w2, b2 } => Layers::OneHidden {
                w1: Array2::zeros(w1.dim()),
                b1: Array1::zeros(b1.len()),
                w2: Array2::zeros(w2.dim()),
                b2: Array1::zeros(b2.len()),
            },
        };
        Self { layers }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        match (&mut self.layers, &other.layers) {
            (Layers::Linear { w, b }, Layers::Linear { w: ow, b: ob }) => {
                *w += ow;
                *b += ob;
            }
            (
                Layers::OneHidden { w1, b1, w2, b2 },
                Layers::OneHidden {
                    w1: o1,
                    b1: ob1,
                    w2: o2,
                    b2: ob2,
                },
            ) => {
                *w1 += o1;
                *b1 += ob1;
                *w2 += o2;
                *b2 += ob2;
            }
            _ => panic!("gradient shapes differ"),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match &mut self.layers {
            Layers::Linear { w, b } => {
                *w *= factor;
                *b *= factor;
            }
            Layers::OneHidden { w1, b1, w2, b2 } => {
                *w1 *= factor;
                *b1 *= factor;
                *w2 *= factor;
                *b2 *= factor;
            }
        }
    }

    /// Gradient of the logit-layer bias; in both architectures this is the
    /// backpropagated logit gradient itself.
    pub fn logit_gradient(&self) -> &Array1<f64> {
        match &self.layers {
            Layers::Linear { b, .. } => b,
            Layers::OneHidden { b2, .. } => b2,
        }
    }

    /// Row-major concatenation of every tensor, for generic comparisons.
    pub fn flat(&self) -> Vec<f64> {
        match &self.layers {
            Layers::Linear { w, b } => w.iter().chain(b.iter()).cloned().collect(),
            Layers::OneHidden { w1, b1, w2, b2 } => w1
                .iter()
                .chain(b1.iter())
                .chain(w2.iter())
                .chain(b2.iter())
                .cloned()
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&v| v == 0.0)
    }
}

/// Importance-weighted cross entropy of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanditCeLoss {
    pub value: f64,
    /// True when the posterior at the pulled arm fell below [`LOG_CLAMP`].
    pub clamped: bool,
}

/// `-sum_k delta_k * log p(k|x)`; zero when `delta` is all zero.
pub fn bandit_ce_loss(probs: &ProbVector, delta: &DeltaEstimate) -> BanditCeLoss {
    debug_assert_eq!(probs.len(), delta.classes());
    if delta.is_zero() {
        return BanditCeLoss {
            value: 0.0,
            clamped: false,
        };
    }
    let p = probs.get(delta.arm());
    let clamped = p < LOG_CLAMP;
    BanditCeLoss {
        value: -delta.weight() * p.max(LOG_CLAMP).ln(),
        clamped,
    }
}

/// Adds one instance's backpropagated gradient into `acc` without
/// allocating a bundle per instance: the weight-matrix contributions are
/// rank-1 updates applied row by row.
fn accumulate_gradient(
    params: &ModelParameters,
    x: ArrayView1<'_, f64>,
    probs: &ProbVector,
    delta: &DeltaEstimate,
    acc: &mut GradientBundle,
) {
    let weight = delta.weight();
    let mut g_logits = Array1::from_iter(probs.as_slice().iter().map(|&p| weight * p));
    g_logits[delta.arm()] -= weight;
    match (&params.layers, &mut acc.layers) {
        (Layers::Linear { .. }, Layers::Linear { w, b }) => {
            for (row, &g) in g_logits.iter().enumerate() {
                w.row_mut(row).scaled_add(g, &x);
            }
            *b += &g_logits;
        }
        (
            Layers::OneHidden { w1, b1, w2, .. },
            Layers::OneHidden {
                w1: a1,
                b1: ab1,
                w2: a2,
                b2: ab2,
            },
        ) => {
            let pre = w1.dot(&x) + b1;
            let hidden = pre.mapv(|v| v.max(0.0));
            let mut g_hidden = w2.t().dot(&g_logits);
            // rectifier gate; the kink at exactly zero passes nothing
            g_hidden.zip_mut_with(&pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            for (row, &g) in g_hidden.iter().enumerate() {
                a1.row_mut(row).scaled_add(g, &x);
            }
            *ab1 += &g_hidden;
            for (row, &g) in g_logits.iter().enumerate() {
                a2.row_mut(row).scaled_add(g, &hidden);
            }
            *ab2 += &g_logits;
        }
        _ => unreachable!("accumulator shape follows the parameters"),
    }
}

/// Backpropagated gradient of [`bandit_ce_loss`] with respect to every
/// parameter. An all-zero `delta` yields the zero bundle.
pub fn bandit_ce_gradient(
    params: &ModelParameters,
    x: &[f64],
    delta: &DeltaEstimate,
) -> Result<GradientBundle> {
    let (_, probs) = params.forward(x)?;
    let mut grad = GradientBundle::zeros_like(params);
    if !delta.is_zero() {
        accumulate_gradient(params, ArrayView1::from(x), &probs, delta, &mut grad);
    }
    Ok(grad)
}

/// What one batch step produced besides the parameter update.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub mean_loss: f64,
    /// Per-instance losses in batch order.
    pub instance_losses: Vec<f64>,
    /// Instances whose log argument hit the clamp.
    pub clamped: u64,
}

/// Instances per work unit. Gradients accumulate sequentially inside a
/// chunk and chunk sums combine in chunk order, so the arithmetic is the
/// same whether chunks are evaluated in parallel or not.
const GRADIENT_CHUNK: usize = 32;

struct ChunkEval {
    losses: Vec<f64>,
    clamped: u64,
    grad: Option<GradientBundle>,
}

fn eval_chunk<X: AsRef<[f64]>>(
    params: &ModelParameters,
    chunk: &[(X, DeltaEstimate)],
) -> Result<ChunkEval> {
    let mut losses = Vec::with_capacity(chunk.len());
    let mut clamped = 0u64;
    let mut grad: Option<GradientBundle> = None;
    for (x, delta) in chunk {
        let x = x.as_ref();
        let (_, probs) = params.forward(x)?;
        let loss = bandit_ce_loss(&probs, delta);
        losses.push(loss.value);
        clamped += u64::from(loss.clamped);
        if !delta.is_zero() {
            let acc = grad.get_or_insert_with(|| GradientBundle::zeros_like(params));
            accumulate_gradient(params, ArrayView1::from(x), &probs, delta, acc);
        }
    }
    Ok(ChunkEval {
        losses,
        clamped,
        grad,
    })
}

fn apply_chunks(
    params: &mut ModelParameters,
    evals: Vec<Result<ChunkEval>>,
    n: usize,
    eta1: f64,
) -> Result<BatchOutcome> {
    let mut total: Option<GradientBundle> = None;
    let mut losses = Vec::with_capacity(n);
    let mut clamped = 0u64;
    for eval in evals {
        let chunk = eval?;
        losses.extend(chunk.losses);
        clamped += chunk.clamped;
        if let Some(g) = chunk.grad {
            match &mut total {
                Some(sum) => sum.add_assign(&g),
                None => total = Some(g),
            }
        }
    }
    let mean_loss = losses.iter().sum::<f64>() / n as f64;
    if let Some(mut sum) = total {
        sum.scale(1.0 / n as f64);
        params.sgd_step(&sum, eta1);
    }
    Ok(BatchOutcome {
        mean_loss,
        instance_losses: losses,
        clamped,
    })
}

/// One SGD step on the mean per-instance gradient of `batch`. Every
/// forward pass uses the pre-update parameters; chunks of instances are
/// evaluated in parallel when the `parallel` feature is on, with a
/// fixed-order reduction so results are bit-identical either way.
pub fn batch_update<X: AsRef<[f64]> + Sync>(
    params: &mut ModelParameters,
    batch: &[(X, DeltaEstimate)],
    eta1: f64,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let frozen = &*params;
    let chunks: Vec<&[(X, DeltaEstimate)]> = batch.chunks(GRADIENT_CHUNK).collect();
    let evals = par::map_collect(&chunks, |chunk| eval_chunk(frozen, chunk));
    apply_chunks(params, evals, batch.len(), eta1)
}

/// Sequential twin of [`batch_update`], kept for the comparison benches.
pub fn batch_update_seq<X: AsRef<[f64]>>(
    params: &mut ModelParameters,
    batch: &[(X, DeltaEstimate)],
    eta1: f64,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let frozen = &*params;
    let chunks: Vec<&[(X, DeltaEstimate)]> = batch.chunks(GRADIENT_CHUNK).collect();
    let evals = par::map_collect_seq(&chunks, |chunk| eval_chunk(frozen, chunk));
    apply_chunks(params, evals, batch.len(), eta1)
}

/// Writes `(tensor-name, shape, row-major values)` lines, preceded by an
/// architecture header. The format round-trips f64 exactly.
pub fn write_snapshot<W: Write>(params: &ModelParameters, out: &mut W) -> std::io::Result<()> {
    match params.architecture() {
        Architecture::Linear => {
            writeln!(out, "model linear {} {}", params.input_dim, params.classes)?
        }
        Architecture::OneHidden { hidden } => writeln!(
            out,
            "model one-hidden {} {} {}",
            params.input_dim, params.classes, hidden
        )?,
    }
    for (name, shape, values) in params.tensors() {
        let mut line = String::new();
        write!(line, "{} {}", name, shape.len()).unwrap();
        for d in &shape {
            write!(line, " {d}").unwrap();
        }
        for v in &values {
            write!(line, " {v:?}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn snapshot_to_file(params: &ModelParameters, path: &Path) -> Result<()> {
    let mut buffer = Vec::new();
    write_snapshot(params, &mut buffer).map_err(|e| Error::io(path, e))?;
    fs::write(path, buffer).map_err(|e| Error::io(path, e))
}

/// Reads a snapshot produced by [`write_snapshot`].
pub fn read_snapshot<R: BufRead>(reader: R) -> Result<ModelParameters> {
    let bad = |msg: &str| Error::Snapshot(msg.to_string());
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty snapshot"))?
        .map_err(|e| Error::Snapshot(e.to_string()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (arch, input_dim, classes) = match head.as_slice() {
        ["model", "linear", d, k] => (Architecture::Linear, parse_dim(d)?, parse_dim(k)?),
        ["model", "one-hidden", d, k, h] => (
            Architecture::OneHidden {
                hidden: parse_dim(h)?,
            },
            parse_dim(d)?,
            parse_dim(k)?,
        ),
        _ => return Err(bad("unrecognized header")),
    };
    let mut params = ModelParameters::zeros(arch, input_dim, classes);
    let expected: Vec<(&str, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let mut parsed: Vec<Vec<f64>> = Vec::new();
    for (line, (name, shape)) in lines.zip(&expected) {
        let line = line.map_err(|e| Error::Snapshot(e.to_string()))?;
        let mut fields = line.split_whitespace();
        if fields.next() != Some(name) {
            return Err(bad(&format!("expected tensor `{name}`")));
        }
        let rank: usize = fields
            .next()
            .ok_or_else(|| bad("missing rank"))?
            .parse()
            .map_err(|_| bad("bad rank"))?;
        if rank != shape.len() {
            return Err(bad(&format!("tensor `{name}`: rank mismatch")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(parse_dim(fields.next().ok_or_else(|| bad("missing dim"))?)?);
        }
        if dims != *shape {
            return Err(bad(&format!("tensor `{name}`: shape mismatch")));
        }
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<_>>()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(bad(&format!("tensor `{name}`: value count mismatch")));
        }
        parsed.push(values);
    }
    if parsed.len() != expected.len() {
        return Err(bad("missing tensors"));
    }
    params.layers = match params.layers {
        Layers::Linear { w, .. } => Layers::Linear {
            w: Array2::from_shape_vec(w.dim(), parsed[0].clone()).unwrap(),
            b: Array1::from_vec(parsed[1].clone()),
        },
        Layers::OneHidden { w1, w2, .. } => Layers::OneHidden {
            w1: Array2::from_shape_vec(w1.dim(), parsed[0].clone()).unwrap(),
            b1: Array1::from_vec(parsed[1].clone()),
            w2: Array2::from_shape_vec(w2.dim(), parsed[2].clone()).unwrap(),
            b2: Array1::from_vec(parsed[3].clone()),
        },
    };
    Ok(params)
}

pub fn snapshot_from_file(path: &Path) -> Result<ModelParameters> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(std::io::BufReader::new(file))
}
