//! Fully-connected CRF with Potts compatibility and Gaussian pairwise
//! kernels, solved by damped parallel mean-field iterations.
//!
//! Pairwise energies are penalties: two nodes with similar features pay
//! `sum_m w_m k_m(f_i, f_j)` when their labels disagree. A mean-field
//! update sets
//!
//! ```text
//! q_i(l) ∝ exp(U_i(l) - sum_{l'} mu(l, l') sum_m w_m sum_{j != i} k_m(i, j) q_j(l'))
//! ```
//!
//! and the damped iterate is `(1 - lambda) * update + lambda * q`. The
//! whole pipeline is differentiable with respect to the unary scores and
//! the kernel weights; [`MeanFieldTrace::backward`] replays the iterations
//! in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the bilateral (position + intensity) kernel in `kernel_weights`.
pub const BILATERAL: usize = 0;
/// Index of the position-only kernel in `kernel_weights`.
pub const SPATIAL: usize = 1;

/// Lattices up to this many nodes use exact dense filtering.
pub const DENSE_NODE_LIMIT: usize = 64 * 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    /// `[bilateral, spatial]`, each nonnegative.
    pub kernel_weights: [f64; 2],
    /// Bandwidth of the position-only kernel, in lattice pixels.
    pub spatial_bandwidth: f64,
    /// Position bandwidth of the bilateral kernel, in lattice pixels.
    pub bilateral_spatial_bandwidth: f64,
    /// Intensity bandwidth of the bilateral kernel.
    pub bilateral_intensity_bandwidth: f64,
    pub num_iterations: usize,
    /// Weight of the previous iterate in the damped update.
    pub damping: f64,
    /// Support radius of the truncated filter, in bandwidths.
    pub truncation_sigmas: f64,
    /// Node count above which the truncated filter is used.
    pub dense_node_limit: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            kernel_weights: [1.0, 1.0],
            spatial_bandwidth: 3.0,
            bilateral_spatial_bandwidth: 8.0,
            bilateral_intensity_bandwidth: 0.1,
            num_iterations: 5,
            damping: 0.5,
            truncation_sigmas: 3.0,
            dense_node_limit: DENSE_NODE_LIMIT,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let bands = [
            self.spatial_bandwidth,
            self.bilateral_spatial_bandwidth,
            self.bilateral_intensity_bandwidth,
        ];
        if bands.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::InvalidConfig("CRF bandwidths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::InvalidConfig("CRF damping must lie in [0, 1]".into()));
        }
        if self.kernel_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("CRF kernel weights must be nonnegative".into()));
        }
        if !(self.truncation_sigmas > 0.0) {
            return Err(Error::InvalidConfig("truncation radius must be positive".into()));
        }
        Ok(())
    }
}

/// Per-node, per-label scores, label-major (`scores[l * nodes + i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    pub labels: usize,
    pub scores: Vec<f64>,
}

impl UnaryField {
    pub fn new(labels: usize, scores: Vec<f64>) -> Result<Self> {
        if labels == 0 || scores.len() % labels != 0 {
            return Err(Error::shape(format!(
                "{} scores do not split into {} labels",
                scores.len(),
                labels
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("unary scores must be finite".into()));
        }
        Ok(Self { labels, scores })
    }

    pub fn nodes(&self) -> usize {
        self.scores.len() / self.labels
    }

    /// Foreground/background scores whose softmax is `p` (clamped).
    pub fn from_foreground_probs(p: &[f64]) -> Self {
        let n = p.len();
        let mut scores = vec![0.0; 2 * n];
        for (i, &pi) in p.iter().enumerate() {
            let pi = pi.clamp(1e-6, 1.0 - 1e-6);
            scores[i] = (1.0 - pi).ln();
            scores[n + i] = pi.ln();
        }
        Self { labels: 2, scores }
    }
}

/// Per-node label distributions, label-major like [`UnaryField`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMarginals {
    pub labels: usize,
    pub probs: Vec<f64>,
}

impl LabelMarginals {
    pub fn nodes(&self) -> usize {
        self.probs.len() / self.labels
    }

    pub fn get(&self, node: usize, label: usize) -> f64 {
        self.probs[label * self.nodes() + node]
    }

    pub fn argmax(&self, node: usize) -> usize {
        (0..self.labels)
            .max_by(|&a, &b| self.get(node, a).total_cmp(&self.get(node, b)))
            .unwrap()
    }

    /// Largest deviation of any node's total mass from 1.
    pub fn normalization_error(&self) -> f64 {
        let n = self.nodes();
        (0..n)
            .map(|i| ((0..self.labels).map(|l| self.probs[l * n + i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &LabelMarginals) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Positions (row, col) and intensities of each node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    pub positions: Vec<[f64; 2]>,
    pub intensities: Vec<f64>,
    /// `(height, width)` when nodes are a row-major lattice.
    pub lattice: Option<(usize, usize)>,
}

impl NodeFeatures {
    pub fn lattice(height: usize, width: usize, intensities: Vec<f64>) -> Result<Self> {
        if intensities.len() != height * width {
            return Err(Error::shape(format!(
                "{} intensities for a {height}x{width} lattice",
                intensities.len()
            )));
        }
        let positions = (0..height)
            .flat_map(|r| (0..width).map(move |c| [r as f64, c as f64]))
            .collect();
        Ok(Self {
            positions,
            intensities,
            lattice: Some((height, width)),
        })
    }

    pub fn scattered(positions: Vec<[f64; 2]>, intensities: Vec<f64>) -> Result<Self> {
        if positions.len() != intensities.len() {
            return Err(Error::shape("positions and intensities differ in length"));
        }
        Ok(Self {
            positions,
            intensities,
            lattice: None,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn bilateral_vec(&self, i: usize, p: &CrfParams) -> [f64; 3] {
        [
            self.positions[i][0],
            self.positions[i][1],
            self.intensities[i] * p.bilateral_spatial_bandwidth / p.bilateral_intensity_bandwidth,
        ]
    }
}

/// Potts label compatibility: 1 when labels disagree.
pub fn potts_compatibility(label_i: usize, label_j: usize) -> f64 {
    if label_i == label_j {
        0.0
    } else {
        1.0
    }
}

/// `exp(-sum_d (f_i,d - f_j,d)^2 / (2 theta_d^2))`.
pub fn gaussian_kernel_value(feat_i: &[f64], feat_j: &[f64], bandwidths: &[f64]) -> f64 {
    debug_assert_eq!(feat_i.len(), feat_j.len());
    debug_assert_eq!(feat_i.len(), bandwidths.len());
    let e: f64 = feat_i
        .iter()
        .zip(feat_j)
        .zip(bandwidths)
        .map(|((a, b), t)| {
            let d = (a - b) / t;
            d * d
        })
        .sum();
    (-0.5 * e).exp()
}

/// One symmetric pairwise kernel with a zero diagonal.
#[derive(Clone, Debug)]
enum KernelMatrix {
    Dense { n: usize, values: Vec<f64> },
    Sparse { row_ptr: Vec<usize>, cols: Vec<usize>, values: Vec<f64> },
}

impl KernelMatrix {
    /// `out[l][i] = sum_j K[i][j] q[l][j]` for every label plane.
    fn apply(&self, q: &[f64], labels: usize, out: &mut [f64]) {
        match self {
            KernelMatrix::Dense { n, values } => {
                let n = *n;
                for l in 0..labels {
                    let ql = &q[l * n..(l + 1) * n];
                    let ol = &mut out[l * n..(l + 1) * n];
                    for (i, o) in ol.iter_mut().enumerate() {
                        let row = &values[i * n..(i + 1) * n];
                        *o = row.iter().zip(ql).map(|(k, v)| k * v).sum();
                    }
                }
            }
            KernelMatrix::Sparse { row_ptr, cols, values } => {
                let n = row_ptr.len() - 1;
                for l in 0..labels {
                    let ql = &q[l * n..(l + 1) * n];
                    for i in 0..n {
                        let mut acc = 0.0;
                        for e in row_ptr[i]..row_ptr[i + 1] {
                            acc += values[e] * ql[cols[e]];
                        }
                        out[l * n + i] = acc;
                    }
                }
            }
        }
    }
}

/// A CRF instance over fixed node features, with its kernels prebuilt.
#[derive(Clone, Debug)]
pub struct DenseCrf {
    params: CrfParams,
    nodes: usize,
    kernels: [KernelMatrix; 2],
}

fn kernel_values(features: &NodeFeatures, params: &CrfParams, i: usize, j: usize) -> [f64; 2] {
    let bi = features.bilateral_vec(i, params);
    let bj = features.bilateral_vec(j, params);
    let tb = params.bilateral_spatial_bandwidth;
    let ts = params.spatial_bandwidth;
    [
        gaussian_kernel_value(&bi, &bj, &[tb, tb, tb]),
        gaussian_kernel_value(&features.positions[i], &features.positions[j], &[ts, ts]),
    ]
}

impl DenseCrf {
    pub fn new(features: &NodeFeatures, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        let n = features.len();
        let kernels = if n <= params.dense_node_limit {
            let mut bil = vec![0.0; n * n];
            let mut spa = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let [kb, ks] = kernel_values(features, params, i, j);
                    bil[i * n + j] = kb;
                    bil[j * n + i] = kb;
                    spa[i * n + j] = ks;
                    spa[j * n + i] = ks;
                }
            }
            [
                KernelMatrix::Dense { n, values: bil },
                KernelMatrix::Dense { n, values: spa },
            ]
        } else {
            Self::truncated(features, params)
        };
        Ok(Self {
            params: params.clone(),
            nodes: n,
            kernels,
        })
    }

    /// Drop pairs farther apart than `truncation_sigmas` bandwidths.
    fn truncated(features: &NodeFeatures, params: &CrfParams) -> [KernelMatrix; 2] {
        let n = features.len();
        let radius = [
            params.truncation_sigmas * params.bilateral_spatial_bandwidth,
            params.truncation_sigmas * params.spatial_bandwidth,
        ];
        let mut built: Vec<KernelMatrix> = Vec::with_capacity(2);
        for (m, r) in radius.iter().enumerate() {
            let mut row_ptr = Vec::with_capacity(n + 1);
            let mut cols = Vec::new();
            let mut values = Vec::new();
            row_ptr.push(0);
            let r2 = r * r;
            let push = |cols: &mut Vec<usize>, values: &mut Vec<f64>, i: usize, j: usize| {
                let d0 = features.positions[i][0] - features.positions[j][0];
                let d1 = features.positions[i][1] - features.positions[j][1];
                if i != j && d0 * d0 + d1 * d1 <= r2 {
                    cols.push(j);
                    values.push(kernel_values(features, params, i, j)[m]);
                }
            };
            match features.lattice {
                Some((h, w)) => {
                    let ri = r.floor() as isize;
                    for i in 0..n {
                        let (y, x) = ((i / w) as isize, (i % w) as isize);
                        for yy in (y - ri).max(0)..=(y + ri).min(h as isize - 1) {
                            for xx in (x - ri).max(0)..=(x + ri).min(w as isize - 1) {
                                push(&mut cols, &mut values, i, yy as usize * w + xx as usize);
                            }
                        }
                        row_ptr.push(cols.len());
                    }
                }
                None => {
                    for i in 0..n {
                        for j in 0..n {
                            push(&mut cols, &mut values, i, j);
                        }
                        row_ptr.push(cols.len());
                    }
                }
            }
            built.push(KernelMatrix::Sparse { row_ptr, cols, values });
        }
        let spa = built.pop().unwrap();
        let bil = built.pop().unwrap();
        [bil, spa]
    }

    pub fn params(&self) -> &CrfParams {
        &self.params
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    fn check(&self, unary: &UnaryField) -> Result<()> {
        if unary.nodes() != self.nodes {
            return Err(Error::shape(format!(
                "unary has {} nodes, CRF has {}",
                unary.nodes(),
                self.nodes
            )));
        }
        Ok(())
    }

    /// Per-kernel filtered marginals `K_m q`.
    fn filter(&self, q: &[f64], labels: usize) -> [Vec<f64>; 2] {
        let mut out = [vec![0.0; q.len()], vec![0.0; q.len()]];
        for (m, k) in self.kernels.iter().enumerate() {
            k.apply(q, labels, &mut out[m]);
        }
        out
    }

    fn step_raw(&self, q: &[f64], unary: &UnaryField, weights: [f64; 2]) -> StepRecord {
        let labels = unary.labels;
        let n = self.nodes;
        let filtered = self.filter(q, labels);
        let mut update = vec![0.0; labels * n];
        let mut out = vec![0.0; labels * n];
        let lambda = self.params.damping;
        let mut msg = vec![0.0; labels];
        let mut score = vec![0.0; labels];
        for i in 0..n {
            for (l, m) in msg.iter_mut().enumerate() {
                *m = weights[0] * filtered[0][l * n + i] + weights[1] * filtered[1][l * n + i];
            }
            let total: f64 = msg.iter().sum();
            for l in 0..labels {
                // Potts: penalty is the message mass on every other label.
                score[l] = unary.scores[l * n + i] - (total - msg[l]);
            }
            let max = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..labels {
                let e = (score[l] - max).exp();
                update[l * n + i] = e;
                z += e;
            }
            let mut mass = 0.0;
            for l in 0..labels {
                update[l * n + i] /= z;
                let v = (1.0 - lambda) * update[l * n + i] + lambda * q[l * n + i];
                out[l * n + i] = v;
                mass += v;
            }
            for l in 0..labels {
                out[l * n + i] /= mass;
            }
        }
        StepRecord {
            input: q.to_vec(),
            update,
            filtered,
            output: out,
        }
    }

    /// One damped parallel mean-field update.
    pub fn step(&self, q: &LabelMarginals, unary: &UnaryField) -> Result<LabelMarginals> {
        self.check(unary)?;
        if q.probs.len() != unary.scores.len() {
            return Err(Error::shape("marginals and unary differ in size"));
        }
        let rec = self.step_raw(&q.probs, unary, self.params.kernel_weights);
        Ok(LabelMarginals {
            labels: unary.labels,
            probs: rec.output,
        })
    }

    pub fn infer(&self, unary: &UnaryField) -> Result<LabelMarginals> {
        Ok(self.infer_traced(unary, self.params.kernel_weights)?.0)
    }

    /// Every iterate `q_0 ..= q_T`.
    pub fn iterates(&self, unary: &UnaryField) -> Result<Vec<LabelMarginals>> {
        self.check(unary)?;
        let weights = self.params.kernel_weights;
        let mut q = softmax_labels(&unary.scores, unary.labels);
        let mut all = vec![LabelMarginals {
            labels: unary.labels,
            probs: q.clone(),
        }];
        for _ in 0..self.params.num_iterations {
            q = self.step_raw(&q, unary, weights).output;
            all.push(LabelMarginals {
                labels: unary.labels,
                probs: q.clone(),
            });
        }
        Ok(all)
    }

    /// Inference with explicit kernel weights, keeping what the backward
    /// pass needs.
    pub fn infer_traced(
        &self,
        unary: &UnaryField,
        weights: [f64; 2],
    ) -> Result<(LabelMarginals, MeanFieldTrace)> {
        self.check(unary)?;
        let labels = unary.labels;
        let q0 = softmax_labels(&unary.scores, labels);
        let mut steps = Vec::with_capacity(self.params.num_iterations);
        let mut q = q0.clone();
        for _ in 0..self.params.num_iterations {
            let rec = self.step_raw(&q, unary, weights);
            q = rec.output.clone();
            steps.push(rec);
        }
        let marg = LabelMarginals { labels, probs: q };
        Ok((
            marg,
            MeanFieldTrace {
                crf: self.clone(),
                labels,
                weights,
                initial: q0,
                steps,
            },
        ))
    }
}

#[derive(Clone, Debug)]
struct StepRecord {
    input: Vec<f64>,
    update: Vec<f64>,
    filtered: [Vec<f64>; 2],
    output: Vec<f64>,
}

/// Intermediate state of a mean-field run, for reverse-mode gradients.
#[derive(Clone, Debug)]
pub struct MeanFieldTrace {
    crf: DenseCrf,
    labels: usize,
    weights: [f64; 2],
    initial: Vec<f64>,
    steps: Vec<StepRecord>,
}

impl MeanFieldTrace {
    /// Given `dL/dq_T`, return `(dL/dU, dL/dw)`.
    pub fn backward(&self, grad_out: &[f64]) -> (Vec<f64>, [f64; 2]) {
        let n = self.crf.nodes;
        let labels = self.labels;
        let lambda = self.crf.params.damping;
        let mut grad_unary = vec![0.0; labels * n];
        let mut grad_w = [0.0; 2];
        let mut g = grad_out.to_vec();
        let mut g_msg = vec![0.0; labels * n];
        let mut filtered = vec![0.0; labels * n];
        for rec in self.steps.iter().rev() {
            // Undo the per-node renormalization of the damped output.
            let mut g_damped = vec![0.0; labels * n];
            for i in 0..n {
                let mass: f64 = (0..labels)
                    .map(|l| (1.0 - lambda) * rec.update[l * n + i] + lambda * rec.input[l * n + i])
                    .sum();
                let dot: f64 = (0..labels).map(|l| g[l * n + i] * rec.output[l * n + i]).sum();
                for l in 0..labels {
                    g_damped[l * n + i] = (g[l * n + i] - dot) / mass;
                }
            }
            let mut g_prev = vec![0.0; labels * n];
            for i in 0..n {
                let dot: f64 = (0..labels)
                    .map(|l| rec.update[l * n + i] * (1.0 - lambda) * g_damped[l * n + i])
                    .sum();
                let mut g_score_sum = 0.0;
                for l in 0..labels {
                    let gu = (1.0 - lambda) * g_damped[l * n + i];
                    let gs = rec.update[l * n + i] * gu - rec.update[l * n + i] * dot;
                    grad_unary[l * n + i] += gs;
                    // score = U - (total - msg[l]) => d score_l / d msg_l' = -(1 - [l == l'])
                    g_msg[l * n + i] = gs;
                    g_score_sum += gs;
                    g_prev[l * n + i] = lambda * g_damped[l * n + i];
                }
                for l in 0..labels {
                    g_msg[l * n + i] -= g_score_sum;
                }
            }
            for m in 0..2 {
                grad_w[m] += g_msg.iter().zip(&rec.filtered[m]).map(|(a, b)| a * b).sum::<f64>();
                if self.weights[m] != 0.0 {
                    self.crf.kernels[m].apply(&g_msg, labels, &mut filtered);
                    for (gp, f) in g_prev.iter_mut().zip(&filtered) {
                        *gp += self.weights[m] * f;
                    }
                }
            }
            g = g_prev;
        }
        // q_0 = softmax(U)
        for i in 0..n {
            let dot: f64 = (0..labels).map(|l| self.initial[l * n + i] * g[l * n + i]).sum();
            for l in 0..labels {
                grad_unary[l * n + i] += self.initial[l * n + i] * (g[l * n + i] - dot);
            }
        }
        (grad_unary, grad_w)
    }
}

fn softmax_labels(scores: &[f64], labels: usize) -> Vec<f64> {
    let n = scores.len() / labels;
    let mut out = vec![0.0; scores.len()];
    for i in 0..n {
        let max = (0..labels).map(|l| scores[l * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in 0..labels {
            let e = (scores[l * n + i] - max).exp();
            out[l * n + i] = e;
            z += e;
        }
        for l in 0..labels {
            out[l * n + i] /= z;
        }
    }
    out
}

/// `softmax(unary)`, the starting point of inference.
pub fn initial_marginals(unary: &UnaryField) -> LabelMarginals {
    LabelMarginals {
        labels: unary.labels,
        probs: softmax_labels(&unary.scores, unary.labels),
    }
}

pub fn mean_field_step(
    q: &LabelMarginals,
    unary: &UnaryField,
    features: &NodeFeatures,
    params: &CrfParams,
) -> Result<LabelMarginals> {
    DenseCrf::new(features, params)?.step(q, unary)
}

pub fn crf_inference(
    unary: &UnaryField,
    features: &NodeFeatures,
    params: &CrfParams,
) -> Result<LabelMarginals> {
    DenseCrf::new(features, params)?.infer(unary)
}

/// Refine a foreground probability map on an `h x w` lattice whose
/// bilateral kernel sees `image`; returns the refined foreground plane.
pub fn refine_foreground(
    probs: &[f64],
    image: &[f64],
    height: usize,
    width: usize,
    params: &CrfParams,
) -> Result<Vec<f64>> {
    if probs.len() != height * width {
        return Err(Error::shape(format!(
            "{} probabilities for a {height}x{width} lattice",
            probs.len()
        )));
    }
    let features = NodeFeatures::lattice(height, width, image.to_vec())?;
    let q = crf_inference(&UnaryField::from_foreground_probs(probs), &features, params)?;
    Ok(q.probs[height * width..].to_vec())
}
