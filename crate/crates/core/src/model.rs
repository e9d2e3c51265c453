//! One-hidden-layer classifier whose final layer (or, optionally, every
//! parameter) is a point in a solution simplex spanned by trainable endpoints.
//!
//! Flattened layouts:
//! - backbone: `W1` (hidden x input, row-major) then `b1` (hidden)
//! - head: `W2` (classes x hidden, row-major) then `b2` (classes)
//! - full (all-layers scope): backbone followed by head

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{FlocoError, Result};
use crate::numerics::{all_finite, axpy, RealMatrix};
use crate::simplex::SimplexPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
        }
    }

    pub fn backbone_len(&self) -> usize {
        self.hidden * self.input + self.hidden
    }

    pub fn head_len(&self) -> usize {
        self.classes * self.hidden + self.classes
    }

    pub fn full_len(&self) -> usize {
        self.backbone_len() + self.head_len()
    }
}

/// Which parameters live on the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimplexScope {
    #[default]
    LastLayer,
    AllLayers,
}

/// The `M + 1` endpoint vectors spanning the solution simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadEndpoints {
    endpoints: Vec<Vec<f64>>,
}

impl HeadEndpoints {
    pub fn new(endpoints: Vec<Vec<f64>>) -> Result<Self> {
        let len = endpoints
            .first()
            .ok_or_else(|| FlocoError::Empty("no endpoints".into()))?
            .len();
        if endpoints.iter().any(|e| e.len() != len) {
            return Err(FlocoError::dims("endpoints have unequal lengths"));
        }
        if !endpoints.iter().all(|e| all_finite(e)) {
            return Err(FlocoError::NonFinite("endpoint parameters".into()));
        }
        Ok(Self { endpoints })
    }

    pub fn endpoints(&self) -> &[Vec<f64>] {
        &self.endpoints
    }

    pub fn endpoints_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.endpoints
    }

    pub fn simplex_dim(&self) -> usize {
        self.endpoints.len() - 1
    }

    pub fn param_len(&self) -> usize {
        self.endpoints[0].len()
    }

    pub fn is_finite(&self) -> bool {
        self.endpoints.iter().all(|e| all_finite(e))
    }
}

/// `sum_m alpha_m * theta_m`
pub fn combine_head(head: &HeadEndpoints, alpha: &SimplexPoint) -> Result<Vec<f64>> {
    if alpha.len() != head.endpoints.len() {
        return Err(FlocoError::dims(format!(
            "alpha has {} coordinates but there are {} endpoints",
            alpha.len(),
            head.endpoints.len()
        )));
    }
    let mut out = vec![0.0; head.param_len()];
    for (a, theta) in alpha.coords().iter().zip(&head.endpoints) {
        axpy(*a, theta, &mut out);
    }
    Ok(out)
}

/// Mini-batch of inputs and class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: RealMatrix,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: RealMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(FlocoError::dims(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FlocoError::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &RealMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shared backbone plus simplex endpoints.
///
/// In [`SimplexScope::AllLayers`] the backbone vector is empty and every
/// endpoint holds a full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    dims: ModelDims,
    scope: SimplexScope,
    backbone: Vec<f64>,
    head: HeadEndpoints,
}

fn uniform_init<R: RngCore + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn init_backbone<R: RngCore + ?Sized>(dims: &ModelDims, rng: &mut R) -> Vec<f64> {
    uniform_init(dims.backbone_len(), dims.input, rng)
}

fn init_head<R: RngCore + ?Sized>(dims: &ModelDims, rng: &mut R) -> Vec<f64> {
    uniform_init(dims.head_len(), dims.hidden, rng)
}

impl ModelState {
    pub fn new(
        dims: ModelDims,
        scope: SimplexScope,
        backbone: Vec<f64>,
        head: HeadEndpoints,
    ) -> Result<Self> {
        let (want_backbone, want_endpoint) = match scope {
            SimplexScope::LastLayer => (dims.backbone_len(), dims.head_len()),
            SimplexScope::AllLayers => (0, dims.full_len()),
        };
        if backbone.len() != want_backbone || head.param_len() != want_endpoint {
            return Err(FlocoError::dims(format!(
                "expected backbone of {want_backbone} and endpoints of {want_endpoint} values, \
                 got {} and {}",
                backbone.len(),
                head.param_len()
            )));
        }
        Ok(Self {
            dims,
            scope,
            backbone,
            head,
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization; every
    /// endpoint is drawn independently.
    pub fn init<R: RngCore + ?Sized>(
        dims: ModelDims,
        simplex_dim: usize,
        scope: SimplexScope,
        rng: &mut R,
    ) -> Self {
        let (backbone, endpoints) = match scope {
            SimplexScope::LastLayer => {
                let backbone = init_backbone(&dims, rng);
                let endpoints = (0..=simplex_dim).map(|_| init_head(&dims, rng)).collect();
                (backbone, endpoints)
            }
            SimplexScope::AllLayers => {
                let endpoints = (0..=simplex_dim)
                    .map(|_| {
                        let mut full = init_backbone(&dims, rng);
                        full.extend(init_head(&dims, rng));
                        full
                    })
                    .collect();
                (Vec::new(), endpoints)
            }
        };
        Self {
            dims,
            scope,
            backbone,
            head: HeadEndpoints { endpoints },
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn scope(&self) -> SimplexScope {
        self.scope
    }

    pub fn backbone(&self) -> &[f64] {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Vec<f64> {
        &mut self.backbone
    }

    pub fn head(&self) -> &HeadEndpoints {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut HeadEndpoints {
        &mut self.head
    }

    pub fn simplex_dim(&self) -> usize {
        self.head.simplex_dim()
    }

    pub fn with_head(&self, head: HeadEndpoints) -> Result<Self> {
        Self::new(self.dims, self.scope, self.backbone.clone(), head)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.backbone) && self.head.is_finite()
    }

    /// Range of the classification layer inside one endpoint vector.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        match self.scope {
            SimplexScope::LastLayer => 0..self.dims.head_len(),
            SimplexScope::AllLayers => self.dims.backbone_len()..self.dims.full_len(),
        }
    }

    /// Concrete network at `alpha`.
    pub fn predictor(&self, alpha: &SimplexPoint) -> Result<Predictor> {
        let combined = combine_head(&self.head, alpha)?;
        Ok(match self.scope {
            SimplexScope::LastLayer => Predictor {
                dims: self.dims,
                backbone: self.backbone.clone(),
                head: combined,
            },
            SimplexScope::AllLayers => {
                let split = self.dims.backbone_len();
                Predictor {
                    dims: self.dims,
                    backbone: combined[..split].to_vec(),
                    head: combined[split..].to_vec(),
                }
            }
        })
    }
}

/// Anything that maps an input matrix to per-row class probabilities.
pub trait Classifier {
    fn predict_proba(&self, inputs: &RealMatrix) -> Result<RealMatrix>;
}

/// A single point-estimated network.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    dims: ModelDims,
    backbone: Vec<f64>,
    head: Vec<f64>,
}

impl Predictor {
    pub fn new(dims: ModelDims, backbone: Vec<f64>, head: Vec<f64>) -> Result<Self> {
        if backbone.len() != dims.backbone_len() || head.len() != dims.head_len() {
            return Err(FlocoError::dims("predictor parameter lengths"));
        }
        Ok(Self { dims, backbone, head })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn backbone(&self) -> &[f64] {
        &self.backbone
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    /// Mean cross-entropy on `(inputs, labels)`.
    pub fn loss(&self, inputs: &RealMatrix, labels: &[usize]) -> Result<f64> {
        check_inputs(&self.dims, inputs)?;
        if labels.is_empty() {
            return Err(FlocoError::Empty("loss of an empty batch".into()));
        }
        Ok(run_network(
            &self.dims,
            &self.backbone,
            &self.head,
            inputs,
            Some(labels),
            false,
        )
        .loss)
    }
}

impl Classifier for Predictor {
    fn predict_proba(&self, inputs: &RealMatrix) -> Result<RealMatrix> {
        check_inputs(&self.dims, inputs)?;
        Ok(
            run_network(&self.dims, &self.backbone, &self.head, inputs, None, false)
                .probs
                .expect("probabilities requested"),
        )
    }
}

fn check_inputs(dims: &ModelDims, inputs: &RealMatrix) -> Result<()> {
    if inputs.cols() != dims.input {
        return Err(FlocoError::dims(format!(
            "input width {} != configured {}",
            inputs.cols(),
            dims.input
        )));
    }
    Ok(())
}

struct NetworkOutput {
    loss: f64,
    probs: Option<RealMatrix>,
    backbone_grad: Vec<f64>,
    head_grad: Vec<f64>,
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

/// Forward pass, plus mean cross-entropy and its gradient when labels are
/// given (gradient only if `grads`).
fn run_network(
    dims: &ModelDims,
    backbone: &[f64],
    head: &[f64],
    inputs: &RealMatrix,
    labels: Option<&[usize]>,
    grads: bool,
) -> NetworkOutput {
    let (d, h, l) = (dims.input, dims.hidden, dims.classes);
    let (w1, b1) = backbone.split_at(h * d);
    let (w2, b2) = head.split_at(l * h);
    let n = inputs.rows();
    let scale = 1.0 / n.max(1) as f64;

    let mut probs = labels.is_none().then(|| RealMatrix::zeros(n, l));
    let mut backbone_grad = if grads {
        vec![0.0; backbone.len()]
    } else {
        Vec::new()
    };
    let mut head_grad = if grads { vec![0.0; head.len()] } else { Vec::new() };
    let mut loss = 0.0;

    let mut pre = vec![0.0; h];
    let mut act = vec![0.0; h];
    let mut out = vec![0.0; l];
    let mut dact = vec![0.0; h];
    for i in 0..n {
        let x = inputs.row(i);
        for j in 0..h {
            let row = &w1[j * d..(j + 1) * d];
            pre[j] = b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            act[j] = pre[j].max(0.0);
        }
        for c in 0..l {
            let row = &w2[c * h..(c + 1) * h];
            out[c] = b2[c] + row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(&mut out);
        if let Some(p) = probs.as_mut() {
            p.row_mut(i).copy_from_slice(&out);
        }
        let Some(labels) = labels else { continue };
        let y = labels[i];
        loss -= out[y].max(f64::MIN_POSITIVE).ln() * scale;
        if !grads {
            continue;
        }
        // dL/dlogits = (p - onehot) / n
        out[y] -= 1.0;
        dact.iter_mut().for_each(|v| *v = 0.0);
        let (gw2, gb2) = head_grad.split_at_mut(l * h);
        for c in 0..l {
            let g = out[c] * scale;
            gb2[c] += g;
            axpy(g, &act, &mut gw2[c * h..(c + 1) * h]);
            axpy(g, &w2[c * h..(c + 1) * h], &mut dact);
        }
        let (gw1, gb1) = backbone_grad.split_at_mut(h * d);
        for j in 0..h {
            if pre[j] > 0.0 {
                gb1[j] += dact[j];
                axpy(dact[j], x, &mut gw1[j * d..(j + 1) * d]);
            }
        }
    }
    NetworkOutput {
        loss,
        probs,
        backbone_grad,
        head_grad,
    }
}

/// Per-row class probabilities of the network at `alpha`.
pub fn forward(model: &ModelState, alpha: &SimplexPoint, inputs: &RealMatrix) -> Result<RealMatrix> {
    model.predictor(alpha)?.predict_proba(inputs)
}

/// Loss and gradients at one simplex point.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// Gradient w.r.t. the shared backbone (empty in all-layers scope).
    pub backbone: Vec<f64>,
    /// Gradient w.r.t. the combined simplex parameters `w_alpha`.
    pub combined: Vec<f64>,
    /// `alpha_m * combined` for each endpoint.
    pub endpoints: Vec<Vec<f64>>,
}

pub fn loss_and_grads(model: &ModelState, alpha: &SimplexPoint, batch: &Batch) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(FlocoError::Empty("gradient of an empty batch".into()));
    }
    check_inputs(&model.dims, batch.inputs())?;
    let p = model.predictor(alpha)?;
    let out = run_network(
        &model.dims,
        &p.backbone,
        &p.head,
        batch.inputs(),
        Some(batch.labels()),
        true,
    );
    let (backbone, combined) = match model.scope {
        SimplexScope::LastLayer => (out.backbone_grad, out.head_grad),
        SimplexScope::AllLayers => {
            let mut full = out.backbone_grad;
            full.extend(out.head_grad);
            (Vec::new(), full)
        }
    };
    let endpoints = alpha
        .coords()
        .iter()
        .map(|a| combined.iter().map(|g| a * g).collect())
        .collect();
    Ok(LossGrads {
        loss: out.loss,
        backbone,
        combined,
        endpoints,
    })
}

/// `params - gamma * grad`
pub fn sgd_step(params: &[f64], grad: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if params.len() != grad.len() {
        return Err(FlocoError::dims(format!(
            "params have {} entries, gradient {}",
            params.len(),
            grad.len()
        )));
    }
    if !(gamma > 0.0) {
        return Err(FlocoError::invalid(format!(
            "step size must be positive, got {gamma}"
        )));
    }
    Ok(params.iter().zip(grad).map(|(p, g)| p - gamma * g).collect())
}
