//! Client-side training: mini-batch SGD over simplex endpoints, with optional
//! proximal regularization, and the strategy-specific wrappers around it.

use rand::seq::SliceRandom;

use super::{ClientState, ModelDelta};
use crate::config::FederationConfig;
use crate::error::{FlocoError, Result};
use crate::model::{loss_and_grads, Batch, HeadEndpoints, LossGrads, ModelState};
use crate::numerics::{squared_distance, Purpose, RngStream, StreamKey};
use crate::partition::LabeledDataset;
use crate::simplex::{SimplexPoint, SubregionSampler};

/// Reshuffled-per-epoch mini-batch order. The last batch of an epoch may be
/// shorter than the batch size.
#[derive(Debug, Clone)]
pub struct Minibatches {
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl Minibatches {
    pub fn new(len: usize, mut rng: RngStream) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_indices(&mut self, batch_size: usize) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + batch_size).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

/// Where each step's simplex point comes from.
#[derive(Debug, Clone)]
pub enum AlphaSource {
    Fixed(SimplexPoint),
    Subregion {
        sampler: SubregionSampler,
        rng: RngStream,
    },
}

impl AlphaSource {
    fn next(&mut self) -> SimplexPoint {
        match self {
            AlphaSource::Fixed(p) => p.clone(),
            AlphaSource::Subregion { sampler, rng } => sampler.sample(rng),
        }
    }
}

/// `(strength / 2) * ||params - anchor||^2` added to the local loss.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub strength: f64,
    pub anchor: &'a ModelState,
    /// Whether the backbone is regularized too (otherwise endpoints only).
    pub include_backbone: bool,
}

impl Prox<'_> {
    /// Adds the proximal value and gradient to `grads` at `model`.
    pub fn apply(&self, model: &ModelState, grads: &mut LossGrads) {
        let s = self.strength;
        let mut penalty = 0.0;
        if self.include_backbone && !grads.backbone.is_empty() {
            penalty += squared_distance(model.backbone(), self.anchor.backbone());
            for ((g, w), a) in grads
                .backbone
                .iter_mut()
                .zip(model.backbone())
                .zip(self.anchor.backbone())
            {
                *g += s * (w - a);
            }
        }
        let anchors = self.anchor.head().endpoints();
        for ((g, theta), anchor) in grads
            .endpoints
            .iter_mut()
            .zip(model.head().endpoints())
            .zip(anchors)
        {
            penalty += squared_distance(theta, anchor);
            for ((gi, t), a) in g.iter_mut().zip(theta).zip(anchor) {
                *gi += s * (t - a);
            }
        }
        grads.loss += 0.5 * s * penalty;
    }
}

/// Everything one local training run needs.
#[derive(Debug)]
pub struct LocalPlan<'a> {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alphas: AlphaSource,
    pub batches: Minibatches,
    pub prox: Option<Prox<'a>>,
    pub train_backbone: bool,
}

/// Local objective value and gradients on `batch` at `alpha`, including the
/// proximal term when given. Endpoint gradients are `alpha_m * grad F(w_alpha)`
/// plus the proximal pull.
pub fn regularized_grads(
    model: &ModelState,
    alpha: &SimplexPoint,
    batch: &Batch,
    prox: Option<&Prox<'_>>,
) -> Result<LossGrads> {
    let mut grads = loss_and_grads(model, alpha, batch)?;
    if let Some(p) = prox {
        p.apply(model, &mut grads);
    }
    Ok(grads)
}

/// Runs `plan.steps` SGD steps from `start` on `data`; every step draws a
/// fresh simplex point and a mini-batch.
pub fn simplex_sgd(start: &ModelState, data: &LabeledDataset, mut plan: LocalPlan<'_>) -> Result<ModelState> {
    if data.is_empty() {
        return Err(FlocoError::Empty("client has no training samples".into()));
    }
    let mut model = start.clone();
    let lr = plan.lr;
    for _ in 0..plan.steps {
        let alpha = plan.alphas.next();
        let idx = plan.batches.next_indices(plan.batch_size);
        let batch = Batch::new(
            data.features().select_rows(idx),
            idx.iter().map(|&i| data.labels()[i]).collect(),
            data.classes(),
        )?;
        let grads = regularized_grads(&model, &alpha, &batch, plan.prox.as_ref())?;
        if plan.train_backbone {
            for (w, g) in model.backbone_mut().iter_mut().zip(&grads.backbone) {
                *w -= lr * g;
            }
        }
        for (theta, g) in model.head_mut().endpoints_mut().iter_mut().zip(&grads.endpoints) {
            for (t, gi) in theta.iter_mut().zip(g) {
                *t -= lr * gi;
            }
        }
    }
    Ok(model)
}

fn stream(cfg: &FederationConfig, round: usize, client: usize, purpose: Purpose) -> RngStream {
    RngStream::new(cfg.master_seed, StreamKey::new(round, client, purpose))
}

fn require_flat(model: &ModelState) -> Result<()> {
    if model.simplex_dim() != 0 {
        return Err(FlocoError::invalid(format!(
            "flat strategies need a single endpoint, model has {}",
            model.simplex_dim() + 1
        )));
    }
    Ok(())
}

fn flat_plan<'a>(
    cfg: &FederationConfig,
    client: &ClientState,
    round: usize,
    prox: Option<Prox<'a>>,
) -> LocalPlan<'a> {
    let n = client.num_samples();
    LocalPlan {
        steps: cfg.local_steps_for(n),
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        alphas: AlphaSource::Fixed(SimplexPoint::vertex(0, 1)),
        batches: Minibatches::new(n, stream(cfg, round, client.id, Purpose::Batches)),
        prox,
        train_backbone: true,
    }
}

/// T' plain SGD steps from the global model; returns the parameter change.
pub fn local_update_fedavg(
    global: &ModelState,
    client: &ClientState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ModelDelta> {
    require_flat(global)?;
    let end = simplex_sgd(global, &client.train, flat_plan(cfg, client, round, None))?;
    ModelDelta::between(global, &end)
}

/// As FedAvg with the extra gradient `mu * (w - w_global)`.
pub fn local_update_fedprox(
    global: &ModelState,
    client: &ClientState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ModelDelta> {
    require_flat(global)?;
    let prox = Prox {
        strength: cfg.mu,
        anchor: global,
        include_backbone: true,
    };
    let end = simplex_sgd(global, &client.train, flat_plan(cfg, client, round, Some(prox)))?;
    ModelDelta::between(global, &end)
}

/// T' steps of simplex learning on the client's subregion: each step samples
/// `alpha` uniformly from the subregion and moves endpoint `m` by
/// `-lr * alpha_m * grad F(w_alpha)`; the backbone takes plain SGD steps.
pub fn local_update_floco(
    global: &ModelState,
    client: &ClientState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ModelDelta> {
    let n = client.num_samples();
    let plan = LocalPlan {
        steps: cfg.local_steps_for(n),
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        alphas: AlphaSource::Subregion {
            sampler: SubregionSampler::new(client.subregion.clone()),
            rng: stream(cfg, round, client.id, Purpose::Alpha),
        },
        batches: Minibatches::new(n, stream(cfg, round, client.id, Purpose::Batches)),
        prox: None,
        train_backbone: true,
    };
    let end = simplex_sgd(global, &client.train, plan)?;
    ModelDelta::between(global, &end)
}

/// `E` epochs of SGD on `F_k(w) + (lambda / 2) ||w - w_global||^2`,
/// starting from the global model.
pub fn ditto_finetune(
    client: &ClientState,
    global: &ModelState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ModelState> {
    require_flat(global)?;
    let n = client.num_samples();
    let plan = LocalPlan {
        steps: cfg.epoch_steps(cfg.finetune_epochs, n),
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        alphas: AlphaSource::Fixed(SimplexPoint::vertex(0, 1)),
        batches: Minibatches::new(n, stream(cfg, round, client.id, Purpose::FinetuneBatches)),
        prox: Some(Prox {
            strength: cfg.lambda,
            anchor: global,
            include_backbone: true,
        }),
        train_backbone: true,
    };
    simplex_sgd(global, &client.train, plan)
}

/// `E` epochs personalizing a private copy of the global endpoints on the
/// client's subregion, with the proximal pull `lambda * (theta_m - theta_m^0)`.
/// The backbone stays at its global value.
pub fn floco_plus_finetune(
    client: &ClientState,
    global: &ModelState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<HeadEndpoints> {
    let n = client.num_samples();
    let plan = LocalPlan {
        steps: cfg.epoch_steps(cfg.finetune_epochs, n),
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        alphas: AlphaSource::Subregion {
            sampler: SubregionSampler::new(client.subregion.clone()),
            rng: stream(cfg, round, client.id, Purpose::FinetuneAlpha),
        },
        batches: Minibatches::new(n, stream(cfg, round, client.id, Purpose::FinetuneBatches)),
        prox: Some(Prox {
            strength: cfg.lambda,
            anchor: global,
            include_backbone: false,
        }),
        train_backbone: false,
    };
    Ok(simplex_sgd(global, &client.train, plan)?.head().clone())
}
