//! The round loop.

use rayon::prelude::*;

use super::local::{
    ditto_finetune, floco_plus_finetune, local_update_fedavg, local_update_fedprox, local_update_floco,
};
use super::server::{
    aggregation_weights, assign_subregions_at_tau, choose_participants, global_aggregate, infer_global,
    infer_local,
};
use super::{ClientState, FederatedData, ModelDelta};
use crate::config::{FederationConfig, Strategy};
use crate::error::{FlocoError, Result};
use crate::metrics::{
    accuracy_from_probs, ece, loss_surface_grid, total_gradient_variance_endpoints,
    total_gradient_variance_flat, worst_fraction_accuracy, RoundMetrics, SurfacePoint,
};
use crate::model::{Classifier, ModelDims, ModelState};
use crate::numerics::{Purpose, RngStream, StreamKey};
use crate::partition::LabeledDataset;
use crate::simplex::ClientAssignment;

/// What happened at the assignment round.
#[derive(Debug, Clone)]
pub struct AssignmentRecord {
    pub round: usize,
    /// PCA representations fed to the assignment, one per client.
    pub kappas: Vec<Vec<f64>>,
    pub assignment: ClientAssignment,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// One row per evaluation round.
    pub metrics: Vec<RoundMetrics>,
    /// Total gradient variance of every round with at least two participants.
    pub variance_trace: Vec<(usize, f64)>,
    pub model: ModelState,
    pub clients: Vec<ClientState>,
    pub assignment: Option<AssignmentRecord>,
}

const WORST_FRACTION: f64 = 0.05;

fn local_update(
    strategy: Strategy,
    global: &ModelState,
    client: &ClientState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ModelDelta> {
    match strategy {
        Strategy::Fedavg | Strategy::Ditto => local_update_fedavg(global, client, cfg, round),
        Strategy::Fedprox => local_update_fedprox(global, client, cfg, round),
        Strategy::Floco | Strategy::FlocoPlus => local_update_floco(global, client, cfg, round),
    }
}

/// Variance of the classification-layer part of the updates.
fn round_variance(
    model: &ModelState,
    strategy: Strategy,
    updates: &[(usize, ModelDelta)],
) -> Result<Option<f64>> {
    if updates.len() < 2 {
        return Ok(None);
    }
    let range = model.head_range();
    let v = if strategy.uses_simplex() {
        let per_client: Vec<Vec<Vec<f64>>> = updates
            .iter()
            .map(|(_, d)| d.endpoints.iter().map(|e| e[range.clone()].to_vec()).collect())
            .collect();
        total_gradient_variance_endpoints(&per_client)?
    } else {
        let per_client: Vec<Vec<f64>> = updates
            .iter()
            .map(|(_, d)| d.endpoints[0][range.clone()].to_vec())
            .collect();
        total_gradient_variance_flat(&per_client)?
    };
    Ok(Some(v))
}

/// Runs `cfg.rounds` rounds on `data`, evaluating every `eval_interval`
/// rounds and after the last one.
pub fn run_experiment(cfg: &FederationConfig, data: &FederatedData) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if data.clients() != cfg.clients {
        return Err(FlocoError::config(
            "clients",
            format!("config has {} clients, data has {}", cfg.clients, data.clients()),
        ));
    }
    let strategy = cfg.strategy;
    let m = cfg.effective_simplex_dim();
    let dims = ModelDims::new(data.input_dim(), cfg.hidden_dim, data.classes());
    let mut init_rng = RngStream::new(cfg.master_seed, StreamKey::server(0, Purpose::Init));
    let mut model = ModelState::init(dims, m, cfg.simplex_scope, &mut init_rng);
    let mut clients = data.client_states(m);
    let counts: Vec<usize> = clients.iter().map(ClientState::num_samples).collect();

    let mut metrics = Vec::new();
    let mut variance_trace = Vec::new();
    let mut assignment = None;

    for t in 1..=cfg.rounds {
        let participants = choose_participants(t, cfg.clients, cfg.participants, cfg.master_seed)?;
        let assign_now = strategy.uses_simplex() && t == cfg.tau;
        let workers: Vec<usize> = if assign_now {
            (0..cfg.clients).collect()
        } else {
            participants.clone()
        };
        let deltas = workers
            .par_iter()
            .map(|&k| local_update(strategy, &model, &clients[k], cfg, t))
            .collect::<Result<Vec<_>>>()?;
        let mut all: Vec<(usize, ModelDelta)> = workers.into_iter().zip(deltas).collect();

        let updates: Vec<(usize, ModelDelta)> = if assign_now {
            all.iter()
                .filter(|(k, _)| participants.binary_search(k).is_ok())
                .cloned()
                .collect()
        } else {
            std::mem::take(&mut all)
        };
        let variance = round_variance(&model, strategy, &updates)?;
        if let Some(v) = variance {
            variance_trace.push((t, v));
        }
        let weights = aggregation_weights(&counts, &participants, cfg.renormalize_participation)?;
        let next = global_aggregate(&model, &updates, &weights)?;

        if assign_now {
            let stacks: Vec<ModelDelta> = all.into_iter().map(|(_, d)| d).collect();
            let (kappas, result) = assign_subregions_at_tau(&mut clients, &stacks, cfg.rho)?;
            log::info!(
                "round {t}: assigned subregions (z = {:?}, degenerate = {})",
                result.z_hat,
                result.degenerate
            );
            assignment = Some(AssignmentRecord {
                round: t,
                kappas,
                assignment: result,
            });
        }
        model = next;

        if t % cfg.eval_interval == 0 || t == cfg.rounds {
            let row = evaluate_round(
                cfg,
                &model,
                &mut clients,
                &data.global_test,
                t,
                variance.unwrap_or(f64::NAN),
            )?;
            log::debug!(
                "round {t}: global acc {:.4}, mean local acc {:.4}",
                row.global_acc,
                row.mean_local_acc
            );
            metrics.push(row);
        }
    }

    Ok(ExperimentOutcome {
        metrics,
        variance_trace,
        model,
        clients,
        assignment,
    })
}

fn acc_and_ece<C: Classifier>(predictor: &C, data: &LabeledDataset, bins: usize) -> Result<(f64, f64)> {
    let probs = predictor.predict_proba(data.features())?;
    Ok((
        accuracy_from_probs(&probs, data.labels())?,
        ece(&probs, data.labels(), bins)?,
    ))
}

/// Global and per-client metrics for the current model. Ditto and floco_plus
/// clients are fine-tuned from the current global model first; clients with
/// an empty test split are left out of the local averages.
pub fn evaluate_round(
    cfg: &FederationConfig,
    model: &ModelState,
    clients: &mut [ClientState],
    global_test: &LabeledDataset,
    round: usize,
    total_grad_variance: f64,
) -> Result<RoundMetrics> {
    let (global_acc, global_ece) = acc_and_ece(&infer_global(model)?, global_test, cfg.ece_bins)?;

    let local = clients
        .par_iter_mut()
        .map(|client| {
            match cfg.strategy {
                Strategy::Ditto => {
                    client.personal_model = Some(ditto_finetune(client, model, cfg, round)?);
                }
                Strategy::FlocoPlus => {
                    client.personal_head = Some(floco_plus_finetune(client, model, cfg, round)?);
                }
                _ => {}
            }
            if client.test.is_empty() {
                return Ok(None);
            }
            acc_and_ece(&infer_local(model, client)?, &client.test, cfg.ece_bins).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let local: Vec<(f64, f64)> = local.into_iter().flatten().collect();
    if local.is_empty() {
        return Err(FlocoError::Empty("no client has a local test split".into()));
    }
    let accs: Vec<f64> = local.iter().map(|p| p.0).collect();
    let n = local.len() as f64;
    Ok(RoundMetrics {
        round,
        global_acc,
        mean_local_acc: accs.iter().sum::<f64>() / n,
        global_ece,
        mean_local_ece: local.iter().map(|p| p.1).sum::<f64>() / n,
        total_grad_variance,
        worst5_local_acc: worst_fraction_accuracy(&accs, WORST_FRACTION)?,
    })
}

/// Surfaces of the final model on the global test set and on every client's
/// training split. All surfaces share the same sampled simplex points.
pub fn loss_surfaces(
    outcome: &ExperimentOutcome,
    global_test: &LabeledDataset,
    n_points: usize,
    master_seed: u64,
) -> Result<(Vec<SurfacePoint>, Vec<Vec<SurfacePoint>>)> {
    let grid = |data: &LabeledDataset| {
        let mut rng = RngStream::new(master_seed, StreamKey::server(0, Purpose::Surface));
        loss_surface_grid(&outcome.model, data, n_points, &mut rng)
    };
    let global = grid(global_test)?;
    let local = outcome
        .clients
        .par_iter()
        .map(|c| grid(&c.train))
        .collect::<Result<Vec<_>>>()?;
    Ok((global, local))
}
