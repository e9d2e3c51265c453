//! Server side: participant selection, weighted aggregation, subregion
//! assignment and the global/local predictors.

use super::{ClientState, ModelDelta};
use crate::error::{FlocoError, Result};
use crate::model::{ModelState, Predictor};
use crate::numerics::{axpy, pca_project, Purpose, RngStream, StreamKey};
use crate::simplex::{assign_client_representations, make_subregion, ClientAssignment, SimplexPoint};

/// `count` distinct client ids drawn uniformly for `round`, ascending.
pub fn choose_participants(
    round: usize,
    clients: usize,
    count: usize,
    master_seed: u64,
) -> Result<Vec<usize>> {
    if count > clients {
        return Err(FlocoError::invalid(format!(
            "cannot choose {count} participants from {clients} clients"
        )));
    }
    let mut rng = RngStream::new(master_seed, StreamKey::server(round, Purpose::Participants));
    let mut ids = rand::seq::index::sample(&mut rng, clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `N_k / N` for each participant, with `N` summed over all clients, or over
/// the participants only when `renormalize` is set.
pub fn aggregation_weights(
    sample_counts: &[usize],
    participants: &[usize],
    renormalize: bool,
) -> Result<Vec<f64>> {
    if let Some(&bad) = participants.iter().find(|&&k| k >= sample_counts.len()) {
        return Err(FlocoError::invalid(format!("unknown client {bad}")));
    }
    let total: usize = if renormalize {
        participants.iter().map(|&k| sample_counts[k]).sum()
    } else {
        sample_counts.iter().sum()
    };
    if total == 0 {
        return Err(FlocoError::Empty("no training samples to weight by".into()));
    }
    Ok(participants
        .iter()
        .map(|&k| sample_counts[k] as f64 / total as f64)
        .collect())
}

/// `base + sum_k w_k * delta_k`, accumulated in ascending client id.
/// `updates[i]` is paired with `weights[i]`.
pub fn global_aggregate(
    base: &ModelState,
    updates: &[(usize, ModelDelta)],
    weights: &[f64],
) -> Result<ModelState> {
    if updates.is_empty() {
        return Err(FlocoError::Empty("no client updates to aggregate".into()));
    }
    if updates.len() != weights.len() {
        return Err(FlocoError::dims(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let endpoints = base.head().endpoints().len();
    for (_, d) in updates {
        let shape_ok = d.backbone.len() == base.backbone().len()
            && d.endpoints.len() == endpoints
            && d.endpoints
                .iter()
                .zip(base.head().endpoints())
                .all(|(a, b)| a.len() == b.len());
        if !shape_ok {
            return Err(FlocoError::dims("update shape differs from the global model"));
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].0);

    let mut out = base.clone();
    for i in order {
        let (_, delta) = &updates[i];
        let w = weights[i];
        axpy(w, &delta.backbone, out.backbone_mut());
        for (theta, d) in out.head_mut().endpoints_mut().iter_mut().zip(&delta.endpoints) {
            axpy(w, d, theta);
        }
    }
    if !out.is_finite() {
        return Err(FlocoError::NonFinite("aggregated parameters".into()));
    }
    Ok(out)
}

/// Places every client on the simplex from its stacked endpoint update and
/// sets its subregion to the `rho`-ball around that point. `deltas[k]`
/// belongs to `clients[k]`.
pub fn assign_subregions_at_tau(
    clients: &mut [ClientState],
    deltas: &[ModelDelta],
    rho: f64,
) -> Result<(Vec<Vec<f64>>, ClientAssignment)> {
    if deltas.len() != clients.len() {
        return Err(FlocoError::invalid(format!(
            "{} clients but {} gradient stacks",
            clients.len(),
            deltas.len()
        )));
    }
    let dims = deltas
        .first()
        .map(|d| d.endpoints.len())
        .ok_or_else(|| FlocoError::Empty("no gradient stacks".into()))?;
    let stacked: Vec<Vec<f64>> = deltas.iter().map(ModelDelta::stacked_endpoints).collect();
    let kappas = pca_project(&stacked, dims)?;
    let assignment = assign_client_representations(&kappas)?;
    for (client, alpha) in clients.iter_mut().zip(&assignment.alphas) {
        client.subregion = make_subregion(alpha.clone(), rho)?;
        client.projected = Some(alpha.clone());
    }
    Ok((kappas, assignment))
}

/// The network at the simplex center.
pub fn infer_global(model: &ModelState) -> Result<Predictor> {
    model.predictor(&SimplexPoint::center(model.simplex_dim()))
}

/// The client's network: its personal model when it has one, otherwise the
/// (personal or global) endpoints at its projected point, falling back to
/// the center before assignment.
pub fn infer_local(model: &ModelState, client: &ClientState) -> Result<Predictor> {
    if let Some(personal) = &client.personal_model {
        return infer_global(personal);
    }
    let alpha = client
        .projected
        .clone()
        .unwrap_or_else(|| SimplexPoint::center(model.simplex_dim()));
    match &client.personal_head {
        Some(head) => model.with_head(head.clone())?.predictor(&alpha),
        None => model.predictor(&alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_clients_when_count_equals_k() {
        assert_eq!(choose_participants(3, 5, 5, 9).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(choose_participants(3, 5, 6, 9).is_err());
    }

    #[test]
    fn participants_are_reproducible() {
        let a = choose_participants(7, 20, 10, 1).unwrap();
        assert_eq!(a, choose_participants(7, 20, 10, 1).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn weights_use_all_clients_unless_renormalized() {
        let counts = [10, 30, 60];
        assert_eq!(aggregation_weights(&counts, &[1], false).unwrap(), vec![0.3]);
        assert_eq!(aggregation_weights(&counts, &[1], true).unwrap(), vec![1.0]);
        assert!(aggregation_weights(&counts, &[3], false).is_err());
    }
}
