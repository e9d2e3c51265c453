//! Round engine for FedAvg, FedProx, Ditto and the simplex-based strategies.

mod engine;
mod local;
mod server;

pub use engine::{evaluate_round, loss_surfaces, run_experiment, AssignmentRecord, ExperimentOutcome};
pub use local::{
    ditto_finetune, floco_plus_finetune, local_update_fedavg, local_update_fedprox, local_update_floco,
    regularized_grads, simplex_sgd, AlphaSource, LocalPlan, Minibatches, Prox,
};
pub use server::{
    aggregation_weights, assign_subregions_at_tau, choose_participants, global_aggregate, infer_global,
    infer_local,
};

use rand::RngCore;

use crate::config::{FederationConfig, PartitionScheme};
use crate::error::{FlocoError, Result};
use crate::model::{HeadEndpoints, ModelState};
use crate::numerics::{sub, Purpose, RngStream, StreamKey};
use crate::partition::{
    partition_dirichlet, partition_fivefold, stratified_split, BlobGenerator, LabeledDataset,
    PartitionResult, BLOB_RADIUS,
};
use crate::simplex::{SimplexPoint, Subregion};

/// Per-client state carried across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub subregion: Subregion,
    /// Projected point on the simplex, once assigned.
    pub projected: Option<SimplexPoint>,
    /// Fine-tuned endpoints (floco_plus).
    pub personal_head: Option<HeadEndpoints>,
    /// Fine-tuned single model (Ditto).
    pub personal_model: Option<ModelState>,
}

impl ClientState {
    pub fn new(id: usize, train: LabeledDataset, test: LabeledDataset, simplex_dim: usize) -> Self {
        Self {
            id,
            train,
            test,
            subregion: Subregion::whole(simplex_dim),
            projected: None,
            personal_head: None,
            personal_model: None,
        }
    }

    /// `N_k`, the size of the training split.
    pub fn num_samples(&self) -> usize {
        self.train.len()
    }
}

/// Client train/test splits and the global test set.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub splits: Vec<(LabeledDataset, LabeledDataset)>,
    pub global_test: LabeledDataset,
}

impl FederatedData {
    /// Splits each partition cell into stratified train/test parts.
    pub fn from_partition(
        data: &LabeledDataset,
        partition: &PartitionResult,
        global_test: LabeledDataset,
        test_fraction: f64,
        seed: u64,
    ) -> Self {
        let splits = partition
            .client_indices()
            .iter()
            .enumerate()
            .map(|(k, idx)| {
                let mut rng = RngStream::new(seed, StreamKey::new(0, k, Purpose::Split));
                let (train, test) = stratified_split(data, idx, test_fraction, &mut rng);
                (data.subset(&train), data.subset(&test))
            })
            .collect();
        Self { splits, global_test }
    }

    /// Generates blobs, a fresh IID global test set of 20% of the training
    /// size, and the configured partition, all keyed by `cfg.master_seed`.
    pub fn synthesize(cfg: &FederationConfig) -> Result<Self> {
        let (data, partition, global_test) = synthesize_parts(cfg)?;
        Ok(Self::from_partition(
            &data,
            &partition,
            global_test,
            cfg.data.test_fraction,
            cfg.master_seed,
        ))
    }

    pub fn clients(&self) -> usize {
        self.splits.len()
    }

    pub fn classes(&self) -> usize {
        self.global_test.classes()
    }

    pub fn input_dim(&self) -> usize {
        self.global_test.input_dim()
    }

    pub fn client_states(&self, simplex_dim: usize) -> Vec<ClientState> {
        self.splits
            .iter()
            .enumerate()
            .map(|(k, (train, test))| ClientState::new(k, train.clone(), test.clone(), simplex_dim))
            .collect()
    }
}

/// The full dataset, its partition and the global test set for `cfg`.
pub fn synthesize_parts(cfg: &FederationConfig) -> Result<(LabeledDataset, PartitionResult, LabeledDataset)> {
    let d = &cfg.data;
    let seed = cfg.master_seed;
    let mut rng = RngStream::new(seed, StreamKey::server(0, Purpose::Data));
    let generator = BlobGenerator::new(d.classes, d.input_dim, BLOB_RADIUS, d.spread, &mut rng)?;
    let data = generator.sample(d.samples_per_class, &mut rng);
    let mut test_rng = RngStream::new(seed, StreamKey::server(0, Purpose::GlobalTest));
    let test_per_class = ((d.samples_per_class as f64 * 0.2).round() as usize).max(1);
    let global_test = generator.sample(test_per_class, &mut test_rng);
    let partition = match d.partition {
        PartitionScheme::Dirichlet => {
            let mut prng = RngStream::new(seed, StreamKey::server(0, Purpose::Partition));
            partition_dirichlet(&data, cfg.clients, d.beta, &mut prng)?
        }
        PartitionScheme::Fivefold => {
            // Five-fold takes samples in dataset order; shuffle once so each
            // client's draw is random.
            let mut prng = RngStream::new(seed, StreamKey::server(0, Purpose::Partition));
            let shuffled = shuffled_copy(&data, &mut prng);
            let p = partition_fivefold(&shuffled.0, cfg.clients, d.q, d.groups)?;
            let mapped = p
                .client_indices()
                .iter()
                .map(|idx| idx.iter().map(|&i| shuffled.1[i]).collect())
                .collect();
            PartitionResult::new(mapped, data.len())?
        }
    };
    Ok((data, partition, global_test))
}

fn shuffled_copy<R: RngCore + ?Sized>(data: &LabeledDataset, rng: &mut R) -> (LabeledDataset, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    (data.subset(&order), order)
}

/// Parameter change produced by one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta {
    pub backbone: Vec<f64>,
    pub endpoints: Vec<Vec<f64>>,
}

impl ModelDelta {
    /// `end - start`
    pub fn between(start: &ModelState, end: &ModelState) -> Result<Self> {
        if start.head().endpoints().len() != end.head().endpoints().len()
            || start.backbone().len() != end.backbone().len()
        {
            return Err(FlocoError::dims("models have different shapes"));
        }
        Ok(Self {
            backbone: sub(end.backbone(), start.backbone()),
            endpoints: end
                .head()
                .endpoints()
                .iter()
                .zip(start.head().endpoints())
                .map(|(e, s)| sub(e, s))
                .collect(),
        })
    }

    /// Backbone followed by every endpoint.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.backbone.clone();
        for e in &self.endpoints {
            out.extend_from_slice(e);
        }
        out
    }

    /// The endpoint updates concatenated into one vector.
    pub fn stacked_endpoints(&self) -> Vec<f64> {
        self.endpoints.concat()
    }
}
