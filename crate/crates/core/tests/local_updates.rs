mod common;

use common::{flatten, norm, rel_err, rng};
use floco_core::config::FederationConfig;
use floco_core::federation::{
    ditto_finetune, floco_plus_finetune, local_update_fedavg, local_update_fedprox, local_update_floco,
    ClientState,
};
use floco_core::model::{loss_and_grads, Batch, ModelDims, ModelState, SimplexScope};
use floco_core::partition::{synth_blobs, LabeledDataset};
use floco_core::simplex::{make_subregion, SimplexPoint};

const DIMS: ModelDims = ModelDims {
    input: 4,
    hidden: 5,
    classes: 3,
};

fn setup(m: usize, seed: u64) -> (FederationConfig, ClientState, ModelState) {
    let mut r = rng(seed, 1);
    let data = synth_blobs(DIMS.classes, DIMS.input, 12, 0.5, &mut r).unwrap();
    let client = ClientState::new(0, data.clone(), data.subset(&[0, 1]), m);
    let cfg = FederationConfig {
        hidden_dim: DIMS.hidden,
        batch_size: 8,
        local_steps: Some(3),
        master_seed: seed,
        ..FederationConfig::default()
    };
    let model = ModelState::init(DIMS, m, SimplexScope::LastLayer, &mut r);
    (cfg, client, model)
}

fn full_batch(data: &LabeledDataset) -> Batch {
    Batch::new(data.features().clone(), data.labels().to_vec(), data.classes()).unwrap()
}

#[test]
fn zero_step_size_gives_zero_update() {
    let (mut cfg, client, model) = setup(0, 1);
    cfg.lr = 0.0;
    let d = local_update_fedavg(&model, &client, &cfg, 1).unwrap();
    assert!(d.flat().iter().all(|&v| v == 0.0));
}

#[test]
fn single_full_batch_step_is_scaled_gradient() {
    let (mut cfg, client, model) = setup(0, 2);
    cfg.local_steps = Some(1);
    cfg.batch_size = client.num_samples();
    let d = local_update_fedavg(&model, &client, &cfg, 1).unwrap();
    let g = loss_and_grads(&model, &SimplexPoint::vertex(0, 1), &full_batch(&client.train)).unwrap();
    let expected: Vec<f64> = [g.backbone, g.combined]
        .concat()
        .iter()
        .map(|v| -cfg.lr * v)
        .collect();
    assert!(rel_err(&d.flat(), &expected) < 1e-12);
}

#[test]
fn fedprox_without_penalty_is_fedavg() {
    let (mut cfg, client, model) = setup(0, 3);
    cfg.mu = 0.0;
    cfg.local_steps = None;
    let a = local_update_fedavg(&model, &client, &cfg, 4).unwrap();
    let b = local_update_fedprox(&model, &client, &cfg, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn strong_proximal_pull_shrinks_update() {
    let (mut cfg, client, model) = setup(0, 4);
    cfg.lr = 1e-6;
    cfg.mu = 0.0;
    let free = norm(&local_update_fedprox(&model, &client, &cfg, 1).unwrap().flat());
    cfg.mu = 1e6;
    let held = norm(&local_update_fedprox(&model, &client, &cfg, 1).unwrap().flat());
    assert!(held < free, "{held} vs {free}");
}

#[test]
fn flat_strategies_reject_simplex_models() {
    let (cfg, client, model) = setup(2, 5);
    assert!(local_update_fedavg(&model, &client, &cfg, 1).is_err());
}

#[test]
fn floco_with_single_endpoint_matches_fedavg() {
    let (cfg, client, model) = setup(0, 6);
    let a = local_update_fedavg(&model, &client, &cfg, 2).unwrap();
    let b = local_update_floco(&model, &client, &cfg, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn floco_vertex_subregion_moves_one_endpoint() {
    let (cfg, mut client, model) = setup(2, 7);
    client.subregion = make_subregion(SimplexPoint::vertex(1, 3), 1e-9).unwrap();
    let d = local_update_floco(&model, &client, &cfg, 1).unwrap();
    let moved = norm(&d.endpoints[1]);
    assert!(moved > 0.0);
    for m in [0, 2] {
        assert!(norm(&d.endpoints[m]) <= 1e-6 * moved);
    }
}

#[test]
fn one_floco_step_sums_to_gradient_step() {
    let (mut cfg, client, model) = setup(3, 8);
    cfg.local_steps = Some(1);
    cfg.batch_size = client.num_samples();
    let d = local_update_floco(&model, &client, &cfg, 1).unwrap();
    // with a single endpoint-weighted step, theta_m moves by -lr * alpha_m * g,
    // so the alpha recovered from any coordinate is shared by all of them
    let summed: Vec<f64> = (0..d.endpoints[0].len())
        .map(|i| d.endpoints.iter().map(|e| e[i]).sum())
        .collect();
    let i = (0..summed.len())
        .max_by(|&a, &b| summed[a].abs().total_cmp(&summed[b].abs()))
        .unwrap();
    let alpha: Vec<f64> = d.endpoints.iter().map(|e| e[i] / summed[i]).collect();
    let alpha = SimplexPoint::new(alpha).unwrap();
    let g = loss_and_grads(&model, &alpha, &full_batch(&client.train)).unwrap();
    let expected: Vec<f64> = g.combined.iter().map(|v| -cfg.lr * v).collect();
    let diff: f64 = summed
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn ditto_without_penalty_is_local_sgd() {
    let (mut cfg, client, model) = setup(0, 9);
    cfg.lambda = 0.0;
    cfg.finetune_epochs = 2;
    let personal = ditto_finetune(&client, &model, &cfg, 5).unwrap();
    assert_ne!(flatten(&personal), flatten(&model));
    assert!(personal.is_finite());
}

#[test]
fn ditto_huge_penalty_stays_at_global() {
    let (mut cfg, client, model) = setup(0, 10);
    cfg.lambda = 1e9;
    cfg.lr = 1e-9;
    let personal = ditto_finetune(&client, &model, &cfg, 5).unwrap();
    let gap: Vec<f64> = flatten(&personal)
        .iter()
        .zip(flatten(&model))
        .map(|(a, b)| a - b)
        .collect();
    assert!(norm(&gap) < 1e-3);
}

#[test]
fn floco_plus_without_penalty_is_one_floco_epoch() {
    let (mut cfg, mut client, model) = setup(2, 11);
    client.subregion = make_subregion(SimplexPoint::new(vec![0.2, 0.5, 0.3]).unwrap(), 0.2).unwrap();
    cfg.lambda = 0.0;
    cfg.finetune_epochs = 1;
    let head = floco_plus_finetune(&client, &model, &cfg, 3).unwrap();
    // floco_plus_finetune runs on its own streams; rerun the same plan by hand
    // through the public SGD loop to compare
    use floco_core::federation::{simplex_sgd, AlphaSource, LocalPlan, Minibatches};
    use floco_core::numerics::{Purpose, RngStream, StreamKey};
    use floco_core::simplex::SubregionSampler;
    let n = client.num_samples();
    let plan = LocalPlan {
        steps: cfg.epoch_steps(1, n),
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        alphas: AlphaSource::Subregion {
            sampler: SubregionSampler::new(client.subregion.clone()),
            rng: RngStream::new(cfg.master_seed, StreamKey::new(3, 0, Purpose::FinetuneAlpha)),
        },
        batches: Minibatches::new(
            n,
            RngStream::new(cfg.master_seed, StreamKey::new(3, 0, Purpose::FinetuneBatches)),
        ),
        prox: None,
        train_backbone: false,
    };
    let by_hand = simplex_sgd(&model, &client.train, plan).unwrap();
    assert_eq!(&head, by_hand.head());
    assert_eq!(by_hand.backbone(), model.backbone());
}

#[test]
fn floco_plus_huge_penalty_stays_at_global() {
    let (mut cfg, client, model) = setup(2, 12);
    cfg.lambda = 1e9;
    cfg.lr = 1e-9;
    let head = floco_plus_finetune(&client, &model, &cfg, 3).unwrap();
    let gap: Vec<f64> = head
        .endpoints()
        .concat()
        .iter()
        .zip(model.head().endpoints().concat())
        .map(|(a, b)| a - b)
        .collect();
    assert!(norm(&gap) < 1e-3);
}

#[test]
fn empty_client_is_an_error() {
    let (cfg, client, model) = setup(0, 13);
    let empty = client.train.subset(&[]);
    let c = ClientState::new(1, empty, client.test.clone(), 0);
    assert!(local_update_fedavg(&model, &c, &cfg, 1).is_err());
}
