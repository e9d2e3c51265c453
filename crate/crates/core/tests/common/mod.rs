//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use floco_core::config::FederationConfig;
use floco_core::federation::{regularized_grads, FederatedData, Prox};
use floco_core::model::{Batch, HeadEndpoints, ModelDims, ModelState, Predictor, SimplexScope};
use floco_core::numerics::{sample_uniform_simplex, Purpose, RealMatrix, RngStream, StreamKey};
use floco_core::simplex::SimplexPoint;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64, tag: usize) -> RngStream {
    RngStream::new(seed, StreamKey::new(tag, 0, Purpose::Test))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------- models

pub fn flatten(m: &ModelState) -> Vec<f64> {
    let mut out = m.backbone().to_vec();
    for e in m.head().endpoints() {
        out.extend_from_slice(e);
    }
    out
}

pub fn rebuild(template: &ModelState, flat: &[f64]) -> ModelState {
    let b = template.backbone().len();
    let e = template.head().param_len();
    let endpoints = (0..=template.simplex_dim())
        .map(|m| flat[b + m * e..b + (m + 1) * e].to_vec())
        .collect();
    ModelState::new(
        template.dims(),
        template.scope(),
        flat[..b].to_vec(),
        HeadEndpoints::new(endpoints).unwrap(),
    )
    .unwrap()
}

pub fn normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_batch(rng: &mut RngStream, dims: ModelDims, n: usize) -> Batch {
    let inputs: Vec<f64> = (0..n * dims.input).map(|_| normal(rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..dims.classes)).collect();
    Batch::new(
        RealMatrix::new(n, dims.input, inputs).unwrap(),
        labels,
        dims.classes,
    )
    .unwrap()
}

/// `sum_m alpha_m theta_m`, written out directly.
pub fn mix(endpoints: &[Vec<f64>], alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; endpoints[0].len()];
    for (theta, a) in endpoints.iter().zip(alpha) {
        for (o, t) in out.iter_mut().zip(theta) {
            *o += a * t;
        }
    }
    out
}

/// Mean cross-entropy of the network at `alpha`.
pub fn loss_at(model: &ModelState, alpha: &[f64], batch: &Batch) -> f64 {
    let dims = model.dims();
    let w = mix(model.head().endpoints(), alpha);
    let p = match model.scope() {
        SimplexScope::LastLayer => Predictor::new(dims, model.backbone().to_vec(), w),
        SimplexScope::AllLayers => {
            let split = dims.backbone_len();
            Predictor::new(dims, w[..split].to_vec(), w[split..].to_vec())
        }
    }
    .unwrap();
    p.loss(batch.inputs(), batch.labels()).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Worst relative error per objective over the random configurations.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientReport {
    pub plain: f64,
    pub endpoint: f64,
    pub fedprox: f64,
    pub ditto: f64,
    pub floco_plus: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        [
            self.plain,
            self.endpoint,
            self.fedprox,
            self.ditto,
            self.floco_plus,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

const FD_STEP: f64 = 1e-5;

/// Compares every analytic gradient with central differences of an
/// objective assembled here from plain network losses.
pub fn gradient_oracle_suite(configs: usize, seed: u64) -> GradientReport {
    let mut report = GradientReport::default();
    let mut r = rng(seed, 0);
    for _ in 0..configs {
        let dims = ModelDims::new(
            r.random_range(2..=5),
            r.random_range(2..=6),
            r.random_range(2..=4),
        );
        let scope = if r.random_bool(0.5) {
            SimplexScope::LastLayer
        } else {
            SimplexScope::AllLayers
        };
        let m = r.random_range(1..=3);
        let n = r.random_range(1..=6);
        let batch = random_batch(&mut r, dims, n);

        // endpoint gradients at a random alpha; also covers the plain gradient
        let model = ModelState::init(dims, m, scope, &mut r);
        let alpha = sample_uniform_simplex(m, &mut r);
        let g = regularized_grads(&model, &alpha, &batch, None).unwrap();
        let analytic: Vec<f64> = [g.backbone.clone(), g.endpoints.concat()].concat();
        let numeric = central_diff(
            |x| loss_at(&rebuild(&model, x), alpha.coords(), &batch),
            &flatten(&model),
            FD_STEP,
        );
        report.endpoint = report.endpoint.max(rel_err(&analytic, &numeric));

        let predictor = model.predictor(&alpha).unwrap();
        let split = predictor.backbone().len();
        let params = [predictor.backbone(), predictor.head()].concat();
        let numeric = central_diff(
            |x| {
                Predictor::new(dims, x[..split].to_vec(), x[split..].to_vec())
                    .unwrap()
                    .loss(batch.inputs(), batch.labels())
                    .unwrap()
            },
            &params,
            FD_STEP,
        );
        let analytic = [g.backbone.clone(), g.combined.clone()].concat();
        report.plain = report.plain.max(rel_err(&analytic, &numeric));

        // proximal objectives on a single model (FedProx, Ditto)
        let flat_model = ModelState::init(dims, 0, scope, &mut r);
        let anchor = ModelState::init(dims, 0, scope, &mut r);
        let one = SimplexPoint::vertex(0, 1);
        for (strength, slot) in [
            (r.random_range(0.001..2.0), &mut report.fedprox),
            (r.random_range(0.1..10.0), &mut report.ditto),
        ] {
            let prox = Prox {
                strength,
                anchor: &anchor,
                include_backbone: true,
            };
            let g = regularized_grads(&flat_model, &one, &batch, Some(&prox)).unwrap();
            let analytic: Vec<f64> = [g.backbone.clone(), g.endpoints.concat()].concat();
            let anchor_flat = flatten(&anchor);
            let numeric = central_diff(
                |x| {
                    loss_at(&rebuild(&flat_model, x), &[1.0], &batch)
                        + 0.5 * strength * sq_dist(x, &anchor_flat)
                },
                &flatten(&flat_model),
                FD_STEP,
            );
            *slot = slot.max(rel_err(&analytic, &numeric));
        }

        // endpoint-only proximal objective (floco_plus fine-tuning)
        let lambda = r.random_range(0.1..10.0);
        let global = ModelState::init(dims, m, scope, &mut r);
        let personal = rebuild(
            &global,
            &flatten(&global)
                .iter()
                .map(|v| v + 0.1 * normal(&mut r))
                .collect::<Vec<_>>(),
        );
        let prox = Prox {
            strength: lambda,
            anchor: &global,
            include_backbone: false,
        };
        let g = regularized_grads(&personal, &alpha, &batch, Some(&prox)).unwrap();
        let analytic: Vec<f64> = [g.backbone.clone(), g.endpoints.concat()].concat();
        let numeric = central_diff(
            |x| {
                let model = rebuild(&personal, x);
                let penalty: f64 = model
                    .head()
                    .endpoints()
                    .iter()
                    .zip(global.head().endpoints())
                    .map(|(a, b)| sq_dist(a, b))
                    .sum();
                loss_at(&model, alpha.coords(), &batch) + 0.5 * lambda * penalty
            },
            &flatten(&personal),
            FD_STEP,
        );
        report.floco_plus = report.floco_plus.max(rel_err(&analytic, &numeric));
    }
    report
}

// ---------------------------------------------------------------- projection

/// Exact projection onto `{b >= 0, sum(b) = z}` by trying every support:
/// on each face the projection is `kappa_S - (sum(kappa_S) - z) / |S|`; the
/// closest feasible candidate is the answer.
pub fn brute_projection(kappa: &[f64], z: f64) -> Vec<f64> {
    let n = kappa.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let shift = (members.iter().map(|&i| kappa[i]).sum::<f64>() - z) / members.len() as f64;
        let mut x = vec![0.0; n];
        let mut feasible = true;
        for &i in &members {
            x[i] = kappa[i] - shift;
            if x[i] < -1e-15 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let d = sq_dist(&x, kappa);
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.expect("the vertex faces are always feasible").1
}

// ---------------------------------------------------------------- reference FedAvg

/// Plain single-model FedAvg written against raw parameter vectors.
/// Returns the global test accuracy after every round.
pub fn reference_fedavg(cfg: &FederationConfig, data: &FederatedData) -> Vec<f64> {
    let dims = ModelDims::new(data.input_dim(), cfg.hidden_dim, data.classes());
    let mut init = RngStream::new(cfg.master_seed, StreamKey::server(0, Purpose::Init));
    let start = ModelState::init(dims, 0, SimplexScope::LastLayer, &mut init);
    let mut w = RefNet::from_state(&start);
    let counts: Vec<usize> = data.splits.iter().map(|(tr, _)| tr.len()).collect();
    let total: usize = counts.iter().sum();
    let mut accs = Vec::new();
    for t in 1..=cfg.rounds {
        let mut prng = RngStream::new(cfg.master_seed, StreamKey::server(t, Purpose::Participants));
        let mut chosen = rand::seq::index::sample(&mut prng, cfg.clients, cfg.participants).into_vec();
        chosen.sort_unstable();
        let mut next = w.params.clone();
        for &k in &chosen {
            let train = &data.splits[k].0;
            let n = train.len();
            let steps = cfg
                .local_steps
                .unwrap_or(cfg.local_epochs * n.div_ceil(cfg.batch_size));
            let mut brng = RngStream::new(cfg.master_seed, StreamKey::new(t, k, Purpose::Batches));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut brng);
            let mut cursor = 0;
            let mut local = w.clone();
            for _ in 0..steps {
                if cursor == n {
                    order.shuffle(&mut brng);
                    cursor = 0;
                }
                let end = (cursor + cfg.batch_size).min(n);
                let grad = local.gradient(train.features(), train.labels(), &order[cursor..end]);
                cursor = end;
                for (p, g) in local.params.iter_mut().zip(&grad) {
                    *p -= cfg.lr * g;
                }
            }
            let weight = counts[k] as f64 / total as f64;
            for ((acc, new), old) in next.iter_mut().zip(&local.params).zip(&w.params) {
                *acc += weight * (new - old);
            }
        }
        w.params = next;
        accs.push(w.accuracy(data.global_test.features(), data.global_test.labels()));
    }
    accs
}

/// One-hidden-layer ReLU network over a single parameter vector laid out as
/// `[W1 (h x d), b1, W2 (L x h), b2]`.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub d: usize,
    pub h: usize,
    pub l: usize,
    pub params: Vec<f64>,
}

impl RefNet {
    pub fn from_state(state: &ModelState) -> Self {
        let dims = state.dims();
        Self {
            d: dims.input,
            h: dims.hidden,
            l: dims.classes,
            params: [state.backbone(), &state.head().endpoints()[0][..]].concat(),
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let (d, h) = (self.d, self.h);
        (0..h)
            .map(|j| {
                let z: f64 =
                    (0..d).map(|i| self.params[j * d + i] * x[i]).sum::<f64>() + self.params[h * d + j];
                z.max(0.0)
            })
            .collect()
    }

    fn logits(&self, a: &[f64]) -> Vec<f64> {
        let (d, h, l) = (self.d, self.h, self.l);
        let off = h * d + h;
        (0..l)
            .map(|c| {
                (0..h).map(|j| self.params[off + c * h + j] * a[j]).sum::<f64>()
                    + self.params[off + l * h + c]
            })
            .collect()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    pub fn gradient(&self, x: &RealMatrix, y: &[usize], rows: &[usize]) -> Vec<f64> {
        let (d, h, l) = (self.d, self.h, self.l);
        let off = h * d + h;
        let mut g = vec![0.0; self.params.len()];
        let scale = 1.0 / rows.len() as f64;
        for &r in rows {
            let xi = x.row(r);
            let a = self.hidden(xi);
            let mut delta = Self::softmax(&self.logits(&a));
            delta[y[r]] -= 1.0;
            let mut da = vec![0.0; h];
            for c in 0..l {
                let dc = delta[c] * scale;
                g[off + l * h + c] += dc;
                for j in 0..h {
                    g[off + c * h + j] += dc * a[j];
                    da[j] += dc * self.params[off + c * h + j];
                }
            }
            for j in 0..h {
                if a[j] > 0.0 {
                    g[h * d + j] += da[j];
                    for i in 0..d {
                        g[j * d + i] += da[j] * xi[i];
                    }
                }
            }
        }
        g
    }

    pub fn accuracy(&self, x: &RealMatrix, y: &[usize]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&r| {
                let z = self.logits(&self.hidden(x.row(r)));
                let mut best = 0;
                for c in 1..z.len() {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best == y[r]
            })
            .count();
        hits as f64 / x.rows() as f64
    }
}
