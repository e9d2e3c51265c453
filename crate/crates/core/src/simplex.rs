//! Simplex geometry: scaled-simplex projection, Riesz energy, client
//! representation assignment and subregion sampling.

use rand::{Rng, RngCore};

use crate::error::{FlocoError, Result};
use crate::numerics::{l1_distance, sample_uniform_simplex, squared_distance};

const MEMBERSHIP_TOL: f64 = 1e-12;
const SUM_TOL: f64 = 1e-9;
const FEASIBLE_TOL: f64 = 1e-12;

/// Coincidence guard in the Riesz energy denominator.
pub const RIESZ_EPS: f64 = 1e-12;

/// Number of `z` grid points, spaced `1 / Z_GRID_STEPS` apart on `(0, 1]`.
pub const Z_GRID_STEPS: usize = 1000;

/// Barycentric coordinates in the standard simplex with `len()` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates `coords`; entries in `[-1e-12, 0)` are clamped to zero.
    pub fn new(mut coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(FlocoError::Empty("simplex point has no coordinates".into()));
        }
        for c in &mut coords {
            if !c.is_finite() || *c < -MEMBERSHIP_TOL {
                return Err(FlocoError::invalid(format!(
                    "simplex coordinate {c} is negative or non-finite"
                )));
            }
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(FlocoError::invalid(format!(
                "simplex coordinates sum to {sum}, expected 1"
            )));
        }
        Ok(Self(coords))
    }

    /// Clamps tiny negatives and rescales to unit sum. Caller guarantees the
    /// input is a nonnegative vector with positive mass.
    pub(crate) fn from_normalized(mut coords: Vec<f64>) -> Self {
        for c in &mut coords {
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > f64::EPSILON * coords.len() as f64 {
            coords.iter_mut().for_each(|c| *c /= sum);
        }
        Self(coords)
    }

    /// Barycenter of the simplex of dimension `dims`.
    pub fn center(dims: usize) -> Self {
        Self(vec![1.0 / (dims + 1) as f64; dims + 1])
    }

    /// One-hot point `e_index` with `len` coordinates.
    pub fn vertex(index: usize, len: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Simplex dimension `M` (one less than the coordinate count).
    pub fn dims(&self) -> usize {
        self.0.len() - 1
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Intersection of the simplex with an L1 ball around `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subregion {
    center: SimplexPoint,
    radius: f64,
}

impl Subregion {
    /// The whole simplex of dimension `dims` (L1 diameter of the simplex is 2).
    pub fn whole(dims: usize) -> Self {
        Self {
            center: SimplexPoint::center(dims),
            radius: 2.0,
        }
    }

    pub fn center(&self) -> &SimplexPoint {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn covers_simplex(&self) -> bool {
        self.radius >= 2.0
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.center.len()
            && point.iter().all(|&v| v >= -MEMBERSHIP_TOL)
            && (point.iter().sum::<f64>() - 1.0).abs() <= SUM_TOL
            && l1_distance(point, self.center.coords()) <= self.radius + MEMBERSHIP_TOL
    }
}

pub fn make_subregion(center: SimplexPoint, rho: f64) -> Result<Subregion> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(FlocoError::invalid(format!(
            "subregion radius must be positive, got {rho}"
        )));
    }
    Ok(Subregion { center, radius: rho })
}

/// Euclidean projection of `kappa` onto `{b >= 0, sum(b) = z}`.
///
/// The threshold `lambda` with `sum([kappa - lambda]_+) = z` is bracketed in
/// `[min(kappa) - z, max(kappa)]` and bisected; the result is then polished by
/// solving for `lambda` exactly on the identified support.
pub fn project_to_scaled_simplex(kappa: &[f64], z: f64) -> Result<Vec<f64>> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(FlocoError::invalid(format!("scale z must be positive, got {z}")));
    }
    if kappa.is_empty() {
        return Err(FlocoError::Empty("cannot project an empty vector".into()));
    }
    if kappa.iter().any(|v| !v.is_finite()) {
        return Err(FlocoError::NonFinite("projection input".into()));
    }
    // Points already on the scaled simplex (up to summation rounding) are
    // returned as-is, so projecting twice changes nothing.
    let sum: f64 = kappa.iter().sum();
    if kappa.iter().all(|&k| k >= 0.0) && (sum - z).abs() <= FEASIBLE_TOL * z.max(1.0) {
        return Ok(kappa.to_vec());
    }
    let excess = |lambda: f64| -> f64 { kappa.iter().map(|&k| (k - lambda).max(0.0)).sum::<f64>() - z };
    let (min, max) = kappa
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| {
            (lo.min(k), hi.max(k))
        });
    let (mut lo, mut hi) = (min - z, max);
    for _ in 0..200 {
        if hi - lo < 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut lambda = 0.5 * (lo + hi);

    let (count, total) = kappa
        .iter()
        .filter(|&&k| k > lambda)
        .fold((0usize, 0.0), |(c, s), &k| (c + 1, s + k));
    if count > 0 {
        let exact = (total - z) / count as f64;
        let consistent = kappa.iter().all(|&k| {
            if k > lambda {
                k >= exact
            } else {
                k <= exact + 1e-12
            }
        });
        if consistent {
            lambda = exact;
        }
    }
    Ok(kappa.iter().map(|&k| (k - lambda).max(0.0)).collect())
}

/// Riesz 2-energy summed over ordered pairs `i != j`.
pub fn riesz_energy(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(FlocoError::invalid(format!(
            "Riesz energy needs at least 2 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(FlocoError::dims("Riesz energy points have unequal lengths"));
    }
    let mut energy = 0.0;
    for (i, p) in points.iter().enumerate() {
        for (j, q) in points.iter().enumerate() {
            if i != j {
                energy += 1.0 / (squared_distance(p, q) + RIESZ_EPS);
            }
        }
    }
    Ok(energy)
}

/// Result of placing clients on the simplex.
#[derive(Debug, Clone)]
pub struct ClientAssignment {
    pub alphas: Vec<SimplexPoint>,
    /// Chosen grid scale; `None` when the input was degenerate.
    pub z_hat: Option<f64>,
    pub energy: f64,
    /// Set when all representations coincide (or there is a single client)
    /// and every client was placed at the simplex center.
    pub degenerate: bool,
}

/// Relative gap below which two grid energies are treated as equal.
const ENERGY_TIE_TOL: f64 = 1e-10;

/// The `i`-th value (1-based) of the `z` grid.
pub fn z_grid_value(i: usize) -> f64 {
    i as f64 / Z_GRID_STEPS as f64
}

/// Projects each representation onto `z * simplex` for every grid value of
/// `z`, keeps the smallest `z` minimizing the Riesz energy, and rescales the
/// projections back onto the unit simplex.
pub fn assign_client_representations(kappas: &[Vec<f64>]) -> Result<ClientAssignment> {
    let first = kappas
        .first()
        .ok_or_else(|| FlocoError::Empty("no client representations".into()))?;
    let len = first.len();
    if len == 0 || kappas.iter().any(|k| k.len() != len) {
        return Err(FlocoError::dims("client representations have unequal lengths"));
    }
    if kappas.len() < 2 || kappas.iter().all(|k| k == first) {
        log::warn!("client representations are degenerate; placing all clients at the center");
        return Ok(ClientAssignment {
            alphas: vec![SimplexPoint::center(len - 1); kappas.len()],
            z_hat: None,
            energy: f64::NAN,
            degenerate: true,
        });
    }

    let project_all = |z: f64| {
        kappas
            .iter()
            .map(|k| project_to_scaled_simplex(k, z))
            .collect::<Result<Vec<_>>>()
    };
    let energies = (1..=Z_GRID_STEPS)
        .map(|i| riesz_energy(&project_all(z_grid_value(i))?))
        .collect::<Result<Vec<_>>>()?;
    // the energy is flat in z while the projection supports stay fixed;
    // near-minimal values count as ties so rounding cannot pick a larger z
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let i = energies
        .iter()
        .position(|&e| e <= min * (1.0 + ENERGY_TIE_TOL))
        .expect("grid is nonempty");
    let (z, energy) = (z_grid_value(i + 1), energies[i]);
    let projected = project_all(z)?;
    let alphas = projected
        .into_iter()
        .map(|b| SimplexPoint::from_normalized(b.into_iter().map(|v| v / z).collect()))
        .collect();
    Ok(ClientAssignment {
        alphas,
        z_hat: Some(z),
        energy,
        degenerate: false,
    })
}

/// Acceptance rate below which rejection sampling is abandoned.
const MIN_ACCEPTANCE: f64 = 1e-3;
/// Proposals made before the acceptance estimate is trusted.
const MIN_TRIALS: u64 = 1000;

/// Draws points from a subregion, by rejection from the uniform simplex while
/// that is efficient and by a radial displacement toward a uniform simplex
/// draw otherwise. Samples from the second route are only approximately
/// uniform; [`SubregionSampler::is_approximate`] reports whether it was used.
#[derive(Debug, Clone)]
pub struct SubregionSampler {
    region: Subregion,
    proposals: u64,
    accepted: u64,
    approximate: bool,
}

impl SubregionSampler {
    pub fn new(region: Subregion) -> Self {
        Self {
            region,
            proposals: 0,
            accepted: 0,
            approximate: false,
        }
    }

    pub fn region(&self) -> &Subregion {
        &self.region
    }

    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposals > 0).then(|| self.accepted as f64 / self.proposals as f64)
    }

    pub fn sample<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> SimplexPoint {
        let dims = self.region.center.dims();
        if dims == 0 {
            return SimplexPoint::vertex(0, 1);
        }
        if self.region.covers_simplex() {
            return sample_uniform_simplex(dims, rng);
        }
        loop {
            if self.proposals >= MIN_TRIALS && (self.accepted as f64) < MIN_ACCEPTANCE * self.proposals as f64
            {
                self.approximate = true;
                return self.displaced(rng);
            }
            let candidate = sample_uniform_simplex(dims, rng);
            self.proposals += 1;
            if l1_distance(candidate.coords(), self.region.center.coords()) <= self.region.radius {
                self.accepted += 1;
                return candidate;
            }
        }
    }

    /// Moves from the center toward a uniform simplex draw by an L1 length
    /// `rho * v^(1/M)`, which keeps the point inside both the simplex (by
    /// convexity) and the ball.
    fn displaced<R: RngCore + ?Sized>(&self, rng: &mut R) -> SimplexPoint {
        let center = self.region.center.coords();
        let dims = self.region.center.dims();
        let target = sample_uniform_simplex(dims, rng);
        let dist = l1_distance(target.coords(), center);
        if dist == 0.0 {
            return self.region.center.clone();
        }
        let v: f64 = rng.random();
        let step = self.region.radius * v.powf(1.0 / dims as f64);
        let t = (step / dist).min(1.0);
        let coords = center
            .iter()
            .zip(target.coords())
            .map(|(c, u)| c + t * (u - c))
            .collect();
        SimplexPoint::from_normalized(coords)
    }
}

/// Single draw from `region`; see [`SubregionSampler`].
pub fn sample_uniform_subregion<R: RngCore + ?Sized>(region: &Subregion, rng: &mut R) -> SimplexPoint {
    SubregionSampler::new(region.clone()).sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, RngStream, StreamKey};

    fn rng(tag: usize) -> RngStream {
        RngStream::new(11, StreamKey::new(tag, 0, Purpose::Test))
    }

    #[test]
    fn simplex_point_validation() {
        assert!(SimplexPoint::new(vec![0.5, 0.5]).is_ok());
        let p = SimplexPoint::new(vec![1.0 + 5e-13, -5e-13]).unwrap();
        assert_eq!(p.coords()[1], 0.0);
        assert!(SimplexPoint::new(vec![0.6, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![1.1, -0.1]).is_err());
        assert!(SimplexPoint::new(vec![]).is_err());
    }

    #[test]
    fn feasible_point_is_unchanged() {
        let k = vec![1.0 / 3.0; 3];
        let b = project_to_scaled_simplex(&k, 1.0).unwrap();
        for (x, y) in b.iter().zip(&k) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_hand_case() {
        assert_eq!(
            project_to_scaled_simplex(&[2.0, 0.0], 1.0).unwrap(),
            vec![1.0, 0.0]
        );
        assert!(project_to_scaled_simplex(&[2.0, 0.0], 0.0).is_err());
        assert!(project_to_scaled_simplex(&[2.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn projection_sums_to_scale() {
        let b = project_to_scaled_simplex(&[0.3, -2.0, 5.0, 1.2], 0.5).unwrap();
        assert!((b.iter().sum::<f64>() - 0.5).abs() < 1e-10);
        assert!(b.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn riesz_energy_examples() {
        let e = riesz_energy(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((e - 1.0).abs() < 1e-9);
        let h = 3f64.sqrt() / 2.0;
        let tri = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]];
        assert!((riesz_energy(&tri).unwrap() - 6.0).abs() < 1e-9);
        let e = riesz_energy(&[vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap();
        assert_eq!(e, 2.0 / RIESZ_EPS);
        assert!(riesz_energy(&[vec![0.0]]).is_err());
    }

    #[test]
    fn symmetric_extremes_go_to_vertices() {
        let c = 10.0;
        let a = assign_client_representations(&[vec![c, -c], vec![-c, c]]).unwrap();
        assert_eq!(a.alphas[0].coords(), &[1.0, 0.0]);
        assert_eq!(a.alphas[1].coords(), &[0.0, 1.0]);
        assert_eq!(a.z_hat, Some(1.0));
    }

    #[test]
    fn identical_representations_are_degenerate() {
        let a = assign_client_representations(&vec![vec![0.1, 0.2, 0.3]; 4]).unwrap();
        assert!(a.degenerate);
        for p in &a.alphas {
            assert_eq!(p, &SimplexPoint::center(2));
        }
        assert!(assign_client_representations(&[]).is_err());
    }

    #[test]
    fn subregion_construction() {
        let c = SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap();
        let r = make_subregion(c.clone(), 0.1).unwrap();
        assert_eq!(r.center(), &c);
        assert_eq!(r.radius(), 0.1);
        assert!(make_subregion(c.clone(), 0.0).is_err());
        assert!(make_subregion(c, -1.0).is_err());

        let whole = make_subregion(SimplexPoint::vertex(0, 3), 2.0).unwrap();
        for i in 0..3 {
            assert!(whole.contains(SimplexPoint::vertex(i, 3).coords()));
        }
        let at_vertex = make_subregion(SimplexPoint::vertex(1, 3), 0.1).unwrap();
        assert!(at_vertex.contains(at_vertex.center().coords()));
    }

    #[test]
    fn subregion_samples_are_members() {
        let mut r = rng(1);
        for (center, rho) in [
            (vec![0.2, 0.3, 0.5], 0.3),
            (vec![1.0, 0.0, 0.0], 0.1),
            (vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.5], 0.1),
            (vec![0.25; 4], 1.0),
        ] {
            let region = make_subregion(SimplexPoint::new(center).unwrap(), rho).unwrap();
            let mut sampler = SubregionSampler::new(region.clone());
            for _ in 0..2000 {
                let p = sampler.sample(&mut r);
                assert!(region.contains(p.coords()), "{:?} outside {:?}", p, region);
            }
        }
    }

    #[test]
    fn tiny_radius_stays_at_center() {
        let mut r = rng(2);
        let center = SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap();
        let region = make_subregion(center.clone(), 1e-6).unwrap();
        let mut sampler = SubregionSampler::new(region);
        for _ in 0..100 {
            let p = sampler.sample(&mut r);
            assert!(l1_distance(p.coords(), center.coords()) <= 1e-6 + 1e-12);
        }
        assert!(sampler.is_approximate());
    }

    #[test]
    fn generous_radius_uses_exact_rejection() {
        let mut r = rng(3);
        let region = make_subregion(SimplexPoint::center(2), 0.8).unwrap();
        let mut sampler = SubregionSampler::new(region);
        for _ in 0..5000 {
            sampler.sample(&mut r);
        }
        assert!(!sampler.is_approximate());
        assert!(sampler.acceptance_rate().unwrap() > 0.1);
    }
}
