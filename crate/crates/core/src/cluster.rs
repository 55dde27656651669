//! K-Means quantization of hidden representations and per-(cluster, arm)
//! outcome statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, DatasetKind};
use crate::par::{self, Exec};

/// Cells with fewer logged samples than this are imputed.
pub const THIN_CELL: usize = 5;
const CENTER_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty set")]
    Empty,
    #[error("K must be positive")]
    ZeroK,
    #[error("K = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("only {distinct} distinct points for K = {k}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{got} assignments for {expected} samples")]
    Assignments { expected: usize, got: usize },
    #[error("assignment {index} = {cluster} out of range [0, {k})")]
    Label { index: usize, cluster: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iters() -> usize {
    100
}
fn default_n_init() -> usize {
    4
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig { k, max_iters: default_max_iters(), n_init: default_n_init(), seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    centers: Vec<Vec<f64>>,
    inertia: f64,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], z: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(c, z);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

impl ClusterModel {
    pub fn from_centers(centers: Vec<Vec<f64>>) -> Result<Self, ClusterError> {
        if centers.is_empty() {
            return Err(ClusterError::ZeroK);
        }
        let dim = centers[0].len();
        if let Some(c) = centers.iter().find(|c| c.len() != dim) {
            return Err(ClusterError::Dimension { expected: dim, got: c.len() });
        }
        Ok(ClusterModel { centers, inertia: 0.0 })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Final within-cluster sum of squares on the fitting data.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Nearest center by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, z: &[f64]) -> usize {
        debug_assert_eq!(z.len(), self.dim());
        nearest(&self.centers, z).0
    }

    pub fn assign_batch(&self, zs: &[Vec<f64>], exec: Exec) -> Vec<usize> {
        par::map(exec, zs, |z| self.assign(z))
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts by
/// inertia (earliest restart wins ties).
pub fn kmeans_fit(z: &[Vec<f64>], config: &KMeansConfig) -> Result<ClusterModel, ClusterError> {
    kmeans_fit_traced(z, config).map(|(m, _)| m)
}

/// Like [`kmeans_fit`], also returning the inertia after every assignment
/// step of the winning restart.
pub fn kmeans_fit_traced(z: &[Vec<f64>], config: &KMeansConfig) -> Result<(ClusterModel, Vec<f64>), ClusterError> {
    if z.is_empty() {
        return Err(ClusterError::Empty);
    }
    if config.k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if config.k > z.len() {
        return Err(ClusterError::TooManyClusters { k: config.k, n: z.len() });
    }
    let dim = z[0].len();
    if let Some(p) = z.iter().find(|p| p.len() != dim) {
        return Err(ClusterError::Dimension { expected: dim, got: p.len() });
    }
    let mut best: Option<(ClusterModel, Vec<f64>)> = None;
    for restart in 0..config.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(restart as u64);
        let centers = plus_plus(z, config.k, &mut rng)?;
        let (model, trace) = lloyd(z, centers, config.max_iters);
        if best.as_ref().is_none_or(|(b, _)| model.inertia < b.inertia) {
            best = Some((model, trace));
        }
    }
    let (model, trace) = best.expect("at least one restart");
    for a in 0..model.k() {
        for b in a + 1..model.k() {
            if sq_dist(&model.centers[a], &model.centers[b]).sqrt() <= CENTER_EPS {
                return Err(ClusterError::TooFewDistinct { k: config.k, distinct: model.k() - 1 });
            }
        }
    }
    Ok((model, trace))
}

fn plus_plus<R: Rng>(z: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>, ClusterError> {
    let mut centers = vec![z[rng.random_range(0..z.len())].clone()];
    let mut d2: Vec<f64> = z.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(ClusterError::TooFewDistinct { k, distinct: centers.len() });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc >= target {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `acc` a hair below `target`; take the last candidate.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"));
        let c = z[pick].clone();
        for (p, d) in z.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    Ok(centers)
}

fn lloyd(z: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iters: usize) -> (ClusterModel, Vec<f64>) {
    let exec = Exec::default();
    let k = centers.len();
    let dim = z[0].len();
    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let assigned = par::map(exec, z, |p| nearest(&centers, p));
        trace.push(assigned.iter().map(|a| a.1).sum());
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in z.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed an empty cluster at the point farthest from its center.
                let far = (0..z.len()).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
                centers[c] = z[far].clone();
                dist[far] = 0.0;
            }
        }
    }
    let inertia = z.iter().map(|p| nearest(&centers, p).1).sum();
    trace.push(inertia);
    (ClusterModel { centers, inertia }, trace)
}

/// Mean silhouette coefficient of a labelling (O(n²)).
pub fn silhouette(z: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = z.len();
    let scores = par::map_range(Exec::default(), n, |i| {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(&z[i], &z[j]).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            return 0.0;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            return 0.0;
        }
        (b - a) / a.max(b)
    });
    scores.iter().sum::<f64>() / n.max(1) as f64
}

/// Outcome statistics of one (cluster, arm) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub revenue_mean: f64,
    pub revenue_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    /// Logged samples in the cell.
    pub count: usize,
    /// Mean/std came from the fill policy rather than the cell's own samples.
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub k: usize,
    pub m: usize,
    /// Cluster sizes ω.
    pub sizes: Vec<usize>,
    /// Row-major `k x m`.
    pub cells: Vec<CellStats>,
}

impl ClusterStats {
    pub fn cell(&self, cluster: usize, arm: usize) -> &CellStats {
        &self.cells[cluster * self.m + arm]
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn imputed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.imputed).count()
    }
}

/// Supplies expected revenue for thin cells from a fitted model.
pub trait CellImputer {
    /// Predicted mean revenue of `members` (dataset indices) under `arm`.
    fn revenue_mean(&self, dataset: &Dataset, members: &[usize], arm: usize) -> f64;
}

#[derive(Default, Clone, Copy)]
struct Moments {
    w: f64,
    r: f64,
    r2: f64,
    c: f64,
    c2: f64,
}

impl Moments {
    fn add(&mut self, w: f64, r: f64, c: f64) {
        self.w += w;
        self.r += w * r;
        self.r2 += w * r * r;
        self.c += w * c;
        self.c2 += w * c * c;
    }

    fn finish(&self) -> (f64, f64, f64, f64) {
        if self.w <= 0.0 {
            return (0.0, 0.0, 0.0, 0.0);
        }
        let rm = self.r / self.w;
        let cm = self.c / self.w;
        let rv = (self.r2 / self.w - rm * rm).max(0.0);
        let cv = (self.c2 / self.w - cm * cm).max(0.0);
        (rm, rv.sqrt(), cm, cv.sqrt())
    }
}

/// Per-(cluster, arm) revenue/cost means and population standard deviations
/// over the samples logged in that cell.
///
/// RCT cells use plain averages. OBS cells are weighted by inverse
/// propensity (self-normalized), which recovers the cluster's arm-level
/// means under confounded logging. Cells with fewer than [`THIN_CELL`]
/// samples take their revenue mean from `imputer` (or the pooled arm mean
/// without one), their cost mean from the pooled arm mean, and both stds
/// from the pooled arm stds; they are flagged `imputed`.
pub fn cluster_stats(
    dataset: &Dataset,
    assignments: &[usize],
    k: usize,
    imputer: Option<&dyn CellImputer>,
) -> Result<ClusterStats, ClusterError> {
    if assignments.len() != dataset.len() {
        return Err(ClusterError::Assignments { expected: dataset.len(), got: assignments.len() });
    }
    if let Some((index, &cluster)) = assignments.iter().enumerate().find(|(_, &a)| a >= k) {
        return Err(ClusterError::Label { index, cluster, k });
    }
    let m = dataset.num_treatments();
    let weighted = dataset.kind() == DatasetKind::Obs;
    let mut cells = vec![Moments::default(); k * m];
    let mut pooled = vec![Moments::default(); m];
    let mut counts = vec![0usize; k * m];
    let mut sizes = vec![0usize; k];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, (s, &a)) in dataset.samples().iter().zip(assignments).enumerate() {
        let w = if weighted { 1.0 / s.propensity } else { 1.0 };
        cells[a * m + s.treatment].add(w, s.revenue, s.cost);
        pooled[s.treatment].add(w, s.revenue, s.cost);
        counts[a * m + s.treatment] += 1;
        sizes[a] += 1;
        members[a].push(idx);
    }
    let pooled: Vec<_> = pooled.iter().map(Moments::finish).collect();
    let mut out = Vec::with_capacity(k * m);
    for i in 0..k {
        for j in 0..m {
            let count = counts[i * m + j];
            let cell = if count >= THIN_CELL {
                let (rm, rs, cm, cs) = cells[i * m + j].finish();
                CellStats { revenue_mean: rm, revenue_std: rs, cost_mean: cm, cost_std: cs, count, imputed: false }
            } else {
                let (prm, prs, pcm, pcs) = pooled[j];
                let revenue_mean = match imputer {
                    Some(imp) if !members[i].is_empty() => imp.revenue_mean(dataset, &members[i], j),
                    _ => prm,
                };
                CellStats { revenue_mean, revenue_std: prs, cost_mean: pcm, cost_std: pcs, count, imputed: true }
            };
            out.push(cell);
        }
    }
    Ok(ClusterStats { k, m, sizes, cells: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, TreatmentSet};
    use rand_distr::StandardNormal;

    fn points(spec: &[(f64, f64, usize)]) -> Vec<Vec<f64>> {
        spec.iter().flat_map(|&(x, y, n)| std::iter::repeat_n(vec![x, y], n)).collect()
    }

    #[test]
    fn separated_point_masses() {
        let z = points(&[(0.0, 0.0, 10), (10.0, 10.0, 10)]);
        let m = kmeans_fit(&z, &KMeansConfig::new(2, 1)).unwrap();
        let mut c = m.centers().to_vec();
        c.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(c, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert_eq!(m.inertia(), 0.0);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let z: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = kmeans_fit(&z, &KMeansConfig::new(7, 3)).unwrap();
        assert_eq!(m.inertia(), 0.0);
        for p in &z {
            assert_eq!(m.centers()[m.assign(p)], *p);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(kmeans_fit(&[], &KMeansConfig::new(1, 0)), Err(ClusterError::Empty)));
        let z = points(&[(0.0, 0.0, 2)]);
        assert!(matches!(kmeans_fit(&z, &KMeansConfig::new(3, 0)), Err(ClusterError::TooManyClusters { .. })));
        assert!(matches!(kmeans_fit(&z, &KMeansConfig::new(2, 0)), Err(ClusterError::TooFewDistinct { .. })));
    }

    #[test]
    fn assign_exact_match_and_tie_break() {
        let m = ClusterModel::from_centers(vec![vec![-1.0, 0.0], vec![5.0, 5.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.assign(&[5.0, 5.0]), 1);
        assert_eq!(m.assign(&[0.0, 0.0]), 0);
    }

    fn mixture(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = [[0.0, 0.0], [4.0, 1.0], [1.0, 5.0]];
        (0..n)
            .map(|i| {
                let c = means[i % 3];
                vec![c[0] + rng.sample::<f64, _>(StandardNormal), c[1] + rng.sample::<f64, _>(StandardNormal)]
            })
            .collect()
    }

    #[test]
    fn inertia_non_increasing() {
        let z = mixture(600, 2);
        let (_, trace) = kmeans_fit_traced(&z, &KMeansConfig { k: 5, max_iters: 50, n_init: 1, seed: 9 }).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{trace:?}");
    }

    #[test]
    fn fit_is_deterministic() {
        let z = mixture(300, 5);
        let c = KMeansConfig::new(4, 11);
        assert_eq!(kmeans_fit(&z, &c).unwrap(), kmeans_fit(&z, &c).unwrap());
    }

    fn ds(rows: &[(usize, f64, f64)], m: usize) -> Dataset {
        let samples = rows
            .iter()
            .map(|&(t, r, c)| Sample { features: vec![0.0], treatment: t, cost: c, revenue: r, propensity: 1.0 / m as f64 })
            .collect();
        Dataset::new(samples, DatasetKind::Rct, TreatmentSet::ordinal(m).unwrap(), 1).unwrap()
    }

    #[test]
    fn two_point_statistics() {
        let mut rows = vec![(0, 1.0, 0.5); 3];
        rows.extend(vec![(0, 3.0, 0.5); 3]);
        let d = ds(&rows, 2);
        let s = cluster_stats(&d, &[0; 6], 1, None).unwrap();
        let c = s.cell(0, 0);
        assert_eq!((c.revenue_mean, c.revenue_std, c.count, c.imputed), (2.0, 1.0, 6, false));
        assert_eq!((c.cost_mean, c.cost_std), (0.5, 0.0));
        assert!(s.cell(0, 1).imputed);
    }

    struct Fixed(f64);
    impl CellImputer for Fixed {
        fn revenue_mean(&self, _: &Dataset, members: &[usize], arm: usize) -> f64 {
            self.0 + arm as f64 + members.len() as f64 * 0.0
        }
    }

    #[test]
    fn thin_cells_are_imputed_and_flagged() {
        let mut rows = vec![(0, 1.0, 0.1); 5];
        rows.extend(vec![(1, 2.0, 0.2); 5]);
        rows.push((1, 100.0, 9.0));
        let d = ds(&rows, 2);
        // Cluster 1 holds a single arm-1 sample: arm 0 empty, arm 1 thin.
        let mut a = vec![0; 10];
        a.push(1);
        let s = cluster_stats(&d, &a, 2, Some(&Fixed(7.0))).unwrap();
        assert!(!s.cell(0, 0).imputed && !s.cell(0, 1).imputed);
        let (c0, c1) = (s.cell(1, 0), s.cell(1, 1));
        assert!(c0.imputed && c1.imputed);
        assert_eq!((c0.revenue_mean, c1.revenue_mean), (7.0, 8.0));
        assert_eq!(c1.count, 1);
        // Pooled arm-1 std across all clusters.
        let pooled: Vec<f64> = vec![2.0, 2.0, 2.0, 2.0, 2.0, 100.0];
        let mean = pooled.iter().sum::<f64>() / 6.0;
        let sd = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!((c1.revenue_std - sd).abs() < 1e-9);
        assert_eq!(s.total(), 11);
    }

    #[test]
    fn obs_cells_are_propensity_weighted() {
        let t = TreatmentSet::ordinal(2).unwrap();
        let mut samples = Vec::new();
        for (r, p) in [(1.0, 0.5), (1.0, 0.5), (1.0, 0.5), (3.0, 0.25), (3.0, 0.25)] {
            samples.push(Sample { features: vec![0.0], treatment: 0, cost: 0.0, revenue: r, propensity: p });
        }
        let d = Dataset::new(samples, DatasetKind::Obs, t, 1).unwrap();
        let s = cluster_stats(&d, &[0; 5], 1, None).unwrap();
        // weights 2,2,2,4,4 -> (6 + 24) / 14
        assert!((s.cell(0, 0).revenue_mean - 30.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_assignments() {
        let d = ds(&[(0, 1.0, 0.0)], 2);
        assert!(cluster_stats(&d, &[], 1, None).is_err());
        assert!(cluster_stats(&d, &[3], 2, None).is_err());
    }

    #[test]
    fn silhouette_of_separated_blobs_is_high() {
        let z = points(&[(0.0, 0.0, 5), (0.1, 0.0, 5), (10.0, 0.0, 5), (10.1, 0.0, 5)]);
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        assert!(silhouette(&z, &labels, 2) > 0.9);
    }
}
