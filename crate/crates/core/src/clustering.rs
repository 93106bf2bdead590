//! Per-layer grouping of selected neurons by the similarity of their
//! importance profiles: seeded k-means++ plus Lloyd iterations, with a mean
//! silhouette gate that falls back to identity (singleton) clusters when no
//! clustering is convincing.

use std::collections::BTreeMap;
use std::path::Path;

use crate::artifacts;
use crate::attribution::{ImportanceProfile, SecuritySubspace};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CLUSTERS_FORMAT: &str = "clusters-v1";
pub const DEFAULT_SILHOUETTE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_K_MAX: usize = 10;

// ── Features ─────────────────────────────────────────────────────────

/// Per-layer feature matrix: row i is selected neuron i's per-sample
/// importance values, L2-normalized (zero rows stay zero).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub neuron_indices: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

/// Features for every layer of a subspace, drawn from the profile's
/// per-sample matrix.
pub fn neuron_features(
    profile: &ImportanceProfile,
    subspace: &SecuritySubspace,
) -> Result<BTreeMap<String, FeatureMatrix>> {
    let mut out = BTreeMap::new();
    for (layer_id, picked) in &subspace.layers {
        let li = profile.layers.get(layer_id).ok_or_else(|| {
            Error::Contract(format!("subspace layer {layer_id} missing from profile"))
        })?;
        let n_samples = li.per_sample.len();
        let mut rows = Vec::with_capacity(picked.len());
        for neuron in picked {
            let mut row = Vec::with_capacity(n_samples);
            for s in 0..n_samples {
                row.push(li.per_sample[s][neuron.index]);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut row {
                    *v /= norm;
                }
            }
            rows.push(row);
        }
        out.insert(
            layer_id.clone(),
            FeatureMatrix {
                neuron_indices: picked.iter().map(|n| n.index).collect(),
                rows,
            },
        );
    }
    Ok(out)
}

// ── k-means ──────────────────────────────────────────────────────────

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len()
}

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = sq_dist(point, &centroids[0]);
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Seeded k-means++ initialization.
fn init_centroids(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.below(points.len())].clone());
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids).1)
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total <= 0.0 {
            // all mass on existing centroids; take the first point not yet
            // chosen to keep progress deterministic
            points
                .iter()
                .position(|p| !centroids.contains(p))
                .unwrap_or(0)
        } else {
            let r = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(points[next].clone());
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Runs until the assignment
/// reaches a fixpoint or `max_iter`; empty clusters are repaired by
/// reseeding with the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KmeansResult> {
    let distinct = distinct_count(points);
    if k < 2 || k > distinct {
        return Err(Error::Contract(format!(
            "kmeans k={k} outside 2..={distinct} (distinct points)"
        )));
    }
    let mut rng = Rng::derive(seed, "kmeans");
    let mut centroids = init_centroids(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        // assignment step
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            inertia += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        // empty-cluster repair: reseed with the farthest point
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let mut far_i = 0usize;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if counts[assignment[i]] <= 1 {
                    continue; // do not orphan another cluster
                }
                let d = sq_dist(p, &centroids[assignment[i]]);
                if d > far_d {
                    far_d = d;
                    far_i = i;
                }
            }
            centroids[empty] = points[far_i].clone();
            assignment[far_i] = empty;
            changed = true;
            inertia = points
                .iter()
                .enumerate()
                .map(|(i, p)| sq_dist(p, &centroids[assignment[i]]))
                .sum();
        }
        inertia_trace.push(inertia);
        debug_assert!(
            inertia_trace.len() < 2
                || inertia <= inertia_trace[inertia_trace.len() - 2] + 1e-12,
            "Lloyd inertia increased"
        );
        if !changed {
            break;
        }
        // update step
        let dim = points[0].len();
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for m in &members {
                for j in 0..dim {
                    mean[j] += m[j];
                }
            }
            for v in &mut mean {
                *v /= members.len() as f64;
            }
            *centroid = mean;
        }
    }
    // final consistency pass: assignment is nearest-centroid
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest_centroid(p, &centroids);
        assignment[i] = c;
        inertia += d;
    }
    inertia_trace.push(inertia);
    Ok(KmeansResult {
        assignment,
        centroids,
        inertia,
        inertia_trace,
    })
}

// ── Silhouette ───────────────────────────────────────────────────────

/// Mean silhouette with Euclidean distance. Requires at least two nonempty
/// clusters; points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    if points.len() != assignment.len() || points.is_empty() {
        return Err(Error::Contract("silhouette input length mismatch".into()));
    }
    let k = assignment.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; k];
    for &a in assignment {
        counts[a] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Contract(
            "silhouette requires at least two nonempty clusters".into(),
        ));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let ci = assignment[i];
        if counts[ci] == 1 {
            continue; // singleton scores 0
        }
        // mean intra-cluster distance (excluding self)
        let mut intra = 0.0;
        let mut inter = vec![0.0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = sq_dist(&points[i], &points[j]).sqrt();
            if assignment[j] == ci {
                intra += d;
            } else {
                inter[assignment[j]] += d;
            }
        }
        let a = intra / (counts[ci] - 1) as f64;
        let mut b = f64::INFINITY;
        for (c, &count) in counts.iter().enumerate() {
            if c == ci || count == 0 {
                continue;
            }
            b = b.min(inter[c] / count as f64);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

// ── Layer clustering with the silhouette gate ────────────────────────

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerClusters {
    /// cluster id per selected neuron, aligned with the subspace's
    /// ascending neuron indices
    pub assignment: Vec<usize>,
    pub num_clusters: usize,
    pub silhouette: Option<f64>,
    pub skipped: bool,
}

impl LayerClusters {
    pub fn identity(n: usize) -> Self {
        LayerClusters {
            assignment: (0..n).collect(),
            num_clusters: n,
            silhouette: None,
            skipped: true,
        }
    }

    /// Disjoint-and-covering check: ids in [0, num_clusters), every cluster
    /// nonempty, one id per neuron.
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 && !self.assignment.is_empty() {
            return Err(Error::Contract("zero clusters for nonempty layer".into()));
        }
        let mut counts = vec![0usize; self.num_clusters];
        for &a in &self.assignment {
            if a >= self.num_clusters {
                return Err(Error::Contract(format!(
                    "cluster id {a} >= num_clusters {}",
                    self.num_clusters
                )));
            }
            counts[a] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::Contract("empty cluster".into()));
        }
        if self.skipped {
            let identity: Vec<usize> = (0..self.assignment.len()).collect();
            if self.assignment != identity || self.num_clusters != self.assignment.len() {
                return Err(Error::Contract(
                    "skipped layer must carry identity clusters".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterAssignment {
    pub tau: f64,
    pub k_max: usize,
    pub seed: u64,
    pub layers: BTreeMap<String, LayerClusters>,
}

impl ClusterAssignment {
    pub fn validate(&self) -> Result<()> {
        for lc in self.layers.values() {
            lc.validate()?;
        }
        Ok(())
    }

    /// Identity (all-singleton) assignment over a subspace; the unclustered
    /// baseline.
    pub fn identity_for(subspace: &SecuritySubspace) -> Self {
        let layers = subspace
            .layers
            .iter()
            .map(|(id, picked)| (id.clone(), LayerClusters::identity(picked.len())))
            .collect();
        ClusterAssignment {
            tau: 0.0,
            k_max: 0,
            seed: 0,
            layers,
        }
    }

    pub fn clusters_per_layer(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .map(|(id, lc)| (id.clone(), lc.num_clusters))
            .collect()
    }
}

/// Scan k in 2..=min(k_max, n-1, distinct), keep the k with the best mean
/// silhouette, and skip (identity clusters) when the best silhouette falls
/// below `tau`, when n < 3, or when all rows are identical.
pub fn cluster_layer(
    features: &FeatureMatrix,
    tau: f64,
    k_max: usize,
    seed: u64,
) -> Result<LayerClusters> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [-1, 1]")));
    }
    if k_max < 2 {
        return Err(Error::Config(format!("k_max {k_max} must be >= 2")));
    }
    let n = features.rows.len();
    if n < 3 {
        return Ok(LayerClusters::identity(n));
    }
    let distinct = distinct_count(&features.rows);
    if distinct < 2 {
        return Ok(LayerClusters::identity(n));
    }
    let hi = k_max.min(n - 1).min(distinct);
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for k in 2..=hi {
        let result = kmeans(&features.rows, k, seed, 100)?;
        let score = silhouette(&features.rows, &result.assignment)?;
        let better = match &best {
            None => true,
            // strict improvement keeps the chosen k independent of scan order
            Some((best_score, _, _)) => score > *best_score,
        };
        if better {
            best = Some((score, k, result.assignment));
        }
    }
    let (score, k, assignment) = best.expect("scan range was nonempty");
    if score < tau {
        return Ok(LayerClusters::identity(n));
    }
    // normalize cluster ids to first-appearance order for determinism
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut normalized = Vec::with_capacity(n);
    for &a in &assignment {
        let next = remap.len();
        let id = *remap.entry(a).or_insert(next);
        normalized.push(id);
    }
    let lc = LayerClusters {
        assignment: normalized,
        num_clusters: k,
        silhouette: Some(score),
        skipped: false,
    };
    lc.validate()?;
    Ok(lc)
}

/// Cluster every layer of a subspace.
pub fn cluster_subspace(
    profile: &ImportanceProfile,
    subspace: &SecuritySubspace,
    tau: f64,
    k_max: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let features = neuron_features(profile, subspace)?;
    let mut layers = BTreeMap::new();
    for (layer_id, fm) in &features {
        layers.insert(layer_id.clone(), cluster_layer(fm, tau, k_max, seed)?);
    }
    let out = ClusterAssignment {
        tau,
        k_max,
        seed,
        layers,
    };
    out.validate()?;
    Ok(out)
}

// ── Serialization & export ───────────────────────────────────────────

#[derive(serde::Serialize, serde::Deserialize)]
struct ClustersJson {
    format: String,
    config_digest: String,
    tau: f64,
    k_max: usize,
    seed: u64,
    layers: BTreeMap<String, LayerClusters>,
}

pub fn write_clusters(path: &Path, clusters: &ClusterAssignment, config_digest: u64) -> Result<()> {
    let json = ClustersJson {
        format: CLUSTERS_FORMAT.to_string(),
        config_digest: format!("{config_digest:016x}"),
        tau: clusters.tau,
        k_max: clusters.k_max,
        seed: clusters.seed,
        layers: clusters.layers.clone(),
    };
    artifacts::write_atomic(path, serde_json::to_string_pretty(&json)?.as_bytes())
}

pub fn read_clusters(path: &Path) -> Result<ClusterAssignment> {
    let bytes = artifacts::read_required(path)?;
    let json: ClustersJson = serde_json::from_slice(&bytes)?;
    if json.format != CLUSTERS_FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            what: format!("unsupported format {}", json.format),
        });
    }
    let out = ClusterAssignment {
        tau: json.tau,
        k_max: json.k_max,
        seed: json.seed,
        layers: json.layers,
    };
    out.validate()?;
    Ok(out)
}

/// Flat (layer, neuron, importance, cluster) rows for external plotting.
pub fn export_clusters_csv(
    subspace: &SecuritySubspace,
    clusters: &ClusterAssignment,
) -> Result<String> {
    let mut out = String::from("layer,neuron,importance,cluster\n");
    for (layer_id, picked) in &subspace.layers {
        let lc = clusters.layers.get(layer_id).ok_or_else(|| {
            Error::Contract(format!("clusters missing layer {layer_id}"))
        })?;
        if lc.assignment.len() != picked.len() {
            return Err(Error::Contract(format!(
                "layer {layer_id}: {} assignments for {} neurons",
                lc.assignment.len(),
                picked.len()
            )));
        }
        for (neuron, cluster) in picked.iter().zip(&lc.assignment) {
            out.push_str(&format!(
                "{layer_id},{},{},{cluster}\n",
                neuron.index, neuron.score
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn kmeans_separates_two_well_separated_pairs() {
        let points = pts(&[0.0, 1.0, 10.0, 11.0]);
        let r = kmeans(&points, 2, 3, 100).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
        let mut cs: Vec<f64> = r.centroids.iter().map(|c| c[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert!((cs[0] - 0.5).abs() < 1e-12);
        assert!((cs[1] - 10.5).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_distinct_gives_zero_inertia() {
        let points = pts(&[1.0, 2.0, 5.0, 9.0]);
        let r = kmeans(&points, 4, 1, 100).unwrap();
        assert!(r.inertia.abs() < 1e-15);
    }

    #[test]
    fn kmeans_k_out_of_range_rejected() {
        let points = pts(&[0.0, 1.0, 2.0]);
        assert!(kmeans(&points, 1, 0, 100).is_err());
        assert!(kmeans(&points, 4, 0, 100).is_err());
        // k above the number of distinct points is out of range too
        let dup = pts(&[0.0, 0.0, 1.0]);
        assert!(kmeans(&dup, 3, 0, 100).is_err());
    }

    #[test]
    fn kmeans_inertia_non_increasing_and_deterministic() {
        let mut rng = Rng::new(17);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.normal(), rng.normal(), rng.normal()])
            .collect();
        for k in 2..6 {
            let a = kmeans(&points, k, 5, 100).unwrap();
            let b = kmeans(&points, k, 5, 100).unwrap();
            assert_eq!(a.assignment, b.assignment);
            for w in a.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "inertia increased: {w:?}");
            }
        }
    }

    #[test]
    fn silhouette_hand_derived_value() {
        let points = pts(&[0.0, 1.0, 10.0, 11.0]);
        let assignment = vec![0, 0, 1, 1];
        let s = silhouette(&points, &assignment).unwrap();
        // s(0) = (10.5-1)/10.5, s(1) = (9.5-1)/9.5, symmetric
        let want = (9.5 / 10.5 + 8.5 / 9.5) / 2.0;
        assert!((s - want).abs() < 1e-12);
        assert!((s - 0.8997).abs() < 1e-4);
    }

    #[test]
    fn silhouette_crossed_assignment_negative() {
        let points = pts(&[0.0, 1.0, 10.0, 11.0]);
        let crossed = vec![0, 1, 0, 1];
        assert!(silhouette(&points, &crossed).unwrap() < 0.0);
    }

    #[test]
    fn silhouette_single_cluster_rejected() {
        let points = pts(&[0.0, 1.0]);
        assert!(silhouette(&points, &[0, 0]).is_err());
    }

    #[test]
    fn silhouette_tends_to_one_with_separation() {
        let near = silhouette(&pts(&[0.0, 0.1, 5.0, 5.1]), &[0, 0, 1, 1]).unwrap();
        let far = silhouette(&pts(&[0.0, 0.1, 500.0, 500.1]), &[0, 0, 1, 1]).unwrap();
        assert!(far > near);
        assert!(far > 0.999);
    }

    #[test]
    fn cluster_layer_identical_rows_skips() {
        let fm = FeatureMatrix {
            neuron_indices: vec![0, 1, 2, 3],
            rows: vec![vec![0.5, 0.5]; 4],
        };
        let lc = cluster_layer(&fm, 0.05, 10, 1).unwrap();
        assert!(lc.skipped);
        assert_eq!(lc.num_clusters, 4);
        assert_eq!(lc.assignment, vec![0, 1, 2, 3]);
        lc.validate().unwrap();
    }

    #[test]
    fn cluster_layer_small_n_skips() {
        let fm = FeatureMatrix {
            neuron_indices: vec![0, 1],
            rows: vec![vec![0.0], vec![1.0]],
        };
        let lc = cluster_layer(&fm, 0.05, 10, 1).unwrap();
        assert!(lc.skipped);
    }

    #[test]
    fn cluster_layer_two_tight_groups() {
        let mut rows = Vec::new();
        let mut rng = Rng::new(2);
        for _ in 0..5 {
            rows.push(vec![1.0 + rng.normal() * 0.01, 0.0]);
        }
        for _ in 0..5 {
            rows.push(vec![0.0, 1.0 + rng.normal() * 0.01]);
        }
        let fm = FeatureMatrix {
            neuron_indices: (0..10).collect(),
            rows,
        };
        let lc = cluster_layer(&fm, 0.05, 10, 1).unwrap();
        assert!(!lc.skipped);
        assert_eq!(lc.num_clusters, 2);
        assert!(lc.silhouette.unwrap() > 0.5);
        // members of each half share a cluster
        assert!(lc.assignment[..5].iter().all(|&a| a == lc.assignment[0]));
        assert!(lc.assignment[5..].iter().all(|&a| a == lc.assignment[5]));
    }

    #[test]
    fn lowering_tau_never_increases_skips() {
        let mut rng = Rng::new(4);
        let mut fms = Vec::new();
        for _ in 0..6 {
            let rows: Vec<Vec<f64>> = (0..8)
                .map(|_| vec![rng.normal(), rng.normal()])
                .collect();
            fms.push(FeatureMatrix {
                neuron_indices: (0..8).collect(),
                rows,
            });
        }
        let skips = |tau: f64| -> usize {
            fms.iter()
                .filter(|fm| cluster_layer(fm, tau, 10, 9).unwrap().skipped)
                .count()
        };
        assert!(skips(0.01) <= skips(0.1));
        // chosen k is tau-independent when not skipped
        for fm in &fms {
            let lo = cluster_layer(fm, -1.0, 10, 9).unwrap();
            let hi = cluster_layer(fm, 0.01, 10, 9).unwrap();
            if !lo.skipped && !hi.skipped {
                assert_eq!(lo.num_clusters, hi.num_clusters);
            }
        }
    }

    #[test]
    fn clusters_roundtrip_and_csv() {
        use crate::attribution::{SecuritySubspace, SelectedNeuron};
        let mut layers = BTreeMap::new();
        layers.insert(
            "block0.attn.q".to_string(),
            vec![
                SelectedNeuron { index: 1, score: 0.5 },
                SelectedNeuron { index: 4, score: 0.25 },
                SelectedNeuron { index: 7, score: 0.125 },
            ],
        );
        let subspace = SecuritySubspace { k: 3, layers };
        let mut clayers = BTreeMap::new();
        clayers.insert(
            "block0.attn.q".to_string(),
            LayerClusters {
                assignment: vec![0, 1, 0],
                num_clusters: 2,
                silhouette: Some(0.7),
                skipped: false,
            },
        );
        let clusters = ClusterAssignment {
            tau: 0.05,
            k_max: 10,
            seed: 3,
            layers: clayers,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.json");
        write_clusters(&path, &clusters, 9).unwrap();
        assert_eq!(read_clusters(&path).unwrap(), clusters);

        let csv = export_clusters_csv(&subspace, &clusters).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,neuron,importance,cluster");
        assert_eq!(lines[1], "block0.attn.q,1,0.5,0");
        assert_eq!(lines[2], "block0.attn.q,4,0.25,1");
        assert_eq!(lines[3], "block0.attn.q,7,0.125,0");
    }
}
