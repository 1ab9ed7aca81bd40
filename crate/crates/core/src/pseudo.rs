//! Pseudo-labels for unlabelled target samples: k-reciprocal neighbour sets,
//! their Jaccard distance, and DBSCAN on the resulting matrix.

use std::io::Write;

use crate::diffcore::{l2_normalize, norm};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Label written for unclustered samples in external files.
pub const OUTLIER: i64 = -1;

/// Square distance matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::shape("DistMatrix::from_rows", n, r.len()));
        }
        Ok(Self {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Checks finiteness, zero diagonal and exact symmetry.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::AsymmetricMatrix(i, i));
            }
            for j in i + 1..self.n {
                let (a, b) = (self.get(i, j), self.get(j, i));
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::NonFinite("distance matrix"));
                }
                if a != b {
                    return Err(Error::AsymmetricMatrix(i, j));
                }
            }
        }
        Ok(())
    }
}

/// Euclidean distances between rows. Computed for `i < j` and mirrored so the
/// result is exactly symmetric.
pub fn euclidean_distances<V: AsRef<[f64]> + Sync>(points: &[V], exec: Exec) -> DistMatrix {
    let n = points.len();
    let upper: Vec<Vec<f64>> = exec.map(n, |i| {
        (i + 1..n)
            .map(|j| {
                let diff: Vec<f64> = points[i]
                    .as_ref()
                    .iter()
                    .zip(points[j].as_ref())
                    .map(|(a, b)| a - b)
                    .collect();
                norm(&diff)
            })
            .collect()
    });
    DistMatrix::from_fn(n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => upper[i][j - i - 1],
        std::cmp::Ordering::Greater => upper[j][i - j - 1],
        std::cmp::Ordering::Equal => 0.0,
    })
}

/// The `k` nearest other samples of each sample, nearest first, ties broken
/// by lower index.
pub fn knn_sets(dist: &DistMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    knn_sets_with(dist, k, Exec::default())
}

pub fn knn_sets_with(dist: &DistMatrix, k: usize, exec: Exec) -> Result<Vec<Vec<usize>>> {
    let n = dist.len();
    if k == 0 || k >= n {
        return Err(Error::BadK { k, n });
    }
    dist.validate()?;
    Ok(exec.map(n, |i| {
        let row = dist.row(i);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        others.truncate(k);
        others
    }))
}

/// Per-sample k-reciprocal sets, each sorted ascending and containing the
/// sample itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReciprocalSets {
    pub k: usize,
    pub sets: Vec<Vec<usize>>,
}

/// `R(i) = {i} ∪ {j ∈ kNN(i) : i ∈ kNN(j)}`.
pub fn k_reciprocal(knn: &[Vec<usize>]) -> ReciprocalSets {
    let n = knn.len();
    let k = knn.first().map_or(0, Vec::len);
    let mut member = vec![false; n * n];
    for (i, list) in knn.iter().enumerate() {
        for &j in list {
            member[i * n + j] = true;
        }
    }
    let sets = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j == i || (member[i * n + j] && member[j * n + i]))
                .collect()
        })
        .collect();
    ReciprocalSets { k, sets }
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut x, mut y, mut count) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                x += 1;
                y += 1;
            }
        }
    }
    count
}

/// `d(i, j) = 1 − |R(i) ∩ R(j)| / |R(i) ∪ R(j)|`.
pub fn jaccard_matrix(rsets: &ReciprocalSets) -> DistMatrix {
    jaccard_matrix_with(rsets, Exec::default())
}

pub fn jaccard_matrix_with(rsets: &ReciprocalSets, exec: Exec) -> DistMatrix {
    let sets = &rsets.sets;
    let n = sets.len();
    let upper: Vec<Vec<f64>> = exec.map(n, |i| {
        (i + 1..n)
            .map(|j| {
                let inter = sorted_intersection_len(&sets[i], &sets[j]);
                let union = sets[i].len() + sets[j].len() - inter;
                1.0 - inter as f64 / union as f64
            })
            .collect()
    });
    let out = DistMatrix::from_fn(n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => upper[i][j - i - 1],
        std::cmp::Ordering::Greater => upper[j][i - j - 1],
        std::cmp::Ordering::Equal => 0.0,
    });
    debug_assert!(out.validate().is_ok());
    debug_assert!(out.data.iter().all(|d| (0.0..=1.0).contains(d)));
    out
}

/// Cluster ids per sample; `None` marks an outlier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub cluster_count: usize,
}

impl ClusterAssignment {
    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Labels with [`OUTLIER`] for unclustered samples.
    pub fn exported(&self) -> Vec<i64> {
        self.labels
            .iter()
            .map(|l| l.map_or(OUTLIER, |c| c as i64))
            .collect()
    }

    /// Members of each cluster, in cluster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }
}

/// Density-based clustering on a precomputed distance matrix.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Points are scanned in ascending index order and clusters are
/// numbered in discovery order, so a border point reachable from two clusters
/// joins the one discovered first.
pub fn dbscan(dist: &DistMatrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::BadEps(eps));
    }
    if min_pts == 0 {
        return Err(Error::BadMinPts);
    }
    let n = dist.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let is_core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut clusters = 0;
    for start in 0..n {
        if visited[start] || !is_core[start] {
            continue;
        }
        let id = clusters;
        clusters += 1;
        visited[start] = true;
        labels[start] = Some(id);
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            if !is_core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(id);
                }
                if !visited[q] {
                    visited[q] = true;
                    if is_core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(ClusterAssignment {
        labels,
        cluster_count: clusters,
    })
}

/// Clustering hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    /// Neighbour count for reciprocal sets, capped at `N − 1`.
    pub k: usize,
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: 20,
            eps: 0.6,
            min_pts: 4,
        }
    }
}

/// Intermediate products of [`assign_pseudo_labels`].
#[derive(Debug, Clone)]
pub struct PseudoLabelRun {
    pub k: usize,
    pub jaccard: DistMatrix,
    pub assignment: ClusterAssignment,
}

/// Normalise, Euclidean distance, k-NN, reciprocal sets, Jaccard, DBSCAN.
pub fn assign_pseudo_labels<V: AsRef<[f64]> + Sync>(
    reps: &[V],
    params: ClusterParams,
) -> Result<ClusterAssignment> {
    Ok(pseudo_label_run(reps, params, Exec::default())?.assignment)
}

pub fn pseudo_label_run<V: AsRef<[f64]> + Sync>(
    reps: &[V],
    params: ClusterParams,
    exec: Exec,
) -> Result<PseudoLabelRun> {
    let n = reps.len();
    if n < params.min_pts.max(2) {
        return Err(Error::TooFewSamples {
            needed: params.min_pts.max(2),
            got: n,
        });
    }
    let normalized = reps
        .iter()
        .map(|r| l2_normalize(r.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let dist = euclidean_distances(&normalized, exec);
    let k = params.k.min(n - 1);
    let knn = knn_sets_with(&dist, k, exec)?;
    let rsets = k_reciprocal(&knn);
    let jaccard = jaccard_matrix_with(&rsets, exec);
    let assignment = dbscan(&jaccard, params.eps, params.min_pts)?;
    Ok(PseudoLabelRun {
        k,
        jaccard,
        assignment,
    })
}

/// Writes `N k eps min_pts`, then one line per sample: its exported label
/// followed by its Jaccard row.
pub fn write_jaccard_dump<W: Write>(
    run: &PseudoLabelRun,
    params: ClusterParams,
    mut out: W,
) -> std::io::Result<()> {
    let n = run.jaccard.len();
    writeln!(out, "{n} {} {} {}", run.k, params.eps, params.min_pts)?;
    for (i, label) in run.assignment.exported().iter().enumerate() {
        let row: Vec<String> = run.jaccard.row(i).iter().map(|d| d.to_string()).collect();
        writeln!(out, "{label} {}", row.join(" "))?;
    }
    Ok(())
}
