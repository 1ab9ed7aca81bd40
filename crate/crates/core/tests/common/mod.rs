//! Reference implementations written straight from the definitions, with no
//! sharing of code paths with the library, plus small random-input helpers.
#![allow(dead_code)]

pub mod gates;

use cawcl_core::diffcore::{ksum, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Points scattered around `centers` random centres.
pub fn blobs(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    centers: usize,
    spread: f64,
) -> Vec<Vec<f64>> {
    let c: Vec<Vec<f64>> = (0..centers)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..centers);
            c[k].iter()
                .map(|v| v + rng.random_range(-spread..spread))
                .collect()
        })
        .collect()
}

/// Same grouping of indices, ignoring label names; `None` must match `None`.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *back.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Brute-force pseudo-labelling: normalise, pairwise Euclidean distance,
/// k nearest others (ties to the lower index), reciprocal sets including the
/// point itself, Jaccard distance, then density clustering where a point is
/// core with at least `min_pts` points (itself included) within `eps`.
pub fn oracle_pseudo_labels(
    points: &[Vec<f64>],
    k: usize,
    eps: f64,
    min_pts: usize,
) -> Vec<Option<usize>> {
    let n = points.len();
    let k = k.min(n - 1);
    let unit: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let len = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            p.iter().map(|v| v / len).collect()
        })
        .collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    let knn: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut pairs: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (d[i][j], j)).collect();
            pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pairs.into_iter().take(k).map(|p| p.1).collect()
        })
        .collect();
    let rsets: Vec<std::collections::BTreeSet<usize>> = (0..n)
        .map(|i| {
            let mut s: std::collections::BTreeSet<usize> = knn[i]
                .iter()
                .copied()
                .filter(|&j| knn[j].contains(&i))
                .collect();
            s.insert(i);
            s
        })
        .collect();
    let mut jac = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let inter = rsets[i].intersection(&rsets[j]).count();
                let union = rsets[i].union(&rsets[j]).count();
                jac[i][j] = 1.0 - inter as f64 / union as f64;
            }
        }
    }
    oracle_dbscan(&jac, eps, min_pts)
}

/// Density clustering by definition: core points have at least `min_pts`
/// points (self included) within `eps`; clusters are connected components of
/// core points, numbered by smallest member; a border point joins the
/// lowest-numbered component with a core point in reach.
pub fn oracle_dbscan(d: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = d.len();
    let near = |i: usize| -> Vec<usize> { (0..n).filter(|&j| d[i][j] <= eps).collect() };
    let core: Vec<bool> = (0..n).map(|i| near(i).len() >= min_pts).collect();
    let mut comp: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = Some(next);
        while let Some(p) = stack.pop() {
            for q in near(p) {
                if core[q] && comp[q].is_none() {
                    comp[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                near(i).into_iter().filter_map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Per-query outcome computed by counting, without sorting: the rank of the
/// first valid correct match (1-based) and the average precision.
pub struct QueryOracle {
    pub first_hit: usize,
    pub ap: f64,
}

/// Gallery item `g` outranks `h` for query row `row` when it is strictly
/// closer, or equally close with a lower index.
fn outranks(row: &[f64], g: usize, h: usize) -> bool {
    row[g] < row[h] || (row[g] == row[h] && g < h)
}

pub fn oracle_query(
    row: &[f64],
    qid: usize,
    qcam: usize,
    gids: &[usize],
    gcams: &[usize],
) -> Option<QueryOracle> {
    let valid: Vec<usize> = (0..row.len())
        .filter(|&g| !(gids[g] == qid && gcams[g] == qcam))
        .collect();
    let relevant: Vec<usize> = valid.iter().copied().filter(|&g| gids[g] == qid).collect();
    if relevant.is_empty() {
        return None;
    }
    let rank_of = |g: usize| {
        1 + valid
            .iter()
            .filter(|&&h| h != g && outranks(row, h, g))
            .count()
    };
    let mut ranked: Vec<(usize, usize)> = relevant.iter().map(|&g| (rank_of(g), g)).collect();
    ranked.sort();
    // AP = Σ_h h/r_h / H, as one fraction over the lcm of the ranks
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let lcm = ranked
        .iter()
        .fold(1u128, |l, &(r, _)| l / gcd(l, r as u128) * r as u128);
    let num: u128 = ranked
        .iter()
        .enumerate()
        .map(|(h, &(r, _))| (h as u128 + 1) * (lcm / r as u128))
        .sum();
    let den = lcm * relevant.len() as u128;
    let g = gcd(num, den);
    Some(QueryOracle {
        first_hit: ranked[0].0,
        ap: (num / g) as f64 / (den / g) as f64,
    })
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// A random clustering instance: up to 40 points around a few centres, with
/// randomised k, eps and min_pts.
pub fn clustering_instance(seed: u64) -> (Vec<Vec<f64>>, usize, f64, usize) {
    let mut r = rng(seed);
    let n = r.random_range(6..=40);
    let dim = r.random_range(2..=6);
    let centers = r.random_range(1..=5);
    let spread = r.random_range(0.1..0.8);
    let points = blobs(&mut r, n, dim, centers, spread);
    let k = r.random_range(2..=8);
    let eps = [0.3, 0.45, 0.5, 0.6, 0.7, 0.8][r.random_range(0..6)];
    let min_pts = r.random_range(2..=5);
    (points, k, eps, min_pts)
}

/// A small retrieval instance with heavily tied integer distances, in which
/// every query has at least one valid match.
pub struct MetricInstance {
    pub dist: Tensor2,
    pub qids: Vec<usize>,
    pub qcams: Vec<usize>,
    pub gids: Vec<usize>,
    pub gcams: Vec<usize>,
}

pub fn metric_instance(seed: u64) -> MetricInstance {
    let mut r = rng(seed);
    loop {
        let q = r.random_range(1..=6);
        let g = r.random_range(2..=10);
        let inst = MetricInstance {
            dist: Tensor2::from_fn(q, g, |_, _| r.random_range(0..6) as f64),
            qids: (0..q).map(|_| r.random_range(0..3)).collect(),
            qcams: (0..q).map(|_| r.random_range(0..2)).collect(),
            gids: (0..g).map(|_| r.random_range(0..3)).collect(),
            gcams: (0..g).map(|_| r.random_range(0..2)).collect(),
        };
        if (0..q).all(|i| inst.oracle(i).is_some()) {
            return inst;
        }
    }
}

impl MetricInstance {
    pub fn oracle(&self, qi: usize) -> Option<QueryOracle> {
        oracle_query(
            self.dist.row(qi),
            self.qids[qi],
            self.qcams[qi],
            &self.gids,
            &self.gcams,
        )
    }

    /// Oracle CMC curve (length = gallery size) and mAP.
    pub fn oracle_metrics(&self) -> (Vec<f64>, f64) {
        let q = self.qids.len();
        let per: Vec<QueryOracle> = (0..q).map(|i| self.oracle(i).unwrap()).collect();
        let curve = (1..=self.gids.len())
            .map(|k| per.iter().filter(|o| o.first_hit <= k).count() as f64 / q as f64)
            .collect();
        (curve, ksum(per.iter().map(|o| o.ap)) / q as f64)
    }
}
