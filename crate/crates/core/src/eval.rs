//! Retrieval metrics on ℓ2-normalised representations, and a linear camera
//! probe measuring how much camera information the features still carry.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ksum, l2_normalize, norm, softmax, Tensor2};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::LossParts;

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_SEED: u64 = 0x5eed;

/// Identity and camera of each query or gallery item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemLabels {
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl ItemLabels {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub camera_probe_accuracy: f64,
}

/// One line of the per-epoch metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub report: MetricsReport,
    pub losses: LossParts,
}

pub const METRICS_HEADER: &str =
    "epoch,rank1,rank5,rank10,mAP,camera_probe_acc,loss_ce,loss_cam,loss_contr";

/// Formats `v` with six significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        let vals = [
            r.rank1,
            r.rank5,
            r.rank10,
            r.map,
            r.camera_probe_accuracy,
            self.losses.ce,
            self.losses.cam,
            self.losses.contr,
        ];
        let mut row = self.epoch.to_string();
        for v in vals {
            row.push(',');
            row.push_str(&fmt_sig(v));
        }
        row
    }
}

/// Euclidean distances between ℓ2-normalised query and gallery rows.
pub fn distance_matrix<V: AsRef<[f64]> + Sync>(query: &[V], gallery: &[V]) -> Result<Tensor2> {
    distance_matrix_with(query, gallery, Exec::default())
}

pub fn distance_matrix_with<V: AsRef<[f64]> + Sync>(
    query: &[V],
    gallery: &[V],
    exec: Exec,
) -> Result<Tensor2> {
    let dim = query
        .first()
        .or(gallery.first())
        .map_or(0, |v| v.as_ref().len());
    let normalize = |set: &[V]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|v| {
                if v.as_ref().len() != dim {
                    return Err(Error::shape("distance_matrix", dim, v.as_ref().len()));
                }
                l2_normalize(v.as_ref())
            })
            .collect()
    };
    let q = normalize(query)?;
    let g = normalize(gallery)?;
    let rows: Vec<Vec<f64>> = exec.map(q.len(), |i| {
        g.iter()
            .map(|gv| {
                let diff: Vec<f64> = q[i].iter().zip(gv).map(|(a, b)| a - b).collect();
                norm(&diff)
            })
            .collect()
    });
    Ok(Tensor2::from_fn(q.len(), g.len(), |i, j| rows[i][j]))
}

/// Gallery order for one query with same-identity same-camera items removed,
/// each entry flagged as a correct match or not.
fn ranked_matches(
    dist: &Tensor2,
    qi: usize,
    query: &ItemLabels,
    gallery: &ItemLabels,
) -> Vec<bool> {
    let row = dist.row(qi);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
        .into_iter()
        .filter(|&g| !(gallery.ids[g] == query.ids[qi] && gallery.cams[g] == query.cams[qi]))
        .map(|g| gallery.ids[g] == query.ids[qi])
        .collect()
}

fn check_inputs(dist: &Tensor2, query: &ItemLabels, gallery: &ItemLabels) -> Result<()> {
    if dist.rows() != query.len() || query.cams.len() != query.len() {
        return Err(Error::shape("query labels", dist.rows(), query.len()));
    }
    if dist.cols() != gallery.len() || gallery.cams.len() != gallery.len() {
        return Err(Error::shape("gallery labels", dist.cols(), gallery.len()));
    }
    if query.is_empty() {
        return Err(Error::EmptyInput("query set"));
    }
    Ok(())
}

/// Cumulative match curve: entry `k − 1` is the fraction of queries whose
/// first correct match is ranked within the top `k`.
pub fn cmc_curve(dist: &Tensor2, query: &ItemLabels, gallery: &ItemLabels) -> Result<Vec<f64>> {
    cmc_curve_with(dist, query, gallery, Exec::default())
}

pub fn cmc_curve_with(
    dist: &Tensor2,
    query: &ItemLabels,
    gallery: &ItemLabels,
    exec: Exec,
) -> Result<Vec<f64>> {
    check_inputs(dist, query, gallery)?;
    let first_hits: Vec<Option<usize>> = exec.map(query.len(), |qi| {
        ranked_matches(dist, qi, query, gallery)
            .iter()
            .position(|&m| m)
    });
    let mut counts = vec![0usize; gallery.len()];
    for (qi, hit) in first_hits.into_iter().enumerate() {
        counts[hit.ok_or(Error::NoValidMatch(qi))?] += 1;
    }
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / query.len() as f64
        })
        .collect())
}

/// Rank-k accuracy from a CMC curve; `k` beyond the gallery saturates.
pub fn rank_k(curve: &[f64], k: usize) -> f64 {
    curve
        .get(k.saturating_sub(1))
        .or(curve.last())
        .copied()
        .unwrap_or(0.0)
}

/// Rank-1, -5 and -10 accuracies.
pub fn cmc(dist: &Tensor2, query: &ItemLabels, gallery: &ItemLabels) -> Result<[(usize, f64); 3]> {
    let curve = cmc_curve(dist, query, gallery)?;
    Ok([1, 5, 10].map(|k| (k, rank_k(&curve, k))))
}

/// Average precision of one ranked relevance list.
///
/// The sum of precisions is kept as an exact fraction while it fits, so the
/// result is the correctly rounded value; long lists fall back to
/// compensated floating-point summation.
pub fn average_precision(matches: &[bool]) -> Option<f64> {
    let ranks: Vec<u64> = matches
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(r, _)| r as u64 + 1)
        .collect();
    if ranks.is_empty() {
        return None;
    }
    Some(exact_ap(&ranks).unwrap_or_else(|| {
        let precisions = ranks
            .iter()
            .enumerate()
            .map(|(h, &r)| (h + 1) as f64 / r as f64);
        ksum(precisions) / ranks.len() as f64
    }))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn exact_ap(ranks: &[u64]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for (h, &r) in ranks.iter().enumerate() {
        let (a, b) = ((h + 1) as u128, r as u128);
        let g = gcd(den, b);
        let lcm = den.checked_mul(b / g)?;
        num = num
            .checked_mul(lcm / den)?
            .checked_add(a.checked_mul(lcm / b)?)?;
        den = lcm;
        let g = gcd(num, den);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(ranks.len() as u128)?;
    let g = gcd(num, den);
    (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

pub fn mean_average_precision(
    dist: &Tensor2,
    query: &ItemLabels,
    gallery: &ItemLabels,
) -> Result<f64> {
    mean_average_precision_with(dist, query, gallery, Exec::default())
}

pub fn mean_average_precision_with(
    dist: &Tensor2,
    query: &ItemLabels,
    gallery: &ItemLabels,
    exec: Exec,
) -> Result<f64> {
    check_inputs(dist, query, gallery)?;
    let aps: Vec<Option<f64>> = exec.map(query.len(), |qi| {
        average_precision(&ranked_matches(dist, qi, query, gallery))
    });
    let aps = aps
        .into_iter()
        .enumerate()
        .map(|(qi, ap)| ap.ok_or(Error::NoValidMatch(qi)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ksum(aps.iter().copied()) / aps.len() as f64)
}

/// Held-out accuracy of a linear softmax classifier trained to predict the
/// camera from frozen representations.
///
/// Each camera's samples are shuffled with a fixed seed and split in half;
/// the classifier starts at zero and takes [`PROBE_STEPS`] full-batch
/// gradient steps of size [`PROBE_LR`] on the mean cross-entropy.
pub fn camera_probe<V: AsRef<[f64]>>(reps: &[V], cameras: &[usize]) -> Result<f64> {
    if reps.len() != cameras.len() {
        return Err(Error::shape("camera_probe", reps.len(), cameras.len()));
    }
    let n_cams = cameras.iter().max().map_or(0, |m| m + 1);
    let mut per_cam: Vec<Vec<usize>> = vec![Vec::new(); n_cams];
    for (i, &c) in cameras.iter().enumerate() {
        per_cam[c].push(i);
    }
    let smallest = per_cam.iter().map(Vec::len).min().unwrap_or(0);
    if n_cams < 2 || smallest < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: smallest,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in per_cam {
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        train.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    let dim = reps[0].as_ref().len();
    let x = Tensor2::from_rows(&train.iter().map(|&i| reps[i].as_ref()).collect::<Vec<_>>())?;
    if x.cols() != dim {
        return Err(Error::shape("camera_probe", dim, x.cols()));
    }
    let xt = x.transpose();
    let mut w = Tensor2::zeros(dim, n_cams);
    let mut b = Tensor2::zeros(1, n_cams);
    let scale = 1.0 / train.len() as f64;
    for _ in 0..PROBE_STEPS {
        let logits = x.matmul(&w)?.add_row_bias(&b)?;
        let mut delta = Tensor2::zeros(train.len(), n_cams);
        for (r, &i) in train.iter().enumerate() {
            let p = softmax(logits.row(r))?;
            for (c, v) in delta.row_mut(r).iter_mut().enumerate() {
                *v = scale * (p[c] - if cameras[i] == c { 1.0 } else { 0.0 });
            }
        }
        let gw = xt.matmul(&delta)?;
        let gb = delta.sum_rows();
        w = w.zip_map(&gw, |a, g| a - PROBE_LR * g);
        b = b.zip_map(&gb, |a, g| a - PROBE_LR * g);
    }
    let xs = Tensor2::from_rows(&test.iter().map(|&i| reps[i].as_ref()).collect::<Vec<_>>())?;
    let logits = xs.matmul(&w)?.add_row_bias(&b)?;
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(r, &i)| {
            let row = logits.row(r);
            let best = (0..n_cams).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            best == cameras[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Rank-k, mAP and camera probe for an all-against-all split of one set of
/// representations.
pub fn evaluate<V: AsRef<[f64]> + Sync>(reps: &[V], labels: &ItemLabels) -> Result<MetricsReport> {
    let dist = distance_matrix(reps, reps)?;
    let curve = cmc_curve(&dist, labels, labels)?;
    let map = mean_average_precision(&dist, labels, labels)?;
    let normalized = reps
        .iter()
        .map(|r| l2_normalize(r.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        rank1: rank_k(&curve, 1),
        rank5: rank_k(&curve, 5),
        rank10: rank_k(&curve, 10),
        map,
        camera_probe_accuracy: camera_probe(&normalized, &labels.cams)?,
    })
}
