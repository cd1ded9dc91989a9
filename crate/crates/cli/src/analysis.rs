//! Post-hoc analyses of a run: choice-share streams and k-means purity of
//! evaluation states labelled by their active skill.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrs_core::{Error, Result};

pub const K_RANGE: (usize, usize) = (2, 12);
pub const RESTARTS: usize = 10;
/// Points used for the silhouette score.
pub const SILHOUETTE_SAMPLE: usize = 2000;
const MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurityReport {
    pub k: usize,
    pub silhouette: f64,
    pub purity: f64,
    /// Most common label per cluster (`None` for empty clusters).
    pub dominant: Vec<Option<usize>>,
    pub cluster_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShareWindow {
    pub start: usize,
    pub end: usize,
    pub shares: Vec<f64>,
}

/// Everything `analyze` produces for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOutput {
    pub shares: Vec<ShareWindow>,
    pub purity: Option<PurityReport>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-column z-scores; constant columns become zero.
pub fn standardize(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(d) = data.first().map(Vec::len) else {
        return Vec::new();
    };
    let n = data.len() as f64;
    let mut out = data.to_vec();
    for j in 0..d {
        let mean = data.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = data.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for r in &mut out {
            r[j] = (r[j] - mean) / sd;
        }
    }
    out
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[idx].clone());
        for (p, d) in data.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(data: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Clustering {
    let k = centers.len();
    let d = data[0].len();
    let mut assignments = vec![usize::MAX; data.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (p, a) in data.iter().zip(assignments.iter_mut()) {
            let c = nearest(p, &centers).0;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = data.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
    Clustering {
        k,
        assignments,
        centers,
        inertia,
    }
}

/// k-means++ with `restarts` seeded restarts; keeps the lowest inertia.
pub fn kmeans(data: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || data.len() < k {
        return Err(Error::Usage(format!("k-means with k = {k} needs at least {k} points, got {}", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let c = lloyd(data, plus_plus_init(data, k, &mut rng));
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette over the given point indices.
pub fn silhouette(data: &[Vec<f64>], labels: &[usize], k: usize, sample: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in sample {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for &j in sample {
            if j != i {
                sums[labels[j]] += sq_dist(&data[i], &data[j]).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / sample.len().max(1) as f64
}

/// Share of the dominant label summed over clusters.
pub fn purity(assignments: &[usize], labels: &[usize], k: usize, n_labels: usize) -> (f64, Vec<Option<usize>>, Vec<usize>) {
    let mut counts = vec![vec![0usize; n_labels]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[a][l] += 1;
    }
    let mut hits = 0;
    let mut dominant = Vec::with_capacity(k);
    let mut sizes = Vec::with_capacity(k);
    for row in &counts {
        let size: usize = row.iter().sum();
        sizes.push(size);
        // First maximum wins, so ties go to the lower label.
        let best = row.iter().enumerate().fold(None, |acc: Option<(usize, usize)>, (l, &c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((l, c)),
        });
        hits += best.map_or(0, |b| b.1);
        dominant.push(best.filter(|_| size > 0).map(|b| b.0));
    }
    (hits as f64 / assignments.len().max(1) as f64, dominant, sizes)
}

/// Standardizes `states`, picks k in `k_range` by silhouette (ties go to the
/// smaller k), and scores label purity of that clustering.
pub fn analyze_purity(
    states: &[Vec<f64>],
    labels: &[usize],
    n_labels: usize,
    k_range: (usize, usize),
    seed: u64,
) -> Result<PurityReport> {
    if states.len() != labels.len() {
        return Err(Error::Shape(format!("{} states but {} labels", states.len(), labels.len())));
    }
    if labels.iter().any(|&l| l >= n_labels) {
        return Err(Error::Usage(format!("labels must lie below {n_labels}")));
    }
    let (kmin, kmax) = k_range;
    if kmin < 2 || kmax < kmin {
        return Err(Error::Usage(format!("invalid k range {kmin}..={kmax}")));
    }
    if states.len() <= kmin {
        return Err(Error::Usage(format!(
            "{} states are too few to cluster with k = {kmin}",
            states.len()
        )));
    }
    let data = standardize(states);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample: Vec<usize> = if data.len() > SILHOUETTE_SAMPLE {
        rand::seq::index::sample(&mut rng, data.len(), SILHOUETTE_SAMPLE).into_vec()
    } else {
        (0..data.len()).collect()
    };
    sample.sort_unstable();
    let mut best: Option<(f64, Clustering)> = None;
    for k in kmin..=kmax.min(data.len() - 1) {
        let c = kmeans(&data, k, RESTARTS, seed.wrapping_add(k as u64))?;
        let s = silhouette(&data, &c.assignments, k, &sample);
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, c));
        }
    }
    let (silhouette, c) = best.expect("k range is nonempty");
    let (p, dominant, cluster_sizes) = purity(&c.assignments, labels, c.k, n_labels);
    Ok(PurityReport {
        k: c.k,
        silhouette,
        purity: p,
        dominant,
        cluster_sizes,
    })
}

/// Choice shares over consecutive windows of `window` decisions; a trailing
/// partial window is kept.
pub fn choice_shares(choices: &[usize], heads: usize, window: usize) -> Vec<ShareWindow> {
    let window = window.max(1);
    choices
        .chunks(window)
        .enumerate()
        .map(|(w, chunk)| {
            let mut shares = vec![0.0; heads];
            for &c in chunk {
                shares[c] += 1.0;
            }
            for s in &mut shares {
                *s /= chunk.len() as f64;
            }
            ShareWindow {
                start: w * window,
                end: w * window + chunk.len(),
                shares,
            }
        })
        .collect()
}

/// Choice shares of `(step, choice)` events in each quarter of `[0, total_steps)`.
pub fn quartile_shares(events: &[(u64, usize)], heads: usize, total_steps: u64) -> [Vec<f64>; 4] {
    let mut counts = [vec![0.0; heads], vec![0.0; heads], vec![0.0; heads], vec![0.0; heads]];
    let total_steps = total_steps.max(1);
    for &(step, c) in events {
        let q = ((step.min(total_steps - 1) * 4) / total_steps) as usize;
        counts[q][c] += 1.0;
    }
    for row in &mut counts {
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            let c = if l == 0 { -10.0 } else { 10.0 };
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            pts.push(vec![c + x, y]);
            labels.push(l);
        }
        (pts, labels)
    }

    #[test]
    fn separated_blobs_give_k2_and_purity_one() {
        let (pts, labels) = blobs(300, 0);
        let r = analyze_purity(&pts, &labels, 2, K_RANGE, 1).unwrap();
        assert_eq!(r.k, 2);
        assert_eq!(r.purity, 1.0);
    }

    #[test]
    fn single_label_is_pure() {
        let (pts, _) = blobs(200, 1);
        let labels = vec![3; pts.len()];
        assert_eq!(analyze_purity(&pts, &labels, 5, K_RANGE, 0).unwrap().purity, 1.0);
    }

    #[test]
    fn random_labels_land_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..5)).collect();
        let r = analyze_purity(&pts, &labels, 5, K_RANGE, 0).unwrap();
        assert!((r.purity - 0.2).abs() <= 0.05, "{}", r.purity);
    }

    #[test]
    fn too_few_states_is_an_error() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(analyze_purity(&pts, &[0, 1], 2, K_RANGE, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic_for_a_seed() {
        let (pts, _) = blobs(200, 2);
        let data = standardize(&pts);
        assert_eq!(kmeans(&data, 4, 3, 9).unwrap(), kmeans(&data, 4, 3, 9).unwrap());
    }

    #[test]
    fn shares_recount_the_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let choices: Vec<usize> = (0..2500).map(|_| rng.random_range(0..5)).collect();
        let w = choice_shares(&choices, 5, 1000);
        assert_eq!(w.len(), 3);
        for win in &w {
            assert!((win.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let chunk = &choices[win.start..win.end];
            for (c, &s) in win.shares.iter().enumerate() {
                let n = chunk.iter().filter(|&&x| x == c).count();
                assert_eq!(s, n as f64 / chunk.len() as f64);
            }
        }
    }

    #[test]
    fn quartiles_split_by_step() {
        let ev = [(0, 0), (10, 1), (30, 1), (99, 0), (100, 0)];
        let q = quartile_shares(&ev, 2, 100);
        assert_eq!(q[0], vec![0.5, 0.5]);
        assert_eq!(q[1], vec![0.0, 1.0]);
        assert_eq!(q[2], vec![0.0, 0.0]);
        assert_eq!(q[3], vec![1.0, 0.0]);
    }
}
