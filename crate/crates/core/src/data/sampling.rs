//! Anchor selection, cosine retrieval, the adjusted frame sampler and PCA diagnostics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExpressionTable;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub identity: usize,
    pub frame: usize,
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Farthest-point sampling in psi space, starting at the row farthest from
/// the mean. Returns row indices; ties go to the lower index.
pub fn select_anchors(table: &ExpressionTable, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Invalid("anchor count must be positive".into()));
    }
    let distinct: BTreeSet<Vec<u64>> = table.rows.iter().map(|r| r.2.iter().map(|v| v.to_bits()).collect()).collect();
    if k > distinct.len() {
        return Err(Error::Invalid(format!("{k} anchors requested from {} distinct expressions", distinct.len())));
    }
    let n = table.len() as f64;
    let mean: Vec<f64> = (0..table.dim).map(|d| table.rows.iter().map(|r| r.2[d]).sum::<f64>() / n).collect();
    let argmax = |score: &dyn Fn(usize) -> f64| {
        let mut best = 0;
        for i in 1..table.len() {
            if score(i) > score(best) {
                best = i;
            }
        }
        best
    };
    let first = argmax(&|i| dist2(&table.rows[i].2, &mean));
    let mut chosen = vec![first];
    let mut closest: Vec<f64> = table.rows.iter().map(|r| dist2(&r.2, &table.rows[first].2)).collect();
    while chosen.len() < k {
        let next = argmax(&|i| closest[i]);
        chosen.push(next);
        for (c, r) in closest.iter_mut().zip(&table.rows) {
            *c = c.min(dist2(&r.2, &table.rows[next].2));
        }
    }
    Ok(chosen)
}

/// Ranking order: nonzero rows by descending cosine, then (identity, frame); zero rows last.
fn rank(table: &ExpressionTable, rows: &mut [usize], anchor: &[f64]) -> Vec<f64> {
    let sims: Vec<f64> = table.rows.iter().map(|r| cosine(&r.2, anchor)).collect();
    let key = |i: usize| (norm(&table.rows[i].2) == 0.0, table.rows[i].0, table.rows[i].1);
    rows.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then_with(|| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal)).then((ka.1, ka.2).cmp(&(kb.1, kb.2)))
    });
    sims
}

/// The `top_k` rows most similar to `anchor` by cosine similarity.
pub fn retrieve_similar(table: &ExpressionTable, anchor: &[f64], top_k: usize) -> Result<Vec<(FrameRef, f64)>> {
    if table.is_empty() {
        return Err(Error::Invalid("empty expression table".into()));
    }
    if anchor.len() != table.dim || norm(anchor) == 0.0 {
        return Err(Error::Invalid("anchor must be a nonzero vector of the table's dimension".into()));
    }
    let mut rows: Vec<usize> = (0..table.len()).collect();
    let sims = rank(table, &mut rows, anchor);
    Ok(rows.into_iter().take(top_k).map(|i| (FrameRef { identity: table.rows[i].0, frame: table.rows[i].1 }, sims[i])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub k_anchor: usize,
    pub random_per_id: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { k_anchor: 20, random_per_id: 6, seed: 0 }
    }
}

/// Per identity, the frames used as training timesteps: anchor-retrieved first, then random.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub anchors: Vec<usize>,
    pub per_id: BTreeMap<usize, Vec<FrameRef>>,
}

impl SamplingPlan {
    pub fn frames(&self) -> impl Iterator<Item = &FrameRef> {
        self.per_id.values().flatten()
    }
}

/// For each identity: the best unused match of every anchor, plus
/// `random_per_id` further frames drawn from the rest.
pub fn build_adjusted_sampler(table: &ExpressionTable, cfg: &SamplerConfig) -> Result<SamplingPlan> {
    let need = cfg.k_anchor + cfg.random_per_id;
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        by_id.entry(r.0).or_default().push(i);
    }
    let short: Vec<String> = by_id.iter().filter(|(_, v)| v.len() < need).map(|(id, v)| format!("identity {id} has {} frames", v.len())).collect();
    if !short.is_empty() {
        return Err(Error::Invalid(format!("sampler needs {need} frames per identity: {}", short.join(", "))));
    }
    let anchors = select_anchors(table, cfg.k_anchor)?;
    let mut per_id = BTreeMap::new();
    for (&id, rows) in &by_id {
        let mut used = BTreeSet::new();
        let mut picked = Vec::with_capacity(need);
        for &a in &anchors {
            let mut order = rows.clone();
            rank(table, &mut order, &table.rows[a].2);
            let best = *order.iter().find(|i| !used.contains(*i)).expect("enough rows");
            used.insert(best);
            picked.push(best);
        }
        let mut rest: Vec<usize> = rows.iter().copied().filter(|i| !used.contains(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rest.shuffle(&mut rng);
        picked.extend(rest.into_iter().take(cfg.random_per_id));
        per_id.insert(id, picked.into_iter().map(|i| FrameRef { identity: id, frame: table.rows[i].1 }).collect());
    }
    Ok(SamplingPlan { anchors, per_id })
}

/// `per_id` frames per identity drawn uniformly without replacement.
pub fn uniform_sample(table: &ExpressionTable, per_id: usize, seed: u64) -> Vec<FrameRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in table.identities() {
        let mut rows: Vec<FrameRef> = table.rows.iter().filter(|r| r.0 == id).map(|r| FrameRef { identity: id, frame: r.1 }).collect();
        rows.shuffle(&mut rng);
        out.extend(rows.into_iter().take(per_id));
    }
    out
}

/// Fraction of `frames` within cosine similarity `threshold` of some anchor row.
pub fn anchor_neighborhood_mass(table: &ExpressionTable, frames: &[FrameRef], anchors: &[usize], threshold: f64) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let lookup: BTreeMap<FrameRef, &Vec<f64>> = table.rows.iter().map(|r| (FrameRef { identity: r.0, frame: r.1 }, &r.2)).collect();
    let near = frames
        .iter()
        .filter(|f| lookup.get(f).is_some_and(|psi| anchors.iter().any(|&a| cosine(psi, &table.rows[a].2) >= threshold)))
        .count();
    near as f64 / frames.len() as f64
}

/// Principal axes fitted on the anchors.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dim` unit row vectors, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Every covariance eigenvalue, descending (population normalization).
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum()).collect()
    }
}

/// Fits PCA on the anchor rows and projects every table row.
///
/// Fails when there are fewer anchors than `dim` or the anchors are all
/// identical; a rank-deficient but nonzero spread is allowed and shows up
/// as near-zero trailing variance.
pub fn pca_project(table: &ExpressionTable, anchors: &[usize], dim: usize) -> Result<(Pca, Vec<Vec<f64>>)> {
    if dim == 0 || dim > table.dim || anchors.len() < dim.max(2) {
        return Err(Error::Invalid(format!("PCA to {dim} dimensions from {} anchors of dimension {}", anchors.len(), table.dim)));
    }
    let e = table.dim;
    let n = anchors.len() as f64;
    let mean: Vec<f64> = (0..e).map(|d| anchors.iter().map(|&a| table.rows[a].2[d]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(e, e);
    for &a in anchors {
        let x: Vec<f64> = table.rows[a].2.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..e {
            for j in 0..e {
                cov[(i, j)] += x[i] * x[j] / n;
            }
        }
    }
    if cov.trace() <= 0.0 {
        return Err(Error::Invalid("degenerate covariance: all anchors coincide".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let components = order[..dim].iter().map(|&k| eig.eigenvectors.column(k).iter().copied().collect()).collect();
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let pca = Pca { mean, components, eigenvalues };
    let coords = table.rows.iter().map(|r| pca.project(&r.2)).collect();
    Ok((pca, coords))
}

/// A synthetic table with `n_clusters` tight, rare, strongly expressed
/// clusters (one member per identity each) over a bulk of mild expressions.
/// Returns the table and each row's cluster (`None` for bulk rows).
pub fn planted_cluster_table(n_ids: usize, frames_per_id: usize, n_clusters: usize, dim: usize, seed: u64) -> (ExpressionTable, Vec<Option<usize>>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            let mut c = vec![0.0; dim];
            let mut dims: Vec<usize> = (0..dim).collect();
            dims.shuffle(&mut rng);
            for &d in &dims[..3.min(dim)] {
                c[d] = rng.random_range(1.2..2.0);
            }
            c
        })
        .collect();
    let mut table = ExpressionTable::new(dim);
    let mut labels = Vec::new();
    for id in 0..n_ids {
        let mut kinds: Vec<Option<usize>> = (0..frames_per_id).map(|f| (f < n_clusters).then_some(f)).collect();
        kinds.shuffle(&mut rng);
        for (f, kind) in kinds.into_iter().enumerate() {
            let psi = match kind {
                Some(c) => centers[c].iter().map(|v| v + rng.random_range(-0.04..0.04)).collect(),
                None => (0..dim).map(|_| rng.random_range(0.0..0.35)).collect(),
            };
            table.push(id, f, psi).expect("fixed dimension");
            labels.push(kind);
        }
    }
    (table, labels)
}
