//! Prototype banks: k-means++ construction, hard/soft assignment, and
//! periodic refits.
//!
//! A bank holds K centroids acting as universal anchors for one modality.
//! Assignments are pure functions of the bank; banks only change at refit
//! time, so gradients flow through soft assignments (to the features), never
//! through the centroids.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{softmax_stable, Graph, NodeId};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Phoneme,
    Viseme,
}

/// K centroids of one modality with the softmax temperature used for soft
/// assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// Row-major K x d.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub modality: Modality,
    pub tau: f64,
    pub last_refit_epoch: u64,
}

impl PrototypeBank {
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("prototype bank needs K >= 2"));
        }
        if self.centroids.len() != self.k * self.dim {
            return Err(Error::dim("bank centroids", self.k * self.dim, self.centroids.len()));
        }
        if self.tau <= 0.0 {
            return Err(Error::invalid("bank temperature must be > 0"));
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype centroid".into()));
        }
        for a in 0..self.k {
            for b in (a + 1)..self.k {
                if sq_dist(self.centroid(a), self.centroid(b)) == 0.0 {
                    return Err(Error::invalid(format!("centroids {a} and {b} are identical")));
                }
            }
        }
        Ok(())
    }

    /// JSON header plus flat little-endian centroid array.
    pub fn save(&self, base: &Path) -> Result<()> {
        let header = BankHeader {
            k: self.k,
            dim: self.dim,
            tau: self.tau,
            modality: self.modality,
            last_refit_epoch: self.last_refit_epoch,
        };
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&header)?,
        )?;
        let mut bytes = Vec::with_capacity(self.centroids.len() * 8);
        for v in &self.centroids {
            bytes.write_all(&v.to_le_bytes())?;
        }
        std::fs::write(base.with_extension("bin"), bytes)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let header: BankHeader =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(base.with_extension("bin"))?.read_to_end(&mut bytes)?;
        let centroids: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let bank = PrototypeBank {
            centroids,
            k: header.k,
            dim: header.dim,
            modality: header.modality,
            tau: header.tau,
            last_refit_epoch: header.last_refit_epoch,
        };
        bank.validate()?;
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    k: usize,
    dim: usize,
    tau: f64,
    modality: Modality,
    last_refit_epoch: u64,
}

/// One feature's placement against a bank: the discrete code plus the
/// temperature-softened distribution it is the argmax of.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub hard: usize,
    pub soft: Vec<f64>,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Nearest centroid by squared distance; ties break to the lowest index.
pub fn hard_assign(z: &[f64], bank: &PrototypeBank) -> Result<usize> {
    if z.len() != bank.dim {
        return Err(Error::dim("hard_assign input", bank.dim, z.len()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hard_assign input".into()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..bank.k {
        let d = sq_dist(z, bank.centroid(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best)
}

/// Softmax over affinities `-||z - c_k||^2 / tau^2`.
pub fn soft_assign(z: &[f64], bank: &PrototypeBank, tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::invalid("soft_assign: tau must be > 0"));
    }
    if z.len() != bank.dim {
        return Err(Error::dim("soft_assign input", bank.dim, z.len()));
    }
    let inv = -1.0 / (tau * tau);
    let affinities: Vec<f64> = (0..bank.k)
        .map(|k| inv * sq_dist(z, bank.centroid(k)))
        .collect();
    Ok(softmax_stable(&affinities))
}

pub fn assign(z: &[f64], bank: &PrototypeBank) -> Result<Assignment> {
    Ok(Assignment {
        hard: hard_assign(z, bank)?,
        soft: soft_assign(z, bank, bank.tau)?,
    })
}

/// Recorded soft assignment: differentiable w.r.t. the feature node, with
/// centroids entering as constants. Affinity accumulation order matches
/// [`soft_assign`] exactly.
pub fn soft_assign_node(g: &mut Graph, z: NodeId, bank: &PrototypeBank) -> Result<NodeId> {
    if g.tape.value(z).len() != bank.dim {
        return Err(Error::dim("soft_assign input", bank.dim, g.tape.value(z).len()));
    }
    let inv = -1.0 / (bank.tau * bank.tau);
    let mut affinities = Vec::with_capacity(bank.k);
    for k in 0..bank.k {
        let c = g.input(bank.centroid(k));
        let diff = g.tape.sub(z, c)?;
        let d2 = g.tape.dot(diff, diff)?;
        affinities.push(g.tape.scale(d2, inv));
    }
    let stacked = g.tape.concat(&affinities);
    Ok(g.tape.softmax(stacked))
}

/// Within-cluster sum of squares under nearest-centroid assignment.
fn wcss(features: &[f64], dim: usize, centroids: &[f64], k: usize) -> f64 {
    let n = features.len() / dim;
    let mut total = 0.0;
    for i in 0..n {
        let z = &features[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(z, &centroids[c * dim..(c + 1) * dim]);
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total
}

/// Lloyd iterations from given centroids until the max centroid shift drops
/// below `tol` or `max_iter` passes. Empty clusters are re-seeded at the
/// point farthest from its assigned centroid.
fn lloyd(
    features: &[f64],
    dim: usize,
    centroids: &mut Vec<f64>,
    k: usize,
    max_iter: usize,
    tol: f64,
) {
    let n = features.len() / dim;
    let mut assignments = vec![0usize; n];
    let mut prev_wcss = f64::INFINITY;

    for _iter in 0..max_iter {
        // assignment step
        for i in 0..n {
            let z = &features[i * dim..(i + 1) * dim];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(z, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
        }

        // update step
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for j in 0..dim {
                sums[c * dim + j] += features[i * dim + j];
            }
        }

        let mut reseeded = false;
        let mut max_shift_sq = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its assigned centroid takes over
                let mut far_i = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let z = &features[i * dim..(i + 1) * dim];
                    let a = assignments[i];
                    let d = sq_dist(z, &centroids[a * dim..(a + 1) * dim]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centroids[c * dim..(c + 1) * dim]
                    .copy_from_slice(&features[far_i * dim..(far_i + 1) * dim]);
                reseeded = true;
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut shift_sq = 0.0;
            for j in 0..dim {
                let new = sums[c * dim + j] * inv;
                let d = new - centroids[c * dim + j];
                shift_sq += d * d;
                centroids[c * dim + j] = new;
            }
            if shift_sq > max_shift_sq {
                max_shift_sq = shift_sq;
            }
        }

        let cur = wcss(features, dim, centroids, k);
        if !reseeded {
            debug_assert!(
                cur <= prev_wcss + 1e-9 * (1.0 + prev_wcss.abs()),
                "lloyd iteration increased wcss: {prev_wcss} -> {cur}"
            );
        }
        prev_wcss = cur;

        if !reseeded && max_shift_sq.sqrt() < tol {
            break;
        }
    }
}

/// K-means++ seeding followed by Lloyd iterations to convergence.
pub fn kmeanspp_init(
    features: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    tau: f64,
    modality: Modality,
    seed: u64,
) -> Result<PrototypeBank> {
    if n < k {
        return Err(Error::invalid(format!("kmeans++ needs N >= K, got N={n}, K={k}")));
    }
    if features.len() != n * dim {
        return Err(Error::dim("kmeans features", n * dim, features.len()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans features".into()));
    }

    let mut rng = rng_for(seed, "kmeanspp", 0);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&features[first * dim..(first + 1) * dim]);

    let mut min_d = vec![0.0f64; n];
    for c in 1..k {
        let mut total = 0.0;
        for i in 0..n {
            let z = &features[i * dim..(i + 1) * dim];
            let mut best = f64::INFINITY;
            for cc in 0..c {
                let d = sq_dist(z, &centroids[cc * dim..(cc + 1) * dim]);
                if d < best {
                    best = d;
                }
            }
            min_d[i] = best;
            total += best;
        }
        let pick = if total > 0.0 {
            let threshold = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for i in 0..n {
                acc += min_d[i];
                if acc >= threshold {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all points coincide with existing centroids
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(&features[pick * dim..(pick + 1) * dim]);
    }

    lloyd(features, dim, &mut centroids, k, 100, 1e-6);

    let bank = PrototypeBank {
        centroids,
        k,
        dim,
        modality,
        tau,
        last_refit_epoch: 0,
    };
    bank.validate()?;
    Ok(bank)
}

/// Lloyd iterations initialized from the bank's current centroids. An empty
/// feature set is a warning no-op.
pub fn refit(bank: &PrototypeBank, features: &[f64], current_epoch: u64) -> Result<PrototypeBank> {
    if features.is_empty() {
        log::warn!("refit called with no features; keeping centroids");
        let mut out = bank.clone();
        out.last_refit_epoch = current_epoch;
        return Ok(out);
    }
    if features.len() % bank.dim != 0 {
        return Err(Error::dim(
            "refit features",
            bank.dim * (features.len() / bank.dim),
            features.len(),
        ));
    }
    let mut centroids = bank.centroids.clone();
    lloyd(features, bank.dim, &mut centroids, bank.k, 100, 1e-6);
    let out = PrototypeBank {
        centroids,
        last_refit_epoch: current_epoch,
        ..bank.clone()
    };
    out.validate()?;
    Ok(out)
}
