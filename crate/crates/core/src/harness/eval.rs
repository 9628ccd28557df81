//! Correspondence-recovery and routing-specialization evaluation.
//!
//! Codes coming out of the prototype banks are arbitrary relabelings, so
//! evaluation matches them to ground truth with a max-weight assignment over
//! co-occurrence counts before scoring.

use crate::error::{Error, Result};

/// Max-weight perfect matching on an n x n weight matrix (row-major).
/// Returns `row -> column`. O(n^3) shortest-augmenting-path scheme over
/// potentials, run on negated weights.
pub fn hungarian_max(weights: &[f64], n: usize) -> Result<Vec<usize>> {
    if weights.len() != n * n {
        return Err(Error::dim("assignment matrix", n * n, weights.len()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = |i: usize, j: usize| -weights[i * n + j];

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row (1-indexed, 0 = free)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[matched_row[j] - 1] = j - 1;
    }
    Ok(row_to_col)
}

/// One evaluated timestep: the ground-truth phoneme id and the two learned
/// codes.
#[derive(Debug, Clone, Copy)]
pub struct CodeTriple {
    pub true_id: usize,
    pub phoneme_code: usize,
    pub viseme_code: usize,
}

/// Matchings recovered from a reference (training) set of code triples.
#[derive(Debug, Clone)]
pub struct CorrespondenceMaps {
    /// Learned phoneme code -> learned viseme code (max co-occurrence).
    pub code_match: Vec<usize>,
    /// Learned phoneme code -> true phoneme id.
    pub phoneme_code_to_true: Vec<usize>,
    /// Learned viseme code -> true viseme id.
    pub viseme_code_to_true: Vec<usize>,
}

/// Max-weight assignment on a possibly rectangular co-occurrence matrix,
/// zero-padded to square. Rows matched to a padding column come back as
/// `usize::MAX` (no real partner).
fn assignment_padded(
    pairs: impl Iterator<Item = (usize, usize)>,
    rows: usize,
    cols: usize,
) -> Result<Vec<usize>> {
    let n = rows.max(cols);
    let mut m = vec![0.0; n * n];
    for (a, b) in pairs {
        m[a * n + b] += 1.0;
    }
    let full = hungarian_max(&m, n)?;
    Ok(full
        .into_iter()
        .take(rows)
        .map(|c| if c < cols { c } else { usize::MAX })
        .collect())
}

/// Build the three Hungarian matchings from reference triples. `k` is the
/// learned code count (phoneme and viseme banks share it);
/// `true_correspondence[p]` is the ground-truth viseme id of phoneme p
/// (needed to label viseme codes with viseme ids).
pub fn correspondence_maps(
    triples: &[CodeTriple],
    k: usize,
    true_correspondence: &[usize],
) -> Result<CorrespondenceMaps> {
    if triples.is_empty() {
        return Err(Error::invalid("correspondence_maps: no triples"));
    }
    let k_true = true_correspondence.len();
    let code_match =
        assignment_padded(triples.iter().map(|t| (t.phoneme_code, t.viseme_code)), k, k)?;
    let phoneme_code_to_true =
        assignment_padded(triples.iter().map(|t| (t.phoneme_code, t.true_id)), k, k_true)?;
    let viseme_code_to_true = assignment_padded(
        triples
            .iter()
            .map(|t| (t.viseme_code, true_correspondence[t.true_id])),
        k,
        k_true,
    )?;
    Ok(CorrespondenceMaps {
        code_match,
        phoneme_code_to_true,
        viseme_code_to_true,
    })
}

/// Fraction of timesteps whose code pair lies on the matched bijection AND
/// whose matched pair agrees with the ground-truth phoneme-to-viseme
/// correspondence. The maps come from a reference set, so this can score
/// zero-shot data without refitting.
pub fn correspondence_accuracy(
    triples: &[CodeTriple],
    maps: &CorrespondenceMaps,
    true_correspondence: &[usize],
) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for t in triples {
        let matched_viseme = maps.code_match[t.phoneme_code];
        let true_phoneme = maps.phoneme_code_to_true[t.phoneme_code];
        if matched_viseme == usize::MAX || true_phoneme == usize::MAX {
            continue;
        }
        let on_bijection = t.viseme_code == matched_viseme;
        let matched_true_viseme = maps.viseme_code_to_true[matched_viseme];
        let truth_consistent =
            matched_true_viseme != usize::MAX && matched_true_viseme == true_correspondence[true_phoneme];
        if on_bijection && truth_consistent {
            hits += 1;
        }
    }
    hits as f64 / triples.len() as f64
}

/// Normalized mutual information between two labelings, with arithmetic-mean
/// normalization (`2 I / (H_x + H_y)`, natural logs). Returns 0 when either
/// marginal is deterministic.
pub fn normalized_mutual_information(xs: &[usize], ys: &[usize], kx: usize, ky: usize) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("nmi labelings", xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(Error::invalid("nmi: empty labelings"));
    }
    let n = xs.len() as f64;
    let mut joint = vec![0.0f64; kx * ky];
    let mut px = vec![0.0f64; kx];
    let mut py = vec![0.0f64; ky];
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        joint[x * ky + y] += 1.0;
        px[x] += 1.0;
        py[y] += 1.0;
    }
    let hx: f64 = -px
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| (c / n) * (c / n).ln())
        .sum::<f64>();
    let hy: f64 = -py
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| (c / n) * (c / n).ln())
        .sum::<f64>();
    if hx == 0.0 || hy == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for x in 0..kx {
        for y in 0..ky {
            let c = joint[x * ky + y];
            if c > 0.0 {
                let pxy = c / n;
                mi += pxy * (pxy / ((px[x] / n) * (py[y] / n))).ln();
            }
        }
    }
    Ok((2.0 * mi / (hx + hy)).max(0.0))
}
