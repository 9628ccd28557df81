//! Jensen-Shannon mutual-information estimation and the cross-modal
//! alignment objective.
//!
//! MI between two streams is lower-bounded through a binary discriminator
//! that scores concatenated pairs: matched pairs should score high, shuffled
//! (deranged) pairs low. The alignment loss maximizes that bound at the
//! prototype-assignment level while penalizing it at the raw-feature level.

use rand::seq::SliceRandom;

use crate::diffcore::mlp::{mlp_eval, mlp_forward};
use crate::diffcore::param::{MlpSpec, ParameterBlock};
use crate::diffcore::tape::{log_sigmoid, BlockId, Graph, NodeId};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// Logits are clamped to this magnitude before the log terms so a saturated
/// discriminator cannot produce -inf.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Matched pairs (set P) and time-shuffled pairs (set N) of equal size.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub positives: Vec<(Vec<f64>, Vec<f64>)>,
    pub negatives: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Seeded permutation of `0..n` with no fixed point. Rejection-samples
/// shuffles and falls back to a cyclic rotation if it gets unlucky.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid(format!("no derangement exists for n = {n}")));
    }
    let mut rng = rng_for(seed, "derangement", 0);
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..1000 {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
    Ok((0..n).map(|i| (i + 1) % n).collect())
}

/// Positives are index-aligned; negatives re-pair each x with a deranged y.
pub fn make_negative_pairs(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    seed: u64,
) -> Result<PairBatch> {
    if xs.len() != ys.len() {
        return Err(Error::dim("pair batch", xs.len(), ys.len()));
    }
    let perm = derangement(xs.len(), seed)?;
    let positives = xs.iter().cloned().zip(ys.iter().cloned()).collect();
    let negatives = xs
        .iter()
        .cloned()
        .zip(perm.iter().map(|&j| ys[j].clone()))
        .collect();
    Ok(PairBatch { positives, negatives })
}

/// Binary discriminator over concatenated `[x; y]` inputs.
#[derive(Debug, Clone)]
pub struct MiEstimator {
    pub params: ParameterBlock,
    pub spec: MlpSpec,
}

impl MiEstimator {
    pub fn new(dim_x: usize, dim_y: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![dim_x + dim_y];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = MlpSpec::tanh(&widths)?;
        let params = spec.init_params(seed);
        Ok(MiEstimator { params, spec })
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    fn logit(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let mut joint = Vec::with_capacity(x.len() + y.len());
        joint.extend_from_slice(x);
        joint.extend_from_slice(y);
        Ok(mlp_eval(&self.params, &self.spec, &joint)?[0])
    }
}

/// Value of the two-term JS bound plus how many logits hit the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsMiEstimate {
    pub value: f64,
    pub clamped: usize,
}

/// Empirical JS bound: mean log-sigmoid of positive logits plus mean
/// log(1 - sigmoid) of negative logits. Always <= 0.
pub fn estimate_js_mi(est: &MiEstimator, batch: &PairBatch) -> Result<JsMiEstimate> {
    if batch.positives.is_empty() || batch.positives.len() != batch.negatives.len() {
        return Err(Error::invalid("pair batch must be non-empty and balanced"));
    }
    let mut clamped = 0usize;
    let mut clamp = |l: f64| {
        if l.abs() > LOGIT_CLAMP {
            clamped += 1;
        }
        l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    };

    let mut pos_sum = 0.0;
    for (x, y) in &batch.positives {
        pos_sum += log_sigmoid(clamp(est.logit(x, y)?));
    }
    let mut neg_sum = 0.0;
    for (x, y) in &batch.negatives {
        neg_sum += log_sigmoid(-clamp(est.logit(x, y)?));
    }
    let n = batch.positives.len() as f64;
    let value = pos_sum / n + neg_sum / n;
    if clamped > 0 {
        log::debug!("js-mi estimate clamped {clamped} logits");
    }
    Ok(JsMiEstimate { value, clamped })
}

/// Recorded JS bound over node pairs that already live on the graph.
/// `disc` must be the registered block for `spec`.
pub fn js_mi_node(
    g: &mut Graph,
    disc: BlockId,
    spec: &MlpSpec,
    positives: &[(NodeId, NodeId)],
    negatives: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    if positives.is_empty() || positives.len() != negatives.len() {
        return Err(Error::invalid("pair batch must be non-empty and balanced"));
    }
    let logit_of = |g: &mut Graph, x: NodeId, y: NodeId| -> Result<NodeId> {
        let joint = g.tape.concat(&[x, y]);
        let out = mlp_forward(g, disc, spec, joint)?;
        Ok(g.tape.clamp(out, -LOGIT_CLAMP, LOGIT_CLAMP))
    };

    let mut pos_terms = Vec::with_capacity(positives.len());
    for &(x, y) in positives {
        let l = logit_of(g, x, y)?;
        pos_terms.push(g.tape.log_sigmoid(l));
    }
    let mut neg_terms = Vec::with_capacity(negatives.len());
    for &(x, y) in negatives {
        let l = logit_of(g, x, y)?;
        let nl = g.tape.scale(l, -1.0);
        neg_terms.push(g.tape.log_sigmoid(nl));
    }
    let pos = g.tape.concat(&pos_terms);
    let pos_mean = g.tape.mean(pos);
    let neg = g.tape.concat(&neg_terms);
    let neg_mean = g.tape.mean(neg);
    g.tape.add(pos_mean, neg_mean)
}

fn pair_nodes(
    xs: &[NodeId],
    ys: &[NodeId],
    perm: &[usize],
) -> (Vec<(NodeId, NodeId)>, Vec<(NodeId, NodeId)>) {
    let positives = xs.iter().copied().zip(ys.iter().copied()).collect();
    let negatives = xs
        .iter()
        .copied()
        .zip(perm.iter().map(|&j| ys[j]))
        .collect();
    (positives, negatives)
}

/// Alignment objective: `-I(prototype level) + lambda_neg * I(raw level)`.
///
/// The prototype-level inputs are the soft assignment vectors (differentiable
/// and peaked at the hard code); the raw level sees the features themselves.
/// One time derangement, derived from `seed`, builds the negatives at both
/// levels.
pub fn alignment_loss(
    q_p_soft: &[Vec<f64>],
    q_v_soft: &[Vec<f64>],
    z_p: &[Vec<f64>],
    z_v: &[Vec<f64>],
    est_proto: &MiEstimator,
    est_raw: &MiEstimator,
    lambda_neg: f64,
    seed: u64,
) -> Result<f64> {
    let t = q_p_soft.len();
    for (name, len) in [("q_v_soft", q_v_soft.len()), ("z_p", z_p.len()), ("z_v", z_v.len())] {
        if len != t {
            return Err(Error::dim(format!("alignment sequences ({name})"), t, len));
        }
    }
    if lambda_neg < 0.0 {
        return Err(Error::invalid("lambda_neg must be >= 0"));
    }
    let perm = derangement(t, seed)?;
    let proto_batch = PairBatch {
        positives: q_p_soft.iter().cloned().zip(q_v_soft.iter().cloned()).collect(),
        negatives: q_p_soft
            .iter()
            .cloned()
            .zip(perm.iter().map(|&j| q_v_soft[j].clone()))
            .collect(),
    };
    let i_proto = estimate_js_mi(est_proto, &proto_batch)?.value;

    let raw_batch = PairBatch {
        positives: z_p.iter().cloned().zip(z_v.iter().cloned()).collect(),
        negatives: z_p
            .iter()
            .cloned()
            .zip(perm.iter().map(|&j| z_v[j].clone()))
            .collect(),
    };
    let i_raw = estimate_js_mi(est_raw, &raw_batch)?.value;

    Ok(-i_proto + lambda_neg * i_raw)
}

/// Per-level JS bounds recorded on the graph, combined by the caller.
pub struct AlignmentNodes {
    pub i_proto: NodeId,
    pub i_raw: NodeId,
    /// Scalar loss node: `-i_proto + lambda_neg * i_raw`.
    pub loss: NodeId,
}

/// Recorded alignment loss over feature/assignment nodes.
#[allow(clippy::too_many_arguments)]
pub fn alignment_loss_node(
    g: &mut Graph,
    disc_proto: BlockId,
    spec_proto: &MlpSpec,
    disc_raw: BlockId,
    spec_raw: &MlpSpec,
    v_p: &[NodeId],
    v_v: &[NodeId],
    z_p: &[NodeId],
    z_v: &[NodeId],
    lambda_neg: f64,
    perm: &[usize],
) -> Result<AlignmentNodes> {
    if v_p.len() != v_v.len() || z_p.len() != z_v.len() || v_p.len() != z_p.len() {
        return Err(Error::invalid("alignment sequences must share one length"));
    }
    let (pos_p, neg_p) = pair_nodes(v_p, v_v, perm);
    let i_proto = js_mi_node(g, disc_proto, spec_proto, &pos_p, &neg_p)?;
    let (pos_r, neg_r) = pair_nodes(z_p, z_v, perm);
    let i_raw = js_mi_node(g, disc_raw, spec_raw, &pos_r, &neg_r)?;

    let neg_proto = g.tape.scale(i_proto, -1.0);
    let raw_term = g.tape.scale(i_raw, lambda_neg);
    let loss = g.tape.add(neg_proto, raw_term)?;
    Ok(AlignmentNodes { i_proto, i_raw, loss })
}
