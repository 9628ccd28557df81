//! Pseudo-phoneme guided sparse mixture-of-experts routing.
//!
//! Expert scores blend a phoneme gate (fed the soft prototype assignment)
//! with a content gate; the top-S experts are selected and their outputs
//! aggregated with softmax-normalized weights. The routing loss combines a
//! masked cross-entropy toward the pseudo-phoneme labels with a quadratic
//! usage-balance penalty and an entropy term over the selected weights.

use std::io::Write as IoWrite;

use crate::diffcore::mlp::Net;
use crate::diffcore::tape::{softmax_stable, Graph, NodeId};
use crate::error::{Error, Result};
use crate::prototypes::{soft_assign, Modality, PrototypeBank};

#[derive(Debug, Clone)]
pub struct RouterConfig {
    /// Expert count M.
    pub m: usize,
    /// Top-S selection size.
    pub s: usize,
    /// Blend between phoneme gate (beta) and content gate (1 - beta).
    pub beta: f64,
    pub lambda_util: f64,
    pub lambda_ent: f64,
    /// Surjective map from pseudo-phoneme class k to target expert.
    pub phoneme_to_expert: Vec<usize>,
    /// Entropy term sign as printed (sharpening) or flipped (spreading).
    pub flip_entropy_sign: bool,
}

impl RouterConfig {
    pub fn new(m: usize, s: usize, beta: f64, k: usize) -> Result<Self> {
        let cfg = RouterConfig {
            m,
            s,
            beta,
            lambda_util: 0.01,
            lambda_ent: 0.001,
            phoneme_to_expert: (0..k).map(|i| i % m).collect(),
            flip_entropy_sign: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.s > self.m {
            return Err(Error::invalid(format!(
                "router needs 1 <= S <= M, got S={}, M={}",
                self.s, self.m
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must lie in [0, 1]"));
        }
        if self.lambda_util < 0.0 || self.lambda_ent < 0.0 {
            return Err(Error::invalid("router loss weights must be >= 0"));
        }
        if self.phoneme_to_expert.iter().any(|&e| e >= self.m) {
            return Err(Error::invalid("phoneme_to_expert target out of range"));
        }
        for e in 0..self.m {
            if !self.phoneme_to_expert.contains(&e) {
                return Err(Error::invalid(format!(
                    "phoneme_to_expert must be surjective; expert {e} unreachable"
                )));
            }
        }
        Ok(())
    }
}

/// Per-timestep routing result: full score vector, the selected expert ids
/// in descending-score order, and softmax weights over the selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Routing outcomes for a batch of timesteps plus aggregated usage counts
/// (`usage[i]` = how many timesteps selected expert i; sums to B * S).
#[derive(Debug, Clone)]
pub struct BatchRouting {
    pub outcomes: Vec<RoutingOutcome>,
    pub usage: Vec<usize>,
}

impl BatchRouting {
    pub fn from_outcomes(outcomes: Vec<RoutingOutcome>, m: usize) -> Self {
        let mut usage = vec![0usize; m];
        for o in &outcomes {
            for &e in &o.selected {
                usage[e] += 1;
            }
        }
        BatchRouting { outcomes, usage }
    }
}

/// Indices of the S largest scores, descending by score with ties broken to
/// the lowest index.
pub fn top_s(scores: &[f64], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(s);
    idx
}

/// The pseudo-phoneme labeler: soft assignment of a speech feature against
/// the phoneme bank. Identical to `prototypes::soft_assign`.
pub fn pseudo_phoneme_label(z_p: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if bank.modality != Modality::Phoneme {
        return Err(Error::invalid("pseudo_phoneme_label needs a phoneme bank"));
    }
    soft_assign(z_p, bank, bank.tau)
}

/// Blend the gates, select the top-S experts, and weight them.
pub fn route(
    h: &[f64],
    v: &[f64],
    cfg: &RouterConfig,
    g_phon: &Net,
    g_cont: &Net,
) -> Result<RoutingOutcome> {
    if g_phon.output_width() != cfg.m || g_cont.output_width() != cfg.m {
        return Err(Error::dim("gate output", cfg.m, g_phon.output_width().min(g_cont.output_width())));
    }
    let phon = g_phon.eval(v)?;
    let cont = g_cont.eval(h)?;
    let scores: Vec<f64> = phon
        .iter()
        .zip(cont.iter())
        .map(|(&p, &c)| cfg.beta * p + (1.0 - cfg.beta) * c)
        .collect();
    Ok(outcome_from_scores(scores, cfg.s))
}

pub fn outcome_from_scores(scores: Vec<f64>, s: usize) -> RoutingOutcome {
    let selected = top_s(&scores, s);
    let gathered: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
    let weights = softmax_stable(&gathered);
    RoutingOutcome { scores, selected, weights }
}

/// Anything that can evaluate one expert out of M on demand. The indirection
/// exists so tests can instrument exactly which experts get called.
pub trait ExpertSet {
    fn expert_count(&self) -> usize;
    fn eval_expert(&self, index: usize, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct MlpExperts {
    pub nets: Vec<Net>,
}

impl MlpExperts {
    pub fn new(nets: Vec<Net>) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::invalid("expert set must be non-empty"));
        }
        let (iw, ow) = (nets[0].input_width(), nets[0].output_width());
        for n in &nets[1..] {
            if n.input_width() != iw || n.output_width() != ow {
                return Err(Error::invalid("experts must share input/output widths"));
            }
        }
        Ok(MlpExperts { nets })
    }
}

impl ExpertSet for MlpExperts {
    fn expert_count(&self) -> usize {
        self.nets.len()
    }

    fn eval_expert(&self, index: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.nets[index].eval(x)
    }
}

/// Weighted sum of the selected experts only; experts outside the selection
/// are never evaluated.
pub fn moe_forward<E: ExpertSet>(
    h: &[f64],
    outcome: &RoutingOutcome,
    experts: &E,
) -> Result<Vec<f64>> {
    let mut out: Option<Vec<f64>> = None;
    for (j, &i) in outcome.selected.iter().enumerate() {
        if i >= experts.expert_count() {
            return Err(Error::dim("expert index", experts.expert_count(), i));
        }
        let y = experts.eval_expert(i, h)?;
        match &mut out {
            None => {
                out = Some(y.iter().map(|&v| outcome.weights[j] * v).collect());
            }
            Some(acc) => {
                if acc.len() != y.len() {
                    return Err(Error::dim("expert output", acc.len(), y.len()));
                }
                for (a, &v) in acc.iter_mut().zip(y.iter()) {
                    *a += outcome.weights[j] * v;
                }
            }
        }
    }
    out.ok_or_else(|| Error::invalid("routing outcome selected no experts"))
}

/// Push pseudo-phoneme label mass through the class-to-expert map, restrict
/// to the selected experts, and renormalize. A selection with no label mass
/// falls back to uniform.
pub fn masked_target(label: &[f64], selected: &[usize], cfg: &RouterConfig) -> Vec<f64> {
    let mut per_expert = vec![0.0; cfg.m];
    for (k, &mass) in label.iter().enumerate() {
        per_expert[cfg.phoneme_to_expert[k]] += mass;
    }
    let gathered: Vec<f64> = selected.iter().map(|&i| per_expert[i]).collect();
    let total: f64 = gathered.iter().sum();
    if total <= 1e-12 {
        vec![1.0 / selected.len() as f64; selected.len()]
    } else {
        gathered.iter().map(|&u| u / total).collect()
    }
}

/// Cross-entropy between the softmax over selected scores and the masked
/// pseudo-phoneme target, averaged over the batch.
pub fn route_cross_entropy(
    scores: &[Vec<f64>],
    selected: &[Vec<usize>],
    labels: &[Vec<f64>],
    cfg: &RouterConfig,
) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("route_cross_entropy: empty batch"));
    }
    if scores.len() != labels.len() || scores.len() != selected.len() {
        return Err(Error::dim("route batch", scores.len(), labels.len()));
    }
    let mut acc = 0.0;
    for t in 0..scores.len() {
        let gathered: Vec<f64> = selected[t].iter().map(|&i| scores[t][i]).collect();
        let w = softmax_stable(&gathered);
        let target = masked_target(&labels[t], &selected[t], cfg);
        let mut ce = 0.0;
        for j in 0..w.len() {
            ce -= target[j] * w[j].ln();
        }
        acc += ce;
    }
    Ok(acc / scores.len() as f64)
}

/// `lambda_util * (M / B) * sum_i (n_i / B)^2`; minimized by balanced usage.
pub fn utilization_term(usage: &[usize], batch_size: usize, cfg: &RouterConfig) -> f64 {
    let b = batch_size as f64;
    let sum: f64 = usage
        .iter()
        .map(|&n| {
            let f = n as f64 / b;
            f * f
        })
        .sum();
    cfg.lambda_util * (cfg.m as f64 / b) * sum
}

/// `-lambda_ent * mean_t sum_{i in Q} w_i ln w_i` (sign flipped when the
/// config asks for the spreading reading).
pub fn entropy_term(weights: &[Vec<f64>], cfg: &RouterConfig) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("entropy_term: empty batch"));
    }
    let mut acc = 0.0;
    for w in weights {
        let mut s = 0.0;
        for &wi in w {
            s += wi * wi.ln();
        }
        acc += s;
    }
    let mean = acc / weights.len() as f64;
    let sign = if cfg.flip_entropy_sign { 1.0 } else { -1.0 };
    Ok(sign * cfg.lambda_ent * mean)
}

/// Full routing loss over a batch. The utilization term depends only on the
/// discrete usage counts and carries no gradient; the other two terms are
/// differentiable in the scores.
pub fn router_loss(
    batch: &BatchRouting,
    labels: &[Vec<f64>],
    cfg: &RouterConfig,
) -> Result<f64> {
    if batch.outcomes.is_empty() {
        return Err(Error::invalid("router_loss: empty batch"));
    }
    let scores: Vec<Vec<f64>> = batch.outcomes.iter().map(|o| o.scores.clone()).collect();
    let selected: Vec<Vec<usize>> = batch.outcomes.iter().map(|o| o.selected.clone()).collect();
    let weights: Vec<Vec<f64>> = batch.outcomes.iter().map(|o| o.weights.clone()).collect();
    let ce = route_cross_entropy(&scores, &selected, labels, cfg)?;
    let util = utilization_term(&batch.usage, batch.outcomes.len(), cfg);
    let ent = entropy_term(&weights, cfg)?;
    Ok(ce + util + ent)
}

/// Softmax weights over each timestep's selected scores, recorded so both
/// the routing loss and the expert aggregation share the same nodes.
pub fn routing_weight_nodes(
    g: &mut Graph,
    score_nodes: &[NodeId],
    selected: &[Vec<usize>],
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(score_nodes.len());
    for (t, &s) in score_nodes.iter().enumerate() {
        let gathered = g.tape.gather(s, &selected[t])?;
        out.push(g.tape.softmax(gathered));
    }
    Ok(out)
}

/// Cross-entropy term over recorded weight nodes; targets are constants.
pub fn route_cross_entropy_node(
    g: &mut Graph,
    weight_nodes: &[NodeId],
    selected: &[Vec<usize>],
    labels: &[Vec<f64>],
    cfg: &RouterConfig,
) -> Result<NodeId> {
    if weight_nodes.is_empty() {
        return Err(Error::invalid("route_cross_entropy_node: empty batch"));
    }
    let mut terms = Vec::with_capacity(weight_nodes.len());
    for t in 0..weight_nodes.len() {
        let target = masked_target(&labels[t], &selected[t], cfg);
        let target_node = g.input(&target);
        let lnw = g.tape.ln(weight_nodes[t]);
        let prod = g.tape.mul(target_node, lnw)?;
        let s = g.tape.sum(prod);
        terms.push(g.tape.scale(s, -1.0));
    }
    let stack = g.tape.concat(&terms);
    Ok(g.tape.mean(stack))
}

/// Entropy term over recorded weight nodes.
pub fn entropy_term_node(g: &mut Graph, weight_nodes: &[NodeId], cfg: &RouterConfig) -> Result<NodeId> {
    if weight_nodes.is_empty() {
        return Err(Error::invalid("entropy_term_node: empty batch"));
    }
    let mut terms = Vec::with_capacity(weight_nodes.len());
    for &w in weight_nodes {
        let lnw = g.tape.ln(w);
        let went = g.tape.mul(w, lnw)?;
        terms.push(g.tape.sum(went));
    }
    let stack = g.tape.concat(&terms);
    let mean = g.tape.mean(stack);
    let sign = if cfg.flip_entropy_sign { 1.0 } else { -1.0 };
    Ok(g.tape.scale(mean, sign * cfg.lambda_ent))
}

/// Recorded routing loss. `score_nodes[t]` is the length-M blended score
/// vector on the tape; `selected` is the fixed discrete mask from the
/// forward pass; the utilization term enters as a constant leaf.
pub fn router_loss_node(
    g: &mut Graph,
    score_nodes: &[NodeId],
    selected: &[Vec<usize>],
    usage: &[usize],
    labels: &[Vec<f64>],
    cfg: &RouterConfig,
) -> Result<NodeId> {
    if score_nodes.is_empty() || score_nodes.len() != selected.len() || labels.len() != selected.len() {
        return Err(Error::invalid("router_loss_node: inconsistent batch"));
    }
    let weights = routing_weight_nodes(g, score_nodes, selected)?;
    let ce = route_cross_entropy_node(g, &weights, selected, labels, cfg)?;
    let ent = entropy_term_node(g, &weights, cfg)?;

    let util = utilization_term(usage, score_nodes.len(), cfg);
    let util_node = g.tape.leaf_scalar(util);

    let partial = g.tape.add(ce, ent)?;
    g.tape.add(partial, util_node)
}

/// Per-timestep routing trace: timestep, argmax pseudo-phoneme label,
/// selected experts, and weights.
pub fn write_routing_trace<W: IoWrite>(
    out: &mut W,
    labels: &[Vec<f64>],
    outcomes: &[RoutingOutcome],
) -> Result<()> {
    writeln!(out, "t,phoneme_label,experts,weights")?;
    for (t, (label, o)) in labels.iter().zip(outcomes.iter()).enumerate() {
        let argmax = label
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite label"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let experts: Vec<String> = o.selected.iter().map(|e| e.to_string()).collect();
        let weights: Vec<String> = o.weights.iter().map(|w| format!("{w:.6}")).collect();
        writeln!(out, "{t},{argmax},{},{}", experts.join("|"), weights.join("|"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::param::{MlpSpec, ParameterBlock};
    use crate::seeds::rng_for;
    use proptest::prelude::*;
    use rand::Rng;
    use std::cell::RefCell;

    fn tiny_cfg(m: usize, s: usize, beta: f64, k: usize) -> RouterConfig {
        RouterConfig::new(m, s, beta, k).unwrap()
    }

    fn linear_net(rows: usize, cols: usize, w: &[f64]) -> Net {
        let spec = MlpSpec::tanh(&[cols, rows]).unwrap();
        let mut params = ParameterBlock::zeros(spec.param_shapes());
        params.view_mut(0).copy_from_slice(w);
        Net { params, spec }
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::new(4, 5, 0.5, 8).is_err());
        assert!(RouterConfig::new(4, 0, 0.5, 8).is_err());
        assert!(RouterConfig::new(4, 2, 1.5, 8).is_err());
        assert!(RouterConfig::new(4, 2, 0.5, 8).is_ok());
        // non-surjective map
        let mut cfg = tiny_cfg(3, 1, 0.5, 6);
        cfg.phoneme_to_expert = vec![0; 6];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pseudo_label_matches_soft_assign_bitwise() {
        let bank = PrototypeBank {
            centroids: vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, -2.0, 1.0],
            k: 4,
            dim: 2,
            modality: Modality::Phoneme,
            tau: 0.9,
            last_refit_epoch: 0,
        };
        let mut rng = rng_for(0, "plabel", 0);
        for _ in 0..1000 {
            let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let a = pseudo_phoneme_label(&z, &bank).unwrap();
            let b = soft_assign(&z, &bank, bank.tau).unwrap();
            assert_eq!(a, b);
        }
        let viseme_bank = PrototypeBank {
            modality: Modality::Viseme,
            ..bank
        };
        assert!(pseudo_phoneme_label(&[0.0, 0.0], &viseme_bank).is_err());
    }

    #[test]
    fn beta_extremes_ignore_the_other_gate() {
        let k = 3;
        let g_phon = linear_net(2, k, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
        let g_cont = linear_net(2, 2, &[4.0, 0.0, 0.0, 4.0]);
        let v = vec![0.2, 0.3, 0.5];

        let cfg1 = tiny_cfg(2, 1, 1.0, k);
        let a = route(&[0.0, 0.0], &v, &cfg1, &g_phon, &g_cont).unwrap();
        let b = route(&[9.0, -9.0], &v, &cfg1, &g_phon, &g_cont).unwrap();
        assert_eq!(a.scores, b.scores);

        let cfg0 = tiny_cfg(2, 1, 0.0, k);
        let h = vec![0.7, -0.1];
        let a = route(&h, &v, &cfg0, &g_phon, &g_cont).unwrap();
        let b = route(&h, &[1.0, 0.0, 0.0], &cfg0, &g_phon, &g_cont).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn s_equals_m_selects_everyone() {
        let out = outcome_from_scores(vec![0.1, 0.9, 0.5], 3);
        let mut sel = out.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2]);
        let full = softmax_stable(&out.scores);
        for (j, &i) in out.selected.iter().enumerate() {
            assert!((out.weights[j] - full[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn top_s_breaks_ties_to_lowest_index() {
        assert_eq!(top_s(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_s(&[3.0, 3.0, 3.0], 1), vec![0]);
    }

    struct CountingExperts {
        inner: MlpExperts,
        calls: RefCell<Vec<usize>>,
    }

    impl ExpertSet for CountingExperts {
        fn expert_count(&self) -> usize {
            self.inner.expert_count()
        }
        fn eval_expert(&self, index: usize, x: &[f64]) -> Result<Vec<f64>> {
            self.calls.borrow_mut()[index] += 1;
            self.inner.eval_expert(index, x)
        }
    }

    #[test]
    fn unselected_experts_are_never_evaluated() {
        let nets: Vec<Net> = (0..4)
            .map(|i| Net::new(MlpSpec::tanh(&[2, 3]).unwrap(), i as u64))
            .collect();
        let experts = CountingExperts {
            inner: MlpExperts::new(nets).unwrap(),
            calls: RefCell::new(vec![0; 4]),
        };
        let outcome = outcome_from_scores(vec![0.0, 5.0, -1.0, 4.0], 2);
        moe_forward(&[0.5, -0.5], &outcome, &experts).unwrap();
        let calls = experts.calls.borrow();
        assert_eq!(*calls, vec![0, 1, 0, 1]);
    }

    #[test]
    fn s1_returns_argmax_expert_exactly() {
        let nets: Vec<Net> = (0..3)
            .map(|i| Net::new(MlpSpec::tanh(&[2, 2]).unwrap(), 100 + i as u64))
            .collect();
        let experts = MlpExperts::new(nets).unwrap();
        let outcome = outcome_from_scores(vec![0.1, 0.7, 0.3], 1);
        let h = [0.4, -1.2];
        let got = moe_forward(&h, &outcome, &experts).unwrap();
        let want = experts.nets[1].eval(&h).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let net = Net::new(MlpSpec::tanh(&[2, 3]).unwrap(), 7);
        let experts = MlpExperts::new(vec![net.clone(), net.clone(), net.clone()]).unwrap();
        let h = [1.0, 2.0];
        let single = net.eval(&h).unwrap();
        for scores in [vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.3, 0.3, 0.3]] {
            let outcome = outcome_from_scores(scores, 2);
            let out = moe_forward(&h, &outcome, &experts).unwrap();
            for (a, b) in out.iter().zip(single.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_sum_matches_hand_evaluation() {
        // two fixed single-layer experts evaluated by hand at h = [1, 2]:
        //   expert a: w = [[1, 0], [0, 1]]  -> a(h) = [1, 2]
        //   expert b: w = [[2, 1], [1, 0]]  -> b(h) = [4, 1]
        let a = linear_net(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = linear_net(2, 2, &[2.0, 1.0, 1.0, 0.0]);
        let experts = MlpExperts::new(vec![a, b]).unwrap();
        let outcome = RoutingOutcome {
            scores: vec![1.0, 0.0],
            selected: vec![0, 1],
            weights: vec![0.7, 0.3],
        };
        let got = moe_forward(&[1.0, 2.0], &outcome, &experts).unwrap();
        let want = [0.7 * 1.0 + 0.3 * 4.0, 0.7 * 2.0 + 0.3 * 1.0];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    fn balanced_batch(m: usize, s: usize, b: usize) -> BatchRouting {
        // rotate the selection so every expert is chosen b*s/m times
        let mut outcomes = Vec::with_capacity(b);
        for t in 0..b {
            let mut scores = vec![0.0; m];
            let mut selected = Vec::with_capacity(s);
            for j in 0..s {
                let e = (t * s + j) % m;
                scores[e] = 10.0 - j as f64;
                selected.push(e);
            }
            let gathered: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
            let weights = softmax_stable(&gathered);
            outcomes.push(RoutingOutcome { scores, selected, weights });
        }
        BatchRouting::from_outcomes(outcomes, m)
    }

    #[test]
    fn balanced_utilization_matches_analytic_value() {
        let cfg = tiny_cfg(4, 2, 0.5, 8);
        let b = 6;
        let batch = balanced_batch(4, 2, b);
        assert_eq!(batch.usage, vec![3, 3, 3, 3]);
        let got = utilization_term(&batch.usage, b, &cfg);
        // (M/B) * M * (S/M)^2 = S^2 / B
        let want = cfg.lambda_util * (cfg.s * cfg.s) as f64 / b as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn collapsed_usage_costs_more_than_balanced() {
        let cfg = tiny_cfg(4, 1, 0.5, 8);
        let b = 8;
        let collapsed = vec![b, 0, 0, 0];
        let got = utilization_term(&collapsed, b, &cfg);
        let want = cfg.lambda_util * cfg.m as f64 / b as f64;
        assert!((got - want).abs() < 1e-12);
        let balanced = vec![2usize; 4];
        assert!(got > utilization_term(&balanced, b, &cfg));
    }

    #[test]
    fn entropy_term_for_even_split() {
        let cfg = tiny_cfg(4, 2, 0.5, 8);
        let weights = vec![vec![0.5, 0.5]];
        let got = entropy_term(&weights, &cfg).unwrap();
        let want = cfg.lambda_ent * 2.0f64.ln(); // -lambda * (2 * 0.5 ln 0.5)
        assert!((got - want).abs() < 1e-12);

        let flipped = RouterConfig {
            flip_entropy_sign: true,
            ..cfg
        };
        let got = entropy_term(&weights, &flipped).unwrap();
        assert!((got + want).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cfg = tiny_cfg(2, 1, 0.5, 4);
        let batch = BatchRouting {
            outcomes: vec![],
            usage: vec![0, 0],
        };
        assert!(router_loss(&batch, &[], &cfg).is_err());
    }

    #[test]
    fn tape_loss_matches_pure_loss() {
        let cfg = tiny_cfg(4, 2, 0.5, 6);
        let mut rng = rng_for(3, "rl", 0);
        let b = 5;
        let mut outcomes = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..b {
            let scores: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            outcomes.push(outcome_from_scores(scores, 2));
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            labels.push(raw.iter().map(|&x| x / sum).collect());
        }
        let batch = BatchRouting::from_outcomes(outcomes, 4);
        let pure = router_loss(&batch, &labels, &cfg).unwrap();

        let mut g = Graph::new();
        let score_nodes: Vec<NodeId> = batch.outcomes.iter().map(|o| g.input(&o.scores)).collect();
        let selected: Vec<Vec<usize>> = batch.outcomes.iter().map(|o| o.selected.clone()).collect();
        let node =
            router_loss_node(&mut g, &score_nodes, &selected, &batch.usage, &labels, &cfg).unwrap();
        assert!((g.tape.scalar(node) - pure).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn top_s_matches_brute_force(
            scores in proptest::collection::vec(-10.0f64..10.0, 1..12),
            s_raw in 1usize..12,
        ) {
            let s = s_raw.min(scores.len());
            let got = top_s(&scores, s);
            // brute force: repeatedly take the max of the remainder
            let mut remaining: Vec<usize> = (0..scores.len()).collect();
            let mut want = Vec::new();
            for _ in 0..s {
                let (pos, &best) = remaining
                    .iter()
                    .enumerate()
                    .max_by(|(_, &a), (_, &b)| {
                        scores[a].partial_cmp(&scores[b]).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                want.push(best);
                remaining.remove(pos);
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn blend_swap_symmetry(beta in 0.0f64..1.0) {
            // with dim(h) == K the two gates can be swapped along with beta
            let k = 3;
            let g_phon = linear_net(2, k, &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
            let g_cont = linear_net(2, k, &[1.0, 1.0, -2.0, 0.0, 0.75, 0.25]);
            let v = vec![0.2, 0.5, 0.3];
            let h = vec![-0.4, 0.9, 0.1];
            let cfg_a = tiny_cfg(2, 1, beta, k);
            let cfg_b = tiny_cfg(2, 1, 1.0 - beta, k);
            let a = route(&h, &v, &cfg_a, &g_phon, &g_cont).unwrap();
            let b = route(&v, &h, &cfg_b, &g_cont, &g_phon).unwrap();
            for (x, y) in a.scores.iter().zip(b.scores.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_sum_to_one(
            scores in proptest::collection::vec(-5.0f64..5.0, 4..8),
            s in 1usize..4,
        ) {
            let out = outcome_from_scores(scores, s);
            let sum: f64 = out.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn differentiable_parts_pass_finite_differences() {
        use crate::diffcore::fdcheck::finite_diff_check;
        use crate::diffcore::mlp::mlp_forward;

        // scores come from gates on the tape; selection fixed at the
        // unperturbed argmax set
        let k = 4;
        let m = 3;
        let cfg = tiny_cfg(m, 2, 0.6, k);
        let g_phon = Net::new(MlpSpec::tanh(&[k, 2 * m, m]).unwrap(), 31);
        let g_cont = Net::new(MlpSpec::tanh(&[3, 2 * m, m]).unwrap(), 32);
        let mut rng = rng_for(8, "fd", 0);
        let b = 4;
        let vs: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|&x| x / s).collect()
            })
            .collect();
        let hs: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let pure_scores = |phon: &Net, cont: &Net| -> Vec<Vec<f64>> {
            (0..b)
                .map(|t| {
                    let p = phon.eval(&vs[t]).unwrap();
                    let c = cont.eval(&hs[t]).unwrap();
                    p.iter()
                        .zip(c.iter())
                        .map(|(&a, &bb)| cfg.beta * a + (1.0 - cfg.beta) * bb)
                        .collect()
                })
                .collect()
        };
        let base_scores = pure_scores(&g_phon, &g_cont);
        let selected: Vec<Vec<usize>> = base_scores.iter().map(|s| top_s(s, cfg.s)).collect();
        let usage = {
            let outcomes: Vec<RoutingOutcome> = base_scores
                .iter()
                .map(|s| outcome_from_scores(s.clone(), cfg.s))
                .collect();
            BatchRouting::from_outcomes(outcomes, m).usage
        };

        // analytic gradient w.r.t. g_phon parameters
        let mut g = Graph::new();
        let phon_block = g.add_block(&g_phon.params);
        let cont_block = g.add_block(&g_cont.params);
        let mut score_nodes = Vec::new();
        for t in 0..b {
            let vn = g.input(&vs[t]);
            let hn = g.input(&hs[t]);
            let p = mlp_forward(&mut g, phon_block, &g_phon.spec, vn).unwrap();
            let c = mlp_forward(&mut g, cont_block, &g_cont.spec, hn).unwrap();
            let ps = g.tape.scale(p, cfg.beta);
            let cs = g.tape.scale(c, 1.0 - cfg.beta);
            score_nodes.push(g.tape.add(ps, cs).unwrap());
        }
        let loss = router_loss_node(&mut g, &score_nodes, &selected, &usage, &vs, &cfg).unwrap();
        let grads = g.backward(loss).unwrap();

        // pure objective with the same fixed selection, perturbed gates
        let objective = |phon: &Net, cont: &Net| -> f64 {
            let scores = pure_scores(phon, cont);
            let ce = route_cross_entropy(&scores, &selected, &vs, &cfg).unwrap();
            let weights: Vec<Vec<f64>> = scores
                .iter()
                .zip(selected.iter())
                .map(|(s, sel)| {
                    let gathered: Vec<f64> = sel.iter().map(|&i| s[i]).collect();
                    softmax_stable(&gathered)
                })
                .collect();
            ce + utilization_term(&usage, b, &cfg) + entropy_term(&weights, &cfg).unwrap()
        };

        let err = finite_diff_check(
            |p| {
                let probe = Net {
                    params: p.clone(),
                    spec: g_phon.spec.clone(),
                };
                Ok(objective(&probe, &g_cont))
            },
            &g_phon.params,
            grads[0].as_ref().unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "g_phon max rel error {err}");

        let err = finite_diff_check(
            |p| {
                let probe = Net {
                    params: p.clone(),
                    spec: g_cont.spec.clone(),
                };
                Ok(objective(&g_phon, &probe))
            },
            &g_cont.params,
            grads[1].as_ref().unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "g_cont max rel error {err}");
    }

    #[test]
    fn trace_export_has_expected_rows() {
        let labels = vec![vec![0.1, 0.8, 0.1], vec![0.7, 0.2, 0.1]];
        let outcomes = vec![
            outcome_from_scores(vec![0.0, 1.0], 1),
            outcome_from_scores(vec![1.0, 0.0], 1),
        ];
        let mut buf = Vec::new();
        write_routing_trace(&mut buf, &labels, &outcomes).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t,phoneme_label,experts,weights");
        assert!(lines[1].starts_with("0,1,1,"));
        assert!(lines[2].starts_with("1,0,0,"));
    }
}
