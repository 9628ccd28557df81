//! Gradient verification suite over the four loss families.
//!
//! Each family builds a small fixed-seed fixture, computes the analytic
//! gradient on the tape, and compares it against central finite differences
//! at h = 1e-5. The pass threshold is a max relative error of 1e-4.

use crate::align::{alignment_loss, alignment_loss_node, derangement, estimate_js_mi, js_mi_node, make_negative_pairs, MiEstimator};
use crate::diffcore::fdcheck::finite_diff_check;
use crate::diffcore::mlp::{mlp_forward, Net};
use crate::diffcore::param::MlpSpec;
use crate::diffcore::tape::{Graph, NodeId};
use crate::error::Result;
use crate::generator::{decode_frames, decode_frames_node, generation_loss, generation_loss_node, FrameSequence, PerceptualNet, FRAME_PIXELS};
use crate::router::{
    entropy_term, route_cross_entropy, route_cross_entropy_node, routing_weight_nodes, top_s,
    utilization_term, RouterConfig,
};
use crate::seeds::{derive_seed, rng_for};
use rand::Rng;

pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_SEEDS: [u64; 3] = [0, 1, 2];

pub const FAMILIES: [&str; 4] = ["alignment", "js_mi", "router", "generation"];

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub family: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn random_rows(n: usize, dim: usize, seed: u64, label: &str) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, label, 0);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn simplex_rows(n: usize, dim: usize, seed: u64, label: &str) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, label, 0);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|&x| x / s).collect()
        })
        .collect()
}

/// Alignment objective gradient w.r.t. the prototype discriminator.
fn check_alignment(seed: u64) -> Result<f64> {
    let b = 4;
    let k = 4;
    let d = 3;
    let est_proto = MiEstimator::new(k, k, &[8], derive_seed(seed, "gc-ap", 0))?;
    let est_raw = MiEstimator::new(d, d, &[8], derive_seed(seed, "gc-ar", 0))?;
    let q_p = simplex_rows(b, k, seed, "gc-qp");
    let q_v = simplex_rows(b, k, seed + 100, "gc-qv");
    let z_p = random_rows(b, d, seed, "gc-zp");
    let z_v = random_rows(b, d, seed + 100, "gc-zv");
    let neg_seed = derive_seed(seed, "gc-neg", 0);
    let perm = derangement(b, neg_seed)?;

    let mut g = Graph::new();
    let bp = g.add_block(&est_proto.params);
    let br = g.add_block(&est_raw.params);
    let vp: Vec<NodeId> = q_p.iter().map(|v| g.input(v)).collect();
    let vv: Vec<NodeId> = q_v.iter().map(|v| g.input(v)).collect();
    let zp: Vec<NodeId> = z_p.iter().map(|v| g.input(v)).collect();
    let zv: Vec<NodeId> = z_v.iter().map(|v| g.input(v)).collect();
    let nodes = alignment_loss_node(
        &mut g, bp, &est_proto.spec, br, &est_raw.spec, &vp, &vv, &zp, &zv, 0.3, &perm,
    )?;
    let grads = g.backward(nodes.loss)?;

    let err_proto = finite_diff_check(
        |p| {
            let probe = MiEstimator {
                params: p.clone(),
                spec: est_proto.spec.clone(),
            };
            alignment_loss(&q_p, &q_v, &z_p, &z_v, &probe, &est_raw, 0.3, neg_seed)
        },
        &est_proto.params,
        grads[0].as_ref().expect("trainable"),
        GRADCHECK_H,
    )?;
    let err_raw = finite_diff_check(
        |p| {
            let probe = MiEstimator {
                params: p.clone(),
                spec: est_raw.spec.clone(),
            };
            alignment_loss(&q_p, &q_v, &z_p, &z_v, &est_proto, &probe, 0.3, neg_seed)
        },
        &est_raw.params,
        grads[1].as_ref().expect("trainable"),
        GRADCHECK_H,
    )?;
    Ok(err_proto.max(err_raw))
}

/// JS bound gradient w.r.t. the discriminator.
fn check_js_mi(seed: u64) -> Result<f64> {
    let b = 6;
    let d = 3;
    let est = MiEstimator::new(d, d, &[8], derive_seed(seed, "gc-js", 0))?;
    let xs = random_rows(b, d, seed, "gc-xs");
    let ys = random_rows(b, d, seed + 50, "gc-ys");
    let neg_seed = derive_seed(seed, "gc-jsneg", 0);
    let batch = make_negative_pairs(&xs, &ys, neg_seed)?;

    let mut g = Graph::new();
    let block = g.add_block(&est.params);
    let pos: Vec<(NodeId, NodeId)> = batch
        .positives
        .iter()
        .map(|(x, y)| (g.input(x), g.input(y)))
        .collect();
    let neg: Vec<(NodeId, NodeId)> = batch
        .negatives
        .iter()
        .map(|(x, y)| (g.input(x), g.input(y)))
        .collect();
    let mi = js_mi_node(&mut g, block, &est.spec, &pos, &neg)?;
    let grads = g.backward(mi)?;

    finite_diff_check(
        |p| {
            let probe = MiEstimator {
                params: p.clone(),
                spec: est.spec.clone(),
            };
            Ok(estimate_js_mi(&probe, &batch)?.value)
        },
        &est.params,
        grads[0].as_ref().expect("trainable"),
        GRADCHECK_H,
    )
}

/// Differentiable routing-loss parts w.r.t. both gates, with the top-S
/// selection held fixed at the evaluation point.
fn check_router(seed: u64) -> Result<f64> {
    let k = 4;
    let m = 3;
    let b = 4;
    let cfg = RouterConfig::new(m, 2, 0.6, k)?;
    let g_phon = Net::new(MlpSpec::tanh(&[k, 2 * m, m])?, derive_seed(seed, "gc-gp", 0));
    let g_cont = Net::new(MlpSpec::tanh(&[3, 2 * m, m])?, derive_seed(seed, "gc-gc", 0));
    let vs = simplex_rows(b, k, seed, "gc-v");
    let hs = random_rows(b, 3, seed, "gc-h");

    let scores_of = |phon: &Net, cont: &Net| -> Result<Vec<Vec<f64>>> {
        (0..b)
            .map(|t| {
                let p = phon.eval(&vs[t])?;
                let c = cont.eval(&hs[t])?;
                Ok(p.iter()
                    .zip(c.iter())
                    .map(|(&a, &bb)| cfg.beta * a + (1.0 - cfg.beta) * bb)
                    .collect())
            })
            .collect()
    };
    let base = scores_of(&g_phon, &g_cont)?;
    let selected: Vec<Vec<usize>> = base.iter().map(|s| top_s(s, cfg.s)).collect();
    let mut usage = vec![0usize; m];
    for sel in &selected {
        for &e in sel {
            usage[e] += 1;
        }
    }

    let mut g = Graph::new();
    let pb = g.add_block(&g_phon.params);
    let cb = g.add_block(&g_cont.params);
    let mut score_nodes = Vec::with_capacity(b);
    for t in 0..b {
        let vn = g.input(&vs[t]);
        let hn = g.input(&hs[t]);
        let p = mlp_forward(&mut g, pb, &g_phon.spec, vn)?;
        let c = mlp_forward(&mut g, cb, &g_cont.spec, hn)?;
        let ps = g.tape.scale(p, cfg.beta);
        let cs = g.tape.scale(c, 1.0 - cfg.beta);
        score_nodes.push(g.tape.add(ps, cs)?);
    }
    let weights = routing_weight_nodes(&mut g, &score_nodes, &selected)?;
    let ce = route_cross_entropy_node(&mut g, &weights, &selected, &vs, &cfg)?;
    let ent = crate::router::entropy_term_node(&mut g, &weights, &cfg)?;
    let util_node = g.tape.leaf_scalar(utilization_term(&usage, b, &cfg));
    let partial = g.tape.add(ce, ent)?;
    let loss = g.tape.add(partial, util_node)?;
    let grads = g.backward(loss)?;

    let objective = |phon: &Net, cont: &Net| -> Result<f64> {
        let scores = scores_of(phon, cont)?;
        let ce = route_cross_entropy(&scores, &selected, &vs, &cfg)?;
        let weights: Vec<Vec<f64>> = scores
            .iter()
            .zip(selected.iter())
            .map(|(s, sel)| {
                let gathered: Vec<f64> = sel.iter().map(|&i| s[i]).collect();
                crate::diffcore::tape::softmax_stable(&gathered)
            })
            .collect();
        Ok(ce + utilization_term(&usage, b, &cfg) + entropy_term(&weights, &cfg)?)
    };

    let err_phon = finite_diff_check(
        |p| {
            objective(
                &Net {
                    params: p.clone(),
                    spec: g_phon.spec.clone(),
                },
                &g_cont,
            )
        },
        &g_phon.params,
        grads[0].as_ref().expect("trainable"),
        GRADCHECK_H,
    )?;
    let err_cont = finite_diff_check(
        |p| {
            objective(
                &g_phon,
                &Net {
                    params: p.clone(),
                    spec: g_cont.spec.clone(),
                },
            )
        },
        &g_cont.params,
        grads[1].as_ref().expect("trainable"),
        GRADCHECK_H,
    )?;
    Ok(err_phon.max(err_cont))
}

/// Generation loss gradient w.r.t. the decoder.
fn check_generation(seed: u64) -> Result<f64> {
    let t = 3;
    let decoder = Net::new(
        MlpSpec::tanh(&[4, 6, FRAME_PIXELS])?,
        derive_seed(seed, "gc-dec", 0),
    );
    let phi = PerceptualNet::random(derive_seed(seed, "gc-phi", 0));
    let mut rng = rng_for(seed, "gc-real", 0);
    let real = FrameSequence::new(
        (0..t * FRAME_PIXELS).map(|_| rng.gen_range(0.0..1.0)).collect(),
        t,
    )?;
    let inputs = random_rows(t, 4, seed, "gc-in");

    let pure = |d: &Net| -> Result<f64> {
        let gen = decode_frames(&inputs, d)?;
        Ok(generation_loss(&gen, &real, &phi, 1.0, 0.1, 0.5)?.total)
    };

    let mut g = Graph::new();
    let dec_block = g.add_block(&decoder.params);
    let phi_block = g.add_frozen_block(&phi.net().params);
    let in_nodes: Vec<NodeId> = inputs.iter().map(|x| g.input(x)).collect();
    let frames = decode_frames_node(&mut g, dec_block, &decoder.spec, &in_nodes)?;
    let loss = generation_loss_node(&mut g, &frames, &real, &phi, phi_block, 1.0, 0.1, 0.5)?;
    let grads = g.backward(loss)?;

    finite_diff_check(
        |p| {
            pure(&Net {
                params: p.clone(),
                spec: decoder.spec.clone(),
            })
        },
        &decoder.params,
        grads[0].as_ref().expect("trainable"),
        GRADCHECK_H,
    )
}

/// Run every family at every fixed seed. `inject_fault` corrupts the named
/// family's measured error so failure reporting can be exercised.
pub fn run_gradcheck(inject_fault: Option<&str>) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::with_capacity(FAMILIES.len() * GRADCHECK_SEEDS.len());
    for family in FAMILIES {
        for seed in GRADCHECK_SEEDS {
            let mut err = match family {
                "alignment" => check_alignment(seed)?,
                "js_mi" => check_js_mi(seed)?,
                "router" => check_router(seed)?,
                "generation" => check_generation(seed)?,
                _ => unreachable!("family list is fixed"),
            };
            if inject_fault == Some(family) {
                err += 1.0;
            }
            rows.push(GradCheckRow {
                family: family.to_string(),
                seed,
                max_rel_err: err,
                pass: err < GRADCHECK_TOL,
            });
        }
    }
    Ok(rows)
}

pub fn render_gradcheck_table(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("family      seed   max_rel_err   status\n");
    for r in rows {
        out.push_str(&format!(
            "{:<11} {:>4}   {:>11.3e}   {}\n",
            r.family,
            r.seed,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    out
}
