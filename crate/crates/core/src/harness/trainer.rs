//! The training loop: feature intake, prototype assignment and alignment,
//! pseudo-phoneme labeling and routing, frame decoding, and the joint
//! update, with periodic prototype refits and end-of-run evaluation.
//!
//! Two small trainable feature adapters (speech and visual) sit between the
//! corpus features and the prototype banks; they are what the alignment
//! objective actually shapes, so ablating it has a measurable effect on
//! correspondence recovery.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::align::{alignment_loss_node, derangement, MiEstimator};
use crate::diffcore::adam::{adam_step, AdamConfig, AdamState};
use crate::diffcore::mlp::{mlp_forward, Net};
use crate::diffcore::param::MlpSpec;
use crate::diffcore::tape::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::generator::{decode_frames_node, generation_loss_node, FrameSequence, PerceptualNet, FRAME_PIXELS};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{
    correspondence_accuracy, correspondence_maps, normalized_mutual_information, CodeTriple,
    CorrespondenceMaps,
};
use crate::harness::report::{
    AlignmentSummary, EpochRecord, MetricSummary, RoutingSummary, RunReport, Timing,
};
use crate::metrics::{lse_d, tmdc, Role};
use crate::prototypes::{
    hard_assign, kmeanspp_init, refit, soft_assign, soft_assign_node, Modality, PrototypeBank,
};
use crate::router::{
    entropy_term_node, outcome_from_scores, route_cross_entropy_node, routing_weight_nodes,
    utilization_term, RouterConfig, RoutingOutcome,
};
use crate::seeds::{derive_seed, rng_for};
use crate::synthcorpus::{
    render_landmark_series, split_seen_unseen, viseme_mouth_series, Corpus, Language,
};

/// Cap on encoded features fed to each bank fit; sampling is a fixed stride
/// so refits stay deterministic.
const BANK_FIT_CAP: usize = 8192;
/// Fraction of each seen language's utterances used for training; the rest
/// are held out for evaluation.
const TRAIN_FRACTION: f64 = 0.8;

/// Every trainable (and frozen) network in the pipeline.
#[derive(Debug, Clone)]
pub struct ModelNets {
    pub enc_p: Net,
    pub enc_v: Net,
    pub disc_proto: MiEstimator,
    pub disc_raw: MiEstimator,
    pub g_phon: Net,
    pub g_cont: Net,
    pub experts: Vec<Net>,
    pub decoder: Net,
    pub phi: PerceptualNet,
}

impl ModelNets {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = |label: &str, i: u64| derive_seed(cfg.seed, label, i);
        let enc_p = Net::new(
            MlpSpec::tanh(&[cfg.d_p, cfg.enc_hidden, cfg.embed_dim])?,
            seed("enc_p", 0),
        );
        let enc_v = Net::new(
            MlpSpec::tanh(&[cfg.d_v, cfg.enc_hidden, cfg.embed_dim])?,
            seed("enc_v", 0),
        );
        let disc_proto = MiEstimator::new(cfg.k, cfg.k, &[cfg.disc_hidden], seed("disc_proto", 0))?;
        let disc_raw = MiEstimator::new(
            cfg.embed_dim,
            cfg.embed_dim,
            &[cfg.disc_hidden],
            seed("disc_raw", 0),
        )?;
        let g_phon = Net::new(
            MlpSpec::tanh(&[cfg.k, 2 * cfg.m, cfg.m])?,
            seed("g_phon", 0),
        );
        let g_cont = Net::new(
            MlpSpec::tanh(&[cfg.embed_dim, 2 * cfg.m, cfg.m])?,
            seed("g_cont", 0),
        );
        let experts: Vec<Net> = (0..cfg.m)
            .map(|i| {
                Ok(Net::new(
                    MlpSpec::tanh(&[cfg.embed_dim, cfg.expert_hidden, cfg.expert_out])?,
                    seed("expert", i as u64),
                ))
            })
            .collect::<Result<_>>()?;
        let decoder = Net::new(
            MlpSpec::tanh(&[cfg.expert_out, cfg.decoder_hidden, FRAME_PIXELS])?,
            seed("decoder", 0),
        );
        let phi = PerceptualNet::random(seed("phi", 0));
        Ok(ModelNets {
            enc_p,
            enc_v,
            disc_proto,
            disc_raw,
            g_phon,
            g_cont,
            experts,
            decoder,
            phi,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.enc_p.params.total_len()
            + self.enc_v.params.total_len()
            + self.disc_proto.params.total_len()
            + self.disc_raw.params.total_len()
            + self.g_phon.params.total_len()
            + self.g_cont.params.total_len()
            + self.experts.iter().map(|e| e.params.total_len()).sum::<usize>()
            + self.decoder.params.total_len()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub nets: ModelNets,
    pub phoneme_bank: PrototypeBank,
    pub viseme_bank: PrototypeBank,
    pub router_cfg: RouterConfig,
}

impl TrainedModel {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.nets.enc_p.params.save(&dir.join("enc_p"))?;
        self.nets.enc_v.params.save(&dir.join("enc_v"))?;
        self.nets.disc_proto.params.save(&dir.join("disc_proto"))?;
        self.nets.disc_raw.params.save(&dir.join("disc_raw"))?;
        self.nets.g_phon.params.save(&dir.join("g_phon"))?;
        self.nets.g_cont.params.save(&dir.join("g_cont"))?;
        for (i, e) in self.nets.experts.iter().enumerate() {
            e.params.save(&dir.join(format!("expert_{i}")))?;
        }
        self.nets.decoder.params.save(&dir.join("decoder"))?;
        self.nets.phi.net().params.save(&dir.join("phi"))?;
        self.phoneme_bank.save(&dir.join("phoneme_bank"))?;
        self.viseme_bank.save(&dir.join("viseme_bank"))?;
        Ok(())
    }

    /// Encode a speech feature and return its phoneme code.
    pub fn phoneme_code(&self, raw_p: &[f64]) -> Result<usize> {
        let z = self.nets.enc_p.eval(raw_p)?;
        hard_assign(&z, &self.phoneme_bank)
    }

    /// Encode a visual feature and return its viseme code.
    pub fn viseme_code(&self, raw_v: &[f64]) -> Result<usize> {
        let z = self.nets.enc_v.eval(raw_v)?;
        hard_assign(&z, &self.viseme_bank)
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: TrainedModel,
    pub maps: CorrespondenceMaps,
}

/// Index of one training window: (language, utterance, start).
#[derive(Debug, Clone, Copy)]
struct WindowRef {
    lang: usize,
    utt: usize,
    start: usize,
}

struct DataView<'a> {
    corpus: &'a Corpus,
    /// Indices into corpus.languages for seen languages.
    seen: Vec<usize>,
    unseen: Vec<usize>,
    /// Per seen language: number of utterances used for training.
    train_counts: Vec<usize>,
}

impl<'a> DataView<'a> {
    fn new(corpus: &'a Corpus) -> Result<Self> {
        let (train, zero_shot) =
            split_seen_unseen(&corpus.languages, &corpus.unseen_names, &corpus.universe)?;
        if train.is_empty() {
            return Err(Error::invalid("no seen languages to train on"));
        }
        let name_index = |l: &Language| {
            corpus
                .languages
                .iter()
                .position(|c| c.spec.name == l.spec.name)
                .expect("language from corpus")
        };
        let seen: Vec<usize> = train.iter().map(|l| name_index(l)).collect();
        let unseen: Vec<usize> = zero_shot.iter().map(|l| name_index(l)).collect();
        let train_counts = seen
            .iter()
            .map(|&li| {
                let n = corpus.languages[li].utterances.len();
                ((n as f64 * TRAIN_FRACTION).ceil() as usize).clamp(1, n)
            })
            .collect();
        Ok(DataView {
            corpus,
            seen,
            unseen,
            train_counts,
        })
    }

    fn sample_window(&self, rng: &mut rand_chacha::ChaCha12Rng, b: usize) -> WindowRef {
        let si = rng.gen_range(0..self.seen.len());
        let lang = self.seen[si];
        let utt = rng.gen_range(0..self.train_counts[si]);
        let t_len = self.corpus.languages[lang].utterances[utt].len();
        let start = if t_len > b { rng.gen_range(0..=t_len - b) } else { 0 };
        WindowRef { lang, utt, start }
    }

    /// Deterministic stride subsample of training timesteps, as
    /// (lang, utt, t) triples.
    fn train_points(&self, cap: usize) -> Vec<(usize, usize, usize)> {
        let mut all = Vec::new();
        for (si, &li) in self.seen.iter().enumerate() {
            for ui in 0..self.train_counts[si] {
                let t_len = self.corpus.languages[li].utterances[ui].len();
                for t in 0..t_len {
                    all.push((li, ui, t));
                }
            }
        }
        stride_sample(all, cap)
    }

    /// Held-out timesteps of seen languages.
    fn holdout_points(&self, cap: usize) -> Vec<(usize, usize, usize)> {
        let mut all = Vec::new();
        for (si, &li) in self.seen.iter().enumerate() {
            let n = self.corpus.languages[li].utterances.len();
            for ui in self.train_counts[si]..n {
                let t_len = self.corpus.languages[li].utterances[ui].len();
                for t in 0..t_len {
                    all.push((li, ui, t));
                }
            }
        }
        stride_sample(all, cap)
    }

    fn unseen_points(&self, cap: usize) -> Vec<(usize, usize, usize)> {
        let mut all = Vec::new();
        for &li in &self.unseen {
            for (ui, utt) in self.corpus.languages[li].utterances.iter().enumerate() {
                for t in 0..utt.len() {
                    all.push((li, ui, t));
                }
            }
        }
        stride_sample(all, cap)
    }
}

fn stride_sample<T>(all: Vec<T>, cap: usize) -> Vec<T> {
    if all.len() <= cap || cap == 0 {
        return all;
    }
    let stride = all.len().div_ceil(cap);
    all.into_iter().step_by(stride).collect()
}

struct OptStates {
    enc_p: AdamState,
    enc_v: AdamState,
    g_phon: AdamState,
    g_cont: AdamState,
    experts: Vec<AdamState>,
    decoder: AdamState,
    disc_proto: AdamState,
    disc_raw: AdamState,
}

impl OptStates {
    fn new(nets: &ModelNets) -> Self {
        OptStates {
            enc_p: AdamState::new(nets.enc_p.params.total_len()),
            enc_v: AdamState::new(nets.enc_v.params.total_len()),
            g_phon: AdamState::new(nets.g_phon.params.total_len()),
            g_cont: AdamState::new(nets.g_cont.params.total_len()),
            experts: nets
                .experts
                .iter()
                .map(|e| AdamState::new(e.params.total_len()))
                .collect(),
            decoder: AdamState::new(nets.decoder.params.total_len()),
            disc_proto: AdamState::new(nets.disc_proto.params.total_len()),
            disc_raw: AdamState::new(nets.disc_raw.params.total_len()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    l_align: f64,
    l_router: f64,
    l_gen: f64,
    total: f64,
}

/// Encode every training point and fit (or refit) both banks.
fn fit_banks(
    cfg: &ExperimentConfig,
    nets: &ModelNets,
    view: &DataView,
    existing: Option<(&PrototypeBank, &PrototypeBank)>,
    epoch: u64,
) -> Result<(PrototypeBank, PrototypeBank)> {
    let points = view.train_points(BANK_FIT_CAP);
    let mut zp = Vec::with_capacity(points.len() * cfg.embed_dim);
    let mut zv = Vec::with_capacity(points.len() * cfg.embed_dim);
    for &(li, ui, t) in &points {
        let utt = &view.corpus.languages[li].utterances[ui];
        zp.extend(nets.enc_p.eval(utt.z_p_at(t, cfg.d_p))?);
        zv.extend(nets.enc_v.eval(utt.z_v_at(t, cfg.d_v))?);
    }
    let n = points.len();
    match existing {
        None => {
            let pb = kmeanspp_init(
                &zp,
                n,
                cfg.embed_dim,
                cfg.k,
                cfg.tau,
                Modality::Phoneme,
                derive_seed(cfg.seed, "phoneme_bank", 0),
            )?;
            let vb = kmeanspp_init(
                &zv,
                n,
                cfg.embed_dim,
                cfg.k,
                cfg.tau,
                Modality::Viseme,
                derive_seed(cfg.seed, "viseme_bank", 0),
            )?;
            Ok((pb, vb))
        }
        Some((pb, vb)) => Ok((refit(pb, &zp, epoch)?, refit(vb, &zv, epoch)?)),
    }
}

struct WindowData<'a> {
    raw_p: Vec<&'a [f64]>,
    raw_v: Vec<&'a [f64]>,
    real_frames: FrameSequence,
}

fn window_data<'a>(view: &DataView<'a>, w: WindowRef, b: usize) -> WindowData<'a> {
    let corpus = view.corpus;
    let utt = &corpus.languages[w.lang].utterances[w.utt];
    let d_p = corpus.spec.d_p;
    let d_v = corpus.spec.d_v;
    let raw_p: Vec<&[f64]> = (0..b).map(|i| utt.z_p_at(w.start + i, d_p)).collect();
    let raw_v: Vec<&[f64]> = (0..b).map(|i| utt.z_v_at(w.start + i, d_v)).collect();
    let frames = utt.frames.frames
        [w.start * FRAME_PIXELS..(w.start + b) * FRAME_PIXELS]
        .to_vec();
    let real_frames = FrameSequence { frames, t: b };
    WindowData {
        raw_p,
        raw_v,
        real_frames,
    }
}

/// One discriminator ascent step on the current window (holding the feature
/// adapters fixed).
fn discriminator_step(
    cfg: &ExperimentConfig,
    nets: &mut ModelNets,
    states: &mut OptStates,
    banks: &(PrototypeBank, PrototypeBank),
    data: &WindowData,
    perm: &[usize],
) -> Result<()> {
    let b = data.raw_p.len();
    let mut zp = Vec::with_capacity(b);
    let mut zv = Vec::with_capacity(b);
    let mut vp = Vec::with_capacity(b);
    let mut vv = Vec::with_capacity(b);
    for t in 0..b {
        let z_p = nets.enc_p.eval(data.raw_p[t])?;
        let z_v = nets.enc_v.eval(data.raw_v[t])?;
        vp.push(soft_assign(&z_p, &banks.0, banks.0.tau)?);
        vv.push(soft_assign(&z_v, &banks.1, banks.1.tau)?);
        zp.push(z_p);
        zv.push(z_v);
    }

    let mut g = Graph::new();
    let proto_block = g.add_block(&nets.disc_proto.params);
    let raw_block = g.add_block(&nets.disc_raw.params);
    let vp_nodes: Vec<NodeId> = vp.iter().map(|v| g.input(v)).collect();
    let vv_nodes: Vec<NodeId> = vv.iter().map(|v| g.input(v)).collect();
    let zp_nodes: Vec<NodeId> = zp.iter().map(|v| g.input(v)).collect();
    let zv_nodes: Vec<NodeId> = zv.iter().map(|v| g.input(v)).collect();

    let pair = |xs: &[NodeId], ys: &[NodeId]| -> (Vec<(NodeId, NodeId)>, Vec<(NodeId, NodeId)>) {
        let pos = xs.iter().copied().zip(ys.iter().copied()).collect();
        let neg = xs.iter().copied().zip(perm.iter().map(|&j| ys[j])).collect();
        (pos, neg)
    };
    let (pos_p, neg_p) = pair(&vp_nodes, &vv_nodes);
    let i_proto = crate::align::js_mi_node(&mut g, proto_block, &nets.disc_proto.spec, &pos_p, &neg_p)?;
    let (pos_r, neg_r) = pair(&zp_nodes, &zv_nodes);
    let i_raw = crate::align::js_mi_node(&mut g, raw_block, &nets.disc_raw.spec, &pos_r, &neg_r)?;

    // ascend both bounds (the raw estimator can be frozen by config)
    let loss = if cfg.freeze_raw_estimator {
        g.tape.scale(i_proto, -1.0)
    } else {
        let s = g.tape.add(i_proto, i_raw)?;
        g.tape.scale(s, -1.0)
    };
    let grads = g.backward(loss)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    adam_step(
        &mut nets.disc_proto.params,
        grads[0].as_ref().expect("trainable"),
        &mut states.disc_proto,
        &adam,
    )?;
    if !cfg.freeze_raw_estimator {
        adam_step(
            &mut nets.disc_raw.params,
            grads[1].as_ref().expect("trainable"),
            &mut states.disc_raw,
            &adam,
        )?;
    }
    Ok(())
}

/// One joint model step on the current window. Returns the loss terms.
fn model_step(
    cfg: &ExperimentConfig,
    nets: &mut ModelNets,
    states: &mut OptStates,
    banks: &(PrototypeBank, PrototypeBank),
    router_cfg: &RouterConfig,
    data: &WindowData,
    perm: &[usize],
    step: u64,
) -> Result<StepLosses> {
    let b = data.raw_p.len();
    let use_align = !cfg.disable_pv_align;
    let use_moe = !cfg.disable_moe;
    let use_guidance = use_moe && !cfg.disable_phoneme_guidance;
    let beta_eff = if use_guidance { cfg.beta } else { 0.0 };

    #[derive(Clone, Copy, PartialEq)]
    enum Slot {
        EncP,
        EncV,
        GPhon,
        GCont,
        Expert(usize),
        Decoder,
    }

    let mut g = Graph::new();
    let mut reg: Vec<(Slot, usize)> = Vec::new();
    let enc_p_block = g.add_block(&nets.enc_p.params);
    reg.push((Slot::EncP, enc_p_block.0));
    let enc_v_block = if use_align {
        let id = g.add_block(&nets.enc_v.params);
        reg.push((Slot::EncV, id.0));
        Some(id)
    } else {
        None
    };
    let disc_blocks = if use_align {
        Some((
            g.add_frozen_block(&nets.disc_proto.params),
            g.add_frozen_block(&nets.disc_raw.params),
        ))
    } else {
        None
    };
    let g_phon_block = if use_guidance && beta_eff > 0.0 {
        let id = g.add_block(&nets.g_phon.params);
        reg.push((Slot::GPhon, id.0));
        Some(id)
    } else {
        None
    };
    let g_cont_block = if use_moe {
        let id = g.add_block(&nets.g_cont.params);
        reg.push((Slot::GCont, id.0));
        Some(id)
    } else {
        None
    };
    let expert_blocks: Vec<crate::diffcore::tape::BlockId> = nets
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let id = g.add_block(&e.params);
            reg.push((Slot::Expert(i), id.0));
            id
        })
        .collect();
    let decoder_block = g.add_block(&nets.decoder.params);
    reg.push((Slot::Decoder, decoder_block.0));
    let phi_block = g.add_frozen_block(&nets.phi.net().params);

    // encode: z_p always (routing content), z_v only for alignment
    let mut zp_nodes = Vec::with_capacity(b);
    for t in 0..b {
        let x = g.input(data.raw_p[t]);
        zp_nodes.push(mlp_forward(&mut g, enc_p_block, &nets.enc_p.spec, x)?);
    }
    let mut vp_nodes = Vec::with_capacity(b);
    for &z in &zp_nodes {
        vp_nodes.push(soft_assign_node(&mut g, z, &banks.0)?);
    }
    // pseudo-phoneme labels as constants for the routing target
    let labels: Vec<Vec<f64>> = vp_nodes.iter().map(|&n| g.tape.value(n).to_vec()).collect();

    // alignment
    let align_node = if use_align {
        let enc_v_block = enc_v_block.expect("registered");
        let (dp, dr) = disc_blocks.expect("registered");
        let mut zv_nodes = Vec::with_capacity(b);
        for t in 0..b {
            let x = g.input(data.raw_v[t]);
            zv_nodes.push(mlp_forward(&mut g, enc_v_block, &nets.enc_v.spec, x)?);
        }
        let mut vv_nodes = Vec::with_capacity(b);
        for &z in &zv_nodes {
            vv_nodes.push(soft_assign_node(&mut g, z, &banks.1)?);
        }
        let nodes = alignment_loss_node(
            &mut g,
            dp,
            &nets.disc_proto.spec,
            dr,
            &nets.disc_raw.spec,
            &vp_nodes,
            &vv_nodes,
            &zp_nodes,
            &zv_nodes,
            cfg.lambda_neg,
            perm,
        )?;
        Some(nodes.loss)
    } else {
        None
    };

    // routing and expert aggregation
    let mut moe_outputs = Vec::with_capacity(b);
    let router_node = if use_moe {
        let g_cont_block = g_cont_block.expect("registered");
        let mut score_nodes = Vec::with_capacity(b);
        for t in 0..b {
            let cont = mlp_forward(&mut g, g_cont_block, &nets.g_cont.spec, zp_nodes[t])?;
            let score = if let Some(g_phon_block) = g_phon_block {
                let phon = mlp_forward(&mut g, g_phon_block, &nets.g_phon.spec, vp_nodes[t])?;
                let ps = g.tape.scale(phon, beta_eff);
                let cs = g.tape.scale(cont, 1.0 - beta_eff);
                g.tape.add(ps, cs)?
            } else {
                g.tape.scale(cont, 1.0 - beta_eff)
            };
            score_nodes.push(score);
        }
        let selected: Vec<Vec<usize>> = score_nodes
            .iter()
            .map(|&s| crate::router::top_s(g.tape.value(s), router_cfg.s))
            .collect();
        let mut usage = vec![0usize; router_cfg.m];
        for sel in &selected {
            for &e in sel {
                usage[e] += 1;
            }
        }
        let weight_nodes = routing_weight_nodes(&mut g, &score_nodes, &selected)?;

        for t in 0..b {
            let mut acc: Option<NodeId> = None;
            for (j, &e) in selected[t].iter().enumerate() {
                let y = mlp_forward(&mut g, expert_blocks[e], &nets.experts[e].spec, zp_nodes[t])?;
                let wy = g.tape.scale_by_elem(weight_nodes[t], j, y)?;
                acc = Some(match acc {
                    None => wy,
                    Some(a) => g.tape.add(a, wy)?,
                });
            }
            moe_outputs.push(acc.expect("s >= 1"));
        }

        let ent = entropy_term_node(&mut g, &weight_nodes, router_cfg)?;
        let util = utilization_term(&usage, b, router_cfg);
        let util_node = g.tape.leaf_scalar(util);
        let reg_terms = g.tape.add(ent, util_node)?;
        let loss = if use_guidance {
            let ce = route_cross_entropy_node(&mut g, &weight_nodes, &selected, &labels, router_cfg)?;
            g.tape.add(ce, reg_terms)?
        } else {
            reg_terms
        };
        Some(loss)
    } else {
        for t in 0..b {
            let y = mlp_forward(&mut g, expert_blocks[0], &nets.experts[0].spec, zp_nodes[t])?;
            moe_outputs.push(y);
        }
        None
    };

    // decode and generation loss
    let gen_frames = decode_frames_node(&mut g, decoder_block, &nets.decoder.spec, &moe_outputs)?;
    let gen_node = generation_loss_node(
        &mut g,
        &gen_frames,
        &data.real_frames,
        &nets.phi,
        phi_block,
        cfg.lambda_1,
        cfg.lambda_p,
        cfg.lambda_t,
    )?;

    // total
    let zero = g.tape.leaf_scalar(0.0);
    let a_node = align_node.unwrap_or(zero);
    let r_node = router_node.unwrap_or(zero);
    let ar = g.tape.add(a_node, r_node)?;
    let gen_scaled = g.tape.scale(gen_node, cfg.lambda_task);
    let total_node = g.tape.add(ar, gen_scaled)?;

    let losses = StepLosses {
        l_align: align_node.map_or(0.0, |n| g.tape.scalar(n)),
        l_router: router_node.map_or(0.0, |n| g.tape.scalar(n)),
        l_gen: g.tape.scalar(gen_node),
        total: g.tape.scalar(total_node),
    };
    for (term, v) in [
        ("l_align", losses.l_align),
        ("l_router", losses.l_router),
        ("l_gen", losses.l_gen),
        ("total", losses.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NumericalAbort {
                term: term.to_string(),
                step,
            });
        }
    }

    let grads = g.backward(total_node)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    for &(slot, block_idx) in &reg {
        let grad = grads[block_idx].as_ref().expect("trainable block");
        match slot {
            Slot::EncP => adam_step(&mut nets.enc_p.params, grad, &mut states.enc_p, &adam)?,
            Slot::EncV => adam_step(&mut nets.enc_v.params, grad, &mut states.enc_v, &adam)?,
            Slot::GPhon => adam_step(&mut nets.g_phon.params, grad, &mut states.g_phon, &adam)?,
            Slot::GCont => adam_step(&mut nets.g_cont.params, grad, &mut states.g_cont, &adam)?,
            Slot::Expert(i) => {
                adam_step(&mut nets.experts[i].params, grad, &mut states.experts[i], &adam)?
            }
            Slot::Decoder => adam_step(&mut nets.decoder.params, grad, &mut states.decoder, &adam)?,
        };
    }
    Ok(losses)
}

/// Pure (no-tape) routing outcome for evaluation.
fn eval_route(
    cfg: &ExperimentConfig,
    nets: &ModelNets,
    router_cfg: &RouterConfig,
    z_p: &[f64],
    v_p: &[f64],
) -> Result<RoutingOutcome> {
    let beta_eff = if cfg.disable_phoneme_guidance { 0.0 } else { cfg.beta };
    let cont = nets.g_cont.eval(z_p)?;
    let scores: Vec<f64> = if beta_eff > 0.0 {
        let phon = nets.g_phon.eval(v_p)?;
        phon.iter()
            .zip(cont.iter())
            .map(|(&p, &c)| beta_eff * p + (1.0 - beta_eff) * c)
            .collect()
    } else {
        cont.iter().map(|&c| (1.0 - beta_eff) * c).collect()
    };
    Ok(outcome_from_scores(scores, router_cfg.s))
}

fn collect_triples(
    cfg: &ExperimentConfig,
    nets: &ModelNets,
    banks: &(PrototypeBank, PrototypeBank),
    corpus: &Corpus,
    points: &[(usize, usize, usize)],
) -> Result<Vec<CodeTriple>> {
    let mut out = Vec::with_capacity(points.len());
    for &(li, ui, t) in points {
        let utt = &corpus.languages[li].utterances[ui];
        let zp = nets.enc_p.eval(utt.z_p_at(t, cfg.d_p))?;
        let zv = nets.enc_v.eval(utt.z_v_at(t, cfg.d_v))?;
        out.push(CodeTriple {
            true_id: utt.phoneme_ids[t],
            phoneme_code: hard_assign(&zp, &banks.0)?,
            viseme_code: hard_assign(&zv, &banks.1)?,
        });
    }
    Ok(out)
}

/// Landmark metrics for model-predicted mouth sequences: speech feature ->
/// phoneme code -> matched viseme code -> matched true viseme -> rendered
/// landmarks, scored against the corpus landmarks.
fn prediction_metrics(
    cfg: &ExperimentConfig,
    nets: &ModelNets,
    banks: &(PrototypeBank, PrototypeBank),
    maps: &CorrespondenceMaps,
    corpus: &Corpus,
    utterances: &[(usize, usize)],
) -> Result<(f64, f64)> {
    if utterances.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut lse_sum = 0.0;
    let mut tmdc_sum = 0.0;
    for &(li, ui) in utterances {
        let utt = &corpus.languages[li].utterances[ui];
        let mut viseme_ids = Vec::with_capacity(utt.len());
        for t in 0..utt.len() {
            let zp = nets.enc_p.eval(utt.z_p_at(t, cfg.d_p))?;
            let code = hard_assign(&zp, &banks.0)?;
            let matched = maps.code_match[code];
            let predicted = if matched == usize::MAX {
                0
            } else {
                match maps.viseme_code_to_true[matched] {
                    usize::MAX => 0,
                    id => id,
                }
            };
            viseme_ids.push(predicted);
        }
        let params = viseme_mouth_series(&viseme_ids, &corpus.universe);
        let mut predicted = render_landmark_series(&params)?;
        predicted.role = Role::Generated;
        lse_sum += lse_d(&utt.landmarks, &predicted)?;
        tmdc_sum += tmdc(&utt.landmarks, &predicted)?;
    }
    let n = utterances.len() as f64;
    Ok((lse_sum / n, tmdc_sum / n))
}

fn holdout_utterances(view: &DataView) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (si, &li) in view.seen.iter().enumerate() {
        let n = view.corpus.languages[li].utterances.len();
        for ui in view.train_counts[si]..n {
            out.push((li, ui));
        }
    }
    out
}

fn unseen_utterances(view: &DataView) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &li in &view.unseen {
        for ui in 0..view.corpus.languages[li].utterances.len() {
            out.push((li, ui));
        }
    }
    out
}

/// Run the full training workflow on an in-memory corpus. Checkpoints are
/// written per epoch when `checkpoint_dir` is given, so a numerical abort
/// leaves the last good state on disk.
pub fn train(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.spec.d_p != cfg.d_p || corpus.spec.d_v != cfg.d_v {
        return Err(Error::Config(format!(
            "corpus dims ({}, {}) disagree with config ({}, {})",
            corpus.spec.d_p, corpus.spec.d_v, cfg.d_p, cfg.d_v
        )));
    }
    let started = Instant::now();
    let view = DataView::new(corpus)?;
    let mut nets = ModelNets::init(cfg)?;
    let mut states = OptStates::new(&nets);
    let router_cfg = RouterConfig {
        m: cfg.m,
        s: cfg.s,
        beta: cfg.beta,
        lambda_util: cfg.lambda_util,
        lambda_ent: cfg.lambda_ent,
        phoneme_to_expert: (0..cfg.k).map(|i| i % cfg.m).collect(),
        flip_entropy_sign: cfg.flip_entropy_sign,
    };
    router_cfg.validate()?;

    let mut rng = rng_for(cfg.seed, "trainer", 0);
    let mut banks: Option<(PrototypeBank, PrototypeBank)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut global_step: u64 = 0;
    let mut steps_since_refit: u64 = 0;

    for epoch in 0..cfg.epochs {
        let due = match &banks {
            None => true,
            Some((pb, _)) => epoch.saturating_sub(pb.last_refit_epoch) >= cfg.refit_period,
        };
        if due {
            let refitted = fit_banks(cfg, &nets, &view, banks.as_ref().map(|(a, b)| (a, b)), epoch)?;
            banks = Some(refitted);
            steps_since_refit = 0;
        }
        let bank_pair = banks.as_ref().expect("banks initialized");

        let mut sums = StepLosses::default();
        for _ in 0..cfg.steps_per_epoch {
            let w = view.sample_window(&mut rng, cfg.batch);
            let data = window_data(&view, w, cfg.batch);
            let perm = derangement(cfg.batch, derive_seed(cfg.seed, "neg", global_step))?;
            if !cfg.disable_pv_align {
                discriminator_step(cfg, &mut nets, &mut states, bank_pair, &data, &perm)?;
            }
            let losses = model_step(
                cfg,
                &mut nets,
                &mut states,
                bank_pair,
                &router_cfg,
                &data,
                &perm,
                global_step,
            )?;
            sums.l_align += losses.l_align;
            sums.l_router += losses.l_router;
            sums.l_gen += losses.l_gen;
            sums.total += losses.total;
            global_step += 1;
            steps_since_refit += 1;
        }
        let n = cfg.steps_per_epoch as f64;
        epochs.push(EpochRecord {
            epoch,
            l_align: sums.l_align / n,
            l_router: sums.l_router / n,
            l_gen: sums.l_gen / n,
            total: sums.total / n,
        });

        if let Some(dir) = checkpoint_dir {
            let model = TrainedModel {
                nets: nets.clone(),
                phoneme_bank: bank_pair.0.clone(),
                viseme_bank: bank_pair.1.clone(),
                router_cfg: router_cfg.clone(),
            };
            model.save_checkpoint(&dir.join("checkpoints"))?;
        }
    }

    // banks must exist (epochs may be zero) and track the final encoders
    if banks.is_none() {
        banks = Some(fit_banks(cfg, &nets, &view, None, 0)?);
    } else if steps_since_refit > 0 {
        let pair = banks.as_ref().map(|(a, b)| (a, b));
        banks = Some(fit_banks(cfg, &nets, &view, pair, cfg.epochs)?);
    }
    let bank_pair = banks.expect("banks initialized");
    let train_elapsed = started.elapsed().as_secs_f64();

    // --- evaluation ---
    let truth = &corpus.universe.correspondence;
    let train_triples = collect_triples(cfg, &nets, &bank_pair, corpus, &view.train_points(10_000))?;
    let maps = correspondence_maps(&train_triples, cfg.k, truth)?;
    let holdout = view.holdout_points(10_000);
    let seen_triples = collect_triples(cfg, &nets, &bank_pair, corpus, &holdout)?;
    let unseen_pts = view.unseen_points(10_000);
    let unseen_triples = collect_triples(cfg, &nets, &bank_pair, corpus, &unseen_pts)?;
    let seen_accuracy = correspondence_accuracy(&seen_triples, &maps, truth);
    let unseen_accuracy = if unseen_triples.is_empty() {
        0.0
    } else {
        correspondence_accuracy(&unseen_triples, &maps, truth)
    };

    // routing specialization on held-out points
    let mut ids = Vec::with_capacity(holdout.len());
    let mut experts = Vec::with_capacity(holdout.len());
    let mut usage = vec![0u64; cfg.m];
    for &(li, ui, t) in &holdout {
        let utt = &corpus.languages[li].utterances[ui];
        let zp = nets.enc_p.eval(utt.z_p_at(t, cfg.d_p))?;
        let top = if cfg.disable_moe {
            0
        } else {
            let vp = soft_assign(&zp, &bank_pair.0, bank_pair.0.tau)?;
            let outcome = eval_route(cfg, &nets, &router_cfg, &zp, &vp)?;
            outcome.selected[0]
        };
        ids.push(utt.phoneme_ids[t]);
        experts.push(top);
        usage[top] += 1;
    }
    let nmi = normalized_mutual_information(&ids, &experts, corpus.spec.k_true, cfg.m)?;

    // landmark metrics for predicted mouth sequences
    let (seen_lse, seen_tmdc) = prediction_metrics(
        cfg,
        &nets,
        &bank_pair,
        &maps,
        corpus,
        &holdout_utterances(&view),
    )?;
    let (unseen_lse, unseen_tmdc) = prediction_metrics(
        cfg,
        &nets,
        &bank_pair,
        &maps,
        corpus,
        &unseen_utterances(&view),
    )?;

    let wall = started.elapsed().as_secs_f64();
    let tokens = cfg.epochs * cfg.steps_per_epoch as u64 * cfg.batch as u64;
    let report = RunReport {
        seed: cfg.seed,
        epochs,
        alignment: AlignmentSummary {
            seen_accuracy,
            unseen_accuracy,
            code_match: maps.code_match.clone(),
        },
        routing: RoutingSummary {
            expert_usage: usage,
            nmi_phoneme_expert: nmi,
        },
        metrics: MetricSummary {
            seen_lse_d: seen_lse,
            seen_tmdc,
            unseen_lse_d: unseen_lse,
            unseen_tmdc,
        },
        timing: Timing {
            wall_clock_secs: wall,
            tokens_per_sec: if train_elapsed > 0.0 {
                tokens as f64 / train_elapsed
            } else {
                0.0
            },
        },
    };
    let model = TrainedModel {
        nets,
        phoneme_bank: bank_pair.0,
        viseme_bank: bank_pair.1,
        router_cfg,
    };
    if let Some(dir) = checkpoint_dir {
        model.save_checkpoint(&dir.join("checkpoints"))?;
    }
    Ok(TrainOutcome { report, model, maps })
}
