//! Toy frame decoder and the generation loss closing the training loop.
//!
//! Frames are 16x16 grayscale in [0, 1]. The loss combines a pixel L1 term,
//! a squared feature distance under a frozen random perceptual embedding,
//! and an L1 term on temporal frame differences. All terms are per-element
//! means so the weights are resolution-independent.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::mlp::{mlp_eval, mlp_forward, Net};
use crate::diffcore::param::MlpSpec;
use crate::diffcore::tape::{BlockId, Graph, NodeId};
use crate::error::{Error, Result};

pub const FRAME_SIDE: usize = 16;
pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;
/// Feature width of the frozen perceptual embedding.
pub const PERCEPTUAL_DIM: usize = 32;

/// T frames of 16x16 grayscale, flattened row-major per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<f64>,
    pub t: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<f64>, t: usize) -> Result<Self> {
        let seq = FrameSequence { frames, t };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * FRAME_PIXELS..(t + 1) * FRAME_PIXELS]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.t * FRAME_PIXELS {
            return Err(Error::dim("frame sequence", self.t * FRAME_PIXELS, self.frames.len()));
        }
        if let Some(i) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frame pixel {i}")));
        }
        if self.frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("frame pixels must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Flat little-endian f64 dump plus a JSON shape sidecar.
    pub fn save(&self, base: &Path) -> Result<()> {
        let sidecar = FrameSidecar {
            shape: [self.t, FRAME_SIDE, FRAME_SIDE],
        };
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string(&sidecar)?,
        )?;
        let mut bytes = Vec::with_capacity(self.frames.len() * 8);
        for v in &self.frames {
            bytes.write_all(&v.to_le_bytes())?;
        }
        std::fs::write(base.with_extension("bin"), bytes)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let sidecar: FrameSidecar =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
        if sidecar.shape[1] != FRAME_SIDE || sidecar.shape[2] != FRAME_SIDE {
            return Err(Error::Parse {
                path: base.display().to_string(),
                detail: format!("unsupported frame shape {:?}", sidecar.shape),
            });
        }
        let mut bytes = Vec::new();
        std::fs::File::open(base.with_extension("bin"))?.read_to_end(&mut bytes)?;
        let frames: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        FrameSequence::new(frames, sidecar.shape[0])
    }

    /// 8-bit binary PGM dump of one frame, for eyeballing.
    pub fn write_pgm(&self, t: usize, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        write!(out, "P5\n{FRAME_SIDE} {FRAME_SIDE}\n255\n")?;
        for &v in self.frame(t) {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FrameSidecar {
    shape: [usize; 3],
}

/// Frozen random feature extractor standing in for a pretrained perceptual
/// network: a fixed nonlinear embedding the loss measures distances in.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    net: Net,
}

impl PerceptualNet {
    pub fn random(seed: u64) -> Self {
        let spec = MlpSpec::tanh(&[FRAME_PIXELS, 64, PERCEPTUAL_DIM]).expect("static spec");
        PerceptualNet {
            net: Net::new(spec, seed),
        }
    }

    pub fn features(&self, frame: &[f64]) -> Result<Vec<f64>> {
        mlp_eval(&self.net.params, &self.net.spec, frame)
    }

    pub fn net(&self) -> &Net {
        &self.net
    }
}

/// Decode one frame per timestep; the decoder output is squashed to [0, 1]
/// by a logistic map.
pub fn decode_frames(moe_outputs: &[Vec<f64>], decoder: &Net) -> Result<FrameSequence> {
    if decoder.output_width() != FRAME_PIXELS {
        return Err(Error::dim("decoder output", FRAME_PIXELS, decoder.output_width()));
    }
    let mut frames = Vec::with_capacity(moe_outputs.len() * FRAME_PIXELS);
    for x in moe_outputs {
        let raw = decoder.eval(x)?;
        frames.extend(raw.iter().map(|&v| crate::diffcore::tape::sigmoid(v)));
    }
    FrameSequence::new(frames, moe_outputs.len())
}

/// Recorded decode: one sigmoid-squashed frame node per timestep.
pub fn decode_frames_node(
    g: &mut Graph,
    decoder: BlockId,
    spec: &MlpSpec,
    inputs: &[NodeId],
) -> Result<Vec<NodeId>> {
    if spec.output_width() != FRAME_PIXELS {
        return Err(Error::dim("decoder output", FRAME_PIXELS, spec.output_width()));
    }
    let mut frames = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let raw = mlp_forward(g, decoder, spec, x)?;
        frames.push(g.tape.sigmoid(raw));
    }
    Ok(frames)
}

/// out[t] = seq[t + 1] - seq[t], flattened (T - 1) x 256.
pub fn temporal_diff(seq: &FrameSequence) -> Result<Vec<f64>> {
    if seq.t < 2 {
        return Err(Error::invalid("temporal_diff needs T >= 2"));
    }
    let mut out = Vec::with_capacity((seq.t - 1) * FRAME_PIXELS);
    for t in 0..seq.t - 1 {
        let a = seq.frame(t);
        let b = seq.frame(t + 1);
        for i in 0..FRAME_PIXELS {
            out.push(b[i] - a[i]);
        }
    }
    Ok(out)
}

/// The three generation loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationLossTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub temporal: f64,
    pub total: f64,
}

/// Pixel L1 + perceptual squared distance + temporal-difference L1, each as
/// a per-element mean averaged over frames.
pub fn generation_loss(
    gen: &FrameSequence,
    real: &FrameSequence,
    phi: &PerceptualNet,
    lambda_1: f64,
    lambda_p: f64,
    lambda_t: f64,
) -> Result<GenerationLossTerms> {
    if gen.t != real.t {
        return Err(Error::dim("generation loss frames", real.t, gen.t));
    }
    if gen.t < 2 {
        return Err(Error::invalid("generation loss needs T >= 2"));
    }
    if lambda_1 < 0.0 || lambda_p < 0.0 || lambda_t < 0.0 {
        return Err(Error::invalid("generation loss weights must be >= 0"));
    }

    let t_count = gen.t as f64;
    let mut l1 = 0.0;
    for t in 0..gen.t {
        let (a, b) = (gen.frame(t), real.frame(t));
        let mut acc = 0.0;
        for i in 0..FRAME_PIXELS {
            acc += (a[i] - b[i]).abs();
        }
        l1 += acc / FRAME_PIXELS as f64;
    }
    l1 /= t_count;

    let mut perceptual = 0.0;
    for t in 0..gen.t {
        let fg = phi.features(gen.frame(t))?;
        let fr = phi.features(real.frame(t))?;
        let mut acc = 0.0;
        for i in 0..fg.len() {
            let d = fg[i] - fr[i];
            acc += d * d;
        }
        perceptual += acc / fg.len() as f64;
    }
    perceptual /= t_count;

    let dg = temporal_diff(gen)?;
    let dr = temporal_diff(real)?;
    let mut temporal = 0.0;
    for t in 0..gen.t - 1 {
        let mut acc = 0.0;
        for i in 0..FRAME_PIXELS {
            let idx = t * FRAME_PIXELS + i;
            acc += (dg[idx] - dr[idx]).abs();
        }
        temporal += acc / FRAME_PIXELS as f64;
    }
    temporal /= (gen.t - 1) as f64;

    let total = lambda_1 * l1 + lambda_p * perceptual + lambda_t * temporal;
    Ok(GenerationLossTerms {
        l1,
        perceptual,
        temporal,
        total,
    })
}

/// Recorded generation loss over generated frame nodes. The real frames and
/// their perceptual features enter as constants; `phi_block` must be a
/// frozen registration of `phi.net().params`.
pub fn generation_loss_node(
    g: &mut Graph,
    gen_frames: &[NodeId],
    real: &FrameSequence,
    phi: &PerceptualNet,
    phi_block: BlockId,
    lambda_1: f64,
    lambda_p: f64,
    lambda_t: f64,
) -> Result<NodeId> {
    let t_count = gen_frames.len();
    if t_count != real.t {
        return Err(Error::dim("generation loss frames", real.t, t_count));
    }
    if t_count < 2 {
        return Err(Error::invalid("generation loss needs T >= 2"));
    }

    let mut l1_terms = Vec::with_capacity(t_count);
    let mut p_terms = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let real_node = g.input(real.frame(t));
        let diff = g.tape.sub(gen_frames[t], real_node)?;
        let a = g.tape.abs(diff);
        l1_terms.push(g.tape.mean(a));

        let fg = mlp_forward(g, phi_block, &phi.net().spec, gen_frames[t])?;
        let fr = phi.features(real.frame(t))?;
        let fr_node = g.input(&fr);
        let fd = g.tape.sub(fg, fr_node)?;
        let sq = g.tape.dot(fd, fd)?;
        p_terms.push(g.tape.scale(sq, 1.0 / PERCEPTUAL_DIM as f64));
    }

    let real_diff = temporal_diff(real)?;
    let mut t_terms = Vec::with_capacity(t_count - 1);
    for t in 0..t_count - 1 {
        let dgen = g.tape.sub(gen_frames[t + 1], gen_frames[t])?;
        let dreal = g.input(&real_diff[t * FRAME_PIXELS..(t + 1) * FRAME_PIXELS]);
        let diff = g.tape.sub(dgen, dreal)?;
        let a = g.tape.abs(diff);
        t_terms.push(g.tape.mean(a));
    }

    let l1_stack = g.tape.concat(&l1_terms);
    let l1 = g.tape.mean(l1_stack);
    let p_stack = g.tape.concat(&p_terms);
    let lp = g.tape.mean(p_stack);
    let t_stack = g.tape.concat(&t_terms);
    let lt = g.tape.mean(t_stack);

    let a = g.tape.scale(l1, lambda_1);
    let b = g.tape.scale(lp, lambda_p);
    let c = g.tape.scale(lt, lambda_t);
    let ab = g.tape.add(a, b)?;
    g.tape.add(ab, c)
}

/// Weighted sum of the three training objectives.
pub fn total_loss(l_align: f64, l_router: f64, l_gen: f64, lambda_task: f64) -> Result<f64> {
    for (name, v) in [("l_align", l_align), ("l_router", l_router), ("l_gen", l_gen)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("total_loss input {name}")));
        }
    }
    Ok(l_align + l_router + lambda_task * l_gen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::param::ParameterBlock;
    use crate::seeds::rng_for;
    use rand::Rng;

    fn random_frames(t: usize, seed: u64) -> FrameSequence {
        let mut rng = rng_for(seed, "frames", 0);
        let frames: Vec<f64> = (0..t * FRAME_PIXELS).map(|_| rng.gen_range(0.0..1.0)).collect();
        FrameSequence::new(frames, t).unwrap()
    }

    fn small_decoder(seed: u64) -> Net {
        Net::new(MlpSpec::tanh(&[4, 8, FRAME_PIXELS]).unwrap(), seed)
    }

    #[test]
    fn zero_decoder_gives_half_gray() {
        let spec = MlpSpec::tanh(&[4, FRAME_PIXELS]).unwrap();
        let decoder = Net {
            params: ParameterBlock::zeros(spec.param_shapes()),
            spec,
        };
        let seq = decode_frames(&[vec![1.0, -2.0, 3.0, 0.5]], &decoder).unwrap();
        assert!(seq.frames.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_inputs_give_constant_frames() {
        let decoder = small_decoder(3);
        let x = vec![0.3, -0.7, 1.1, 0.0];
        let seq = decode_frames(&[x.clone(), x.clone(), x], &decoder).unwrap();
        let d = temporal_diff(&seq).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_is_deterministic() {
        let run = || {
            let decoder = small_decoder(9);
            let inputs = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 1.0, 2.0]];
            decode_frames(&inputs, &decoder).unwrap().frames
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_must_emit_full_frames() {
        let decoder = Net::new(MlpSpec::tanh(&[4, 10]).unwrap(), 0);
        assert!(decode_frames(&[vec![0.0; 4]], &decoder).is_err());
    }

    #[test]
    fn temporal_diff_of_ramp_is_constant() {
        let c = 0.01;
        let mut frames = Vec::new();
        for t in 0..4 {
            frames.extend(std::iter::repeat(0.1 + c * t as f64).take(FRAME_PIXELS));
        }
        let seq = FrameSequence::new(frames, 4).unwrap();
        let d = temporal_diff(&seq).unwrap();
        assert_eq!(d.len(), 3 * FRAME_PIXELS);
        for &v in &d {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_diff_matches_elementwise_oracle() {
        let seq = random_frames(3, 1);
        let d = temporal_diff(&seq).unwrap();
        for t in 0..2 {
            for i in 0..FRAME_PIXELS {
                let want = seq.frame(t + 1)[i] - seq.frame(t)[i];
                assert_eq!(d[t * FRAME_PIXELS + i], want);
            }
        }
        let single = random_frames(1, 2);
        assert!(temporal_diff(&single).is_err());
    }

    #[test]
    fn identical_sequences_have_zero_loss() {
        let seq = random_frames(3, 5);
        let phi = PerceptualNet::random(0);
        let terms = generation_loss(&seq, &seq, &phi, 1.0, 0.1, 0.5).unwrap();
        assert_eq!(terms.total, 0.0);
    }

    #[test]
    fn constant_offset_gives_lambda_times_delta() {
        let mut rng = rng_for(7, "off", 0);
        let base: Vec<f64> = (0..2 * FRAME_PIXELS).map(|_| rng.gen_range(0.0..0.5)).collect();
        let real = FrameSequence::new(base.clone(), 2).unwrap();
        let delta = 0.25;
        let gen = FrameSequence::new(base.iter().map(|&v| v + delta).collect(), 2).unwrap();
        let phi = PerceptualNet::random(1);
        let terms = generation_loss(&gen, &real, &phi, 2.0, 0.0, 0.0).unwrap();
        assert!((terms.total - 2.0 * delta).abs() < 1e-12);
        // temporal diffs are equal, so the temporal term alone is zero too
        let terms = generation_loss(&gen, &real, &phi, 0.0, 0.0, 1.0).unwrap();
        assert!(terms.total.abs() < 1e-12);
    }

    #[test]
    fn loss_matches_three_loop_oracle() {
        let gen = random_frames(3, 11);
        let real = random_frames(3, 12);
        let phi = PerceptualNet::random(2);
        let (l1w, lpw, ltw) = (1.0, 0.1, 0.5);
        let got = generation_loss(&gen, &real, &phi, l1w, lpw, ltw).unwrap();

        // brute-force re-evaluation with explicit loops
        let mut l1 = 0.0;
        for t in 0..3 {
            for i in 0..FRAME_PIXELS {
                l1 += (gen.frame(t)[i] - real.frame(t)[i]).abs();
            }
        }
        l1 /= (3 * FRAME_PIXELS) as f64;

        let mut lp = 0.0;
        for t in 0..3 {
            let fg = phi.features(gen.frame(t)).unwrap();
            let fr = phi.features(real.frame(t)).unwrap();
            for i in 0..PERCEPTUAL_DIM {
                lp += (fg[i] - fr[i]).powi(2);
            }
        }
        lp /= (3 * PERCEPTUAL_DIM) as f64;

        let mut lt = 0.0;
        for t in 0..2 {
            for i in 0..FRAME_PIXELS {
                let dg = gen.frame(t + 1)[i] - gen.frame(t)[i];
                let dr = real.frame(t + 1)[i] - real.frame(t)[i];
                lt += (dg - dr).abs();
            }
        }
        lt /= (2 * FRAME_PIXELS) as f64;

        let want = l1w * l1 + lpw * lp + ltw * lt;
        assert!((got.total - want).abs() < 1e-9, "{} vs {want}", got.total);
    }

    #[test]
    fn loss_is_nonnegative_and_detects_identity() {
        let phi = PerceptualNet::random(3);
        for seed in 0..5 {
            let a = random_frames(2, 100 + seed);
            let b = random_frames(2, 200 + seed);
            let terms = generation_loss(&a, &b, &phi, 1.0, 0.1, 0.5).unwrap();
            assert!(terms.total >= 0.0);
            assert!(terms.total > 0.0); // random pairs differ
        }
    }

    #[test]
    fn tape_loss_matches_pure_and_passes_fd() {
        use crate::diffcore::fdcheck::finite_diff_check;

        let decoder = small_decoder(21);
        let phi = PerceptualNet::random(4);
        let real = random_frames(3, 31);
        let inputs = vec![
            vec![0.2, -0.4, 0.9, 0.1],
            vec![-0.3, 0.8, 0.0, 0.5],
            vec![0.6, 0.6, -0.9, -0.2],
        ];

        let pure_of = |d: &Net| -> f64 {
            let gen = decode_frames(&inputs, d).unwrap();
            generation_loss(&gen, &real, &phi, 1.0, 0.1, 0.5).unwrap().total
        };

        let mut g = Graph::new();
        let dec_block = g.add_block(&decoder.params);
        let phi_block = g.add_frozen_block(&phi.net().params);
        let in_nodes: Vec<NodeId> = inputs.iter().map(|x| g.input(x)).collect();
        let frames = decode_frames_node(&mut g, dec_block, &decoder.spec, &in_nodes).unwrap();
        let loss =
            generation_loss_node(&mut g, &frames, &real, &phi, phi_block, 1.0, 0.1, 0.5).unwrap();
        assert!((g.tape.scalar(loss) - pure_of(&decoder)).abs() < 1e-12);

        let grads = g.backward(loss).unwrap();
        let err = finite_diff_check(
            |p| {
                Ok(pure_of(&Net {
                    params: p.clone(),
                    spec: decoder.spec.clone(),
                }))
            },
            &decoder.params,
            grads[0].as_ref().unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.0, 0.0, 3.0, 0.5).unwrap(), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 99.0, 0.0).unwrap(), 3.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5).unwrap(), 4.5);
        let err = total_loss(f64::NAN, 0.0, 0.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("l_align"));
    }

    #[test]
    fn frame_io_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let seq = random_frames(2, 40);
        let base = dir.path().join("frames");
        seq.save(&base).unwrap();
        assert_eq!(FrameSequence::load(&base).unwrap(), seq);

        let pgm = dir.path().join("f0.pgm");
        seq.write_pgm(0, &pgm).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + FRAME_PIXELS);
    }
}
