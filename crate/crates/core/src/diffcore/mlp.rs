//! Dense MLP evaluation: a plain path for inference and a tape path for
//! training. Both share the same accumulation order so values agree
//! bit-for-bit.

use crate::diffcore::param::{Activation, MlpSpec, ParameterBlock};
use crate::diffcore::tape::{BlockId, Graph, NodeId};
use crate::error::{Error, Result};

/// A parameter block paired with the spec that interprets it.
#[derive(Debug, Clone)]
pub struct Net {
    pub params: ParameterBlock,
    pub spec: MlpSpec,
}

impl Net {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = spec.init_params(seed);
        Net { params, spec }
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        mlp_eval(&self.params, &self.spec, x)
    }
}

fn check_block_matches(params: &ParameterBlock, spec: &MlpSpec) -> Result<()> {
    let expected = spec.param_shapes();
    if params.shapes.len() != expected.len() {
        return Err(Error::dim("mlp parameter entries", expected.len(), params.shapes.len()));
    }
    for (have, want) in params.shapes.iter().zip(expected.iter()) {
        if have.dims != want.dims {
            return Err(Error::dim("mlp parameter entry size", want.len(), have.len()));
        }
    }
    Ok(())
}

/// Straight evaluation without recording. Used by inference and metric paths.
pub fn mlp_eval(params: &ParameterBlock, spec: &MlpSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_width() {
        return Err(Error::dim("mlp input", spec.input_width(), x.len()));
    }
    check_block_matches(params, spec)?;

    let mut h = x.to_vec();
    for l in 0..spec.layer_count() {
        let rows = spec.widths[l + 1];
        let cols = spec.widths[l];
        let w = params.view(2 * l);
        let b = params.view(2 * l + 1);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += row[c] * h[c];
            }
            out[r] = acc + b[r];
        }
        let act = spec.activation_after(l);
        if act != Activation::Identity {
            for v in out.iter_mut() {
                *v = act.apply(*v);
            }
        }
        h = out;
    }
    Ok(h)
}

/// Recorded forward pass. `block` must have been registered on the graph
/// with shapes from `spec.param_shapes()`.
pub fn mlp_forward(g: &mut Graph, block: BlockId, spec: &MlpSpec, x: NodeId) -> Result<NodeId> {
    if g.tape.value(x).len() != spec.input_width() {
        return Err(Error::dim("mlp input", spec.input_width(), g.tape.value(x).len()));
    }
    let mut h = x;
    for l in 0..spec.layer_count() {
        let rows = spec.widths[l + 1];
        let cols = spec.widths[l];
        let w = g.block_entry_node(block, 2 * l);
        let b = g.block_entry_node(block, 2 * l + 1);
        let wx = g.tape.matvec(w, h, rows, cols)?;
        let z = g.tape.add(wx, b)?;
        h = match spec.activation_after(l) {
            Activation::Tanh => g.tape.tanh(z),
            Activation::Relu => g.tape.relu(z),
            Activation::Identity => z,
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::param::ShapeEntry;
    use crate::seeds::rng_for;
    use rand::Rng;

    #[test]
    fn zero_weights_return_bias() {
        let spec = MlpSpec::tanh(&[3, 2]).unwrap();
        let mut params = ParameterBlock::zeros(spec.param_shapes());
        params.view_mut(1).copy_from_slice(&[0.5, -1.5]);
        let y = mlp_eval(&params, &spec, &[7.0, 8.0, 9.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![2, 2], vec![]).unwrap();
        let mut params = ParameterBlock::zeros(spec.param_shapes());
        params.view_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let y = mlp_eval(&params, &spec, &[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_reports_sizes() {
        let spec = MlpSpec::tanh(&[3, 2]).unwrap();
        let params = spec.init_params(0);
        let err = mlp_eval(&params, &spec, &[1.0, 2.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 3") && msg.contains("got 2"), "{msg}");
    }

    // Independent straight-line re-evaluation of a 2-4-1 tanh net: plain
    // loops over the flat weight layout, written without mlp_eval.
    fn straight_line_2_4_1(params: &ParameterBlock, x: [f64; 2]) -> f64 {
        let w0 = params.view(0);
        let b0 = params.view(1);
        let w1 = params.view(2);
        let b1 = params.view(3);
        let mut h = [0.0f64; 4];
        for r in 0..4 {
            h[r] = (w0[r * 2] * x[0] + w0[r * 2 + 1] * x[1] + b0[r]).tanh();
        }
        let mut y = b1[0];
        for (c, hv) in h.iter().enumerate() {
            y += w1[c] * hv;
        }
        y
    }

    #[test]
    fn random_net_matches_independent_reevaluation() {
        let spec = MlpSpec::tanh(&[2, 4, 1]).unwrap();
        let mut params = spec.init_params(3);
        // nonzero biases so every term participates
        let mut rng = rng_for(3, "bias", 0);
        for i in [1usize, 3] {
            for v in params.view_mut(i).iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let x = [0.37, -1.21];
        let got = mlp_eval(&params, &spec, &x).unwrap()[0];
        let want = straight_line_2_4_1(&params, x);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn tape_forward_matches_plain_eval_bitwise() {
        let spec = MlpSpec::tanh(&[3, 5, 2]).unwrap();
        let params = spec.init_params(17);
        let x = [0.2, -0.9, 1.4];
        let plain = mlp_eval(&params, &spec, &x).unwrap();

        let mut g = Graph::new();
        let block = g.add_block(&params);
        let xn = g.input(&x);
        let y = mlp_forward(&mut g, block, &spec, xn).unwrap();
        assert_eq!(g.tape.value(y), plain.as_slice());
    }

    #[test]
    fn mismatched_block_is_rejected() {
        let spec = MlpSpec::tanh(&[3, 5, 2]).unwrap();
        let wrong = ParameterBlock::zeros(vec![ShapeEntry {
            name: "w".into(),
            dims: vec![2, 2],
        }]);
        assert!(mlp_eval(&wrong, &spec, &[0.0; 3]).is_err());
    }
}
