//! Flat parameter storage for every trainable network in the crate.
//!
//! A [`ParameterBlock`] is a single flat `f64` vector plus shape metadata, so
//! optimizers and the finite-difference checker can treat any network —
//! discriminator, gating net, expert, decoder — as one coordinate vector.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ShapeEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat `f64` parameter vector with named shape metadata and the seed used
/// at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub values: Vec<f64>,
    pub shapes: Vec<ShapeEntry>,
    pub rng_seed: u64,
}

impl ParameterBlock {
    /// All-zero block with the given shapes.
    pub fn zeros(shapes: Vec<ShapeEntry>) -> Self {
        let total = shapes.iter().map(ShapeEntry::len).sum();
        ParameterBlock {
            values: vec![0.0; total],
            shapes,
            rng_seed: 0,
        }
    }

    pub fn total_len(&self) -> usize {
        self.values.len()
    }

    /// Byte offset (in elements) of shape entry `idx`.
    pub fn offset(&self, idx: usize) -> usize {
        self.shapes[..idx].iter().map(ShapeEntry::len).sum()
    }

    pub fn view(&self, idx: usize) -> &[f64] {
        let off = self.offset(idx);
        &self.values[off..off + self.shapes[idx].len()]
    }

    pub fn view_mut(&mut self, idx: usize) -> &mut [f64] {
        let off = self.offset(idx);
        let len = self.shapes[idx].len();
        &mut self.values[off..off + len]
    }

    pub fn entry_named(&self, name: &str) -> Option<usize> {
        self.shapes.iter().position(|s| s.name == name)
    }

    /// Shape metadata must account for every stored value.
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.shapes.iter().map(ShapeEntry::len).sum();
        if total != self.values.len() {
            return Err(Error::dim("parameter block shapes", total, self.values.len()));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter block value at index {i}")));
        }
        Ok(())
    }

    /// Serialize as a flat little-endian f64 array plus a JSON sidecar with
    /// shapes and seed. `base` is the path without extension.
    pub fn save(&self, base: &Path) -> Result<()> {
        let sidecar = Sidecar {
            shapes: self.shapes.clone(),
            rng_seed: self.rng_seed,
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(base.with_extension("json"), json)?;

        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.write_all(&v.to_le_bytes())?;
        }
        std::fs::write(base.with_extension("bin"), bytes)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(base.with_extension("json"))?;
        let sidecar: Sidecar = serde_json::from_str(&json)?;

        let mut file = std::fs::File::open(base.with_extension("bin"))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse {
                path: base.display().to_string(),
                detail: format!("binary length {} is not a multiple of 8", bytes.len()),
            });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();

        let block = ParameterBlock {
            values,
            shapes: sidecar.shapes,
            rng_seed: sidecar.rng_seed,
        };
        block.validate()?;
        Ok(block)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shapes: Vec<ShapeEntry>,
    rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Dense multilayer perceptron description. `widths[0]` is the input width,
/// the last entry the output width; the final layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// One activation per hidden layer; length `widths.len() - 2`.
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("mlp spec needs at least one layer"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("mlp widths must be >= 1"));
        }
        if activations.len() + 2 != widths.len() {
            return Err(Error::dim(
                "mlp hidden activations",
                widths.len() - 2,
                activations.len(),
            ));
        }
        Ok(MlpSpec { widths, activations })
    }

    /// All hidden layers tanh.
    pub fn tanh(widths: &[usize]) -> Result<Self> {
        let acts = vec![Activation::Tanh; widths.len().saturating_sub(2)];
        MlpSpec::new(widths.to_vec(), acts)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    /// Activation applied after layer `l` (identity for the final layer).
    pub fn activation_after(&self, l: usize) -> Activation {
        if l + 1 == self.layer_count() {
            Activation::Identity
        } else {
            self.activations[l]
        }
    }

    /// Shape entries in tape registration order: w0, b0, w1, b1, ...
    pub fn param_shapes(&self) -> Vec<ShapeEntry> {
        let mut shapes = Vec::with_capacity(2 * self.layer_count());
        for l in 0..self.layer_count() {
            shapes.push(ShapeEntry {
                name: format!("w{l}"),
                dims: vec![self.widths[l + 1], self.widths[l]],
            });
            shapes.push(ShapeEntry {
                name: format!("b{l}"),
                dims: vec![self.widths[l + 1]],
            });
        }
        shapes
    }

    /// Seeded Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`),
    /// zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterBlock {
        let mut block = ParameterBlock::zeros(self.param_shapes());
        block.rng_seed = seed;
        let mut rng = rng_for(seed, "glorot", 0);
        for l in 0..self.layer_count() {
            let fan_in = self.widths[l] as f64;
            let fan_out = self.widths[l + 1] as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            let w = block.view_mut(2 * l);
            for v in w.iter_mut() {
                *v = rng.gen_range(-a..a);
            }
        }
        block
    }
}
