//! Small MLP encoder with exact analytic gradients.
//!
//! Hidden layers use tanh, the output layer is linear. The forward pass
//! retains pre-activations and activations so the backward pass can apply
//! the chain rule without recomputation.

use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{dot_slices, Matrix, Vector};

/// Magic bytes of the parameter checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BFE1";

#[derive(Debug)]
pub enum EncoderError {
    /// Fewer than two layer sizes, or a zero layer size.
    InvalidLayerSizes(Vec<usize>),
    /// Input or gradient dimension does not match the architecture.
    DimensionMismatch { expected: usize, got: usize },
    /// A trace produced by a different architecture was passed to backward.
    TraceMismatch,
    /// Checkpoint file does not start with [`CHECKPOINT_MAGIC`].
    BadMagic([u8; 4]),
    /// Checkpoint payload is truncated or contains non-finite parameters.
    CorruptCheckpoint(String),
    Io(io::Error),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::InvalidLayerSizes(sizes) => {
                write!(f, "need at least two positive layer sizes, got {sizes:?}")
            }
            EncoderError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            EncoderError::TraceMismatch => write!(f, "forward trace does not match encoder shape"),
            EncoderError::BadMagic(m) => write!(f, "bad checkpoint magic {m:?}"),
            EncoderError::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            EncoderError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for EncoderError {}

impl From<io::Error> for EncoderError {
    fn from(e: io::Error) -> Self {
        EncoderError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in` weight matrix.
    pub weight: Matrix,
    pub bias: Vector,
}

/// MLP encoder `f(x; theta)` mapping `input_dim` features to a
/// `D`-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer intermediate values retained by [`MlpEncoder::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vector,
    /// Activation output of each layer (tanh for hidden, identity for last).
    activations: Vec<Vector>,
}

/// Parameter gradients mirroring the encoder layout.
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub layers: Vec<Layer>,
}

impl EncoderGradients {
    pub fn zeros_like(enc: &MlpEncoder) -> Self {
        Self {
            layers: enc
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Vector::zeros(l.bias.dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGradients) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.as_mut_slice().iter_mut().zip(b.bias.as_slice()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            for x in l.weight.as_mut_slice() {
                *x *= c;
            }
            for x in l.bias.as_mut_slice() {
                *x *= c;
            }
        }
    }

    /// Flat views over every gradient buffer, in parameter order.
    pub fn flat_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }
}

impl MlpEncoder {
    /// Initializes weights uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// and biases to zero, deterministically from `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(EncoderError::InvalidLayerSizes(layer_sizes.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weight: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                bias: Vector::zeros(fan_out),
            });
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), layers })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Output (embedding) dimension D.
    pub fn embedding_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.dim())
            .sum()
    }

    /// Forward pass returning the embedding and the trace needed by
    /// [`MlpEncoder::backward`].
    pub fn forward(&self, x: &Vector) -> Result<(Vector, ForwardTrace)> {
        if x.dim() != self.input_dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.dim(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = affine(&layer.weight, &layer.bias, cur.as_slice());
            if idx != last {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            cur = Vector::raw(z);
            activations.push(cur.clone());
        }
        let trace = ForwardTrace { input: x.clone(), activations };
        Ok((cur, trace))
    }

    /// Forward pass without building a trace; used by evaluation.
    pub fn embed(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.input_dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.dim(),
            });
        }
        let last = self.layers.len() - 1;
        let mut cur = x.as_slice().to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = affine(&layer.weight, &layer.bias, &cur);
            if idx != last {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            cur = z;
        }
        Ok(Vector::raw(cur))
    }

    /// Backpropagates `grad_e = dL/de` through the trace, returning the
    /// gradient of every parameter.
    pub fn backward(&self, trace: &ForwardTrace, grad_e: &Vector) -> Result<EncoderGradients> {
        if grad_e.dim() != self.embedding_dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.embedding_dim(),
                got: grad_e.dim(),
            });
        }
        if trace.activations.len() != self.layers.len()
            || trace.input.dim() != self.input_dim()
            || trace
                .activations
                .iter()
                .zip(&self.layers)
                .any(|(a, l)| a.dim() != l.bias.dim())
        {
            return Err(EncoderError::TraceMismatch);
        }

        let mut grads = EncoderGradients::zeros_like(self);
        let last = self.layers.len() - 1;
        // delta = dL/dz for the current layer; the output layer is linear.
        let mut delta = grad_e.as_slice().to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer_input = if idx == 0 {
                trace.input.as_slice()
            } else {
                trace.activations[idx - 1].as_slice()
            };
            if idx != last {
                // tanh'(z) expressed through the stored activation a = tanh(z).
                for (d, a) in delta.iter_mut().zip(trace.activations[idx].as_slice()) {
                    *d *= 1.0 - a * a;
                }
            }
            let g = &mut grads.layers[idx];
            let cols = layer_input.len();
            for (r, d) in delta.iter().enumerate() {
                let row = &mut g.weight.as_mut_slice()[r * cols..(r + 1) * cols];
                for (w, x) in row.iter_mut().zip(layer_input) {
                    *w += d * x;
                }
            }
            for (b, d) in g.bias.as_mut_slice().iter_mut().zip(&delta) {
                *b += d;
            }
            if idx > 0 {
                // dL/da_{idx-1} = W^T delta
                let w = &self.layers[idx].weight;
                let mut prev = vec![0.0; w.cols()];
                for (r, d) in delta.iter().enumerate() {
                    for (p, wv) in prev.iter_mut().zip(w.row(r)) {
                        *p += d * wv;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    /// Mutable flat views over every parameter buffer, in layer order
    /// (weights row-major then bias, layer by layer).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            let Layer { weight, bias } = layer;
            out.push(weight.as_mut_slice());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
        }
        out
    }

    /// Writes the checkpoint: magic `BFE1`, u32-LE layer count, u32-LE layer
    /// sizes, then every parameter as little-endian f64 in layer order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.weight.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in layer.bias.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EncoderError::BadMagic(magic));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count < 2 {
            return Err(EncoderError::CorruptCheckpoint(format!(
                "layer count {count} below 2"
            )));
        }
        let mut layer_sizes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let s = u32::from_le_bytes(u32buf) as usize;
            if s == 0 {
                return Err(EncoderError::CorruptCheckpoint("zero layer size".into()));
            }
            layer_sizes.push(s);
        }
        let mut f64buf = [0u8; 8];
        let mut layers = Vec::with_capacity(count - 1);
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let mut wdata = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                r.read_exact(&mut f64buf)?;
                wdata.push(f64::from_le_bytes(f64buf));
            }
            let mut bdata = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                r.read_exact(&mut f64buf)?;
                bdata.push(f64::from_le_bytes(f64buf));
            }
            let weight = Matrix::new(fan_out, fan_in, wdata)
                .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
            let bias = Vector::new(bdata)
                .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layer_sizes, layers })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = File::create(path)?;
        self.write_checkpoint(io::BufWriter::new(f))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = File::open(path)?;
        Self::read_checkpoint(io::BufReader::new(f))
    }
}

fn affine(weight: &Matrix, bias: &Vector, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(weight.rows());
    for i in 0..weight.rows() {
        out.push(dot_slices(weight.row(i), x) + bias.as_slice()[i]);
    }
    out
}
