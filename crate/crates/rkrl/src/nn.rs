//! Fixed-topology feed-forward Q-network with analytic gradients.
//!
//! Weights live in one flat vector so that the filter's covariance indices
//! stay aligned with network parameters permanently. Flattening order is
//! layer-major: for each layer, weights in row-major order (one row per
//! output unit), then that layer's biases. For the default (4, [20, 20], 2)
//! shape this gives (4*20+20) + (20*20+20) + (20*2+2) = 562 parameters.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flattened network parameters.
pub type WeightVector = DVector<f64>;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"RKQNET01";

/// Hidden-layer activation. Output layer is always linear so Q estimates
/// stay unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Byte/index layout of one layer inside the flat weight vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Offset of the row-major (out_dim x in_dim) weight block.
    pub weight_offset: usize,
    /// Offset of the bias block (out_dim entries).
    pub bias_offset: usize,
}

impl Topology {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTopology(
                "all layer dimensions must be at least 1".into(),
            ));
        }
        Ok(Topology {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
        })
    }

    /// The cart-pole network: 4 inputs, two tanh layers of 20, 2 outputs.
    pub fn cartpole_default() -> Self {
        Topology::new(4, vec![20, 20], 2).expect("static dims")
    }

    /// Per-layer (in, out) pairs, input to output.
    fn dims(&self) -> Vec<(usize, usize)> {
        let mut all = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            all.push((prev, h));
            prev = h;
        }
        all.push((prev, self.output_dim));
        all
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        for (in_dim, out_dim) in self.dims() {
            specs.push(LayerSpec {
                in_dim,
                out_dim,
                weight_offset: offset,
                bias_offset: offset + in_dim * out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        specs
    }

    /// Total parameter count n = sum over layers of in*out + out.
    pub fn weight_count(&self) -> usize {
        self.dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Largest layer width, used to size scratch buffers.
    fn max_width(&self) -> usize {
        self.dims()
            .iter()
            .flat_map(|&(i, o)| [i, o])
            .max()
            .unwrap_or(0)
    }

    /// Draws every parameter i.i.d. uniform on [-scale, scale], in flattening
    /// order, from a ChaCha stream seeded with `seed`.
    pub fn init_weights(&self, seed: u64, scale: f64) -> Result<WeightVector> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidArgument {
                what: "init scale",
                message: format!("must be finite and non-negative, got {scale}"),
            });
        }
        let n = self.weight_count();
        if scale == 0.0 {
            return Ok(DVector::zeros(n));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DVector::from_fn(n, |_, _| rng.random_range(-scale..=scale)))
    }

    fn check_weights(&self, weights: &WeightVector) -> Result<()> {
        let n = self.weight_count();
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                what: "weight vector",
                expected: n,
                got: weights.len(),
            });
        }
        Ok(())
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_dim,
                got: state.len(),
            });
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "network input",
            });
        }
        Ok(())
    }

    /// Forward pass: tanh on hidden layers, identity on the output layer.
    /// Returns one Q value per action.
    pub fn q_values(&self, weights: &WeightVector, state: &[f64]) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        self.check_state(state)?;
        let specs = self.layers();
        let last = specs.len() - 1;
        let w = weights.as_slice();

        let mut cur = state.to_vec();
        let mut next = vec![0.0; self.max_width()];
        for (l, spec) in specs.iter().enumerate() {
            affine(w, spec, &cur, &mut next[..spec.out_dim]);
            if l < last {
                for v in &mut next[..spec.out_dim] {
                    *v = v.tanh();
                }
            }
            cur.clear();
            cur.extend_from_slice(&next[..spec.out_dim]);
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "network output",
            });
        }
        Ok(cur)
    }

    /// Gradient of Q(state, action) with respect to the full flat weight
    /// vector, by reverse accumulation. Same flattening order as the weights.
    pub fn q_gradient(
        &self,
        weights: &WeightVector,
        state: &[f64],
        action: usize,
    ) -> Result<WeightVector> {
        self.check_weights(weights)?;
        self.check_state(state)?;
        if action >= self.output_dim {
            return Err(Error::ActionOutOfRange {
                action,
                n_actions: self.output_dim,
            });
        }
        let specs = self.layers();
        let last = specs.len() - 1;
        let w = weights.as_slice();

        // Forward, keeping each layer's post-activation output.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(specs.len() + 1);
        acts.push(state.to_vec());
        for (l, spec) in specs.iter().enumerate() {
            let mut out = vec![0.0; spec.out_dim];
            affine(w, spec, &acts[l], &mut out);
            if l < last {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }

        // Backward: delta holds dQ/d(pre-activation) of the current layer.
        let mut grad = DVector::zeros(self.weight_count());
        let g = grad.as_mut_slice();
        let mut delta = vec![0.0; specs[last].out_dim];
        delta[action] = 1.0;
        for l in (0..specs.len()).rev() {
            let spec = &specs[l];
            let input = &acts[l];
            for j in 0..spec.out_dim {
                let d = delta[j];
                g[spec.bias_offset + j] = d;
                let row = &mut g[spec.weight_offset + j * spec.in_dim..][..spec.in_dim];
                for (gi, xi) in row.iter_mut().zip(input) {
                    *gi = d * xi;
                }
            }
            if l > 0 {
                // Propagate through W_l, then through the previous tanh.
                let mut prev = vec![0.0; spec.in_dim];
                for j in 0..spec.out_dim {
                    let d = delta[j];
                    let row = &w[spec.weight_offset + j * spec.in_dim..][..spec.in_dim];
                    for (p, wji) in prev.iter_mut().zip(row) {
                        *p += d * wji;
                    }
                }
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok(grad)
    }

    /// Splits a flat vector into per-layer (weights, biases) blocks.
    pub fn unflatten(&self, weights: &WeightVector) -> Result<Vec<(Vec<Vec<f64>>, Vec<f64>)>> {
        self.check_weights(weights)?;
        let w = weights.as_slice();
        Ok(self
            .layers()
            .iter()
            .map(|spec| {
                let rows = (0..spec.out_dim)
                    .map(|j| w[spec.weight_offset + j * spec.in_dim..][..spec.in_dim].to_vec())
                    .collect();
                let biases = w[spec.bias_offset..][..spec.out_dim].to_vec();
                (rows, biases)
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> WeightVector {
        let mut flat = Vec::with_capacity(self.weight_count());
        for (rows, biases) in layers {
            for row in rows {
                flat.extend_from_slice(row);
            }
            flat.extend_from_slice(biases);
        }
        DVector::from_vec(flat)
    }
}

/// out = W x + b for one layer, reading from the flat weight slice.
fn affine(w: &[f64], spec: &LayerSpec, input: &[f64], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[spec.weight_offset + j * spec.in_dim..][..spec.in_dim];
        let mut acc = w[spec.bias_offset + j];
        for (wi, xi) in row.iter().zip(input) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adam optimizer state over the flat weight vector.
///
/// `step` expects the ASCENT direction (td_error * grad Q) and adds the
/// Adam-scaled step to the weights.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: DVector<f64>,
    second_moment: DVector<f64>,
    step_count: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, alpha: f64) -> Self {
        AdamState {
            first_moment: DVector::zeros(n),
            second_moment: DVector::zeros(n),
            step_count: 0,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, weights: &mut WeightVector, ascent: &DVector<f64>) -> Result<()> {
        let n = self.first_moment.len();
        if ascent.len() != n || weights.len() != n {
            return Err(Error::DimensionMismatch {
                what: "adam step",
                expected: n,
                got: ascent.len(),
            });
        }
        if ascent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "gradient" });
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..n {
            let g = ascent[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            weights[i] += self.alpha * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Writes weights as magic "RKQNET01", u32 dim count, the layer dims
/// (input, hidden..., output) as u32, then the flat values as f64, all
/// little-endian.
pub fn save_weights(path: &Path, topology: &Topology, weights: &WeightVector) -> Result<()> {
    topology.check_weights(weights)?;
    let mut dims = vec![topology.input_dim as u32];
    dims.extend(topology.hidden_dims.iter().map(|&d| d as u32));
    dims.push(topology.output_dim as u32);

    let mut buf = Vec::with_capacity(8 + 4 + dims.len() * 4 + weights.len() * 8);
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in weights.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(Topology, WeightVector)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::checkpoint(path, "truncated file"));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    if take(&mut cursor, 8)? != WEIGHTS_MAGIC {
        return Err(Error::checkpoint(path, "bad magic (not a weights file)"));
    }
    let dim_count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    if dim_count < 2 {
        return Err(Error::checkpoint(path, "needs at least input and output dims"));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        dims.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
    }
    let topology = Topology::new(dims[0], dims[1..dim_count - 1].to_vec(), dims[dim_count - 1])
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let n = topology.weight_count();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(Error::checkpoint(path, "trailing bytes after weights"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::checkpoint(path, "non-finite weight value"));
    }
    Ok((topology, DVector::from_vec(values)))
}
