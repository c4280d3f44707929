//! Small numerical substrate for the backbones: embeddings, dense layers,
//! sigmoid/BCE with analytic derivatives, Adam, and a flat binary container
//! for parameters.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{contract, Error, Result};

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_pred(y_hat: f64) -> f64 {
    y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// `-[y ln y_hat + (1 - y) ln(1 - y_hat)]` with `y_hat` clamped to `[eps, 1 - eps]`.
#[inline]
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    let p = clamp_pred(y_hat);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d(bce)/d(y_hat), evaluated at the clamped prediction.
#[inline]
pub fn bce_grad(y_hat: f64, y: f64) -> f64 {
    let p = clamp_pred(y_hat);
    -y / p + (1.0 - y) / (1.0 - p)
}

/// d(bce)/d(logit) when `y_hat = sigmoid(logit)`.
#[inline]
pub fn bce_logit_grad(y_hat: f64, y: f64) -> f64 {
    y_hat - y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Row-major lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn normal<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        Self {
            rows,
            dim,
            values: (0..rows * dim).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Affine map followed by an elementwise activation. `weight` is `out x in`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn weight_row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim {
            return Err(contract(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim,
                input.len()
            )));
        }
        Ok((0..self.out_dim)
            .map(|o| {
                let z: f64 = self
                    .weight_row(o)
                    .iter()
                    .zip(input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.bias[o];
                self.activation.apply(z)
            })
            .collect())
    }

    /// Accumulates weight/bias gradients into `grad` and returns the gradient
    /// with respect to `input`. `output` must be this layer's forward output.
    pub fn backward(
        &self,
        input: &[f64],
        output: &[f64],
        upstream: &[f64],
        grad: &mut DenseLayer,
    ) -> Result<Vec<f64>> {
        if input.len() != self.in_dim
            || output.len() != self.out_dim
            || upstream.len() != self.out_dim
            || grad.in_dim != self.in_dim
            || grad.out_dim != self.out_dim
        {
            return Err(contract("dense backward shape mismatch"));
        }
        let mut input_grad = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let dz = upstream[o] * self.activation.derivative_from_output(output[o]);
            if dz == 0.0 {
                continue;
            }
            grad.bias[o] += dz;
            let w = self.weight_row(o);
            let gw = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for k in 0..self.in_dim {
                gw[k] += dz * input[k];
                input_grad[k] += dz * w[k];
            }
        }
        Ok(input_grad)
    }
}

/// Read-only view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorViewMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// A fixed, ordered collection of named tensors. Models and their gradient
/// buffers share the same layout, which is what Adam, serialization and the
/// finite-difference checks iterate over.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// Flattened copy in tensor order.
    fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

/// Adam with bias correction and optional L2 weight decay folded into the
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            step_count: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        if grads.len() != self.first_moment.len() {
            return Err(contract("optimizer state does not match parameter layout"));
        }
        for g in &grads {
            if g.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    param: g.name.clone(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.first_moment[k], &mut self.second_moment[k], grads[k].data);
            if m.len() != p.data.len() || g.len() != p.data.len() {
                return Err(contract(format!("shape mismatch in `{}`", p.name)));
            }
            for j in 0..p.data.len() {
                let gj = g[j] + self.weight_decay * p.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"CDNM";
const VERSION: u32 = 1;

/// Decoded contents of a parameter container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub dims: Vec<u64>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Layout, all little-endian: magic `CDNM`, u32 version, kind string,
/// u32 dim count + u64 dims, u32 tensor count, then per tensor a name string,
/// u32 rank, u64 shape entries and row-major f64 data. Strings are a u32
/// length followed by UTF-8 bytes.
pub fn write_container<W: Write, P: Parameters + ?Sized>(
    mut out: W,
    kind: &str,
    dims: &[u64],
    params: &P,
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut out, kind)?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        out.write_all(&d.to_le_bytes())?;
    }
    let tensors = params.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        write_str(&mut out, &t.name)?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for s in &t.shape {
            out.write_all(&(*s as u64).to_le_bytes())?;
        }
        for x in t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        what: "parameter container",
        message: message.into(),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(bad("string length out of range"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
}

pub fn read_container<R: Read>(mut src: R) -> Result<Container> {
    let mut magic = [0u8; 4];
    src.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut src)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = read_str(&mut src)?;
    let n_dims = read_u32(&mut src)?;
    let dims = (0..n_dims)
        .map(|_| read_u64(&mut src))
        .collect::<Result<Vec<_>>>()?;
    let n_tensors = read_u32(&mut src)?;
    let mut tensors = Vec::with_capacity(n_tensors as usize);
    for _ in 0..n_tensors {
        let name = read_str(&mut src)?;
        let rank = read_u32(&mut src)?;
        let shape = (0..rank)
            .map(|_| read_u64(&mut src).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            src.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((name, shape, data));
    }
    Ok(Container {
        kind,
        dims,
        tensors,
    })
}

/// Copies container tensors into `params`, requiring identical names and shapes.
pub fn load_tensors<P: Parameters + ?Sized>(params: &mut P, container: &Container) -> Result<()> {
    let shapes: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if shapes.len() != container.tensors.len() {
        return Err(bad("tensor count mismatch"));
    }
    for ((dst, (name, shape)), (src_name, src_shape, data)) in params
        .tensors_mut()
        .into_iter()
        .zip(&shapes)
        .zip(&container.tensors)
    {
        if name != src_name || shape != src_shape {
            return Err(bad(format!("expected tensor `{name}` {shape:?}, found `{src_name}` {src_shape:?}")));
        }
        dst.data.copy_from_slice(data);
    }
    Ok(())
}
