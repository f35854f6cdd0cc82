//! Two-branch encoder stack with a shared projection head, a linear fusion
//! layer and one prototype bank per head (x, y, fused). All heads share the
//! same class-index space.
//!
//! Forward and backward passes are written out by hand; every intermediate
//! needed by the backward pass is kept in [`ViewForward`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngSeed, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_u: f64,
    pub tau_s: f64,
    pub tau_c: f64,
    pub tau_p: f64,
    /// Sharper temperature for self-distillation targets.
    pub tau_q: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            tau_u: 0.07,
            tau_s: 0.07,
            tau_c: 0.07,
            tau_p: 0.1,
            tau_q: 0.05,
        }
    }
}

impl Temperatures {
    fn as_array(&self) -> [f64; 5] {
        [self.tau_u, self.tau_s, self.tau_c, self.tau_p, self.tau_q]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_y: usize,
    /// Hidden widths of each encoder; empty means a single affine map.
    pub hidden: Vec<usize>,
    pub d_h: usize,
    pub d_z: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub temps: Temperatures,
}

impl ModelConfig {
    pub fn new(d_x: usize, d_y: usize, num_classes: usize) -> Self {
        ModelConfig {
            d_x,
            d_y,
            hidden: vec![64],
            d_h: 32,
            d_z: 16,
            num_classes,
            activation: Activation::Tanh,
            temps: Temperatures::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.d_x, self.d_y, self.d_h, self.d_z, self.num_classes];
        if sizes.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes and class count must be positive".into()));
        }
        if let Some(t) = self.temps.as_array().iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidConfig(format!("temperature {t} must be positive")));
        }
        Ok(())
    }
}

/// `y = x Wᵀ + b` applied to the rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vector,
}

impl Affine {
    fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Affine {
            weight: Matrix::from_fn(output, input, |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
            bias: Vector::zeros(output),
        }
    }

    fn zeros(input: usize, output: usize) -> Self {
        Affine {
            weight: Matrix::zeros(output, input),
            bias: Vector::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Affine {
            weight: Matrix::identity(dim, dim),
            bias: Vector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x * self.weight.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[j]);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &Matrix, d_out: &Matrix, grad: &mut Affine) -> Matrix {
        grad.weight += d_out.transpose() * x;
        for (j, col) in d_out.column_iter().enumerate() {
            grad.bias[j] += col.sum();
        }
        d_out * &self.weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Affine>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    /// Input of each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Matrix>,
}

impl Encoder {
    fn init(input: usize, hidden: &[usize], output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Encoder {
            layers: sizes.windows(2).map(|w| Affine::init(w[0], w[1], rng)).collect(),
            activation,
        }
    }

    fn zeros_like(&self) -> Self {
        Encoder {
            layers: self
                .layers
                .iter()
                .map(|l| Affine::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_traced(x).0
    }

    fn forward_traced(&self, x: &Matrix) -> (Matrix, EncoderTrace) {
        let mut trace = EncoderTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&cur);
            trace.inputs.push(cur);
            cur = if l < last {
                let act = self.activation;
                let h = a.map(|v| act.apply(v));
                trace.pre.push(a);
                h
            } else {
                a
            };
        }
        (cur, trace)
    }

    fn backward(&self, trace: &EncoderTrace, d_out: &Matrix, grad: &mut Encoder) {
        let mut d = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            if l < self.layers.len() - 1 {
                let act = self.activation;
                d.zip_apply(&trace.pre[l], |g, a| *g *= act.derivative(a));
            }
            let d_in = self.layers[l].backward(&trace.inputs[l], &d, &mut grad.layers[l]);
            if l > 0 {
                d = d_in;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub config: ModelConfig,
    pub enc_x: Encoder,
    pub enc_y: Encoder,
    /// Shared projection `h → z`.
    pub proj: Affine,
    /// `[h_x | h_y] → h_f`
    pub fusion: Affine,
    /// Unit-norm prototype rows, `K × d_h`.
    pub proto_x: Matrix,
    pub proto_y: Matrix,
    pub proto_f: Matrix,
}

fn unit_rows(k: usize, d: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    normalize_rows_in_place(&mut m);
    m
}

pub(crate) fn normalize_rows_in_place(m: &mut Matrix) {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Weights scaled by `1/√fan_in`, zero biases, prototypes uniform on the sphere.
pub fn init_model(config: &ModelConfig, seed: RngSeed) -> Result<EncoderStack> {
    config.validate()?;
    let mut rng = seed.rng();
    let c = config;
    let enc_x = Encoder::init(c.d_x, &c.hidden, c.d_h, c.activation, &mut rng);
    let enc_y = Encoder::init(c.d_y, &c.hidden, c.d_h, c.activation, &mut rng);
    let proj = Affine::init(c.d_h, c.d_z, &mut rng);
    let fusion = Affine::init(2 * c.d_h, c.d_h, &mut rng);
    let proto_x = unit_rows(c.num_classes, c.d_h, &mut rng);
    let proto_y = unit_rows(c.num_classes, c.d_h, &mut rng);
    let proto_f = unit_rows(c.num_classes, c.d_h, &mut rng);
    Ok(EncoderStack {
        config: config.clone(),
        enc_x,
        enc_y,
        proj,
        fusion,
        proto_x,
        proto_y,
        proto_f,
    })
}

impl EncoderStack {
    /// Same layout, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        EncoderStack {
            config: self.config.clone(),
            enc_x: self.enc_x.zeros_like(),
            enc_y: self.enc_y.zeros_like(),
            proj: Affine::zeros(self.proj.input_dim(), self.proj.output_dim()),
            fusion: Affine::zeros(self.fusion.input_dim(), self.fusion.output_dim()),
            proto_x: Matrix::zeros(self.proto_x.nrows(), self.proto_x.ncols()),
            proto_y: Matrix::zeros(self.proto_y.nrows(), self.proto_y.ncols()),
            proto_f: Matrix::zeros(self.proto_f.nrows(), self.proto_f.ncols()),
        }
    }

    /// Column-major parameter buffers with their `(rows, cols)` shapes, in
    /// declaration order: encoder x layers (weight, bias), encoder y layers,
    /// projection, fusion, prototypes x, y, fused.
    pub fn tensors(&self) -> Vec<(&[f64], (usize, usize))> {
        let mut out: Vec<(&[f64], (usize, usize))> = Vec::new();
        for enc in [&self.enc_x, &self.enc_y] {
            for l in &enc.layers {
                out.push((l.weight.as_slice(), l.weight.shape()));
                out.push((l.bias.as_slice(), (l.bias.len(), 1)));
            }
        }
        for a in [&self.proj, &self.fusion] {
            out.push((a.weight.as_slice(), a.weight.shape()));
            out.push((a.bias.as_slice(), (a.bias.len(), 1)));
        }
        for p in [&self.proto_x, &self.proto_y, &self.proto_f] {
            out.push((p.as_slice(), p.shape()));
        }
        out
    }

    /// Mutable parameter buffers, same order as [`EncoderStack::tensors`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for enc in [&mut self.enc_x, &mut self.enc_y] {
            for l in enc.layers.iter_mut() {
                out.push(l.weight.as_mut_slice());
                out.push(l.bias.as_mut_slice());
            }
        }
        for a in [&mut self.proj, &mut self.fusion] {
            out.push(a.weight.as_mut_slice());
            out.push(a.bias.as_mut_slice());
        }
        out.push(self.proto_x.as_mut_slice());
        out.push(self.proto_y.as_mut_slice());
        out.push(self.proto_f.as_mut_slice());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.tensors().into_iter().map(|(p, _)| p).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &EncoderStack) {
        for (p, g) in self.params_mut().into_iter().zip(other.params()) {
            for (a, b) in p.iter_mut().zip(g) {
                *a += alpha * b;
            }
        }
    }

    pub fn normalize_prototypes(&mut self) {
        normalize_rows_in_place(&mut self.proto_x);
        normalize_rows_in_place(&mut self.proto_y);
        normalize_rows_in_place(&mut self.proto_f);
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

/// Softmax of `hᵀc_k / τ` over the prototype rows, max-subtracted.
pub fn classify(h: &[f64], prototypes: &Matrix, tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = prototypes
        .row_iter()
        .map(|c| c.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    softmax_vec(&logits)
}

pub(crate) fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Linear fusion of one pair of encoder features.
pub fn fuse(model: &EncoderStack, h_x: &[f64], h_y: &[f64]) -> Result<Vec<f64>> {
    let d = model.config.d_h;
    if h_x.len() != d || h_y.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "fuse expects two vectors of length {d}, got {} and {}",
            h_x.len(),
            h_y.len()
        )));
    }
    let cat = Matrix::from_row_iterator(1, 2 * d, h_x.iter().chain(h_y).copied());
    Ok(model.fusion.forward(&cat).row(0).iter().copied().collect())
}

/// Outputs of one head for one view of a batch.
#[derive(Debug, Clone)]
pub struct BranchOut {
    pub h: Matrix,
    /// `h / ‖h‖`, the input of the classifier and of the cross-modal loss.
    pub h_norm: Matrix,
    pub z_raw: Matrix,
    /// `norm(g(h))`
    pub z: Matrix,
    /// `h_norm Cᵀ / τ_p`
    pub logits: Matrix,
    pub p: Matrix,
}

#[derive(Debug, Clone)]
pub struct ViewForward {
    pub x: BranchOut,
    pub y: BranchOut,
    pub fused: BranchOut,
    concat: Matrix,
    trace_x: EncoderTrace,
    trace_y: EncoderTrace,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub view: ViewForward,
    pub view_prime: ViewForward,
}

/// Two augmented views of each modality for one batch.
#[derive(Debug, Clone)]
pub struct BatchViews {
    pub x: Matrix,
    pub x_prime: Matrix,
    pub y: Matrix,
    pub y_prime: Matrix,
}

pub(crate) fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm().max(1e-12);
        row /= n;
    }
    out
}

/// Backward of row normalisation: `(du − u (u·du)) / ‖v‖`.
pub(crate) fn normalize_rows_backward(v: &Matrix, u: &Matrix, du: &Matrix) -> Matrix {
    let mut out = du.clone();
    for i in 0..v.nrows() {
        let n = v.row(i).norm().max(1e-12);
        let dot = u.row(i).dot(&du.row(i));
        for j in 0..v.ncols() {
            out[(i, j)] = (du[(i, j)] - u[(i, j)] * dot) / n;
        }
    }
    out
}

impl EncoderStack {
    fn head(&self, h: Matrix, prototypes: &Matrix) -> BranchOut {
        let h_norm = normalize_rows(&h);
        let z_raw = self.proj.forward(&h);
        let z = normalize_rows(&z_raw);
        let logits = &h_norm * prototypes.transpose() / self.config.temps.tau_p;
        let p = softmax_rows(&logits);
        BranchOut {
            h,
            h_norm,
            z_raw,
            z,
            logits,
            p,
        }
    }

    fn check_inputs(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.ncols() != self.config.d_x || y.ncols() != self.config.d_y || x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "model expects ({}, {}) features per pair, got {:?} and {:?}",
                self.config.d_x,
                self.config.d_y,
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass of one view.
    pub fn forward_view(&self, x: &Matrix, y: &Matrix) -> Result<ViewForward> {
        self.check_inputs(x, y)?;
        let (h_x, trace_x) = self.enc_x.forward_traced(x);
        let (h_y, trace_y) = self.enc_y.forward_traced(y);
        let d = self.config.d_h;
        let mut concat = Matrix::zeros(x.nrows(), 2 * d);
        concat.columns_mut(0, d).copy_from(&h_x);
        concat.columns_mut(d, d).copy_from(&h_y);
        let h_f = self.fusion.forward(&concat);
        Ok(ViewForward {
            x: self.head(h_x, &self.proto_x),
            y: self.head(h_y, &self.proto_y),
            fused: self.head(h_f, &self.proto_f),
            concat,
            trace_x,
            trace_y,
        })
    }
}

pub fn forward(model: &EncoderStack, views: &BatchViews) -> Result<BatchForward> {
    Ok(BatchForward {
        view: model.forward_view(&views.x, &views.y)?,
        view_prime: model.forward_view(&views.x_prime, &views.y_prime)?,
    })
}

/// Loss gradients with respect to one head's outputs.
#[derive(Debug, Clone)]
pub struct BranchGrad {
    pub h_norm: Matrix,
    pub z: Matrix,
    pub logits: Matrix,
}

impl BranchGrad {
    pub fn zeros(rows: usize, d_h: usize, d_z: usize, k: usize) -> Self {
        BranchGrad {
            h_norm: Matrix::zeros(rows, d_h),
            z: Matrix::zeros(rows, d_z),
            logits: Matrix::zeros(rows, k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewGrad {
    pub x: BranchGrad,
    pub y: BranchGrad,
    pub fused: BranchGrad,
}

impl ViewGrad {
    pub fn zeros(model: &EncoderStack, rows: usize) -> Self {
        let c = &model.config;
        let g = || BranchGrad::zeros(rows, c.d_h, c.d_z, c.num_classes);
        ViewGrad {
            x: g(),
            y: g(),
            fused: g(),
        }
    }
}

impl EncoderStack {
    /// Gradient of one head back to its raw feature `h`; accumulates the
    /// projection and prototype gradients.
    fn head_backward(&self, out: &BranchOut, g: &BranchGrad, prototypes: &Matrix, d_proto: &mut Matrix, grad_proj: &mut Affine) -> Matrix {
        let tau = self.config.temps.tau_p;
        let d_zraw = normalize_rows_backward(&out.z_raw, &out.z, &g.z);
        let mut d_h = self.proj.backward(&out.h, &d_zraw, grad_proj);
        *d_proto += g.logits.transpose() * &out.h_norm / tau;
        let d_hn = &g.h_norm + &g.logits * prototypes / tau;
        d_h += normalize_rows_backward(&out.h, &out.h_norm, &d_hn);
        d_h
    }

    /// Accumulates parameter gradients of one view into `grads`.
    pub fn backward_view(&self, fwd: &ViewForward, g: &ViewGrad, grads: &mut EncoderStack) {
        let d = self.config.d_h;
        let d_hf = self.head_backward(&fwd.fused, &g.fused, &self.proto_f, &mut grads.proto_f, &mut grads.proj);
        let d_concat = self.fusion.backward(&fwd.concat, &d_hf, &mut grads.fusion);

        let mut d_hx = self.head_backward(&fwd.x, &g.x, &self.proto_x, &mut grads.proto_x, &mut grads.proj);
        d_hx += d_concat.columns(0, d);
        let mut d_hy = self.head_backward(&fwd.y, &g.y, &self.proto_y, &mut grads.proto_y, &mut grads.proj);
        d_hy += d_concat.columns(d, d);

        self.enc_x.backward(&fwd.trace_x, &d_hx, &mut grads.enc_x);
        self.enc_y.backward(&fwd.trace_y, &d_hy, &mut grads.enc_y);
    }
}

const MAGIC: &[u8; 6] = b"MMGCD1";

fn row_major(buf: &[f64], (rows, cols): (usize, usize)) -> impl Iterator<Item = f64> + '_ {
    (0..rows).flat_map(move |i| (0..cols).map(move |j| buf[j * rows + i]))
}

/// Binary checkpoint: magic `MMGCD1`, little-endian `u32` shape header
/// (`d_x, d_y, n_hidden, hidden..., d_h, d_z, K, activation`), five `f32`
/// temperatures, then every tensor as row-major `f32` in declaration order.
pub fn save_checkpoint(model: &EncoderStack, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let c = &model.config;
    let mut header = vec![c.d_x as u32, c.d_y as u32, c.hidden.len() as u32];
    header.extend(c.hidden.iter().map(|&h| h as u32));
    header.extend([c.d_h as u32, c.d_z as u32, c.num_classes as u32, c.activation.code()]);
    w.write_all(MAGIC).map_err(io)?;
    for v in header {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for t in c.temps.as_array() {
        w.write_all(&(t as f32).to_le_bytes()).map_err(io)?;
    }
    for (buf, shape) in model.tensors() {
        for v in row_major(buf, shape) {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderStack> {
    let io = |e| Error::io(path, e);
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?)
        .read_to_end(&mut bytes)
        .map_err(io)?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing MMGCD1 magic"));
    }
    let mut pos = MAGIC.len();
    let mut take4 = || -> Result<[u8; 4]> {
        let chunk = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| bad("truncated checkpoint"))?;
        pos += 4;
        Ok(chunk.try_into().unwrap())
    };
    let mut u32_next = || take4().map(|b| u32::from_le_bytes(b) as usize);
    let d_x = u32_next()?;
    let d_y = u32_next()?;
    let n_hidden = u32_next()?;
    if n_hidden > 1024 {
        return Err(bad("implausible hidden layer count"));
    }
    let hidden = (0..n_hidden).map(|_| u32_next()).collect::<Result<Vec<_>>>()?;
    let d_h = u32_next()?;
    let d_z = u32_next()?;
    let num_classes = u32_next()?;
    let activation = Activation::from_code(u32_next()? as u32).ok_or_else(|| bad("unknown activation code"))?;
    let mut f32_next = || take4().map(|b| f32::from_le_bytes(b) as f64);
    let temps = Temperatures {
        tau_u: f32_next()?,
        tau_s: f32_next()?,
        tau_c: f32_next()?,
        tau_p: f32_next()?,
        tau_q: f32_next()?,
    };
    let config = ModelConfig {
        d_x,
        d_y,
        hidden,
        d_h,
        d_z,
        num_classes,
        activation,
        temps,
    };
    config.validate().map_err(|e| bad(&e.to_string()))?;
    let mut model = init_model(&config, RngSeed(0))?;
    let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| t.1).collect();
    let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if bytes.len() - pos != 4 * expected {
        return Err(bad(&format!(
            "payload holds {} bytes, shapes need {}",
            bytes.len() - pos,
            4 * expected
        )));
    }
    for (buf, (rows, cols)) in model.params_mut().into_iter().zip(shapes) {
        // Buffers are column-major; the payload is row-major.
        for i in 0..rows {
            for j in 0..cols {
                let b: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
                pos += 4;
                buf[j * rows + i] = f32::from_le_bytes(b) as f64;
            }
        }
    }
    Ok(model)
}
