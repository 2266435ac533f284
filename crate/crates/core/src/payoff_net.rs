//! Black-box payoff V(θ, ψ, κ) as a tanh feed-forward network.
//!
//! The network is evaluated two ways. [`Payoff::value`] is generic over
//! [`Scalar`], so the autodiff engine can differentiate it in any input or
//! parameter. [`NetworkParams::jet_forward`] is a batched forward pass that
//! carries first and selected second input derivatives through each layer
//! as extra matrix columns; its [`JetForward::backward`] pass returns the
//! parameter gradient of a linear combination of those derivatives. Training
//! uses the batched route; tests check it against the generic one.

use std::io::{BufRead, Write};

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{jet2, Scalar, ScalarFn};
use crate::sir_game::{fmt_float, PayoffParams};

/// Network inputs are (s, i, ψ_s, ψ_i, κ).
pub const INPUT_DIM: usize = 5;
const IDX_PSI_S: usize = 2;
const IDX_PSI_I: usize = 3;
const IDX_KAPPA: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has {got} entries, shapes need {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite network output {0}")]
    NonFinite(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A payoff rate V(θ, ψ, κ) that can be evaluated at any scalar type.
pub trait Payoff: Sync {
    fn value<T: Scalar>(&self, theta: [T; 2], psi: [T; 2], kappa: T) -> T;

    /// `[V, ∂_κV, ∂²_κκV]` at each query.
    fn kappa_jets(&self, queries: &[PayoffQuery]) -> Vec<[f64; 3]> {
        queries
            .iter()
            .map(|q| {
                jet2(
                    &KappaSlice {
                        payoff: self,
                        query: q,
                    },
                    q.kappa,
                )
                .unwrap_or([f64::NAN; 3])
            })
            .collect()
    }
}

/// A payoff whose parameters can be differentiated.
pub trait ParametricPayoff: Payoff {
    fn parameters(&self) -> Vec<f64>;
    fn value_with<T: Scalar>(&self, params: &[T], theta: [T; 2], psi: [T; 2], kappa: T) -> T;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayoffQuery {
    pub theta: [f64; 2],
    pub psi: [f64; 2],
    pub kappa: f64,
}

impl PayoffQuery {
    fn input(&self) -> [f64; INPUT_DIM] {
        [
            self.theta[0],
            self.theta[1],
            self.psi[0],
            self.psi[1],
            self.kappa,
        ]
    }
}

struct KappaSlice<'a, P: ?Sized> {
    payoff: &'a P,
    query: &'a PayoffQuery,
}

impl<P: Payoff + ?Sized> ScalarFn for KappaSlice<'_, P> {
    fn eval<T: Scalar>(&self, kappa: T) -> T {
        let c = |x: f64| T::constant(x);
        let q = self.query;
        self.payoff.value(
            [c(q.theta[0]), c(q.theta[1])],
            [c(q.psi[0]), c(q.psi[1])],
            kappa,
        )
    }
}

impl<P: Payoff> Payoff for &P {
    fn value<T: Scalar>(&self, theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        (*self).value(theta, psi, kappa)
    }
    fn kappa_jets(&self, queries: &[PayoffQuery]) -> Vec<[f64; 3]> {
        (*self).kappa_jets(queries)
    }
}

/// Payoff plus a population-only term g(θ) = c₀ + c₁·s + c₂·i.
///
/// Such a term changes neither the optimal control nor the dynamics.
#[derive(Debug, Clone)]
pub struct GaugeShifted<P> {
    pub inner: P,
    pub coeffs: [f64; 3],
}

impl<P: Payoff> Payoff for GaugeShifted<P> {
    fn value<T: Scalar>(&self, theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        let [c0, c1, c2] = self.coeffs.map(T::constant);
        self.inner.value(theta, psi, kappa) + c0 + c1 * theta[0] + c2 * theta[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    /// 3 × 64: small enough to train in minutes on one core.
    fn default() -> Self {
        NetworkConfig {
            input_dim: INPUT_DIM,
            hidden_layers: 3,
            hidden_width: 64,
            seed: 42,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim != INPUT_DIM {
            return Err(NetError::InvalidConfig(format!(
                "input_dim must be {INPUT_DIM}, got {}",
                self.input_dim
            )));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(NetError::InvalidConfig(
                "need at least one hidden layer of width >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push(LayerShape::new(fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push(LayerShape::new(fan_in, 1));
        shapes
    }
}

/// Dense layer: `outputs × inputs` weights (row-major) followed by biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        LayerShape { inputs, outputs }
    }

    pub fn count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Flat parameter vector plus per-layer shapes; the last layer is linear
/// with one output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shapes: Vec<LayerShape>,
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn from_flat(shapes: Vec<LayerShape>, values: Vec<f64>) -> Result<Self, NetError> {
        if shapes.is_empty() || shapes[0].inputs != INPUT_DIM || shapes.last().unwrap().outputs != 1
        {
            return Err(NetError::InvalidConfig(format!(
                "layers must map {INPUT_DIM} inputs to 1 output"
            )));
        }
        if shapes.windows(2).any(|w| w[0].outputs != w[1].inputs) {
            return Err(NetError::InvalidConfig("layer widths do not chain".into()));
        }
        let expected: usize = shapes.iter().map(LayerShape::count).sum();
        if values.len() != expected {
            return Err(NetError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(*v));
        }
        Ok(NetworkParams { shapes, values })
    }

    pub fn zeros(config: &NetworkConfig) -> Result<Self, NetError> {
        config.validate()?;
        let shapes = config.shapes();
        let n = shapes.iter().map(LayerShape::count).sum();
        Self::from_flat(shapes, vec![0.0; n])
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same shapes, new values (value semantics for optimizer updates).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, NetError> {
        Self::from_flat(self.shapes.clone(), values)
    }

    fn offsets(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .scan(0, |off, s| {
                let start = *off;
                *off += s.count();
                Some(start)
            })
            .collect()
    }

    fn layer(&self, offset: usize, shape: LayerShape) -> (ArrayView2<'_, f64>, &[f64]) {
        let nw = shape.inputs * shape.outputs;
        let w = ArrayView2::from_shape(
            (shape.outputs, shape.inputs),
            &self.values[offset..offset + nw],
        )
        .expect("shape checked at construction");
        (w, &self.values[offset + nw..offset + shape.count()])
    }
}

/// Parameters drawn i.i.d. from N(0, 1/N), N the hidden width.
pub fn init_params(config: &NetworkConfig) -> Result<NetworkParams, NetError> {
    config.validate()?;
    let shapes = config.shapes();
    let n: usize = shapes.iter().map(LayerShape::count).sum();
    let normal = Normal::new(0.0, (1.0 / config.hidden_width as f64).sqrt())
        .map_err(|e| NetError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let values = (0..n).map(|_| normal.sample(&mut rng)).collect();
    NetworkParams::from_flat(shapes, values)
}

/// Generic forward pass; `param(k)` supplies flat parameter `k`.
pub fn mlp_forward<T: Scalar>(shapes: &[LayerShape], param: impl Fn(usize) -> T, input: &[T]) -> T {
    let mut h = input.to_vec();
    let mut offset = 0;
    for (l, shape) in shapes.iter().enumerate() {
        let last = l + 1 == shapes.len();
        let bias0 = offset + shape.inputs * shape.outputs;
        let next: Vec<T> = (0..shape.outputs)
            .map(|r| {
                let row = offset + r * shape.inputs;
                let mut z = param(bias0 + r);
                for (c, hc) in h.iter().enumerate() {
                    z = z + param(row + c) * *hc;
                }
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        offset += shape.count();
        h = next;
    }
    h[0]
}

impl Payoff for NetworkParams {
    fn value<T: Scalar>(&self, theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        mlp_forward(
            &self.shapes,
            |k| T::constant(self.values[k]),
            &[theta[0], theta[1], psi[0], psi[1], kappa],
        )
    }

    fn kappa_jets(&self, queries: &[PayoffQuery]) -> Vec<[f64; 3]> {
        if queries.is_empty() {
            return vec![];
        }
        let fwd = self.jet_forward(queries, &JetSpec::kappa_only());
        (0..queries.len())
            .map(|j| [fwd.output(0, j), fwd.output(1, j), fwd.output(2, j)])
            .collect()
    }
}

impl ParametricPayoff for NetworkParams {
    fn parameters(&self) -> Vec<f64> {
        self.values.clone()
    }

    fn value_with<T: Scalar>(&self, params: &[T], theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        mlp_forward(
            &self.shapes,
            |k| params[k],
            &[theta[0], theta[1], psi[0], psi[1], kappa],
        )
    }
}

/// V at one point, with a finiteness check.
pub fn forward_v(
    params: &NetworkParams,
    theta: [f64; 2],
    psi: [f64; 2],
    kappa: f64,
) -> Result<f64, NetError> {
    let v = params.value(theta, psi, kappa);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NetError::NonFinite(v))
    }
}

/// Which input derivatives the batched pass carries.
///
/// `first` lists input indices; `second` lists pairs of positions in
/// `first`. Channel 0 is the value, then first-order, then second-order.
#[derive(Debug, Clone, PartialEq)]
pub struct JetSpec {
    pub first: Vec<usize>,
    pub second: Vec<(usize, usize)>,
}

impl JetSpec {
    /// Channels `[V, V_κ, V_κκ]`.
    pub fn kappa_only() -> Self {
        JetSpec {
            first: vec![IDX_KAPPA],
            second: vec![(0, 0)],
        }
    }

    /// Channels `[V, V_κ, V_ψs, V_ψi, V_κκ, V_κψs, V_κψi]`.
    pub fn full() -> Self {
        JetSpec {
            first: vec![IDX_KAPPA, IDX_PSI_S, IDX_PSI_I],
            second: vec![(0, 0), (0, 1), (0, 2)],
        }
    }

    pub fn channels(&self) -> usize {
        1 + self.first.len() + self.second.len()
    }
}

/// Channel indices for [`JetSpec::full`].
pub mod channel {
    pub const V: usize = 0;
    pub const KAPPA: usize = 1;
    pub const PSI_S: usize = 2;
    pub const PSI_I: usize = 3;
    pub const KAPPA_KAPPA: usize = 4;
    pub const KAPPA_PSI_S: usize = 5;
    pub const KAPPA_PSI_I: usize = 6;
}

struct HiddenCache {
    /// Layer input, value and first-order blocks.
    input: Array2<f64>,
    /// Pre-activation first-order blocks.
    z_first: Array2<f64>,
    t1: Array2<f64>,
    t2: Array2<f64>,
}

/// Result of a batched jet pass; keeps what the backward pass needs.
pub struct JetForward<'a> {
    net: &'a NetworkParams,
    spec: JetSpec,
    batch: usize,
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
    outputs: Array2<f64>,
}

impl NetworkParams {
    /// Forward pass over a batch, carrying the input derivatives in `spec`.
    pub fn jet_forward(&self, queries: &[PayoffQuery], spec: &JetSpec) -> JetForward<'_> {
        let b = queries.len();
        let nf = spec.first.len();
        let nch = spec.channels();
        let mut h = Array2::<f64>::zeros((INPUT_DIM, nch * b));
        for (j, q) in queries.iter().enumerate() {
            for (r, x) in q.input().iter().enumerate() {
                h[[r, j]] = *x;
            }
        }
        for (f, &dim) in spec.first.iter().enumerate() {
            h.slice_mut(s![dim, (1 + f) * b..(2 + f) * b]).fill(1.0);
        }

        let offsets = self.offsets();
        let n_layers = self.shapes.len();
        let mut hidden = Vec::with_capacity(n_layers - 1);
        for l in 0..n_layers - 1 {
            let (w, bias) = self.layer(offsets[l], self.shapes[l]);
            let mut z = w.dot(&h);
            for (mut row, bv) in z.slice_mut(s![.., 0..b]).axis_iter_mut(Axis(0)).zip(bias) {
                row += *bv;
            }
            let zv = z.slice(s![.., 0..b]);
            let t = zv.mapv(f64::tanh);
            let t1 = t.mapv(|t| 1.0 - t * t);
            let t2 = Zip::from(&t).and(&t1).map_collect(|t, t1| -2.0 * t * t1);

            let mut a = Array2::<f64>::zeros(z.raw_dim());
            a.slice_mut(s![.., 0..b]).assign(&t);
            for f in 0..nf {
                let cols = s![.., (1 + f) * b..(2 + f) * b];
                let af = &z.slice(cols) * &t1;
                a.slice_mut(cols).assign(&af);
            }
            for (k, &(p, q)) in spec.second.iter().enumerate() {
                let cols = s![.., (1 + nf + k) * b..(2 + nf + k) * b];
                let zp = z.slice(s![.., (1 + p) * b..(2 + p) * b]);
                let zq = z.slice(s![.., (1 + q) * b..(2 + q) * b]);
                let zpq = z.slice(cols);
                let mut out = a.slice_mut(cols);
                Zip::from(&mut out)
                    .and(&zp)
                    .and(&zq)
                    .and(&zpq)
                    .and(&t1)
                    .and(&t2)
                    .for_each(|o, &zp, &zq, &zpq, &t1, &t2| *o = t2 * zp * zq + t1 * zpq);
            }
            hidden.push(HiddenCache {
                input: h.slice(s![.., 0..(1 + nf) * b]).to_owned(),
                z_first: z.slice(s![.., b..(1 + nf) * b]).to_owned(),
                t1,
                t2,
            });
            h = a;
        }
        let (w, bias) = self.layer(offsets[n_layers - 1], self.shapes[n_layers - 1]);
        let mut out = w.dot(&h);
        out.slice_mut(s![.., 0..b]).mapv_inplace(|v| v + bias[0]);
        let outputs = out
            .into_shape_with_order((nch, b))
            .expect("single output row");
        JetForward {
            net: self,
            spec: spec.clone(),
            batch: b,
            hidden,
            last_input: h.slice(s![.., 0..(1 + nf) * b]).to_owned(),
            outputs,
        }
    }
}

impl JetForward<'_> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Channel `ch` of point `j`.
    pub fn output(&self, ch: usize, j: usize) -> f64 {
        self.outputs[[ch, j]]
    }

    /// Parameter gradient of `Σ_j Σ_c coeffs[j][c] · channel_c(j)` over the
    /// value and first-order channels (`coeffs[j].len() == 1 + first.len()`).
    pub fn backward(&self, coeffs: &[Vec<f64>]) -> Vec<f64> {
        let b = self.batch;
        let nf = self.spec.first.len();
        let nblk = 1 + nf;
        assert_eq!(coeffs.len(), b, "one coefficient row per point");
        let mut c = Array2::<f64>::zeros((1, nblk * b));
        for (j, row) in coeffs.iter().enumerate() {
            assert_eq!(row.len(), nblk);
            for (k, v) in row.iter().enumerate() {
                c[[0, k * b + j]] = *v;
            }
        }

        let net = self.net;
        let offsets = net.offsets();
        let n_layers = net.shapes.len();
        let mut grad = vec![0.0; net.values.len()];

        let out_shape = net.shapes[n_layers - 1];
        let (w_out, _) = net.layer(offsets[n_layers - 1], out_shape);
        let gw = c.dot(&self.last_input.t());
        let o = offsets[n_layers - 1];
        grad[o..o + out_shape.inputs].copy_from_slice(gw.as_slice().expect("contiguous"));
        grad[o + out_shape.inputs] = c.slice(s![0, 0..b]).sum();
        // adjoint of the last hidden activations, value + first-order blocks
        let mut a_bar = w_out.t().dot(&c);

        for l in (0..n_layers - 1).rev() {
            let cache = &self.hidden[l];
            let mut z_bar = Array2::<f64>::zeros(a_bar.raw_dim());
            {
                let mut zv = z_bar.slice_mut(s![.., 0..b]);
                Zip::from(&mut zv)
                    .and(&a_bar.slice(s![.., 0..b]))
                    .and(&cache.t1)
                    .for_each(|z, &a, &t1| *z = t1 * a);
            }
            for f in 0..nf {
                let cols = s![.., (1 + f) * b..(2 + f) * b];
                let af = a_bar.slice(cols);
                let zf = cache.z_first.slice(s![.., f * b..(f + 1) * b]);
                Zip::from(&mut z_bar.slice_mut(cols))
                    .and(&af)
                    .and(&cache.t1)
                    .for_each(|z, &a, &t1| *z = t1 * a);
                Zip::from(&mut z_bar.slice_mut(s![.., 0..b]))
                    .and(&af)
                    .and(&zf)
                    .and(&cache.t2)
                    .for_each(|z, &a, &zf, &t2| *z += t2 * a * zf);
            }
            let shape = net.shapes[l];
            let o = offsets[l];
            let gw = z_bar.dot(&cache.input.t());
            grad[o..o + shape.inputs * shape.outputs]
                .copy_from_slice(gw.as_slice().expect("contiguous"));
            let gb = z_bar.slice(s![.., 0..b]).sum_axis(Axis(1));
            grad[o + shape.inputs * shape.outputs..o + shape.count()]
                .copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let (w, _) = net.layer(o, shape);
                a_bar = w.t().dot(&z_bar);
            }
        }
        grad
    }
}

/// What a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointPayoff {
    Network {
        config: NetworkConfig,
        params: NetworkParams,
    },
    /// Analytic payoff injected in place of a network.
    GroundTruth(PayoffParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub payoff: CheckpointPayoff,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    kind: String,
    step: u64,
    #[serde(default)]
    input_dim: Option<usize>,
    #[serde(default)]
    hidden_layers: Option<usize>,
    #[serde(default)]
    hidden_width: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    param_count: Option<usize>,
    #[serde(default)]
    alpha0: Option<f64>,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    kappa_star: Option<f64>,
}

const CHECKPOINT_SEPARATOR: &str = "---";

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), NetError> {
        writeln!(out, "# nashnet payoff checkpoint")?;
        writeln!(out, "format = 1")?;
        match &self.payoff {
            CheckpointPayoff::Network { config, params } => {
                writeln!(out, "kind = \"network\"")?;
                writeln!(out, "step = {}", self.step)?;
                writeln!(out, "input_dim = {}", config.input_dim)?;
                writeln!(out, "hidden_layers = {}", config.hidden_layers)?;
                writeln!(out, "hidden_width = {}", config.hidden_width)?;
                writeln!(out, "seed = {}", config.seed)?;
                writeln!(out, "param_count = {}", params.len())?;
                writeln!(out, "{CHECKPOINT_SEPARATOR}")?;
                for v in params.values() {
                    writeln!(out, "{}", fmt_float(*v))?;
                }
            }
            CheckpointPayoff::GroundTruth(p) => {
                writeln!(out, "kind = \"ground_truth\"")?;
                writeln!(out, "step = {}", self.step)?;
                writeln!(out, "alpha0 = {}", fmt_float(p.alpha0))?;
                writeln!(out, "beta = {}", fmt_float(p.beta))?;
                writeln!(out, "kappa_star = {}", fmt_float(p.kappa_star))?;
                writeln!(out, "{CHECKPOINT_SEPARATOR}")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, NetError> {
        let bad = |m: String| NetError::Checkpoint(m);
        let mut header = String::new();
        let mut lines = input.lines();
        let mut separated = false;
        for line in lines.by_ref() {
            let line = line?;
            if line.trim() == CHECKPOINT_SEPARATOR {
                separated = true;
                break;
            }
            header.push_str(&line);
            header.push('\n');
        }
        if !separated {
            return Err(bad("missing `---` separator".into()));
        }
        let h: CheckpointHeader = toml::from_str(&header).map_err(|e| bad(e.to_string()))?;
        if h.format != 1 {
            return Err(bad(format!("unsupported format {}", h.format)));
        }
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| bad(format!("missing `{name}`")));
        let payoff = match h.kind.as_str() {
            "network" => {
                let config = NetworkConfig {
                    input_dim: h.input_dim.unwrap_or(INPUT_DIM),
                    hidden_layers: h
                        .hidden_layers
                        .ok_or_else(|| bad("missing `hidden_layers`".into()))?,
                    hidden_width: h
                        .hidden_width
                        .ok_or_else(|| bad("missing `hidden_width`".into()))?,
                    seed: h.seed.unwrap_or(0),
                };
                config.validate()?;
                let mut values = Vec::new();
                for (k, line) in lines.enumerate() {
                    let line = line?;
                    let t = line.trim();
                    if t.is_empty() {
                        continue;
                    }
                    values.push(
                        t.parse::<f64>()
                            .map_err(|e| bad(format!("parameter line {}: {e}", k + 1)))?,
                    );
                }
                if let Some(n) = h.param_count {
                    if n != values.len() {
                        return Err(NetError::LengthMismatch {
                            expected: n,
                            got: values.len(),
                        });
                    }
                }
                let params = NetworkParams::from_flat(config.shapes(), values)?;
                CheckpointPayoff::Network { config, params }
            }
            "ground_truth" => CheckpointPayoff::GroundTruth(
                PayoffParams::new(
                    need(h.alpha0, "alpha0")?,
                    need(h.beta, "beta")?,
                    need(h.kappa_star, "kappa_star")?,
                )
                .map_err(|e| bad(e.to_string()))?,
            ),
            other => return Err(bad(format!("unknown kind `{other}`"))),
        };
        Ok(Checkpoint {
            step: h.step,
            payoff,
        })
    }
}

impl Payoff for CheckpointPayoff {
    fn value<T: Scalar>(&self, theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        match self {
            CheckpointPayoff::Network { params, .. } => params.value(theta, psi, kappa),
            CheckpointPayoff::GroundTruth(p) => p.value(theta, psi, kappa),
        }
    }

    fn kappa_jets(&self, queries: &[PayoffQuery]) -> Vec<[f64; 3]> {
        match self {
            CheckpointPayoff::Network { params, .. } => params.kappa_jets(queries),
            CheckpointPayoff::GroundTruth(p) => p.kappa_jets(queries),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{derive1, param_gradient, Dual, Var};
    use rand::Rng;

    fn small_net(seed: u64) -> NetworkParams {
        init_params(&NetworkConfig {
            hidden_layers: 2,
            hidden_width: 7,
            seed,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    fn random_queries(n: usize, seed: u64) -> Vec<PayoffQuery> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| PayoffQuery {
                theta: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.4)],
                psi: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.4)],
                kappa: rng.gen_range(0.0..8.0),
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetworkConfig::default();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_params(&NetworkConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn parameter_counts() {
        let wide = NetworkConfig {
            hidden_width: 200,
            ..NetworkConfig::default()
        };
        assert_eq!(NetworkParams::zeros(&wide).unwrap().len(), 81_801);
        assert_eq!(
            NetworkParams::zeros(&NetworkConfig::default())
                .unwrap()
                .len(),
            8_769
        );
    }

    #[test]
    fn init_variance_matches_fan() {
        let cfg = NetworkConfig {
            hidden_width: 200,
            seed: 7,
            ..NetworkConfig::default()
        };
        let p = init_params(&cfg).unwrap();
        let xs = &p.values()[..100_000.min(p.len())];
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!(var > 0.9 / 200.0 && var < 1.1 / 200.0, "{var}");
    }

    #[test]
    fn invalid_configs() {
        let bad = NetworkConfig {
            input_dim: 3,
            ..NetworkConfig::default()
        };
        assert!(init_params(&bad).is_err());
        let bad = NetworkConfig {
            hidden_layers: 0,
            ..NetworkConfig::default()
        };
        assert!(init_params(&bad).is_err());
        assert!(matches!(
            NetworkParams::from_flat(NetworkConfig::default().shapes(), vec![0.0; 3]),
            Err(NetError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = NetworkParams::zeros(&NetworkConfig::default()).unwrap();
        assert_eq!(forward_v(&p, [0.3, 0.1], [0.3, 0.1], 3.0).unwrap(), 0.0);
    }

    #[test]
    fn linear_harness_is_dot_product() {
        let mut w = vec![1.0; INPUT_DIM];
        w.push(0.0);
        let p = NetworkParams::from_flat(vec![LayerShape::new(INPUT_DIM, 1)], w).unwrap();
        let v = forward_v(&p, [0.1, 0.2], [0.3, 0.4], 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    struct NetKappa<'a>(&'a NetworkParams, PayoffQuery);
    impl ScalarFn for NetKappa<'_> {
        fn eval<T: Scalar>(&self, k: T) -> T {
            let c = T::constant;
            let q = self.1;
            self.0.value(
                [c(q.theta[0]), c(q.theta[1])],
                [c(q.psi[0]), c(q.psi[1])],
                k,
            )
        }
    }

    #[test]
    fn kappa_derivative_matches_finite_difference() {
        let p = small_net(11);
        for q in random_queries(20, 5) {
            let d = derive1(&NetKappa(&p, q), q.kappa).unwrap();
            let h = 1e-5;
            let f = |k: f64| p.value(q.theta, q.psi, k);
            let fd = (f(q.kappa + h) - f(q.kappa - h)) / (2.0 * h);
            assert!((d - fd).abs() <= 1e-6 * d.abs().max(1e-3), "{d} vs {fd}");
        }
    }

    /// Generic nested-dual evaluation of the seven jet channels.
    fn generic_jets(p: &NetworkParams, q: &PayoffQuery) -> [f64; 7] {
        let mut out = [0.0; 7];
        let [v, vk, vkk] = jet2(&NetKappa(p, *q), q.kappa).unwrap();
        out[channel::V] = v;
        out[channel::KAPPA] = vk;
        out[channel::KAPPA_KAPPA] = vkk;
        for (d, (ch1, ch2)) in [(0usize, (2, 5)), (1, (3, 6))] {
            // outer dual in psi_d, inner dual in kappa
            type D2 = Dual<Dual<f64>>;
            let c = |x: f64| D2::constant(x);
            let mut psi = [c(q.psi[0]), c(q.psi[1])];
            psi[d] = Dual::new(Dual::new(q.psi[d], 0.0), Dual::new(1.0, 0.0));
            let k = Dual::new(Dual::new(q.kappa, 1.0), Dual::new(0.0, 0.0));
            let r = p.value([c(q.theta[0]), c(q.theta[1])], psi, k);
            out[ch1] = r.eps.re;
            out[ch2] = r.eps.eps;
        }
        out
    }

    #[test]
    fn batched_jets_match_generic_duals() {
        let p = small_net(3);
        let qs = random_queries(9, 8);
        let fwd = p.jet_forward(&qs, &JetSpec::full());
        for (j, q) in qs.iter().enumerate() {
            let g = generic_jets(&p, q);
            for (ch, want) in g.iter().enumerate() {
                let got = fwd.output(ch, j);
                assert!(
                    (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
                    "ch {ch}: {got} vs {want}"
                );
            }
        }
        let kj = p.kappa_jets(&qs);
        for (j, q) in qs.iter().enumerate() {
            let g = generic_jets(&p, q);
            assert!((kj[j][2] - g[channel::KAPPA_KAPPA]).abs() < 1e-12 * (1.0 + g[4].abs()));
        }
    }

    #[test]
    fn batched_backward_matches_tape() {
        let p = small_net(21);
        let qs = random_queries(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coeffs: Vec<Vec<f64>> = (0..qs.len())
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let fwd = p.jet_forward(&qs, &JetSpec::full());
        let fast = fwd.backward(&coeffs);

        // Σ_j c_V V + directional derivative along (c_κ, c_ψs, c_ψi)
        let reference = param_gradient(
            |w: &[Var]| {
                let mut total = Var::constant(0.0);
                for (q, c) in qs.iter().zip(&coeffs) {
                    let lift = |x: f64, t: f64| Dual::new(Var::constant(x), Var::constant(t));
                    let out = p.value_with(
                        &w.iter().map(|&v| Dual::constant_of(v)).collect::<Vec<_>>(),
                        [lift(q.theta[0], 0.0), lift(q.theta[1], 0.0)],
                        [lift(q.psi[0], c[2]), lift(q.psi[1], c[3])],
                        lift(q.kappa, c[1]),
                    );
                    total = total + out.re * Var::constant(c[0]) + out.eps;
                }
                total
            },
            p.values(),
        )
        .unwrap();
        for (k, (a, b)) in fast.iter().zip(&reference.gradient).enumerate() {
            assert!(
                (a - b).abs() <= 1e-11 * (1.0 + b.abs()),
                "param {k}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn gauge_shift_adds_population_term() {
        let p = PayoffParams::new(100.0, 1.0, 4.0).unwrap();
        let g = GaugeShifted {
            inner: p,
            coeffs: [1.0, 2.0, 3.0],
        };
        let v = g.value([0.5, 0.1], [0.5, 0.1], 4.0);
        assert!((v - (-10.0 + 1.0 + 1.0 + 0.3)).abs() < 1e-13);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = NetworkConfig {
            hidden_layers: 2,
            hidden_width: 5,
            seed: 17,
            ..NetworkConfig::default()
        };
        let ck = Checkpoint {
            step: 12,
            payoff: CheckpointPayoff::Network {
                config: cfg,
                params: init_params(&cfg).unwrap(),
            },
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(Checkpoint::read(buf.as_slice()).unwrap(), ck);

        let gt = Checkpoint {
            step: 0,
            payoff: CheckpointPayoff::GroundTruth(PayoffParams::new(200.0, 1.0, 4.0).unwrap()),
        };
        let mut buf = Vec::new();
        gt.write(&mut buf).unwrap();
        assert_eq!(Checkpoint::read(buf.as_slice()).unwrap(), gt);
    }

    #[test]
    fn checkpoint_errors() {
        assert!(Checkpoint::read("format = 1\n".as_bytes()).is_err());
        let text = "format = 1\nkind = \"network\"\nstep = 0\nhidden_layers = 1\nhidden_width = 2\nparam_count = 3\n---\n1\n2\n";
        assert!(Checkpoint::read(text.as_bytes()).is_err());
    }
}
