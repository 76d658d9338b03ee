//! Small dense feed-forward networks.
//!
//! A network is a stack of affine layers with a fixed activation after every
//! hidden layer and an optional terminal L2 batch-normalization (L2BN) layer.
//! In train mode L2BN divides the batch of outputs by its root-mean-square
//! `σ = sqrt((1/B) Σ_b ‖h_b‖²)` and folds `σ` into an exponential moving
//! average; in eval mode it divides by that average instead.
//!
//! Parameters live in one flat vector (per layer: weights row-major as
//! `out × in`, then biases) so perturbations, Adam updates and Jacobians all
//! operate on plain slices.

mod adam;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest parameter count for which Jacobians are materialized.
pub const MAX_JACOBIAN_PARAMS: usize = 10_000;

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Erf,
    /// First half of each hidden layer uses `sin`, second half `cos`.
    SinCosMix,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64, unit: usize, width: usize) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Erf => libm::erf(z),
            Activation::SinCosMix => {
                if unit < width / 2 {
                    z.sin()
                } else {
                    z.cos()
                }
            }
        }
    }

    #[inline]
    fn derivative(self, z: f64, unit: usize, width: usize) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Erf => FRAC_2_SQRT_PI * (-z * z).exp(),
            Activation::SinCosMix => {
                if unit < width / 2 {
                    z.cos()
                } else {
                    -z.sin()
                }
            }
        }
    }
}

fn default_true() -> bool {
    true
}

/// Layer widths `[input, hidden..., output]` plus layer options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default)]
    pub l2bn: bool,
}

impl NetArch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        NetArch {
            widths,
            activation,
            bias: true,
            l2bn: false,
        }
    }

    pub fn with_l2bn(mut self, on: bool) -> Self {
        self.l2bn = on;
        self
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid(
                "architecture needs at least input and output widths",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        if self.activation == Activation::SinCosMix
            && self.hidden_widths().iter().any(|w| w % 2 != 0)
        {
            return Err(Error::invalid(
                "sin/cos mixed activation requires even hidden widths",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated architecture")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    fn layer_offsets(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + if self.bias { w[1] } else { 0 };
                slot
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

/// Weight prior: variance `weight_variance / fan_in` for weights and
/// `bias_variance` for biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub weight_variance: f64,
    pub bias_variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            weight_variance: 2.0,
            bias_variance: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_variance >= 0.0 && self.bias_variance >= 0.0) {
            return Err(Error::invalid("prior variances must be nonnegative"));
        }
        Ok(())
    }
}

/// Running statistic of the terminal L2BN layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L2bnState {
    pub ema_sigma: f64,
    pub ema_decay: f64,
    /// Number of train-mode batches folded into `ema_sigma`.
    pub updates: u64,
}

impl L2bnState {
    pub fn new(ema_decay: f64) -> Self {
        L2bnState {
            ema_sigma: 1.0,
            ema_decay,
            updates: 0,
        }
    }

    fn record(&mut self, sigma: f64) {
        self.ema_sigma = if self.updates == 0 {
            sigma
        } else {
            self.ema_decay * self.ema_sigma + (1.0 - self.ema_decay) * sigma
        };
        self.updates += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    mode: Mode,
    /// Input to each affine layer (`layer_inputs[0]` is the batch itself).
    layer_inputs: Vec<Matrix>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Matrix>,
    /// Output before L2BN.
    raw_output: Matrix,
    /// Divisor applied by L2BN (batch statistic in train mode, EMA in eval).
    sigma: Option<f64>,
}

impl ForwardCache {
    pub fn raw_output(&self) -> &Matrix {
        &self.raw_output
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawNet", into = "RawNet")]
pub struct FeedForwardNet {
    arch: NetArch,
    params: Vec<f64>,
    l2bn: Option<L2bnState>,
    cache: Option<ForwardCache>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    arch: NetArch,
    params: Vec<f64>,
    #[serde(default)]
    l2bn: Option<L2bnState>,
}

impl TryFrom<RawNet> for FeedForwardNet {
    type Error = Error;

    fn try_from(raw: RawNet) -> Result<Self> {
        FeedForwardNet::from_params(raw.arch, raw.params, raw.l2bn)
    }
}

impl From<FeedForwardNet> for RawNet {
    fn from(net: FeedForwardNet) -> Self {
        RawNet {
            arch: net.arch,
            params: net.params,
            l2bn: net.l2bn,
        }
    }
}

impl PartialEq for FeedForwardNet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.l2bn == other.l2bn
    }
}

impl FeedForwardNet {
    /// Builds a network from explicit parameters. `l2bn` must be present exactly
    /// when the architecture asks for the layer.
    pub fn from_params(arch: NetArch, params: Vec<f64>, l2bn: Option<L2bnState>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::invalid(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        if arch.l2bn != l2bn.is_some() {
            return Err(Error::invalid(
                "L2BN state must be present exactly when the architecture enables L2BN",
            ));
        }
        if let Some(s) = &l2bn {
            if !(s.ema_sigma > 0.0 && s.ema_decay > 0.0 && s.ema_decay < 1.0) {
                return Err(Error::invalid(
                    "L2BN needs ema_sigma > 0 and ema_decay in (0, 1)",
                ));
            }
        }
        Ok(FeedForwardNet {
            arch,
            params,
            l2bn,
            cache: None,
        })
    }

    /// He-style initialization: weights ~ N(0, 2/fan_in), biases 0.
    pub fn init<R: Rng>(arch: NetArch, ema_decay: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.num_params()];
        for slot in arch.layer_offsets() {
            let normal = Normal::new(0.0, (2.0 / slot.fan_in as f64).sqrt())
                .map_err(|e| Error::invalid(e.to_string()))?;
            for p in &mut params[slot.weight..slot.weight + slot.fan_in * slot.fan_out] {
                *p = normal.sample(rng);
            }
        }
        let l2bn = arch.l2bn.then(|| L2bnState::new(ema_decay));
        FeedForwardNet::from_params(arch, params, l2bn)
    }

    /// Draws parameters from `prior`.
    pub fn sample_prior<R: Rng>(arch: &NetArch, prior: &PriorSpec, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        prior.validate()?;
        let mut params = vec![0.0; arch.num_params()];
        for slot in arch.layer_offsets() {
            let w_std = (prior.weight_variance / slot.fan_in as f64).sqrt();
            for p in &mut params[slot.weight..slot.weight + slot.fan_in * slot.fan_out] {
                *p = w_std * sample_std_normal(rng);
            }
            if arch.bias {
                let b_std = prior.bias_variance.sqrt();
                for p in &mut params[slot.bias..slot.bias + slot.fan_out] {
                    *p = b_std * sample_std_normal(rng);
                }
            }
        }
        let l2bn = arch.l2bn.then(|| L2bnState::new(0.99));
        FeedForwardNet::from_params(arch.clone(), params, l2bn)
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn l2bn_state(&self) -> Option<&L2bnState> {
        self.l2bn.as_ref()
    }

    pub fn l2bn_state_mut(&mut self) -> Option<&mut L2bnState> {
        self.l2bn.as_mut()
    }

    /// Copy with parameters `θ + step·direction` and no cached pass.
    pub fn perturbed(&self, direction: &[f64], step: f64) -> Result<Self> {
        if direction.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "perturbation has {} entries, network has {} parameters",
                direction.len(),
                self.params.len()
            )));
        }
        let mut out = self.clone();
        out.cache = None;
        for (p, d) in out.params.iter_mut().zip(direction) {
            *p += step * d;
        }
        Ok(out)
    }

    /// Forward pass that never mutates the network; returns the cache for [`Self::vjp_with_cache`].
    pub fn forward_with_cache(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        let b = x.rows();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if x.cols() != self.arch.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} input features, got {}",
                self.arch.input_dim(),
                x.cols()
            )));
        }
        let slots = self.arch.layer_offsets();
        let last = slots.len() - 1;
        let mut layer_inputs = Vec::with_capacity(slots.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut a = x.clone();
        for (l, slot) in slots.iter().enumerate() {
            let z = self.affine(&a, slot);
            layer_inputs.push(a);
            if l == last {
                a = z;
            } else {
                let width = slot.fan_out;
                let act = self.arch.activation;
                let mut h = z.clone();
                for i in 0..b {
                    for (u, v) in h.row_mut(i).iter_mut().enumerate() {
                        *v = act.apply(*v, u, width);
                    }
                }
                pre_activations.push(z);
                a = h;
            }
        }
        let raw_output = a;

        let sigma = match (&self.l2bn, mode) {
            (None, _) => None,
            (Some(_), Mode::Train) => {
                let s = (raw_output.as_slice().iter().map(|v| v * v).sum::<f64>() / b as f64).sqrt();
                if s == 0.0 || !s.is_finite() {
                    return Err(Error::DegenerateBatch);
                }
                Some(s)
            }
            (Some(state), Mode::Eval) => Some(state.ema_sigma),
        };
        let out = match sigma {
            Some(s) => raw_output.scale(1.0 / s),
            None => raw_output.clone(),
        };
        Ok((
            out,
            ForwardCache {
                input: x.clone(),
                mode,
                layer_inputs,
                pre_activations,
                raw_output,
                sigma,
            },
        ))
    }

    /// Eval-mode forward; pure.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with_cache(x, Mode::Eval).map(|(out, _)| out)
    }

    /// Train-mode forward: normalizes by the batch statistic, updates the
    /// running `σ`, and caches the pass for [`Self::vjp`].
    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, cache) = self.forward_with_cache(x, Mode::Train)?;
        if let (Some(state), Some(s)) = (self.l2bn.as_mut(), cache.sigma) {
            state.record(s);
        }
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Gradient of `Σ cotangent ∘ outputs` w.r.t. the parameters, using the
    /// pass cached by the last [`Self::forward_train`] on the same batch.
    pub fn vjp(&self, x: &Matrix, cotangent: &Matrix) -> Result<Vec<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("vjp called without a cached forward pass".into()))?;
        if cache.input != *x {
            return Err(Error::Contract(
                "vjp batch differs from the cached forward batch".into(),
            ));
        }
        self.vjp_with_cache(cache, cotangent)
    }

    /// Reverse pass through an explicit cache. Train-mode caches backpropagate
    /// through the batch statistic `σ`; eval-mode caches treat it as constant.
    pub fn vjp_with_cache(&self, cache: &ForwardCache, cotangent: &Matrix) -> Result<Vec<f64>> {
        let (b, n_out) = cache.raw_output.shape();
        if cotangent.shape() != (b, n_out) {
            return Err(Error::invalid(format!(
                "cotangent shape {:?} does not match outputs {:?}",
                cotangent.shape(),
                (b, n_out)
            )));
        }
        let mut grad_z = match cache.sigma {
            None => cotangent.clone(),
            Some(s) => {
                let mut g = cotangent.scale(1.0 / s);
                if cache.mode == Mode::Train {
                    let h = &cache.raw_output;
                    let uh: f64 = cotangent
                        .as_slice()
                        .iter()
                        .zip(h.as_slice())
                        .map(|(u, v)| u * v)
                        .sum();
                    let coef = uh / (b as f64 * s * s * s);
                    for (gi, hi) in g.as_mut_slice().iter_mut().zip(h.as_slice()) {
                        *gi -= coef * hi;
                    }
                }
                g
            }
        };

        let slots = self.arch.layer_offsets();
        let mut grads = vec![0.0; self.params.len()];
        for l in (0..slots.len()).rev() {
            let slot = slots[l];
            let a_in = &cache.layer_inputs[l];
            // weights: Σ_b g_b a_bᵀ
            let gw = &mut grads[slot.weight..slot.weight + slot.fan_in * slot.fan_out];
            for i in 0..b {
                let gz = grad_z.row(i);
                let a = a_in.row(i);
                for (o, &g) in gz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (w, &ai) in gw[o * slot.fan_in..(o + 1) * slot.fan_in].iter_mut().zip(a) {
                        *w += g * ai;
                    }
                }
            }
            if self.arch.bias {
                let gb = &mut grads[slot.bias..slot.bias + slot.fan_out];
                for i in 0..b {
                    for (gbo, &g) in gb.iter_mut().zip(grad_z.row(i)) {
                        *gbo += g;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // propagate to the previous hidden layer
            let w = &self.params[slot.weight..slot.weight + slot.fan_in * slot.fan_out];
            let z_prev = &cache.pre_activations[l - 1];
            let width = slot.fan_in;
            let act = self.arch.activation;
            let mut prev = Matrix::zeros(b, slot.fan_in);
            for i in 0..b {
                let gz = grad_z.row(i);
                let row = prev.row_mut(i);
                for (o, &g) in gz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (r, &wv) in row.iter_mut().zip(&w[o * slot.fan_in..(o + 1) * slot.fan_in]) {
                        *r += g * wv;
                    }
                }
                for (u, (r, &z)) in row.iter_mut().zip(z_prev.row(i)).enumerate() {
                    *r *= act.derivative(z, u, width);
                }
            }
            grad_z = prev;
        }
        Ok(grads)
    }

    /// Per-output Jacobian `∂g(x_b)_o/∂θ` in eval mode, rows ordered sample-major.
    pub fn jacobian(&self, x: &Matrix) -> Result<Matrix> {
        let p = self.num_params();
        if p > MAX_JACOBIAN_PARAMS {
            return Err(Error::Resource(format!(
                "network has {p} parameters; explicit Jacobians are capped at {MAX_JACOBIAN_PARAMS}"
            )));
        }
        let n_out = self.arch.output_dim();
        let mut jac = Matrix::zeros(x.rows() * n_out, p);
        for i in 0..x.rows() {
            let xi = x.select_rows(&[i]);
            let (_, cache) = self.forward_with_cache(&xi, Mode::Eval)?;
            for o in 0..n_out {
                let mut cot = Matrix::zeros(1, n_out);
                cot[(0, o)] = 1.0;
                let g = self.vjp_with_cache(&cache, &cot)?;
                jac.row_mut(i * n_out + o).copy_from_slice(&g);
            }
        }
        Ok(jac)
    }

    fn affine(&self, a: &Matrix, slot: &LayerSlot) -> Matrix {
        let w = &self.params[slot.weight..slot.weight + slot.fan_in * slot.fan_out];
        let bias = self
            .arch
            .bias
            .then(|| &self.params[slot.bias..slot.bias + slot.fan_out]);
        let mut z = Matrix::zeros(a.rows(), slot.fan_out);
        for i in 0..a.rows() {
            let ai = a.row(i);
            let zi = z.row_mut(i);
            for (o, zo) in zi.iter_mut().enumerate() {
                let wo = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                *zo = crate::linalg::dot(wo, ai) + bias.map_or(0.0, |b| b[o]);
            }
        }
        z
    }
}

fn sample_std_normal<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn l2bn_passthrough(width: usize, ema: f64) -> FeedForwardNet {
        // identity layer followed by L2BN
        let arch = NetArch::new(vec![width, width], Activation::Relu)
            .with_bias(false)
            .with_l2bn(true);
        let mut params = vec![0.0; width * width];
        for i in 0..width {
            params[i * width + i] = 1.0;
        }
        let state = L2bnState {
            ema_sigma: ema,
            ema_decay: 0.99,
            updates: 1,
        };
        FeedForwardNet::from_params(arch, params, Some(state)).unwrap()
    }

    fn random_net(widths: Vec<usize>, act: Activation, l2bn: bool, seed: u64) -> FeedForwardNet {
        let arch = NetArch::new(widths, act).with_l2bn(l2bn);
        let mut rng = stream(seed, Stream::Init, 0);
        let mut net = FeedForwardNet::init(arch, 0.99, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * rng.gen_range(-1.0..1.0);
        }
        net
    }

    fn random_batch(b: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, Stream::Data, 0);
        Matrix::from_fn(b, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn l2bn_train_mode_formula() {
        let mut net = l2bn_passthrough(1, 1.0);
        let x = Matrix::column_vector(&[3.0, 4.0]);
        let out = net.forward_train(&x).unwrap();
        let s = 12.5_f64.sqrt();
        assert!((out[(0, 0)] - 3.0 / s).abs() < 1e-15);
        assert!((out[(1, 0)] - 4.0 / s).abs() < 1e-15);
        let ms: f64 = out.as_slice().iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2bn_eval_mode_uses_stored_sigma() {
        let net = l2bn_passthrough(1, 2.0);
        let out = net.forward_eval(&Matrix::column_vector(&[4.0])).unwrap();
        assert_eq!(out[(0, 0)], 2.0);
    }

    #[test]
    fn ema_tracks_batch_sigma() {
        let mut net = l2bn_passthrough(1, 1.0);
        net.l2bn_state_mut().unwrap().updates = 0;
        net.forward_train(&Matrix::column_vector(&[3.0, 4.0])).unwrap();
        let s = 12.5_f64.sqrt();
        // first batch seeds the average directly
        assert!((net.l2bn_state().unwrap().ema_sigma - s).abs() < 1e-15);
        net.forward_train(&Matrix::column_vector(&[1.0, 1.0])).unwrap();
        let expected = 0.99 * s + 0.01 * 1.0;
        assert!((net.l2bn_state().unwrap().ema_sigma - expected).abs() < 1e-14);
    }

    #[test]
    fn degenerate_batch_errors() {
        let mut net = l2bn_passthrough(1, 1.0);
        assert!(matches!(
            net.forward_train(&Matrix::column_vector(&[0.0, 0.0])),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn train_forward_has_unit_mean_square_for_matrix_outputs() {
        let mut net = random_net(vec![2, 8, 3], Activation::Erf, true, 5);
        let x = random_batch(7, 2, 5);
        let out = net.forward_train(&x).unwrap();
        let ms: f64 = out.as_slice().iter().map(|v| v * v).sum::<f64>() / 7.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_layer_vjp_rule() {
        let arch = NetArch::new(vec![2, 1], Activation::Relu).with_bias(false);
        let mut net = FeedForwardNet::from_params(arch, vec![0.3, -0.7], None).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        net.forward_train(&x).unwrap();
        let u = Matrix::column_vector(&[2.0, 3.0]);
        let g = net.vjp(&x, &u).unwrap();
        assert_eq!(g, vec![2.0 * 1.0 + -3.0, 2.0 * 2.0 + 3.0 * 0.5]);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut net = random_net(vec![2, 6, 1], Activation::SinCosMix, true, 1);
        let x = random_batch(5, 2, 1);
        net.forward_train(&x).unwrap();
        let g = net.vjp(&x, &Matrix::zeros(5, 1)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_a_contract_violation() {
        let mut net = random_net(vec![2, 4, 1], Activation::Relu, true, 2);
        let x = random_batch(4, 2, 2);
        assert!(matches!(
            net.vjp(&x, &Matrix::zeros(4, 1)),
            Err(Error::Contract(_))
        ));
        net.forward_train(&x).unwrap();
        let other = random_batch(4, 2, 3);
        assert!(matches!(
            net.vjp(&other, &Matrix::zeros(4, 1)),
            Err(Error::Contract(_))
        ));
    }

    /// Central finite differences of `Σ u ∘ forward_train(x)` (batch σ recomputed per evaluation).
    fn fd_gradient(net: &FeedForwardNet, x: &Matrix, u: &Matrix, h: f64) -> Vec<f64> {
        let f = |n: &FeedForwardNet| {
            let (out, _) = n.forward_with_cache(x, Mode::Train).unwrap();
            crate::linalg::dot(out.as_slice(), u.as_slice())
        };
        (0..net.num_params())
            .map(|p| {
                let mut e = vec![0.0; net.num_params()];
                e[p] = 1.0;
                (f(&net.perturbed(&e, h).unwrap()) - f(&net.perturbed(&e, -h).unwrap())) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (act, seed) in [
            (Activation::Erf, 10),
            (Activation::SinCosMix, 11),
            (Activation::Relu, 12),
        ] {
            for n_out in [1, 2] {
                let mut net = random_net(vec![2, 6, 4, n_out], act, true, seed);
                let x = random_batch(6, 2, seed);
                let u = random_batch(6, n_out, seed + 100);
                net.forward_train(&x).unwrap();
                let g = net.vjp(&x, &u).unwrap();
                let fd = fd_gradient(&net, &x, &u, 1e-6);
                let scale = fd.iter().fold(1e-3_f64, |m, v| m.max(v.abs()));
                for (a, b) in g.iter().zip(&fd) {
                    assert!(
                        (a - b).abs() <= 1e-4 * scale.max(b.abs()),
                        "{act:?} n_out={n_out}: analytic {a} vs fd {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let mut net = random_net(vec![3, 8, 2], Activation::Erf, true, 21);
        let x = random_batch(5, 3, 21);
        let u = random_batch(5, 2, 22);
        let v = random_batch(5, 2, 23);
        net.forward_train(&x).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let combo = u.scale(alpha).add(&v.scale(beta)).unwrap();
        let lhs = net.vjp(&x, &combo).unwrap();
        let gu = net.vjp(&x, &u).unwrap();
        let gv = net.vjp(&x, &v).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (alpha * gu[i] + beta * gv[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = random_net(vec![2, 4, 1], Activation::SinCosMix, true, 3);
        let before = net.clone();
        let x = random_batch(3, 2, 3);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, before);
    }

    #[test]
    fn sincos_hidden_is_bounded() {
        let net = random_net(vec![1, 8, 8, 1], Activation::SinCosMix, false, 4);
        let x = random_batch(16, 1, 4).scale(50.0);
        let (_, cache) = net.forward_with_cache(&x, Mode::Eval).unwrap();
        let last_hidden = cache.layer_inputs.last().unwrap();
        assert!(last_hidden.max_abs() <= 1.0);
    }

    #[test]
    fn jacobian_of_linear_model_is_input() {
        let arch = NetArch::new(vec![3, 1], Activation::Relu).with_bias(false);
        let net = FeedForwardNet::from_params(arch, vec![0.1, 0.2, 0.3], None).unwrap();
        let x = random_batch(4, 3, 9);
        assert_eq!(net.jacobian(&x).unwrap(), x);
    }

    #[test]
    fn architecture_validation() {
        assert!(NetArch::new(vec![2], Activation::Relu).validate().is_err());
        assert!(NetArch::new(vec![2, 0, 1], Activation::Relu).validate().is_err());
        assert!(NetArch::new(vec![2, 3, 1], Activation::SinCosMix).validate().is_err());
        assert!(NetArch::new(vec![2, 4, 1], Activation::SinCosMix).validate().is_ok());
        let arch = NetArch::new(vec![2, 4, 1], Activation::Relu);
        assert_eq!(arch.num_params(), 2 * 4 + 4 + 4 + 1);
        assert!(FeedForwardNet::from_params(arch, vec![0.0; 3], None).is_err());
    }

    #[test]
    fn serde_round_trip_preserves_outputs() {
        let mut net = random_net(vec![2, 6, 1], Activation::SinCosMix, true, 8);
        let x = random_batch(5, 2, 8);
        net.forward_train(&x).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: FeedForwardNet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.forward_eval(&x).unwrap(), net.forward_eval(&x).unwrap());
    }
}
