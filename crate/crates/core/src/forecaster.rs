//! End-to-end forecaster: embedding, scattering scale features, scale
//! attention, a stack of multi-resolution attention blocks and a linear head.
//!
//! ```text
//! x [T_s x C] -> z-score per channel
//!   E   = x W_e + b_e + PE
//!   H_j = E + G_j W_j + b_j          G_j = [S0, S1[j], S2[j, j2 > j]] per channel
//!   H   = (sum_j alpha_j H_j) * gamma
//!   H   = LayerNorm(H + MRTA(H)) * gain + bias      (per layer)
//!   y   = flatten(H) W_h + b_h  -> [T_p x C] -> de-normalize
//! ```

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowNorm;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::filterbank::{identity_kernel, learnable_filter_on_tape, min_wavelet_len, FilterBank};
use crate::hstm::{path_index, scatter_on_tape};
use crate::mrta::{self, HeadVars, LayerVars};
use crate::safe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length `T_s`.
    pub input_len: usize,
    /// Forecast horizon `T_p`.
    pub horizon: usize,
    /// Normalizer for the horizon gate.
    pub max_horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub j_max: u32,
    pub strides: Vec<usize>,
    pub mrta_layers: usize,
    pub kernel_len: usize,
    pub use_hstm: bool,
    pub use_safe: bool,
    pub use_mrta: bool,
    pub use_tsr_loss: bool,
    /// Decomposition period for the loss; detected from data when absent.
    pub period: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 24,
            max_horizon: 720,
            channels: 1,
            d_model: 64,
            d_attn: 32,
            j_max: 4,
            strides: vec![1, 2, 4],
            mrta_layers: 2,
            kernel_len: crate::filterbank::DEFAULT_KERNEL_LEN,
            use_hstm: true,
            use_safe: true,
            use_mrta: true,
            use_tsr_loss: true,
            period: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("d_attn", self.d_attn),
            ("kernel_len", self.kernel_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.horizon > self.max_horizon {
            return Err(Error::Config(format!(
                "horizon {} exceeds max_horizon {}",
                self.horizon, self.max_horizon
            )));
        }
        if self.j_max < 2 {
            return Err(Error::Config(format!("j_max must be >= 2, got {}", self.j_max)));
        }
        if min_wavelet_len(self.j_max) > 2 * self.input_len {
            return Err(Error::Config(format!(
                "input_len {} is too short for j_max {} (needs >= {})",
                self.input_len,
                self.j_max,
                min_wavelet_len(self.j_max).div_ceil(2)
            )));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_len must be odd, got {}",
                self.kernel_len
            )));
        }
        mrta::validate_strides(&self.strides)?;
        if let Some(p) = self.period {
            if p == 0 {
                return Err(Error::Config("period must be positive".into()));
            }
        }
        Ok(())
    }

    /// Strides actually used: the configured set, or `[1]` with MRTA ablated.
    pub fn effective_strides(&self) -> Vec<usize> {
        if self.use_mrta {
            self.strides.clone()
        } else {
            vec![1]
        }
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Hstm => self.use_hstm = false,
            Ablation::Safe => self.use_safe = false,
            Ablation::Mrta => self.use_mrta = false,
            Ablation::Tsr => self.use_tsr_loss = false,
        }
    }

    /// Number of per-channel features in scale group `j`: S0, S1[j] and the
    /// second-order paths starting at `j`.
    pub fn group_width(&self, j: u32) -> usize {
        2 + (self.j_max - j) as usize
    }
}

/// Single-module ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Learnable kernels frozen at the identity.
    Hstm,
    /// Uniform scale weights and no horizon gate.
    Safe,
    /// Single-resolution attention.
    Mrta,
    /// Plain MSE loss.
    Tsr,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Hstm, Ablation::Safe, Ablation::Mrta, Ablation::Tsr];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Hstm => "hstm",
            Ablation::Safe => "safe",
            Ablation::Mrta => "mrta",
            Ablation::Tsr => "tsr",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Hstm => "- HSTM (Standard Wavelet)",
            Ablation::Safe => "- SAFE (Fixed Weighting)",
            Ablation::Mrta => "- MRTA (Standard Attention)",
            Ablation::Tsr => "- TSR Loss",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}, expected hstm|safe|mrta|tsr")))
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Contract(format!("no parameter named {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::dim("set_flat", &[self.num_scalars()], &[values.len()]));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape())).expect("names are unique");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
    Identity,
}

/// Names, shapes and initializers of every parameter implied by `config`.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (c, d_model, d) = (config.channels, config.d_model, config.d_attn);
    let mut specs = vec![
        ("embed.weight".to_string(), vec![c, d_model], Init::Xavier),
        ("embed.bias".to_string(), vec![d_model], Init::Zeros),
    ];
    if config.use_hstm {
        for j in 1..=config.j_max {
            specs.push((format!("hstm.g.{j}"), vec![config.kernel_len], Init::Identity));
        }
    }
    for j in 1..=config.j_max {
        specs.push((
            format!("hstm.proj.{j}.weight"),
            vec![c * config.group_width(j), d_model],
            Init::Xavier,
        ));
        specs.push((format!("hstm.proj.{j}.bias"), vec![d_model], Init::Zeros));
    }
    if config.use_safe {
        specs.push(("safe.w_alpha".into(), vec![d_model], Init::Zeros));
        specs.push(("safe.w_gamma".into(), vec![d_model], Init::Zeros));
        specs.push(("safe.b_gamma".into(), vec![d_model], Init::Zeros));
    }
    let strides = config.effective_strides();
    for l in 0..config.mrta_layers {
        for r in &strides {
            for w in ["wq", "wk", "wv"] {
                specs.push((format!("mrta.{l}.r{r}.{w}"), vec![d_model, d], Init::Xavier));
            }
        }
        if strides.len() > 1 {
            specs.push((format!("mrta.{l}.w_logits"), vec![strides.len()], Init::Zeros));
        }
        specs.push((format!("mrta.{l}.wo"), vec![d, d_model], Init::Xavier));
        specs.push((format!("mrta.{l}.bo"), vec![d_model], Init::Zeros));
        specs.push((format!("mrta.{l}.ln.gain"), vec![d_model], Init::Ones));
        specs.push((format!("mrta.{l}.ln.bias"), vec![d_model], Init::Zeros));
    }
    specs.push((
        "head.weight".into(),
        vec![config.input_len * d_model, config.horizon * c],
        Init::Xavier,
    ));
    specs.push(("head.bias".into(), vec![config.horizon * c], Init::Zeros));
    specs
}

/// Seeded initialization: Xavier-uniform matrices, zero biases, unit gains
/// and identity kernels.
pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in param_specs(config) {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::Identity => identity_kernel(shape[0]),
            Init::Xavier => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape[0] * shape[1];
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?
            }
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Checks that `params` holds exactly the names and shapes `config` implies.
pub fn check_params(config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let specs = param_specs(config);
    let expected: Vec<&str> = specs.iter().map(|s| s.0.as_str()).collect();
    let missing: Vec<&str> = expected.iter().copied().filter(|n| !params.contains(n)).collect();
    let extra: Vec<&str> = params
        .names()
        .iter()
        .map(String::as_str)
        .filter(|n| !expected.contains(n))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "parameter set does not match config: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, shape, _) in &specs {
        let got = params.get(name)?.shape();
        if got != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {got:?}, config implies {shape:?}"
            )));
        }
    }
    Ok(())
}

/// Fixed sinusoidal position encoding `[len x d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * freq;
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches data")
}

/// `x W + b + PE`.
pub fn embed(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(weight)?;
    if bias.len() != out.cols() {
        return Err(Error::dim("embed", out.shape(), bias.shape()));
    }
    let pe = positional_encoding(out.rows(), out.cols());
    let d = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % d] + pe.data()[i];
    }
    Ok(out)
}

/// Parameters and fixed tensors bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
    filters: Vec<(Var, Var)>,
    lowpass: Var,
    position: Var,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// `(name, var)` in parameter order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.order
    }
}

/// Vars produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Normalized forecast `[T_p x C]`.
    pub output: Var,
    pub alpha: Var,
    pub gamma: Option<Var>,
    pub layers: Vec<mrta::LayerTrace>,
}

/// Values from one forward pass, for inspection.
#[derive(Clone, Debug)]
pub struct Trace {
    pub alpha: Tensor,
    pub gamma: Option<Tensor>,
    /// Attention matrices per layer and stride.
    pub attention: Vec<Vec<Tensor>>,
    /// Combine weights per layer, absent for a single stride.
    pub combine: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Forecaster {
    config: ModelConfig,
    params: ParamStore,
    bank: FilterBank,
}

impl Forecaster {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        let bank = FilterBank::new(config.j_max, config.input_len, config.kernel_len)?;
        Ok(Self { config, params, bank })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// The same trained model with `ablation`'s block bypassed at inference:
    /// parameters the ablated config no longer uses are dropped.
    pub fn bypass(&self, ablation: Ablation) -> Result<Self> {
        let mut config = self.config.clone();
        config.apply_ablation(ablation);
        let mut params = ParamStore::new();
        for (name, shape, _) in param_specs(&config) {
            let t = self
                .params
                .get(&name)
                .map_err(|_| Error::Config(format!("cannot bypass {ablation}: the model has no parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("bypass", t.shape(), &shape));
            }
            params.insert(name, t.clone())?;
        }
        Self::from_params(config, params)
    }

    /// Learnable kernels per scale; identities when HSTM is ablated.
    pub fn kernels(&self) -> Vec<Tensor> {
        (1..=self.config.j_max)
            .map(|j| match self.params.get(&format!("hstm.g.{j}")) {
                Ok(g) => g.clone(),
                Err(_) => identity_kernel(self.config.kernel_len),
            })
            .collect()
    }

    /// Binds parameters (as trainable leaves or constants), filters and the
    /// position encoding to `tape`. Filters are built once per tape and
    /// shared by every window forwarded on it.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = HashMap::new();
        let mut order = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
            order.push((name.to_string(), v));
        }
        let filters = if self.config.use_hstm {
            (1..=self.config.j_max)
                .map(|j| learnable_filter_on_tape(tape, self.bank.wavelet(j), vars[&format!("hstm.g.{j}")]))
                .collect::<Result<Vec<_>>>()?
        } else {
            self.bank
                .effective_filters()?
                .into_iter()
                .map(|f| (tape.constant(f.re), tape.constant(f.im)))
                .collect()
        };
        let lowpass = tape.constant(self.bank.lowpass().clone());
        let position = tape.constant(positional_encoding(self.config.input_len, self.config.d_model));
        Ok(Bound {
            vars,
            order,
            filters,
            lowpass,
            position,
        })
    }

    /// Forward pass on an already normalized `[T_s x C]` window.
    pub fn forward_normalized(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<ForwardVars> {
        let cfg = &self.config;
        let shape = tape.value(x).shape().to_vec();
        if shape != [cfg.input_len, cfg.channels] {
            return Err(Error::dim("forward", &shape, &[cfg.input_len, cfg.channels]));
        }
        let p = |name: &str| bound.var(name);

        let e = tape.matmul(x, p("embed.weight")?)?;
        let e = tape.add_row(e, p("embed.bias")?)?;
        let e = tape.add(e, bound.position)?;

        let mut per_channel = Vec::with_capacity(cfg.channels);
        for c in 0..cfg.channels {
            let col = tape.column(x, c)?;
            per_channel.push(scatter_on_tape(tape, col, &bound.filters, bound.lowpass)?);
        }
        let paths = path_index(cfg.j_max);
        let mut groups = Vec::with_capacity(cfg.j_max as usize);
        for j in 1..=cfg.j_max {
            let mut cols = Vec::with_capacity(cfg.channels * cfg.group_width(j));
            for s in &per_channel {
                cols.push(s.s0);
                cols.push(s.s1[j as usize - 1]);
                for (k, &(j1, _)) in paths.iter().enumerate() {
                    if j1 == j {
                        cols.push(s.s2[k]);
                    }
                }
            }
            let feats = tape.concat_cols(&cols)?;
            let h = tape.matmul(feats, p(&format!("hstm.proj.{j}.weight"))?)?;
            let h = tape.add_row(h, p(&format!("hstm.proj.{j}.bias"))?)?;
            groups.push(tape.add(e, h)?);
        }

        let (mut h, alpha, gamma) = if cfg.use_safe {
            let alpha = safe::scale_attention_on_tape(tape, &groups, p("safe.w_alpha")?)?;
            let fraction = safe::horizon_fraction(cfg.horizon, cfg.max_horizon)?;
            let gamma = safe::horizon_gate_on_tape(tape, fraction, p("safe.w_gamma")?, p("safe.b_gamma")?)?;
            (
                safe::enhance_on_tape(tape, &groups, alpha, Some(gamma))?,
                alpha,
                Some(gamma),
            )
        } else {
            let n = groups.len();
            let alpha = tape.constant(Tensor::full(&[n], 1.0 / n as f64));
            (safe::enhance_on_tape(tape, &groups, alpha, None)?, alpha, None)
        };

        let strides = cfg.effective_strides();
        let mut layers = Vec::with_capacity(cfg.mrta_layers);
        for l in 0..cfg.mrta_layers {
            let heads = strides
                .iter()
                .map(|r| {
                    Ok(HeadVars {
                        wq: p(&format!("mrta.{l}.r{r}.wq"))?,
                        wk: p(&format!("mrta.{l}.r{r}.wk"))?,
                        wv: p(&format!("mrta.{l}.r{r}.wv"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let layer = LayerVars {
                strides: strides.clone(),
                heads,
                w_logits: if strides.len() > 1 {
                    Some(p(&format!("mrta.{l}.w_logits"))?)
                } else {
                    None
                },
                wo: p(&format!("mrta.{l}.wo"))?,
                bo: p(&format!("mrta.{l}.bo"))?,
                ln_gain: p(&format!("mrta.{l}.ln.gain"))?,
                ln_bias: p(&format!("mrta.{l}.ln.bias"))?,
            };
            let (out, trace) = mrta::layer_on_tape(tape, h, &layer)?;
            h = out;
            layers.push(trace);
        }

        let flat = tape.reshape(h, &[1, cfg.input_len * cfg.d_model])?;
        let y = tape.matmul(flat, p("head.weight")?)?;
        let y = tape.reshape(y, &[cfg.horizon * cfg.channels])?;
        let y = tape.add(y, p("head.bias")?)?;
        let output = tape.reshape(y, &[cfg.horizon, cfg.channels])?;
        Ok(ForwardVars {
            output,
            alpha,
            gamma,
            layers,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expect = [self.config.input_len, self.config.channels];
        if x.shape() != expect {
            return Err(Error::dim("forward", x.shape(), &expect));
        }
        if !x.is_finite() {
            return Err(Error::Data("input window contains non-finite values".into()));
        }
        Ok(())
    }

    /// Forecast `[T_p x C]` in the units of the raw `[T_s x C]` input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_trace(x)?.0)
    }

    pub fn predict_with_trace(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let norm = WindowNorm::fit(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(norm.normalize(x)?);
        let fwd = self.forward_normalized(&mut tape, &bound, xv)?;
        let y = norm.denormalize(tape.value(fwd.output))?;
        let trace = Trace {
            alpha: tape.value(fwd.alpha).clone(),
            gamma: fwd.gamma.map(|g| tape.value(g).clone()),
            attention: fwd
                .layers
                .iter()
                .map(|l| l.attention.iter().map(|a| tape.value(*a).clone()).collect())
                .collect(),
            combine: fwd
                .layers
                .iter()
                .map(|l| l.combine.map(|w| tape.value(w).clone()))
                .collect(),
        };
        Ok((y, trace))
    }
}
