//! Multi-task network: fDLR input transform, shared sigmoid stack, and named
//! softmax heads over phoneme states and token states.
//!
//! Parameters are grouped for freezing: `fdlr`, `shared`, `spkcode` (only
//! when a speaker code is attached) and `head:<name>` per output head.

mod io;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvConfig;

pub use io::{load_model, read_model, save_model, write_model, MAGIC, VERSION};
pub use train::{
    backprop, backprop_from_top, fuse_posteriors, multitask_loss, Gradients, HeadTargets, LossBreakdown,
    LossMode, LossWeights, Sgd,
};

pub const PHONEME_HEAD: &str = "phoneme";
pub const FDLR_GROUP: &str = "fdlr";
pub const SHARED_GROUP: &str = "shared";
pub const SPKCODE_GROUP: &str = "spkcode";

pub fn head_group(name: &str) -> String {
    format!("head:{name}")
}

/// Name of the token head trained on a granularity `(m, n)`.
pub fn token_head_name(m: usize, n: usize) -> String {
    format!("token({m},{n})")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Sigmoid,
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply(self, a: &mut Array2<f64>) {
        match self {
            Nonlinearity::Sigmoid => a.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Nonlinearity::Tanh => a.mapv_inplace(f64::tanh),
            Nonlinearity::Relu => a.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Multiplies `delta` by the derivative, expressed through the output `h`.
    fn backprop(self, delta: &mut Array2<f64>, h: &Array2<f64>) {
        match self {
            Nonlinearity::Sigmoid => delta.zip_mut_with(h, |d, &y| *d *= y * (1.0 - y)),
            Nonlinearity::Tanh => delta.zip_mut_with(h, |d, &y| *d *= 1.0 - y * y),
            Nonlinearity::Relu => delta.zip_mut_with(h, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Nonlinearity::Sigmoid => 0,
            Nonlinearity::Tanh => 1,
            Nonlinearity::Relu => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Nonlinearity::Sigmoid),
            1 => Some(Nonlinearity::Tanh),
            2 => Some(Nonlinearity::Relu),
            _ => None,
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Nonlinearity::Sigmoid => "sigmoid",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
        })
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Nonlinearity::Sigmoid),
            "tanh" => Ok(Nonlinearity::Tanh),
            "relu" => Ok(Nonlinearity::Relu),
            _ => Err(Error::Config(format!("unknown nonlinearity {s:?}"))),
        }
    }
}

/// One block-sized transform replicated over every context block, or one
/// full-width transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdlrMode {
    SharedBlock,
    Full,
}

impl fmt::Display for FdlrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FdlrMode::SharedBlock => "shared-block",
            FdlrMode::Full => "full",
        })
    }
}

impl FromStr for FdlrMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-block" => Ok(FdlrMode::SharedBlock),
            "full" => Ok(FdlrMode::Full),
            _ => Err(Error::Config(format!("unknown fdlr mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub block_dim: usize,
    pub fdlr_mode: FdlrMode,
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    /// Width of an optional extra hidden layer inside each head.
    pub head_hidden: Option<usize>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 351,
            block_dim: 39,
            fdlr_mode: FdlrMode::SharedBlock,
            hidden: vec![2048; 4],
            nonlinearity: Nonlinearity::Sigmoid,
            head_hidden: None,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Small stack for synthetic experiments.
    pub fn desk_scale() -> Self {
        Self {
            hidden: vec![128; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.block_dim == 0 || self.input_dim % self.block_dim != 0 {
            return Err(Error::Config(format!(
                "input_dim {} is not a multiple of block_dim {}",
                self.input_dim, self.block_dim
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("input_dim", self.input_dim);
        kv.set("block_dim", self.block_dim);
        kv.set("fdlr_mode", self.fdlr_mode);
        kv.set_list("hidden", &self.hidden);
        kv.set("nonlinearity", self.nonlinearity);
        kv.set("head_hidden", self.head_hidden.unwrap_or(0));
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::desk_scale();
        let head_hidden: usize = kv.get_or("head_hidden", 0)?;
        let cfg = Self {
            input_dim: kv.get_or("input_dim", d.input_dim)?,
            block_dim: kv.get_or("block_dim", d.block_dim)?,
            fdlr_mode: kv.get_or("fdlr_mode", d.fdlr_mode)?,
            hidden: kv.get_list_or("hidden", d.hidden)?,
            nonlinearity: kv.get_or("nonlinearity", d.nonlinearity)?,
            head_hidden: (head_hidden > 0).then_some(head_hidden),
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Affine layer stored input-major: `y = x · w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// Uniform Glorot initialization, scaled by 4 for sigmoid units.
    pub fn random(input: usize, output: usize, nl: Nonlinearity, rng: &mut ChaCha8Rng) -> Self {
        let mut r = (6.0 / (input + output) as f64).sqrt();
        if nl == Nonlinearity::Sigmoid {
            r *= 4.0;
        }
        Self {
            w: Array2::from_shape_fn((input, output), |_| rng.random_range(-r..r)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdlrTransform {
    pub mode: FdlrMode,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl FdlrTransform {
    pub fn identity(mode: FdlrMode, input_dim: usize, block_dim: usize) -> Self {
        let d = match mode {
            FdlrMode::SharedBlock => block_dim,
            FdlrMode::Full => input_dim,
        };
        Self {
            mode,
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn is_identity(&self) -> bool {
        self.weight == Array2::<f64>::eye(self.dim()) && self.bias.iter().all(|&b| b == 0.0)
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let d = self.dim();
        if x.ncols() % d != 0 {
            return Err(Error::Shape(format!("input width {} not a multiple of {d}", x.ncols())));
        }
        let (n, cols) = x.dim();
        let blocks = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * cols / d, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut y = blocks.dot(&self.weight);
        y += &self.bias;
        y.into_shape_with_order((n, cols)).map_err(|e| Error::Shape(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedStack {
    pub layers: Vec<Dense>,
    pub nonlinearity: Nonlinearity,
}

impl SharedStack {
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer output {} feeds layer input {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub name: String,
    pub hidden: Option<Dense>,
    pub out: Dense,
}

impl OutputHead {
    pub fn inventory(&self) -> usize {
        self.out.output_dim()
    }
}

/// Learned speaker vector fed into the first hidden layer through `proj`:
/// the first pre-activation gains `proj · code`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerCode {
    pub code: Array1<f64>,
    pub proj: Array2<f64>,
}

impl SpeakerCode {
    /// Zero code with a small random projection, so the network output is
    /// unchanged until the code moves.
    pub fn new(code_dim: usize, first_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (code_dim as f64).sqrt();
        Self {
            code: Array1::zeros(code_dim),
            proj: Array2::from_shape_fn((first_width, code_dim), |_| rng.random_range(-r..r)),
        }
    }

    pub fn offset(&self) -> Array1<f64> {
        self.proj.dot(&self.code)
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trunk {
    /// Output of the fDLR transform.
    pub input: Array2<f64>,
    /// Output of every shared layer, bottom first.
    pub hidden: Vec<Array2<f64>>,
}

impl Trunk {
    pub fn top(&self) -> &Array2<f64> {
        self.hidden.last().expect("stack has at least one layer")
    }
}

pub type Posteriors = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PtdnnModel {
    pub config: NetConfig,
    pub fdlr: FdlrTransform,
    pub shared: SharedStack,
    pub speaker_code: Option<SpeakerCode>,
    pub heads: Vec<OutputHead>,
    frozen: BTreeMap<String, bool>,
}

impl PtdnnModel {
    /// Identity fDLR, randomly initialized stack, and a single phoneme head.
    pub fn new(config: NetConfig, phoneme_states: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut prev = config.input_dim;
        for &w in &config.hidden {
            layers.push(Dense::random(prev, w, config.nonlinearity, &mut rng));
            prev = w;
        }
        let mut model = Self {
            fdlr: FdlrTransform::identity(config.fdlr_mode, config.input_dim, config.block_dim),
            shared: SharedStack {
                layers,
                nonlinearity: config.nonlinearity,
            },
            speaker_code: None,
            heads: Vec::new(),
            frozen: BTreeMap::new(),
            config,
        };
        model.add_head(PHONEME_HEAD, phoneme_states, rng.random())?;
        Ok(model)
    }

    /// Assembles a model from parts; every group starts trainable.
    pub fn from_parts(
        config: NetConfig,
        fdlr: FdlrTransform,
        shared: SharedStack,
        speaker_code: Option<SpeakerCode>,
        heads: Vec<OutputHead>,
    ) -> Result<Self> {
        let mut model = Self {
            config,
            fdlr,
            shared,
            speaker_code,
            heads: Vec::new(),
            frozen: BTreeMap::new(),
        };
        for h in heads {
            model.insert_head(h)?;
        }
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.shared.validate()?;
        if self.heads.is_empty() {
            return Err(Error::Config("model has no output heads".into()));
        }
        let first = self.shared.layers[0].input_dim();
        if first != self.config.input_dim {
            return Err(Error::Shape(format!("first layer takes {first}, input is {}", self.config.input_dim)));
        }
        if let Some(sc) = &self.speaker_code {
            if sc.proj.dim() != (self.shared.layers[0].output_dim(), sc.code.len()) {
                return Err(Error::Shape("speaker-code projection does not match first layer".into()));
            }
        }
        for h in &self.heads {
            if h.inventory() < 2 {
                return Err(Error::Config(format!("head {} has fewer than 2 states", h.name)));
            }
        }
        for g in self.frozen.keys() {
            if !self.group_names().contains(g) {
                return Err(Error::Config(format!("freeze mask names unknown group {g}")));
            }
        }
        Ok(())
    }

    fn insert_head(&mut self, head: OutputHead) -> Result<()> {
        if self.head(&head.name).is_some() {
            return Err(Error::Config(format!("duplicate head {}", head.name)));
        }
        if head.inventory() < 2 {
            return Err(Error::Config(format!("head {} has fewer than 2 states", head.name)));
        }
        let want = head.hidden.as_ref().unwrap_or(&head.out).input_dim();
        if want != self.shared.output_dim() {
            return Err(Error::Shape(format!("head {} takes {want} inputs", head.name)));
        }
        self.heads.push(head);
        Ok(())
    }

    /// Adds a randomly initialized softmax head.
    pub fn add_head(&mut self, name: &str, states: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = self.shared.output_dim();
        let nl = self.config.nonlinearity;
        let (hidden, out_in) = match self.config.head_hidden {
            Some(w) => (Some(Dense::random(top, w, nl, &mut rng)), w),
            None => (None, top),
        };
        // softmax layer: unscaled Glorot
        let out = Dense::random(out_in, states, Nonlinearity::Tanh, &mut rng);
        self.insert_head(OutputHead {
            name: name.to_string(),
            hidden,
            out,
        })
    }

    pub fn remove_head(&mut self, name: &str) -> Option<OutputHead> {
        let i = self.heads.iter().position(|h| h.name == name)?;
        self.frozen.remove(&head_group(name));
        Some(self.heads.remove(i))
    }

    pub fn attach_speaker_code(&mut self, code_dim: usize, seed: u64) {
        let w = self.shared.layers[0].output_dim();
        self.speaker_code = Some(SpeakerCode::new(code_dim, w, seed));
    }

    pub fn head(&self, name: &str) -> Option<&OutputHead> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn head_names(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.name.clone()).collect()
    }

    pub fn token_head_names(&self) -> Vec<String> {
        self.heads.iter().filter(|h| h.name != PHONEME_HEAD).map(|h| h.name.clone()).collect()
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut g = vec![FDLR_GROUP.to_string(), SHARED_GROUP.to_string()];
        if self.speaker_code.is_some() {
            g.push(SPKCODE_GROUP.to_string());
        }
        g.extend(self.heads.iter().map(|h| head_group(&h.name)));
        g
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.get(group).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        if !self.group_names().iter().any(|g| g == group) {
            return Err(Error::Config(format!("unknown parameter group {group}")));
        }
        self.frozen.insert(group.to_string(), frozen);
        Ok(())
    }

    /// Freezes every group except those listed.
    pub fn train_only(&mut self, groups: &[&str]) -> Result<()> {
        for g in groups {
            if !self.group_names().iter().any(|n| n == g) {
                return Err(Error::Config(format!("unknown parameter group {g}")));
            }
        }
        for g in self.group_names() {
            let frozen = !groups.contains(&g.as_str());
            self.frozen.insert(g, frozen);
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> Vec<String> {
        self.group_names().into_iter().filter(|g| !self.is_frozen(g)).collect()
    }

    pub fn param_views(&self, group: &str) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        match group {
            FDLR_GROUP => {
                out.push(self.fdlr.weight.view().into_dyn());
                out.push(self.fdlr.bias.view().into_dyn());
            }
            SHARED_GROUP => {
                for l in &self.shared.layers {
                    out.push(l.w.view().into_dyn());
                    out.push(l.b.view().into_dyn());
                }
            }
            SPKCODE_GROUP => {
                if let Some(sc) = &self.speaker_code {
                    out.push(sc.code.view().into_dyn());
                    out.push(sc.proj.view().into_dyn());
                }
            }
            g => {
                if let Some(h) = g.strip_prefix("head:").and_then(|n| self.head(n)) {
                    if let Some(d) = &h.hidden {
                        out.push(d.w.view().into_dyn());
                        out.push(d.b.view().into_dyn());
                    }
                    out.push(h.out.w.view().into_dyn());
                    out.push(h.out.b.view().into_dyn());
                }
            }
        }
        out
    }

    pub fn param_views_mut(&mut self, group: &str) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        match group {
            FDLR_GROUP => {
                out.push(self.fdlr.weight.view_mut().into_dyn());
                out.push(self.fdlr.bias.view_mut().into_dyn());
            }
            SHARED_GROUP => {
                for l in &mut self.shared.layers {
                    out.push(l.w.view_mut().into_dyn());
                    out.push(l.b.view_mut().into_dyn());
                }
            }
            SPKCODE_GROUP => {
                if let Some(sc) = &mut self.speaker_code {
                    out.push(sc.code.view_mut().into_dyn());
                    out.push(sc.proj.view_mut().into_dyn());
                }
            }
            g => {
                let name = g.strip_prefix("head:").unwrap_or("");
                if let Some(h) = self.heads.iter_mut().find(|h| h.name == name) {
                    if let Some(d) = &mut h.hidden {
                        out.push(d.w.view_mut().into_dyn());
                        out.push(d.b.view_mut().into_dyn());
                    }
                    out.push(h.out.w.view_mut().into_dyn());
                    out.push(h.out.b.view_mut().into_dyn());
                }
            }
        }
        out
    }

    pub fn group_len(&self, group: &str) -> usize {
        self.param_views(group).iter().map(|v| v.len()).sum()
    }

    /// Exact little-endian f64 bytes of a parameter group.
    pub fn group_bytes(&self, group: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.group_len(group) * 8);
        for v in self.param_views(group) {
            for x in v.iter() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        self.group_names().into_iter().map(|g| (g.clone(), self.group_bytes(&g))).collect()
    }

    pub fn num_params(&self) -> usize {
        self.group_names().iter().map(|g| self.group_len(g)).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, batch has {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// fDLR transform and shared stack.
    pub fn trunk(&self, x: ArrayView2<f64>) -> Result<Trunk> {
        self.check_input(&x)?;
        let input = self.fdlr.apply(&x)?;
        let nl = self.shared.nonlinearity;
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.shared.layers.len());
        for (i, layer) in self.shared.layers.iter().enumerate() {
            let below = if i == 0 { input.view() } else { hidden[i - 1].view() };
            let mut a = layer.forward(&below);
            if i == 0 {
                if let Some(sc) = &self.speaker_code {
                    a += &sc.offset();
                }
            }
            nl.apply(&mut a);
            hidden.push(a);
        }
        Ok(Trunk { input, hidden })
    }

    /// Hidden output of a head and its posteriors, given top activations.
    pub(crate) fn head_forward(&self, head: &OutputHead, top: &ArrayView2<f64>) -> (Option<Array2<f64>>, Array2<f64>) {
        let hidden = head.hidden.as_ref().map(|d| {
            let mut a = d.forward(top);
            self.shared.nonlinearity.apply(&mut a);
            a
        });
        let logits = match &hidden {
            Some(h) => head.out.forward(&h.view()),
            None => head.out.forward(top),
        };
        (hidden, softmax_rows(logits))
    }

    pub fn heads_from_top(&self, top: ArrayView2<f64>) -> Posteriors {
        self.heads
            .iter()
            .map(|h| (h.name.clone(), self.head_forward(h, &top).1))
            .collect()
    }

    /// Posteriors of every head; the trunk is evaluated once.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Posteriors> {
        let trunk = self.trunk(x)?;
        Ok(self.heads_from_top(trunk.top().view()))
    }

    pub fn forward_head(&self, x: ArrayView2<f64>, name: &str) -> Result<Array2<f64>> {
        let head = self.head(name).ok_or_else(|| Error::Config(format!("no head named {name}")))?;
        let trunk = self.trunk(x)?;
        Ok(self.head_forward(head, &trunk.top().view()).1)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - hi).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    logits
}

/// Per-row argmax; ties go to the lower index.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PtdnnModel {
        let cfg = NetConfig {
            input_dim: 6,
            block_dim: 2,
            hidden: vec![5, 4],
            ..NetConfig::default()
        };
        PtdnnModel::new(cfg, 3).unwrap()
    }

    fn batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_fdlr_is_exact() {
        let f = FdlrTransform::identity(FdlrMode::SharedBlock, 351, 39);
        let x = batch(7, 351, 1);
        assert_eq!(f.apply(&x.view()).unwrap(), x);
        let f = FdlrTransform::identity(FdlrMode::Full, 351, 39);
        assert_eq!(f.apply(&x.view()).unwrap(), x);
    }

    #[test]
    fn shared_block_applies_per_block() {
        let mut f = FdlrTransform::identity(FdlrMode::SharedBlock, 4, 2);
        f.weight = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        f.bias = ndarray::array![10.0, 20.0];
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(f.apply(&x.view()).unwrap(), ndarray::array![[12.0, 21.0, 14.0, 23.0]]);
    }

    #[test]
    fn posteriors_are_stochastic() {
        let mut m = tiny();
        m.add_head("token(3,4)", 12, 9).unwrap();
        let p = m.forward(batch(10, 6, 2).view()).unwrap();
        assert_eq!(p.len(), 2);
        for post in p.values() {
            for row in post.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(p["token(3,4)"].ncols(), 12);
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let m = tiny();
        assert!(matches!(m.forward(batch(2, 5, 0).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_speaker_code_leaves_output_unchanged() {
        let m = tiny();
        let mut with = m.clone();
        with.attach_speaker_code(3, 4);
        let x = batch(4, 6, 3);
        assert_eq!(m.forward(x.view()).unwrap(), with.forward(x.view()).unwrap());
        with.speaker_code.as_mut().unwrap().proj.fill(0.0);
        with.speaker_code.as_mut().unwrap().code.fill(0.0);
        assert_eq!(m.forward(x.view()).unwrap(), with.forward(x.view()).unwrap());
    }

    #[test]
    fn groups_and_freeze_mask() {
        let mut m = tiny();
        m.add_head("token(3,4)", 12, 9).unwrap();
        assert_eq!(m.group_names(), vec!["fdlr", "shared", "head:phoneme", "head:token(3,4)"]);
        m.train_only(&["head:token(3,4)"]).unwrap();
        assert_eq!(m.trainable_groups(), vec!["head:token(3,4)"]);
        assert!(m.set_frozen("nope", true).is_err());
        assert_eq!(m.group_bytes("fdlr").len(), (4 + 2) * 8);
    }

    #[test]
    fn duplicate_or_tiny_heads_rejected() {
        let mut m = tiny();
        assert!(m.add_head(PHONEME_HEAD, 3, 0).is_err());
        assert!(m.add_head("t", 1, 0).is_err());
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = NetConfig {
            head_hidden: Some(32),
            nonlinearity: Nonlinearity::Tanh,
            ..NetConfig::desk_scale()
        };
        assert_eq!(NetConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
