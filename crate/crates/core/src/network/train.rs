//! Multi-task loss, backpropagation with freeze masks, and SGD.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};

use super::{OutputHead, Posteriors, PtdnnModel, FDLR_GROUP, PHONEME_HEAD, SHARED_GROUP, SPKCODE_GROUP};
use crate::error::{Error, Result};
use crate::kv::KvConfig;

/// Per-frame target state index for each head, keyed by head name.
pub type HeadTargets = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Phoneme head plus token heads.
    Labeled,
    /// Token heads only.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub phoneme: f64,
    /// Weight of every token head without an override.
    pub token: f64,
    pub per_head: BTreeMap<String, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            phoneme: 4.0,
            token: 1.0,
            per_head: BTreeMap::new(),
        }
    }
}

impl LossWeights {
    pub fn new(phoneme: f64, token: f64) -> Self {
        Self {
            phoneme,
            token,
            per_head: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.phoneme) || !ok(self.token) || !self.per_head.values().all(|&w| ok(w)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn weight(&self, head: &str) -> f64 {
        if head == PHONEME_HEAD {
            self.phoneme
        } else {
            self.per_head.get(head).copied().unwrap_or(self.token)
        }
    }

    /// Weight of `head` under `mode`; the phoneme head is inactive on
    /// unlabeled batches.
    pub fn active_weight(&self, head: &str, mode: LossMode) -> f64 {
        match mode {
            LossMode::Unlabeled if head == PHONEME_HEAD => 0.0,
            _ => self.weight(head),
        }
    }

    /// Weighted sum of per-head mean cross-entropies.
    pub fn combine(&self, components: &BTreeMap<String, f64>, mode: LossMode) -> f64 {
        components
            .iter()
            .map(|(h, c)| {
                let w = self.active_weight(h, mode);
                if w == 0.0 {
                    0.0
                } else {
                    w * c
                }
            })
            .sum()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("w_phoneme", self.phoneme);
        kv.set("w_token", self.token);
        for (h, w) in &self.per_head {
            kv.set(&format!("w_head.{h}"), w);
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut w = Self::new(kv.get_or("w_phoneme", 4.0)?, kv.get_or("w_token", 1.0)?);
        for (k, v) in kv.iter() {
            if let Some(h) = k.strip_prefix("w_head.") {
                let x: f64 = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad weight for head {h}: {v:?}")))?;
                w.per_head.insert(h.to_string(), x);
            }
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub mode: LossMode,
    pub total: f64,
    /// Mean cross-entropy of each active head.
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn phoneme(&self) -> Option<f64> {
        self.components.get(PHONEME_HEAD).copied()
    }
}

fn mean_cross_entropy(p: &Array2<f64>, targets: &[usize]) -> f64 {
    let n = targets.len().max(1) as f64;
    targets
        .iter()
        .enumerate()
        .map(|(t, &s)| -p[[t, s]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n
}

fn check_targets(name: &str, inventory: usize, frames: usize, tg: &[usize]) -> Result<()> {
    if tg.len() != frames {
        return Err(Error::Target(format!("head {name}: {} targets for {frames} frames", tg.len())));
    }
    if let Some(&bad) = tg.iter().find(|&&s| s >= inventory) {
        return Err(Error::Target(format!("head {name}: target {bad} outside inventory {inventory}")));
    }
    Ok(())
}

/// Heads that contribute under `mode`, with their weights. A head with
/// positive weight and no targets is an error; in labeled mode the phoneme
/// head always needs targets.
fn active_heads<'a>(
    heads: impl Iterator<Item = (&'a str, usize)>,
    frames: usize,
    targets: &'a HeadTargets,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<Vec<(&'a str, f64, &'a [usize])>> {
    let mut out = Vec::new();
    for (name, inventory) in heads {
        let w = weights.active_weight(name, mode);
        let needs = w > 0.0 || (mode == LossMode::Labeled && name == PHONEME_HEAD);
        match targets.get(name) {
            Some(tg) if w > 0.0 || needs => {
                check_targets(name, inventory, frames, tg)?;
                if mode == LossMode::Unlabeled && name == PHONEME_HEAD {
                    continue;
                }
                out.push((name, w, tg.as_slice()));
            }
            None if needs => return Err(Error::Target(format!("no targets for active head {name}"))),
            _ => {}
        }
    }
    if out.iter().all(|&(_, w, _)| w == 0.0) {
        return Err(Error::Config("every active loss weight is zero".into()));
    }
    Ok(out)
}

/// Combined objective: `w_phoneme·f_phoneme + Σ w_token·f_token` in labeled
/// mode, the token sum alone in unlabeled mode.
pub fn multitask_loss(
    posteriors: &Posteriors,
    targets: &HeadTargets,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let frames = posteriors.values().next().map_or(0, |p| p.nrows());
    let heads = posteriors.iter().map(|(n, p)| (n.as_str(), p.ncols()));
    let active = active_heads(heads, frames, targets, weights, mode)?;
    let mut components = BTreeMap::new();
    for (name, _, tg) in active {
        components.insert(name.to_string(), mean_cross_entropy(&posteriors[name], tg));
    }
    Ok(LossBreakdown {
        mode,
        total: weights.combine(&components, mode),
        components,
    })
}

/// Gradients for every parameter group, laid out as
/// [`PtdnnModel::param_views`]. Frozen groups hold exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: BTreeMap<String, Vec<ArrayD<f64>>>,
}

impl Gradients {
    pub fn zeros_like(model: &PtdnnModel) -> Self {
        let groups = model
            .group_names()
            .into_iter()
            .map(|g| {
                let z = model.param_views(&g).iter().map(|v| ArrayD::zeros(v.raw_dim())).collect();
                (g, z)
            })
            .collect();
        Self { groups }
    }

    pub fn norm(&self, group: &str) -> f64 {
        self.groups
            .get(group)
            .map_or(0.0, |g| g.iter().map(|a| a.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt())
    }

    pub fn is_zero(&self, group: &str) -> bool {
        self.groups.get(group).is_none_or(|g| g.iter().all(|a| a.iter().all(|&x| x == 0.0)))
    }

    /// Groups containing a non-finite entry, with the count of bad values.
    pub fn non_finite(&self) -> Vec<(String, usize)> {
        self.groups
            .iter()
            .filter_map(|(g, arrs)| {
                let bad: usize = arrs.iter().map(|a| a.iter().filter(|x| !x.is_finite()).count()).sum();
                (bad > 0).then(|| (g.clone(), bad))
            })
            .collect()
    }

    fn set<D: ndarray::Dimension>(&mut self, group: &str, index: usize, value: ndarray::Array<f64, D>) {
        if let Some(g) = self.groups.get_mut(group) {
            g[index] = value.into_dyn();
        }
    }
}

/// Head backward pass. Returns the loss and, when requested, the gradient
/// with respect to the top activations.
fn heads_backward(
    model: &PtdnnModel,
    top: &ArrayView2<f64>,
    targets: &HeadTargets,
    weights: &LossWeights,
    mode: LossMode,
    grads: &mut Gradients,
    need_dtop: bool,
) -> Result<(LossBreakdown, Option<Array2<f64>>)> {
    weights.validate()?;
    let n = top.nrows();
    let heads = model.heads.iter().map(|h| (h.name.as_str(), h.inventory()));
    let active = active_heads(heads, n, targets, weights, mode)?;
    let nl = model.shared.nonlinearity;
    let mut components = BTreeMap::new();
    let mut d_top = need_dtop.then(|| Array2::<f64>::zeros(top.raw_dim()));
    for (name, w, tg) in active {
        let head: &OutputHead = model.head(name).expect("active head exists");
        let (hidden, p) = model.head_forward(head, top);
        components.insert(name.to_string(), mean_cross_entropy(&p, tg));
        let group = super::head_group(name);
        let train_head = !model.is_frozen(&group);
        if w == 0.0 || (!train_head && !need_dtop) {
            continue;
        }
        let mut d_logits = p;
        for (t, &s) in tg.iter().enumerate() {
            d_logits[[t, s]] -= 1.0;
        }
        d_logits *= w / n as f64;
        let out_in = hidden.as_ref().map_or(top.view(), |h| h.view());
        let mut slot = 0;
        if let Some(hd) = &head.hidden {
            let mut d_h = d_logits.dot(&head.out.w.t());
            nl.backprop(&mut d_h, hidden.as_ref().expect("hidden output"));
            if train_head {
                grads.set(&group, 0, top.t().dot(&d_h));
                grads.set(&group, 1, d_h.sum_axis(Axis(0)));
            }
            if let Some(dt) = d_top.as_mut() {
                *dt += &d_h.dot(&hd.w.t());
            }
            slot = 2;
        } else if let Some(dt) = d_top.as_mut() {
            *dt += &d_logits.dot(&head.out.w.t());
        }
        if train_head {
            grads.set(&group, slot, out_in.t().dot(&d_logits));
            grads.set(&group, slot + 1, d_logits.sum_axis(Axis(0)));
        }
    }
    Ok((
        LossBreakdown {
            mode,
            total: weights.combine(&components, mode),
            components,
        },
        d_top,
    ))
}

fn trunk_trainable(model: &PtdnnModel) -> bool {
    let code = model.speaker_code.is_some() && !model.is_frozen(SPKCODE_GROUP);
    code || !model.is_frozen(FDLR_GROUP) || !model.is_frozen(SHARED_GROUP)
}

/// Loss and gradients of one batch. Frozen groups receive exact zeros and
/// backpropagation stops below the lowest trainable group.
pub fn backprop(
    model: &PtdnnModel,
    x: ArrayView2<f64>,
    targets: &HeadTargets,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    if model.trainable_groups().is_empty() {
        log::warn!("every parameter group is frozen; backprop is a no-op");
    }
    let trunk = model.trunk(x)?;
    let need_trunk = trunk_trainable(model);
    let (loss, d_top) = heads_backward(model, &trunk.top().view(), targets, weights, mode, &mut grads, need_trunk)?;
    let Some(mut delta) = d_top else {
        return Ok((loss, grads));
    };

    let nl = model.shared.nonlinearity;
    let train_shared = !model.is_frozen(SHARED_GROUP);
    let train_fdlr = !model.is_frozen(FDLR_GROUP);
    let layers = &model.shared.layers;
    for i in (0..layers.len()).rev() {
        nl.backprop(&mut delta, &trunk.hidden[i]);
        let below = if i == 0 { &trunk.input } else { &trunk.hidden[i - 1] };
        if train_shared {
            grads.set(SHARED_GROUP, 2 * i, below.t().dot(&delta));
            grads.set(SHARED_GROUP, 2 * i + 1, delta.sum_axis(Axis(0)));
        }
        if i == 0 {
            if let Some(sc) = &model.speaker_code {
                if !model.is_frozen(SPKCODE_GROUP) {
                    let s: Array1<f64> = delta.sum_axis(Axis(0));
                    grads.set(SPKCODE_GROUP, 0, sc.proj.t().dot(&s));
                    let outer = s
                        .view()
                        .insert_axis(Axis(1))
                        .dot(&sc.code.view().insert_axis(Axis(0)));
                    grads.set(SPKCODE_GROUP, 1, outer);
                }
            }
            if !train_fdlr {
                break;
            }
        } else if !train_shared && !train_fdlr && !trunk_below_needs(model, i) {
            break;
        }
        delta = delta.dot(&layers[i].w.t());
    }
    if train_fdlr {
        // delta is now the gradient at the fDLR output
        let d = model.fdlr.dim();
        let (n, cols) = x.dim();
        let rows = n * cols / d;
        let xb = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let db = delta.into_shape_with_order((rows, d)).map_err(|e| Error::Shape(e.to_string()))?;
        grads.set(FDLR_GROUP, 0, xb.t().dot(&db));
        grads.set(FDLR_GROUP, 1, db.sum_axis(Axis(0)));
    }
    Ok((loss, grads))
}

/// Whether anything below shared layer `i` still needs a gradient.
fn trunk_below_needs(model: &PtdnnModel, i: usize) -> bool {
    i > 0 && model.speaker_code.is_some() && !model.is_frozen(SPKCODE_GROUP)
}

/// Backpropagation through the heads only, from cached top activations.
/// Every trunk group must be frozen.
pub fn backprop_from_top(
    model: &PtdnnModel,
    top: ArrayView2<f64>,
    targets: &HeadTargets,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(LossBreakdown, Gradients)> {
    if trunk_trainable(model) {
        return Err(Error::Config("cached activations require frozen fdlr, shared and spkcode groups".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let (loss, _) = heads_backward(model, &top, targets, weights, mode, &mut grads, false)?;
    Ok((loss, grads))
}

/// Stochastic gradient descent with momentum over the unfrozen groups.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<ArrayD<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// One update. Non-finite gradients reject the step and leave the model
    /// untouched.
    pub fn step(&mut self, model: &mut PtdnnModel, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        let bad = grads.non_finite();
        if !bad.is_empty() {
            let diag: Vec<String> = bad.iter().map(|(g, c)| format!("{g}: {c} values")).collect();
            return Err(Error::NonFinite(format!("gradient rejected ({})", diag.join(", "))));
        }
        for group in model.trainable_groups() {
            let Some(g) = grads.groups.get(&group) else {
                continue;
            };
            let vel = self
                .velocity
                .entry(group.clone())
                .or_insert_with(|| g.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect());
            for ((mut p, v), gr) in model.param_views_mut(&group).into_iter().zip(vel.iter_mut()).zip(g) {
                if v.shape() != gr.shape() || p.shape() != gr.shape() {
                    return Err(Error::Shape(format!("gradient shape mismatch in group {group}")));
                }
                v.zip_mut_with(gr, |v, &g| *v = self.momentum * *v + g);
                p.zip_mut_with(v, |p, &v| *p -= learning_rate * v);
            }
        }
        Ok(())
    }
}

/// `alpha·a + (1 − alpha)·b`.
pub fn fuse_posteriors(a: &Array2<f64>, b: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("cannot fuse {:?} with {:?}", a.dim(), b.dim())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weight {alpha} outside [0, 1]")));
    }
    Ok(a * alpha + b * (1.0 - alpha))
}
