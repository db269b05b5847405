//! Temporal-translation gradient augmentation and the attack family built
//! on it.
//!
//! The augmented gradient evaluates the loss gradient on 2L+1 temporally
//! translated copies of the working clip, shifts each gradient back to the
//! original frame order and combines them with a symmetric weight matrix:
//!
//! ```text
//! g = Σ_{i=-L..L} w_i · TR_{-i}( ∇_x J(f(TR_i(x)), y) )
//! ```
//!
//! `TR_i` circularly rotates the frame axis by `i` (adjacent strategy),
//! by `i + T/2` (remote), or applies a seeded frame permutation (random,
//! identity kept at i = 0). The iterative attack takes sign steps of size
//! ε/I and projects back into the ε-ball intersected with [0,1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::rng;
use crate::tensor::{Label, Tensor, VideoClip};

/// Weight-matrix initialization for the 2L+1 shifted copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Uniform,
    Linear,
    Gaussian,
}

impl WeightKind {
    pub fn name(&self) -> &'static str {
        match self {
            WeightKind::Uniform => "uniform",
            WeightKind::Linear => "linear",
            WeightKind::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightKind::Uniform),
            "linear" => Ok(WeightKind::Linear),
            "gaussian" => Ok(WeightKind::Gaussian),
            other => Err(Error::Spec(format!("unknown weight kind {other:?}"))),
        }
    }
}

/// Symmetric, positive, normalized weights over shift indices -L..L.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub shift_len: usize,
    pub kind: WeightKind,
    /// Index i+L holds the weight of shift i.
    pub weights: Vec<f64>,
    /// Standard deviation L/3; set for the gaussian kind only.
    pub sigma: Option<f64>,
}

impl WeightMatrix {
    pub fn weight(&self, i: isize) -> f64 {
        self.weights[(i + self.shift_len as isize) as usize]
    }
}

/// Builds the weight matrix for a kind and shift length. L = 0 yields the
/// single weight {1} for every kind.
pub fn build_weight_matrix(kind: WeightKind, shift_len: usize) -> WeightMatrix {
    let l = shift_len;
    if l == 0 {
        let sigma = matches!(kind, WeightKind::Gaussian).then_some(0.0);
        return WeightMatrix { shift_len: 0, kind, weights: vec![1.0], sigma };
    }
    let n = 2 * l + 1;
    let mut sigma = None;
    // one-sided values mirrored onto both flanks keep symmetry exact
    let half: Vec<f64> = match kind {
        WeightKind::Uniform => (0..=l).map(|_| 1.0).collect(),
        WeightKind::Linear => (0..=l).map(|i| 1.0 - i as f64 / n as f64).collect(),
        WeightKind::Gaussian => {
            let s = l as f64 / 3.0;
            sigma = Some(s);
            (0..=l)
                .map(|i| (-((i * i) as f64) / (2.0 * s * s)).exp())
                .collect()
        }
    };
    let mut weights = vec![0.0; n];
    for (i, &v) in half.iter().enumerate() {
        weights[l + i] = v;
        weights[l - i] = v;
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    WeightMatrix { shift_len: l, kind, weights, sigma }
}

/// A frame permutation: output frame `t` takes input frame `map[t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePerm {
    map: Vec<usize>,
}

impl FramePerm {
    pub fn identity(t: usize) -> Self {
        FramePerm { map: (0..t).collect() }
    }

    /// Circular rotation: output frame t takes input frame (t - shift) mod T.
    pub fn rotation(t: usize, shift: i64) -> Self {
        let map = (0..t)
            .map(|out| (out as i64 - shift).rem_euclid(t as i64) as usize)
            .collect();
        FramePerm { map }
    }

    pub fn random(t: usize, seed: u64) -> Self {
        let mut map: Vec<usize> = (0..t).collect();
        let mut rng = rng::stream(seed, &[]);
        for i in (1..map.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            map.swap(i, j);
        }
        FramePerm { map }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.map.len()];
        for (out, &src) in self.map.iter().enumerate() {
            inv[src] = out;
        }
        FramePerm { map: inv }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    /// Reorders the frames of a T×H×W×C tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.frames(), self.map.len());
        let mut out = Tensor::zeros(x.shape());
        for (t, &src) in self.map.iter().enumerate() {
            out.frame_mut(t).copy_from_slice(x.frame(src));
        }
        out
    }
}

/// Circularly shifts the temporal axis by `i` frames: output frame `t` is
/// input frame `(t - i) mod T`. Pure; rejects |i| >= T.
pub fn temporal_shift(x: &Tensor, i: i64) -> Result<Tensor> {
    let t = x.frames() as i64;
    if i.abs() >= t {
        return Err(Error::Range { what: "temporal shift".into(), value: i, bound: t });
    }
    Ok(FramePerm::rotation(t as usize, i).apply(x))
}

/// Frame-shifting strategy for the translated copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Adjacent,
    Random,
    Remote,
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::Adjacent => "adjacent",
            ShiftKind::Random => "random",
            ShiftKind::Remote => "remote",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adjacent" => Ok(ShiftKind::Adjacent),
            "random" => Ok(ShiftKind::Random),
            "remote" => Ok(ShiftKind::Remote),
            other => Err(Error::Spec(format!("unknown shift strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftStrategy {
    pub kind: ShiftKind,
    /// Seeds the permutations of the random strategy; ignored otherwise.
    pub seed: u64,
}

/// One translated copy: the forward shift and its recorded inverse.
#[derive(Debug, Clone)]
pub struct FrameShift {
    pub index: i64,
    pub forward: FramePerm,
    pub inverse: FramePerm,
}

/// Resolves a strategy into the 2L+1 concrete shifts for clips of length
/// `t`, ordered by shift index -L..L. Deterministic given the strategy seed.
pub fn shift_plan(strategy: &ShiftStrategy, shift_len: usize, t: usize) -> Result<Vec<FrameShift>> {
    if shift_len >= t {
        return Err(Error::Range {
            what: "shift length".into(),
            value: shift_len as i64,
            bound: t as i64,
        });
    }
    let l = shift_len as i64;
    let mut plan = Vec::with_capacity(2 * shift_len + 1);
    for i in -l..=l {
        let forward = match strategy.kind {
            ShiftKind::Adjacent => FramePerm::rotation(t, i),
            ShiftKind::Remote => FramePerm::rotation(t, i + t as i64 / 2),
            ShiftKind::Random => {
                if i == 0 {
                    FramePerm::identity(t)
                } else {
                    FramePerm::random(t, rng::derive(strategy.seed, &[(i + l) as u64]))
                }
            }
        };
        let inverse = forward.inverse();
        plan.push(FrameShift { index: i, forward, inverse });
    }
    Ok(plan)
}

/// The temporally augmented gradient: gradients of the loss on every
/// translated copy, each shifted back before the weighted combination.
pub fn augmented_gradient(
    model: &mut ComputeGraph,
    x: &Tensor,
    y: Label,
    weights: &WeightMatrix,
    strategy: &ShiftStrategy,
) -> Result<Tensor> {
    let t = model.input_shape()[0];
    let plan = shift_plan(strategy, weights.shift_len, t)?;
    let mut acc = Tensor::zeros(x.shape());
    for (idx, shift) in plan.iter().enumerate() {
        let shifted = shift.forward.apply(x);
        let grad = model.input_gradient(&shifted, y)?;
        let back = shift.inverse.apply(&grad);
        acc.add_scaled(&back, weights.weights[idx]);
    }
    Ok(acc)
}

/// Clamps `x_adv` elementwise into `[x_clean - eps, x_clean + eps] ∩ [0, 1]`.
pub fn project_ball(x_adv: &Tensor, x_clean: &Tensor, eps: f64) -> Tensor {
    let mut out = x_adv.clone();
    for (v, &c) in out.data_mut().iter_mut().zip(x_clean.data()) {
        let lo = (c - eps).max(0.0);
        let hi = (c + eps).min(1.0);
        *v = v.clamp(lo, hi);
    }
    out
}

/// Truncated, normalized spatial Gaussian kernel of the given radius
/// (σ = r/√3), applied independently per frame and channel with zero
/// padding. This is the linearized translation-invariant composition.
pub fn ti_smooth(grad: &Tensor, radius: usize) -> Tensor {
    if radius == 0 {
        return grad.clone();
    }
    let s = grad.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let size = 2 * radius + 1;
    let sigma = radius as f64 / 3.0_f64.sqrt();
    let mut kernel = vec![0.0; size * size];
    let mut sum = 0.0;
    for dy in 0..size {
        for dx in 0..size {
            let y = dy as f64 - radius as f64;
            let x = dx as f64 - radius as f64;
            let v = (-(y * y + x * x) / (2.0 * sigma * sigma)).exp();
            kernel[dy * size + dx] = v;
            sum += v;
        }
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let mut out = Tensor::zeros(s);
    for ft in 0..t {
        for ch in 0..c {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..size {
                        let iy = oy as i64 + dy as i64 - radius as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for dx in 0..size {
                            let ix = ox as i64 + dx as i64 - radius as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += kernel[dy * size + dx]
                                * grad.data()[grad.idx4(ft, iy as usize, ix as usize, ch)];
                        }
                    }
                    let idx = out.idx4(ft, oy, ox, ch);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Declarative attack settings. The step size is always ε/I.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Row label in reports; derived from the settings when absent.
    #[serde(default)]
    pub name: Option<String>,
    /// L∞ budget in [0,1] pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    #[serde(default)]
    pub shift_len: usize,
    #[serde(default = "default_weight_kind")]
    pub weight: WeightKind,
    #[serde(default = "default_shift_kind")]
    pub strategy: ShiftKind,
    /// Momentum decay μ; 0 disables the momentum composition.
    #[serde(default)]
    pub momentum: f64,
    /// Spatial smoothing radius r; 0 disables the translation-invariant
    /// composition.
    #[serde(default)]
    pub ti_radius: usize,
    /// Update along sign(g); the raw-gradient variant is kept for ablation.
    #[serde(default = "default_true")]
    pub sign_step: bool,
    /// Ablation sweep tag grouping rows in reports.
    #[serde(default)]
    pub sweep: Option<String>,
}

fn default_weight_kind() -> WeightKind {
    WeightKind::Gaussian
}

fn default_shift_kind() -> ShiftKind {
    ShiftKind::Adjacent
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    /// Plain iterative baseline (shift length 0).
    pub fn baseline(epsilon: f64, iterations: usize) -> Self {
        AttackConfig {
            name: None,
            epsilon,
            iterations,
            shift_len: 0,
            weight: WeightKind::Gaussian,
            strategy: ShiftKind::Adjacent,
            momentum: 0.0,
            ti_radius: 0,
            sign_step: true,
            sweep: None,
        }
    }

    /// Temporal-translation attack with the default weight matrix and
    /// adjacent shifting.
    pub fn temporal(epsilon: f64, iterations: usize, shift_len: usize) -> Self {
        AttackConfig { shift_len, ..Self::baseline(epsilon, iterations) }
    }

    pub fn step_size(&self) -> f64 {
        self.epsilon / self.iterations as f64
    }

    pub fn validate(&self, clip_frames: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Spec(format!("epsilon {} must lie in [0,1]", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Spec("iteration count must be at least 1".into()));
        }
        if self.shift_len >= clip_frames {
            return Err(Error::Range {
                what: "shift length".into(),
                value: self.shift_len as i64,
                bound: clip_frames as i64,
            });
        }
        if self.momentum < 0.0 {
            return Err(Error::Spec("momentum decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Report label: FGSM/BIM lineage with TT/MI/TI composition prefixes.
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut parts = Vec::new();
        if self.momentum > 0.0 {
            parts.push("MI");
        }
        if self.ti_radius > 0 {
            parts.push("TI");
        }
        if parts.is_empty() {
            let base = if self.iterations == 1 { "FGSM" } else { "BIM" };
            if self.shift_len > 0 {
                format!("TT-{base}({})", self.iterations)
            } else {
                format!("{base}({})", self.iterations)
            }
        } else {
            if self.shift_len > 0 {
                parts.push("TT");
            }
            format!("{}({})", parts.join("+"), self.iterations)
        }
    }
}

/// Outcome of one attack run on one clip.
#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub clean: Tensor,
    pub adversarial: Tensor,
    /// Loss of the white-box model on the final adversarial clip.
    pub whitebox_loss: f64,
    pub config: AttackConfig,
}

impl AdversarialResult {
    pub fn perturbation(&self) -> Tensor {
        let mut d = self.adversarial.clone();
        d.add_scaled(&self.clean, -1.0);
        d
    }

    pub fn linf(&self) -> f64 {
        self.adversarial.linf_distance(&self.clean)
    }
}

/// Iterative temporal-translation attack (FGSM/BIM at L = 0, their
/// temporally augmented forms at L > 0, with optional momentum and spatial
/// smoothing compositions).
pub fn tt_attack(
    model: &mut ComputeGraph,
    clip: &VideoClip,
    y: Label,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialResult> {
    let t = model.input_shape()[0];
    cfg.validate(t)?;
    y.validate(model.num_classes())?;
    let clean = clip.tensor().clone();
    let weights = build_weight_matrix(cfg.weight, cfg.shift_len);
    let strategy = ShiftStrategy { kind: cfg.strategy, seed };
    let alpha = cfg.step_size();
    let mut x = clean.clone();
    let mut momentum = Tensor::zeros(clean.shape());
    for k in 0..cfg.iterations {
        let mut g =
            augmented_gradient(model, &x, y, &weights, &strategy).map_err(|e| match e {
                Error::NumericFault { context } => Error::NumericFault {
                    context: format!("attack iteration {k}: {context}"),
                },
                other => other,
            })?;
        if cfg.ti_radius > 0 {
            g = ti_smooth(&g, cfg.ti_radius);
        }
        let direction = if cfg.momentum > 0.0 {
            let l1 = g.l1_norm();
            let mut next = momentum.clone();
            next.scale(cfg.momentum);
            if l1 > 0.0 {
                next.add_scaled(&g, 1.0 / l1);
            }
            momentum = next;
            momentum.clone()
        } else {
            g
        };
        let step = if cfg.sign_step { direction.sign() } else { direction };
        let mut moved = x.clone();
        moved.add_scaled(&step, alpha);
        x = project_ball(&moved, &clean, cfg.epsilon);
    }
    let whitebox_loss = model.loss_value(&x, y)?;
    Ok(AdversarialResult { clean, adversarial: x, whitebox_loss, config: cfg.clone() })
}
