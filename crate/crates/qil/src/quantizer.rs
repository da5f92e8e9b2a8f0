//! Elementwise quantization math.
//!
//! A quantizer is the composition of a *transformer* and a *discretizer*.
//! The transformer maps raw values into a normalized range ([-1,1] for
//! weights, [0,1] for activations) through a trainable interval: values of
//! magnitude below `center - radius` are pruned to zero, above
//! `center + radius` clipped to the extreme, and the inside is mapped
//! affinely (weights additionally raised to a trainable power `gamma`).
//! The discretizer rounds the normalized value onto a uniform grid of `q`
//! levels. Gradients flow through the discretizer with a straight-through
//! estimator; the transformer is differentiated piecewise exactly.

use crate::error::{QilError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Guard for the `ln(u)` factor of the gamma gradient.
pub const EPS_LN: f64 = 1e-8;
/// Lower clamp for the interval radius after an optimizer step.
pub const MIN_RADIUS: f64 = 1e-6;
/// Clamp range for gamma after an optimizer step.
pub const GAMMA_RANGE: (f64, f64) = (0.25, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerKind {
    Weight,
    Activation,
}

/// Number of one-sided quantization levels `q` for a bit width.
///
/// Weights use a symmetric signed grid with `2^(N-1) - 1` levels per side
/// (2-bit weights are ternary); activations use the full unsigned range
/// with `2^N - 1` levels.
pub fn levels(kind: QuantizerKind, bit_width: u32) -> Result<u32> {
    if !(2..=24).contains(&bit_width) {
        return Err(QilError::InvalidBitWidth(bit_width));
    }
    Ok(match kind {
        QuantizerKind::Weight => (1u32 << (bit_width - 1)) - 1,
        QuantizerKind::Activation => (1u32 << bit_width) - 1,
    })
}

/// Bit width plus the derived level count for one quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    pub bit_width: u32,
    levels: u32,
}

impl QuantizerSpec {
    pub fn new(kind: QuantizerKind, bit_width: u32) -> Result<Self> {
        Ok(QuantizerSpec {
            kind,
            bit_width,
            levels: levels(kind, bit_width)?,
        })
    }

    pub fn weight(bit_width: u32) -> Result<Self> {
        Self::new(QuantizerKind::Weight, bit_width)
    }

    pub fn activation(bit_width: u32) -> Result<Self> {
        Self::new(QuantizerKind::Activation, bit_width)
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn scale(&self) -> f64 {
        1.0 / self.levels as f64
    }
}

/// Trainable interval parameters of one quantizer: center `c`, radius `d`
/// and (weights only) the exponent `gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntervalParams {
    pub center: f64,
    pub radius: f64,
    pub gamma: f64,
    pub gamma_trainable: bool,
}

impl IntervalParams {
    pub fn weight(center: f64, radius: f64, gamma: f64, gamma_trainable: bool) -> Result<Self> {
        let p = IntervalParams {
            center,
            radius,
            gamma,
            gamma_trainable,
        };
        p.validate()?;
        Ok(p)
    }

    /// Activation quantizers keep gamma fixed at 1.
    pub fn activation(center: f64, radius: f64) -> Result<Self> {
        let p = IntervalParams {
            center,
            radius,
            gamma: 1.0,
            gamma_trainable: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(QilError::InvalidParams(format!(
                "radius must be positive and finite, got {}",
                self.radius
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(QilError::InvalidParams(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        if !self.center.is_finite() {
            return Err(QilError::InvalidParams("center must be finite".into()));
        }
        Ok(())
    }
}

/// Integer level tensor plus scale, the product of a quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub levels_int: Vec<i32>,
    pub scale: f64,
    pub spec: QuantizerSpec,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    /// Real-valued view `level / q`.
    pub fn real_view(&self) -> Tensor {
        let q = self.spec.levels() as f64;
        Tensor::from_vec(
            &self.shape,
            self.levels_int.iter().map(|&k| k as f64 / q).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.levels_int.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels_int.is_empty()
    }
}

/// Gradients of a quantizer application: input gradient plus scalar
/// gradients for the interval parameters (summed over elements).
#[derive(Clone, Debug)]
pub struct QuantizerGrads {
    pub grad_input: Tensor,
    pub grad_center: f64,
    pub grad_radius: f64,
    pub grad_gamma: f64,
}

#[inline]
fn transform_weight_scalar(w: f64, c: f64, d: f64, gamma: f64) -> f64 {
    let a = w.abs();
    if a < c - d {
        0.0
    } else if a > c + d {
        signum0(w)
    } else {
        let u = (0.5 * (a - c) / d + 0.5).clamp(0.0, 1.0);
        u.powf(gamma) * signum0(w)
    }
}

#[inline]
fn transform_activation_scalar(x: f64, c: f64, d: f64) -> f64 {
    if x < c - d {
        0.0
    } else if x > c + d {
        1.0
    } else {
        (0.5 * (x - c) / d + 0.5).clamp(0.0, 1.0)
    }
}

/// sign with sign(0) = 0, matching the pruning semantics at w = 0.
#[inline]
fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weight transformer: prune below the interval, clip above it, and map
/// the inside through `u^gamma` with the sign reattached.
pub fn transform_weight(w: &Tensor, p: &IntervalParams) -> Tensor {
    debug_assert!(p.validate().is_ok());
    w.map(|v| transform_weight_scalar(v, p.center, p.radius, p.gamma))
}

/// Activation transformer: affine map of the interval onto [0,1] with
/// pruning below and clipping above.
pub fn transform_activation(x: &Tensor, p: &IntervalParams) -> Tensor {
    debug_assert!(p.validate().is_ok());
    x.map(|v| transform_activation_scalar(v, p.center, p.radius))
}

/// Round a normalized tensor onto the uniform grid `k/q`.
///
/// Ties round half away from zero, which preserves the odd symmetry of
/// the weight quantizer.
pub fn discretize(v_hat: &Tensor, q: u32) -> Tensor {
    let qf = q as f64;
    v_hat.map(|v| (v * qf).round() / qf)
}

#[inline]
fn level_of(t: f64, q: f64) -> i32 {
    (t * q).round() as i32
}

/// Full quantizer: transform, then discretize, keeping integer levels.
pub fn quantize(v: &Tensor, p: &IntervalParams, spec: &QuantizerSpec) -> QuantizedTensor {
    let q = spec.levels() as f64;
    let levels_int: Vec<i32> = match spec.kind {
        QuantizerKind::Weight => v
            .data()
            .iter()
            .map(|&w| level_of(transform_weight_scalar(w, p.center, p.radius, p.gamma), q))
            .collect(),
        QuantizerKind::Activation => v
            .data()
            .iter()
            .map(|&x| level_of(transform_activation_scalar(x, p.center, p.radius), q))
            .collect(),
    };
    QuantizedTensor {
        levels_int,
        scale: spec.scale(),
        spec: *spec,
        shape: v.shape().to_vec(),
    }
}

/// Quantize a single value to its integer level.
pub fn quantize_scalar(v: f64, p: &IntervalParams, spec: &QuantizerSpec) -> i32 {
    let q = spec.levels() as f64;
    match spec.kind {
        QuantizerKind::Weight => level_of(transform_weight_scalar(v, p.center, p.radius, p.gamma), q),
        QuantizerKind::Activation => {
            level_of(transform_activation_scalar(v, p.center, p.radius), q)
        }
    }
}

/// `u^(gamma-1)` with the boundary guarded so gradients stay finite: at
/// u == 0 with gamma < 1 the power diverges, and the adjacent branch is
/// constant zero anyway.
#[inline]
fn pow_gm1(u: f64, gamma: f64) -> f64 {
    if u == 0.0 && gamma < 1.0 {
        0.0
    } else {
        u.powf(gamma - 1.0)
    }
}

/// Backward pass of the weight quantizer under the straight-through
/// estimator: the discretizer's derivative is taken as identity, the
/// transformer is differentiated exactly on its interior branch, and the
/// pruned/clipped branches contribute nothing.
pub fn backward_weight(
    grad_out: &Tensor,
    w: &Tensor,
    p: &IntervalParams,
    _spec: &QuantizerSpec,
) -> QuantizerGrads {
    assert!(
        grad_out.same_shape(w),
        "grad_out shape {:?} != input shape {:?}",
        grad_out.shape(),
        w.shape()
    );
    let (c, d, gamma) = (p.center, p.radius, p.gamma);
    let mut grad_input = vec![0.0; w.len()];
    let (mut gc, mut gd, mut gg) = (0.0, 0.0, 0.0);
    for (i, (&wi, &go)) in w.data().iter().zip(grad_out.data()).enumerate() {
        let a = wi.abs();
        if a < c - d || a > c + d {
            continue;
        }
        let sgn = signum0(wi);
        let u = (0.5 * (a - c) / d + 0.5).clamp(0.0, 1.0);
        let pw = pow_gm1(u, gamma);
        let slope = gamma * pw * 0.5 / d;
        grad_input[i] = go * slope;
        gc -= go * slope * sgn;
        gd -= go * gamma * pw * 0.5 * (a - c) / (d * d) * sgn;
        if p.gamma_trainable {
            gg += go * u.powf(gamma) * u.max(EPS_LN).ln() * sgn;
        }
    }
    QuantizerGrads {
        grad_input: Tensor::from_vec(w.shape(), grad_input),
        grad_center: gc,
        grad_radius: gd,
        grad_gamma: gg,
    }
}

/// Backward pass of the activation quantizer (STE through the
/// discretizer, exact interior slope `0.5/d`).
pub fn backward_activation(grad_out: &Tensor, x: &Tensor, p: &IntervalParams) -> QuantizerGrads {
    assert!(
        grad_out.same_shape(x),
        "grad_out shape {:?} != input shape {:?}",
        grad_out.shape(),
        x.shape()
    );
    let (c, d) = (p.center, p.radius);
    let mut grad_input = vec![0.0; x.len()];
    let (mut gc, mut gd) = (0.0, 0.0);
    for (i, (&xi, &go)) in x.data().iter().zip(grad_out.data()).enumerate() {
        if xi < c - d || xi > c + d {
            continue;
        }
        let slope = 0.5 / d;
        grad_input[i] = go * slope;
        gc -= go * slope;
        gd -= go * 0.5 * (xi - c) / (d * d);
    }
    QuantizerGrads {
        grad_input: Tensor::from_vec(x.shape(), grad_input),
        grad_center: gc,
        grad_radius: gd,
        grad_gamma: 0.0,
    }
}

/// Closed-form pruning/clipping thresholds for gamma = 1.
///
/// With round-half-away ties the quantized level first becomes nonzero at
/// `c - d + d/q` and first reaches magnitude `q` at `c + d - d/q`; both
/// collapse to `c` in the ternary case `q = 1`. For gamma != 1 use
/// [`thresholds_by_search`].
pub fn thresholds(p: &IntervalParams, spec: &QuantizerSpec) -> (f64, f64) {
    debug_assert!(
        (p.gamma - 1.0).abs() < 1e-12,
        "closed-form thresholds require gamma == 1"
    );
    let q = spec.levels() as f64;
    let prune = p.center - p.radius + p.radius / q;
    let clip = p.center + p.radius - p.radius / q;
    (prune, clip)
}

/// Thresholds located by bisection over the composed quantizer, valid for
/// any gamma. Finds the smallest input (magnitude) whose level is nonzero
/// and the smallest whose level magnitude reaches `q`.
pub fn thresholds_by_search(p: &IntervalParams, spec: &QuantizerSpec) -> (f64, f64) {
    let q = spec.levels() as i32;
    let hi = p.center + 2.0 * p.radius + 1.0;
    let prune = bisect_first(|t| quantize_scalar(t, p, spec).abs() >= 1, hi);
    let clip = bisect_first(|t| quantize_scalar(t, p, spec).abs() >= q, hi);
    (prune, clip)
}

/// Smallest t in [0, hi] where the monotone indicator becomes true.
fn bisect_first(f: impl Fn(f64) -> bool, hi: f64) -> f64 {
    if f(0.0) {
        return 0.0;
    }
    debug_assert!(f(hi), "indicator must hold at the bracket top");
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    hi
}

/// Fraction of zero levels in a quantized tensor.
pub fn pruning_ratio(t: &QuantizedTensor) -> Result<f64> {
    if t.is_empty() {
        return Err(QilError::EmptyTensor);
    }
    let zeros = t.levels_int.iter().filter(|&&k| k == 0).count();
    Ok(zeros as f64 / t.len() as f64)
}
