//! Convergence bounds for the time-averaged model, the consensus-distance
//! bound, the ring/clique divergence predictor and two literature thresholds.
//!
//! All bounds share the geometric factor `S_K = (1 − |λ2|^K)/(1 − |λ2|)`,
//! evaluated with its algebraic limit `S_K = 1` at `λ2 = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::estimators::GradientStats;
use crate::numeric::geometric_sum;

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("invalid inputs: {0}")]
    InvalidInputs(String),
    #[error("experimental loss curve is empty")]
    EmptyCurve,
    #[error("experimental loss does not decrease (first {first}, last {last})")]
    NonPositiveDecrease { first: f64, last: f64 },
    #[error("invalid iteration grid '{0}'")]
    InvalidGrid(String),
}

/// Constants entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    #[serde(rename = "M")]
    pub m: usize,
    pub eta: f64,
    pub lambda2_mod: f64,
    pub alpha: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_sp")]
    pub e_sp: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_sp")]
    pub r_sp: f64,
    pub dist0_sq: f64,
    /// Subgradient norm bound; only the full-batch variants read it.
    #[serde(rename = "L", default)]
    pub l: f64,
}

impl BoundInputs {
    pub fn from_stats(
        m: usize,
        eta: f64,
        lambda2_mod: f64,
        stats: &GradientStats,
        dist0_sq: f64,
    ) -> Self {
        BoundInputs {
            m,
            eta,
            lambda2_mod,
            alpha: stats.alpha,
            e: stats.e,
            e_sp: stats.e_sp,
            h: stats.h,
            r: stats.r,
            r_sp: stats.r_sp,
            dist0_sq,
            l: 0.0,
        }
    }

    pub fn with_l(mut self, l: f64) -> Self {
        self.l = l;
        self
    }

    /// Checks ranges and the orderings `E_sp ≤ E`, `H ≤ √E`, `R_sp ≤ R`
    /// (with a relative slack of `1e-9` for measured values).
    pub fn validate(&self) -> Result<(), BoundError> {
        let bad = |msg: String| Err(BoundError::InvalidInputs(msg));
        if self.m == 0 {
            return bad("M must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.lambda2_mod) {
            return bad(format!(
                "|lambda2| must lie in [0, 1), got {}",
                self.lambda2_mod
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0 + 1e-12) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("E", self.e),
            ("E_sp", self.e_sp),
            ("H", self.h),
            ("R", self.r),
            ("R_sp", self.r_sp),
            ("dist0_sq", self.dist0_sq),
            ("L", self.l),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let slack = |x: f64| x * (1.0 + 1e-9) + 1e-300;
        if self.e_sp > slack(self.e) {
            return bad(format!("E_sp = {} exceeds E = {}", self.e_sp, self.e));
        }
        if self.h > slack(self.e.sqrt()) {
            return bad(format!(
                "H = {} exceeds sqrt(E) = {}",
                self.h,
                self.e.sqrt()
            ));
        }
        if self.r_sp > slack(self.r) {
            return bad(format!("R_sp = {} exceeds R = {}", self.r_sp, self.r));
        }
        Ok(())
    }

    fn centralized(&self, k: u64) -> f64 {
        self.m as f64 * self.dist0_sq / (2.0 * self.eta * k as f64)
    }
}

fn check_k(k: u64) -> Result<(), BoundError> {
    if k == 0 {
        return Err(BoundError::InvalidInputs("K must be at least 1".into()));
    }
    Ok(())
}

/// `S_K` and `(1 − S_K/K)/(1 − λ)`.
fn factors(lambda: f64, k: u64) -> (f64, f64) {
    let s = geometric_sum(lambda, k);
    (s, (1.0 - s / k as f64) / (1.0 - lambda))
}

/// Refined bound on `E F(ŵ̄(K−1)) − F*`.
pub fn new_bound(inp: &BoundInputs, k: u64) -> Result<f64, BoundError> {
    inp.validate()?;
    check_k(k)?;
    let (s, tail) = factors(inp.lambda2_mod, k);
    let kf = k as f64;
    let mf = inp.m as f64;
    let a = inp.alpha.min(1.0);
    Ok(inp.centralized(k)
        + inp.eta * inp.e / 2.0
        + 2.0 * inp.h * inp.r_sp.sqrt() * mf.sqrt() / kf * s
        + 2.0 * inp.eta * inp.h * inp.e_sp.sqrt() * ((1.0 - a) * (kf - 1.0) / kf + a * tail))
}

/// Limit of [`new_bound`] as `K → ∞`:
/// `ηE/2 + 2ηH√E_sp·(1 − α + α/(1 − |λ2|))`.
pub fn new_bound_limit(inp: &BoundInputs) -> Result<f64, BoundError> {
    inp.validate()?;
    let a = inp.alpha.min(1.0);
    Ok(inp.eta * inp.e / 2.0
        + 2.0 * inp.eta * inp.h * inp.e_sp.sqrt() * (1.0 - a + a / (1.0 - inp.lambda2_mod)))
}

/// Looser bound with `√E`, `√R` in place of `H`, `√R_sp`, `√E_sp` and no `α`.
pub fn classic_bound(inp: &BoundInputs, k: u64) -> Result<f64, BoundError> {
    inp.validate()?;
    check_k(k)?;
    let (s, tail) = factors(inp.lambda2_mod, k);
    let kf = k as f64;
    let mf = inp.m as f64;
    Ok(inp.centralized(k)
        + inp.eta * inp.e / 2.0
        + 2.0 * inp.e.sqrt() * inp.r.sqrt() * mf.sqrt() / kf * s
        + 2.0 * inp.eta * inp.e * tail)
}

/// Deterministic full-batch variant with local subgradients bounded by `L`.
pub fn classic_bound_fullbatch(inp: &BoundInputs, k: u64) -> Result<f64, BoundError> {
    inp.validate()?;
    check_k(k)?;
    let (s, tail) = factors(inp.lambda2_mod, k);
    let kf = k as f64;
    let mf = inp.m as f64;
    let l = inp.l;
    Ok(inp.centralized(k)
        + inp.eta * mf * l * l / 2.0
        + 2.0 * l * inp.r.sqrt() * mf / kf * s
        + 2.0 * inp.eta * l * l * mf * tail)
}

/// Bounds for a single node's time-averaged model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalBounds {
    pub new_local: f64,
    pub classic_local: f64,
    pub classic_local_fullbatch: f64,
}

pub fn local_bounds(inp: &BoundInputs, k: u64) -> Result<LocalBounds, BoundError> {
    inp.validate()?;
    check_k(k)?;
    if inp.m == 1 {
        log::warn!("single node: local and global bounds differ only by their coefficients");
    }
    let (s, tail) = factors(inp.lambda2_mod, k);
    let kf = k as f64;
    let mf = inp.m as f64;
    let a = inp.alpha.min(1.0);
    let base = inp.centralized(k) + inp.eta * inp.e / 2.0;
    let new_local = base
        + inp.h * 3.0 * mf * inp.r_sp.sqrt() / kf * s
        + 3.0
            * inp.eta
            * mf.sqrt()
            * inp.h
            * inp.e_sp.sqrt()
            * ((1.0 - a) * (kf - 1.0) / kf + a * tail);
    let classic_local = base
        + inp.e.sqrt() * 3.0 * mf * inp.r.sqrt() / kf * s
        + 3.0 * inp.eta * mf.sqrt() * inp.e * tail;
    let l = inp.l;
    let m32 = mf.powf(1.5);
    let classic_local_fullbatch = inp.centralized(k)
        + inp.eta * mf * l * l / 2.0
        + l * 3.0 * m32 * inp.r.sqrt() / kf * s
        + 3.0 * inp.eta * m32 * l * l * tail;
    Ok(LocalBounds {
        new_local,
        classic_local,
        classic_local_fullbatch,
    })
}

/// Bound on `‖ΔW(k)‖_F`, the distance of the models from their average.
pub fn consensus_distance_bound(inp: &BoundInputs, k: u64) -> Result<f64, BoundError> {
    inp.validate()?;
    let lam = inp.lambda2_mod;
    let a = inp.alpha.min(1.0);
    let decay = if k == 0 {
        1.0
    } else {
        lam.powi(k.min(i32::MAX as u64) as i32)
    };
    let indicator = if k >= 1 { 1.0 } else { 0.0 };
    Ok((inp.m as f64).sqrt() * inp.r_sp.sqrt() * decay
        + inp.eta * inp.e_sp.sqrt() * ((1.0 - a) * indicator + a * geometric_sum(lam, k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    New,
    Classic,
    ClassicFullbatch,
    NewLocal,
    ClassicLocal,
    ClassicLocalFullbatch,
}

impl BoundKind {
    pub const ALL: [BoundKind; 6] = [
        BoundKind::New,
        BoundKind::Classic,
        BoundKind::ClassicFullbatch,
        BoundKind::NewLocal,
        BoundKind::ClassicLocal,
        BoundKind::ClassicLocalFullbatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::New => "new",
            BoundKind::Classic => "classic",
            BoundKind::ClassicFullbatch => "classic_fullbatch",
            BoundKind::NewLocal => "new_local",
            BoundKind::ClassicLocal => "classic_local",
            BoundKind::ClassicLocalFullbatch => "classic_local_fullbatch",
        }
    }

    pub fn evaluate(self, inp: &BoundInputs, k: u64) -> Result<f64, BoundError> {
        match self {
            BoundKind::New => new_bound(inp, k),
            BoundKind::Classic => classic_bound(inp, k),
            BoundKind::ClassicFullbatch => classic_bound_fullbatch(inp, k),
            BoundKind::NewLocal => local_bounds(inp, k).map(|b| b.new_local),
            BoundKind::ClassicLocal => local_bounds(inp, k).map(|b| b.classic_local),
            BoundKind::ClassicLocalFullbatch => {
                local_bounds(inp, k).map(|b| b.classic_local_fullbatch)
            }
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundKind {
    type Err = BoundError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BoundKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BoundError::InvalidInputs(format!("unknown bound kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub kind: BoundKind,
    /// `(K, value)` pairs in grid order.
    pub values: Vec<(u64, f64)>,
}

impl BoundCurve {
    pub fn value_at(&self, k: u64) -> Option<f64> {
        self.values.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

pub fn curve(kind: BoundKind, inp: &BoundInputs, grid: &[u64]) -> Result<BoundCurve, BoundError> {
    let values = grid
        .iter()
        .map(|&k| kind.evaluate(inp, k).map(|v| (k, v)))
        .collect::<Result<_, _>>()?;
    Ok(BoundCurve { kind, values })
}

/// Parses `a:b` (inclusive range), `a:b:step`, or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<u64>, BoundError> {
    let err = || BoundError::InvalidGrid(spec.to_string());
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| err());
    let grid: Vec<u64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let (lo, hi, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(err()),
        };
        if step == 0 || lo > hi {
            return Err(err());
        }
        (lo..=hi).step_by(step as usize).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(err());
    }
    Ok(grid)
}

/// An iteration count or "never within the horizon" (written as `"inf"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Prediction {
    At(u64),
    Never,
}

impl Prediction {
    pub fn is_never(self) -> bool {
        self == Prediction::Never
    }

    pub fn iteration(self) -> Option<u64> {
        match self {
            Prediction::At(k) => Some(k),
            Prediction::Never => None,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::At(k) => write!(f, "{k}"),
            Prediction::Never => f.write_str("inf"),
        }
    }
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Prediction::At(k) => s.serialize_u64(*k),
            Prediction::Never => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => Ok(Prediction::At(k)),
            Raw::S(s) if s == "inf" || s == "∞" => Ok(Prediction::Never),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected an integer or \"inf\", got '{s}'"
            ))),
        }
    }
}

/// Details of one divergence prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceOutcome {
    pub kind: BoundKind,
    pub threshold_pct: f64,
    pub prediction: Prediction,
    /// Rescaling factor that makes the clique bound touch the measured curve.
    pub scale: f64,
    /// `threshold_pct · (loss(1) − loss(K_end))`.
    pub threshold: f64,
}

/// Predicts when ring and clique losses should differ by `threshold_pct` of
/// the total decrease of the measured clique curve.
///
/// `clique_loss[i]` is the measured loss at bound index `K = i + 1`, i.e. of
/// the time average over iterations `0..=i`. The clique bound is rescaled by
/// `c = min_K loss(K)/bound_clique(K)` so that it touches the measured curve
/// from above. The first bound index `K` with
/// `c·(bound_ring(K) − bound_clique(K)) ≥ threshold` is reported as iteration
/// `K − 1`, the last iteration entering that time average.
pub fn divergence_predictor(
    kind: BoundKind,
    ring: &BoundInputs,
    clique: &BoundInputs,
    clique_loss: &[f64],
    threshold_pct: f64,
) -> Result<DivergenceOutcome, BoundError> {
    if clique_loss.is_empty() {
        return Err(BoundError::EmptyCurve);
    }
    if !(threshold_pct > 0.0) {
        return Err(BoundError::InvalidInputs(format!(
            "threshold_pct must be positive, got {threshold_pct}"
        )));
    }
    let first = clique_loss[0];
    let last = *clique_loss.last().expect("non-empty");
    if !(first - last > 0.0) {
        return Err(BoundError::NonPositiveDecrease { first, last });
    }
    let threshold = threshold_pct * (first - last);
    let k_end = clique_loss.len() as u64;
    let mut clique_bound = Vec::with_capacity(clique_loss.len());
    let mut scale = f64::INFINITY;
    for (i, &loss) in clique_loss.iter().enumerate() {
        let b = kind.evaluate(clique, i as u64 + 1)?;
        if b > 0.0 {
            scale = scale.min(loss / b);
        }
        clique_bound.push(b);
    }
    if !scale.is_finite() {
        scale = 0.0;
    }
    let mut prediction = Prediction::Never;
    if scale > 0.0 {
        for k in 1..=k_end {
            let diff = kind.evaluate(ring, k)? - clique_bound[(k - 1) as usize];
            if scale * diff >= threshold {
                prediction = Prediction::At(k - 1);
                break;
            }
        }
    }
    Ok(DivergenceOutcome {
        kind,
        threshold_pct,
        prediction,
        scale,
        threshold,
    })
}

/// [`divergence_predictor`] followed by one refinement: the statistics are
/// re-measured at the predicted iteration through `remeasure`, and the later
/// of the two predictions is kept.
pub fn divergence_predictor_refined<F, E>(
    kind: BoundKind,
    ring: &BoundInputs,
    clique: &BoundInputs,
    clique_loss: &[f64],
    threshold_pct: f64,
    mut remeasure: F,
) -> Result<(DivergenceOutcome, Option<DivergenceOutcome>), E>
where
    F: FnMut(u64) -> Result<(BoundInputs, BoundInputs), E>,
    E: From<BoundError>,
{
    let first = divergence_predictor(kind, ring, clique, clique_loss, threshold_pct)?;
    let Prediction::At(k) = first.prediction else {
        return Ok((first, None));
    };
    let (ring2, clique2) = remeasure(k)?;
    let second = divergence_predictor(kind, &ring2, &clique2, clique_loss, threshold_pct)?;
    Ok((first, Some(second)))
}

impl DivergenceOutcome {
    /// The later of this prediction and an optional refined one.
    pub fn combined(&self, refined: Option<&DivergenceOutcome>) -> Prediction {
        match refined {
            Some(r) => self.prediction.max(r.prediction),
            None => self.prediction,
        }
    }
}

/// First iteration at which two measured loss curves differ by at least
/// `pct` of the reference curve's total decrease, using the same indexing as
/// [`divergence_predictor`].
pub fn experimental_divergence(
    reference: &[f64],
    other: &[f64],
    pct: f64,
) -> Result<Prediction, BoundError> {
    if reference.is_empty() || other.is_empty() {
        return Err(BoundError::EmptyCurve);
    }
    let first = reference[0];
    let last = *reference.last().expect("non-empty");
    if !(first - last > 0.0) {
        return Err(BoundError::NonPositiveDecrease { first, last });
    }
    let threshold = pct * (first - last);
    Ok(reference
        .iter()
        .zip(other)
        .position(|(a, b)| (a - b).abs() >= threshold)
        .map_or(Prediction::Never, |i| Prediction::At(i as u64)))
}

fn positive(name: &str, v: f64) -> Result<(), BoundError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(BoundError::InvalidInputs(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

fn check_lambda(l: f64) -> Result<(), BoundError> {
    if (0.0..1.0).contains(&l) {
        Ok(())
    } else {
        Err(BoundError::InvalidInputs(format!(
            "|lambda2| must lie in [0, 1), got {l}"
        )))
    }
}

/// Iteration count after which a linear-speedup analysis no longer depends on
/// the topology: `4L⁴M⁵/(σ²(f0 + L)²(1 − |λ2|)²)`.
pub fn lian_threshold(
    l: f64,
    sigma_sq: f64,
    m: usize,
    lambda2_mod: f64,
    f0: f64,
) -> Result<f64, BoundError> {
    positive("L", l)?;
    positive("sigma_sq", sigma_sq)?;
    check_lambda(lambda2_mod)?;
    if m == 0 {
        return Err(BoundError::InvalidInputs("M must be positive".into()));
    }
    if !(f0 >= 0.0) {
        return Err(BoundError::InvalidInputs(format!(
            "f0 must be non-negative, got {f0}"
        )));
    }
    let mf = m as f64;
    Ok(4.0 * l.powi(4) * mf.powi(5) / (sigma_sq * (f0 + l).powi(2) * (1.0 - lambda2_mod).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StronglyConvexThresholds {
    #[serde(rename = "K0")]
    pub k0: u64,
    #[serde(rename = "K1")]
    pub k1: u64,
    pub eta0: f64,
    #[serde(rename = "Kprime_l")]
    pub kprime_l: f64,
}

/// Thresholds of the decaying-step analysis for strongly convex objectives
/// (`η(k) = θ/(μ(k + K0))`).
pub fn olshevsky_threshold(
    l: f64,
    mu: f64,
    m: usize,
    lambda2_mod: f64,
    theta: f64,
) -> Result<StronglyConvexThresholds, BoundError> {
    positive("L", l)?;
    positive("mu", mu)?;
    check_lambda(lambda2_mod)?;
    if !(theta > 2.0) {
        return Err(BoundError::InvalidInputs(format!(
            "theta must exceed 2, got {theta}"
        )));
    }
    if m == 0 {
        return Err(BoundError::InvalidInputs("M must be positive".into()));
    }
    let l2 = l * l;
    let mu2 = mu * mu;
    let gap2 = 1.0 - lambda2_mod * lambda2_mod;
    let k0 = (2.0 * theta * l2 / mu2).ceil() as u64;
    let k1 = (24.0 * l2 * theta / (gap2 * mu2)).ceil() as u64;
    Ok(StronglyConvexThresholds {
        k0,
        k1,
        eta0: theta / (mu * k0 as f64),
        kprime_l: 6912.0 * m as f64 * l2 * l2 / (mu2 * mu2 * gap2 * gap2) - 4.0 * l2 / mu2 - 7.0,
    })
}

/// `β` from bound inputs: the ratio of the classic and refined
/// `1/(1 − |λ2|)` coefficients.
pub fn beta_of(inp: &BoundInputs) -> f64 {
    if inp.e_sp > 0.0 && inp.h > 0.0 && inp.alpha > 0.0 {
        inp.e / (inp.alpha * inp.e_sp.sqrt() * inp.h)
    } else {
        f64::INFINITY
    }
}
