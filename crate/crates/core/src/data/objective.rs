use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Partition};

fn default_toy_zeta() -> f64 {
    0.1
}

fn default_toy_box() -> (f64, f64) {
    (-30.0, 1.0)
}

/// Per-point loss `f(w; x, y)`; the global objective `F` is the dataset mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `f = (w·x − y)²`
    LinearMse,
    /// `f = max(0, 1 − y w·x) + (μ/2)‖w‖²`
    HingeL2 {
        #[serde(default)]
        mu: f64,
    },
    /// `f = 1 − y w·x`, single parameter, with an optional box projection.
    ToyLinear {
        #[serde(default = "default_toy_zeta")]
        zeta: f64,
        #[serde(default = "default_toy_box", rename = "box")]
        bounds: (f64, f64),
        #[serde(default)]
        clip: bool,
    },
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Objective {
    pub fn toy(zeta: f64) -> Self {
        Objective::ToyLinear {
            zeta,
            bounds: default_toy_box(),
            clip: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::LinearMse => "linear_mse",
            Objective::HingeL2 { .. } => "hinge_l2",
            Objective::ToyLinear { .. } => "toy_linear",
        }
    }

    pub fn loss_point(&self, w: &[f64], x: &[f64], y: f64) -> f64 {
        match *self {
            Objective::LinearMse => (dot(w, x) - y).powi(2),
            Objective::HingeL2 { mu } => (1.0 - y * dot(w, x)).max(0.0) + 0.5 * mu * dot(w, w),
            Objective::ToyLinear { .. } => 1.0 - y * dot(w, x),
        }
    }

    /// Adds `scale · ∂f(w; x, y)` to `out`.
    pub fn add_subgradient(&self, w: &[f64], x: &[f64], y: f64, scale: f64, out: &mut [f64]) {
        match *self {
            Objective::LinearMse => {
                let r = 2.0 * (dot(w, x) - y) * scale;
                out.iter_mut().zip(x).for_each(|(o, xi)| *o += r * xi);
            }
            Objective::HingeL2 { mu } => {
                if y * dot(w, x) < 1.0 {
                    out.iter_mut()
                        .zip(x)
                        .for_each(|(o, xi)| *o -= scale * y * xi);
                }
                if mu != 0.0 {
                    out.iter_mut()
                        .zip(w)
                        .for_each(|(o, wi)| *o += scale * mu * wi);
                }
            }
            Objective::ToyLinear { .. } => {
                out.iter_mut()
                    .zip(x)
                    .for_each(|(o, xi)| *o -= scale * y * xi);
            }
        }
    }

    pub fn subgradient_point(&self, w: &[f64], x: &[f64], y: f64) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        self.add_subgradient(w, x, y, 1.0, &mut g);
        g
    }

    /// `F(w)`: mean loss over the whole dataset.
    pub fn loss(&self, ds: &Dataset, w: &[f64]) -> f64 {
        (0..ds.len())
            .map(|i| self.loss_point(w, ds.features(i), ds.target(i)))
            .sum::<f64>()
            / ds.len() as f64
    }

    /// Mean loss over a subset of points.
    pub fn loss_on(&self, ds: &Dataset, idx: &[usize], w: &[f64]) -> f64 {
        idx.iter()
            .map(|&i| self.loss_point(w, ds.features(i), ds.target(i)))
            .sum::<f64>()
            / idx.len() as f64
    }

    /// `∂F(w)`: mean subgradient over the whole dataset.
    pub fn full_gradient(&self, ds: &Dataset, w: &[f64]) -> DVector<f64> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        self.gradient_on(ds, &idx, w)
    }

    /// Mean subgradient over a subset of points.
    pub fn gradient_on(&self, ds: &Dataset, idx: &[usize], w: &[f64]) -> DVector<f64> {
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / idx.len() as f64;
        for &i in idx {
            self.add_subgradient(w, ds.features(i), ds.target(i), scale, &mut g);
        }
        DVector::from_vec(g)
    }

    /// Box projection for the toy objective when clipping is enabled.
    pub fn project(&self, w: &mut [f64]) {
        if let Objective::ToyLinear {
            bounds: (lo, hi),
            clip: true,
            ..
        } = *self
        {
            w.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }

    pub fn check_dimension(&self, ds: &Dataset, w: &[f64]) -> Result<(), DataError> {
        if w.len() != ds.n_features() {
            return Err(DataError::DimensionMismatch {
                expected: ds.n_features(),
                got: w.len(),
            });
        }
        Ok(())
    }
}

/// Mean subgradient over a minibatch of `b` points drawn uniformly without
/// replacement from node `node`'s shard. `b` equal to the shard size is the
/// deterministic full local gradient and draws nothing from `rng`.
pub fn minibatch_subgradient<R: Rng + ?Sized>(
    obj: &Objective,
    ds: &Dataset,
    part: &Partition,
    node: usize,
    w: &[f64],
    b: usize,
    rng: &mut R,
) -> Result<DVector<f64>, DataError> {
    if node >= part.m() {
        return Err(DataError::NodeOutOfRange { node, m: part.m() });
    }
    obj.check_dimension(ds, w)?;
    let shard = part.shard(node);
    if b == 0 || b > shard.len() {
        return Err(DataError::BatchTooLarge {
            b,
            local: shard.len(),
        });
    }
    if b == shard.len() {
        return Ok(obj.gradient_on(ds, shard, w));
    }
    let picks = rand::seq::index::sample(rng, shard.len(), b);
    let mut g = vec![0.0; w.len()];
    let scale = 1.0 / b as f64;
    for p in picks.iter() {
        let i = shard[p];
        obj.add_subgradient(w, ds.features(i), ds.target(i), scale, &mut g);
    }
    Ok(DVector::from_vec(g))
}
