use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// `y = x·w + noise`
    #[default]
    Regression,
    /// `y = sign(x·w + noise) ∈ {−1, +1}`
    Binary,
}

fn default_noise() -> f64 {
    0.1
}

fn default_heterogeneity() -> f64 {
    1.0
}

/// How per-class parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLayout {
    /// Independent random offsets per class.
    #[default]
    Independent,
    /// Offsets `cos(θ_c)·a + sin(θ_c)·b` with `θ_c = 2πc/K`: neighbouring
    /// class ids get similar parameters and the variation is a single slow
    /// wave around the class index. Combined with a by-label split on a ring
    /// this puts the heterogeneity in the slowest-mixing direction.
    Circular,
}

/// Gaussian synthetic data. With `classes = Some(K)`, point `i` belongs to
/// class `i mod K`; every class gets its own feature mean (offset scale `h`),
/// per-feature scale (`exp` of an offset with scale `h/2`) and ground-truth
/// weights (offset scale `h`), where `h` is `heterogeneity`. Class ids are
/// attached as labels, so a by-label split gives every node a statistically
/// different shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub task: SyntheticTask,
    pub samples: usize,
    pub features: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    #[serde(default)]
    pub layout: ClassLayout,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn regression(samples: usize, features: usize, seed: u64) -> Self {
        SyntheticSpec {
            task: SyntheticTask::Regression,
            samples,
            features,
            noise: default_noise(),
            classes: None,
            heterogeneity: default_heterogeneity(),
            layout: ClassLayout::Independent,
            seed,
        }
    }

    pub fn with_classes(mut self, classes: usize, heterogeneity: f64) -> Self {
        self.classes = Some(classes);
        self.heterogeneity = heterogeneity;
        self
    }

    pub fn with_layout(mut self, layout: ClassLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn generate(&self) -> Result<Dataset, DataError> {
        let (s, n) = (self.samples, self.features);
        if s == 0 || n == 0 {
            return Err(DataError::InvalidDataset(
                "synthetic data needs samples >= 1 and features >= 1".into(),
            ));
        }
        if self.classes == Some(0) {
            return Err(DataError::InvalidDataset("classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let w_star: Vec<f64> = (0..n).map(|_| normal()).collect();
        let k = self.classes.unwrap_or(1);
        let h = if self.classes.is_some() {
            self.heterogeneity
        } else {
            0.0
        };
        // unit offsets for (mean, log-scale, weights) of every class
        let offsets: Vec<[Vec<f64>; 3]> = match self.layout {
            ClassLayout::Independent => (0..k)
                .map(|_| std::array::from_fn(|_| (0..n).map(|_| normal()).collect()))
                .collect(),
            ClassLayout::Circular => {
                let waves: [[Vec<f64>; 2]; 3] = std::array::from_fn(|_| {
                    std::array::from_fn(|_| (0..n).map(|_| normal()).collect())
                });
                (0..k)
                    .map(|c| {
                        let theta = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                        let (cos, sin) = (theta.cos(), theta.sin());
                        std::array::from_fn(|p| {
                            (0..n)
                                .map(|f| cos * waves[p][0][f] + sin * waves[p][1][f])
                                .collect()
                        })
                    })
                    .collect()
            }
        };
        let class_params: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = offsets
            .iter()
            .map(|[mean, log_scale, dw]| {
                let mean: Vec<f64> = mean.iter().map(|o| h * o).collect();
                let scale: Vec<f64> = log_scale.iter().map(|o| (0.5 * h * o).exp()).collect();
                let w: Vec<f64> = w_star.iter().zip(dw).map(|(w, o)| w + h * o).collect();
                (mean, scale, w)
            })
            .collect();
        let mut x = Vec::with_capacity(s * n);
        let mut y = Vec::with_capacity(s);
        let mut labels = Vec::with_capacity(s);
        for i in 0..s {
            let c = i % k;
            let (mean, scale, w) = &class_params[c];
            let row: Vec<f64> = (0..n).map(|f| mean[f] + scale[f] * normal()).collect();
            let score: f64 =
                row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + self.noise * normal();
            y.push(match self.task {
                SyntheticTask::Regression => score,
                SyntheticTask::Binary => {
                    if score >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            });
            x.extend(row);
            labels.push(c as i64);
        }
        let ds = Dataset::from_rows(x, n, y)?;
        if self.classes.is_some() {
            ds.with_labels(labels)
        } else {
            Ok(ds)
        }
    }
}
