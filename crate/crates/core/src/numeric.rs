//! Small numerical helpers shared across modules.

use nalgebra::DMatrix;

/// `Σ_{h=0}^{k-1} r^h = (1 − r^k)/(1 − r)` for `r ∈ [0, 1)`.
///
/// Evaluated through `expm1`/`ln` so that `r → 1` stays accurate, and with
/// the algebraic limit `1` at `r = 0, k ≥ 1` (no `0^0` surprises).
pub(crate) fn geometric_sum(r: f64, k: u64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if r == 0.0 {
        return 1.0;
    }
    let kf = k as f64;
    if r >= 1.0 {
        return kf;
    }
    // 1 − r^k = −expm1(k ln r)
    let num = -(kf * r.ln()).exp_m1();
    let den = 1.0 - r;
    num / den
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `X − X·11ᵀ/M`: subtract from every row its mean over the columns (nodes).
pub(crate) fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / m;
        row.add_scalar_mut(-mean);
    }
    out
}

/// Column average `X·1/M` as a vector.
pub(crate) fn column_mean(x: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    x.column_mean()
}
