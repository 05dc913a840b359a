//! Kernel functions, scaled weights `K_h`, and responsibility-weighted
//! smoother matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MopleError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Epanechnikov,
}

impl KernelKind {
    /// Unscaled kernel `K(t)`.
    #[inline]
    pub fn value(self, t: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if t.abs() <= 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
        }
    }

    /// Half-width of the support.
    pub fn support(self) -> f64 {
        match self {
            KernelKind::Epanechnikov => 1.0,
        }
    }
}

/// Epanechnikov kernel `K(t) = 0.75 (1 - t^2)` on `|t| <= 1`.
pub fn kernel_value(t: f64) -> f64 {
    KernelKind::Epanechnikov.value(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub h: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(MopleError::InvalidConfig(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        Ok(KernelSpec { kind, h })
    }

    pub fn epanechnikov(h: f64) -> Result<Self> {
        Self::new(KernelKind::Epanechnikov, h)
    }

    /// `K_h(d) = K(d / h) / h`.
    #[inline]
    pub fn scaled(&self, d: f64) -> f64 {
        self.kind.value(d / self.h) / self.h
    }
}

pub fn scaled_kernel(spec: &KernelSpec, d: f64) -> f64 {
    spec.scaled(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    /// `K(0)`
    pub k0: f64,
    /// `int K(t)^2 dt`
    pub int_k2: f64,
    /// `(K(0) - 0.5 int K^2) / int {K(t) - 0.5 K(t)}^2 dt`
    pub tau_k: f64,
}

impl KernelConstants {
    /// `K(0) - 0.5 int K^2`, the per-unit factor in the nonparametric df term.
    pub fn df_factor(&self) -> f64 {
        self.k0 - 0.5 * self.int_k2
    }
}

/// Closed-form constants for the degrees-of-freedom correction.
///
/// The denominator of `tau_k` is `int {K - 0.5 K}^2 = 0.25 int K^2`, taken
/// literally; for the Epanechnikov kernel this gives `tau_k = 3`.
pub fn kernel_constants(kind: KernelKind) -> KernelConstants {
    match kind {
        KernelKind::Epanechnikov => {
            let k0 = 0.75;
            // int_{-1}^{1} 0.5625 (1 - t^2)^2 dt = 0.5625 * 16/15
            let int_k2 = 0.5625 * 16.0 / 15.0;
            let tau_k = (k0 - 0.5 * int_k2) / (0.25 * int_k2);
            KernelConstants { k0, int_k2, tau_k }
        }
    }
}

/// Responsibility-weighted kernel smoother for one component, in the
/// column-normalised orientation: `S[i][j] = z_i K_h(u_i - u_j) / sum_i z_i K_h(u_i - u_j)`.
///
/// Each column sums to one, so the smoothed value of a vector `v` at `u_j` is
/// `(S^T v)_j`; the profile update partials out `g` with `X - S^T X`.
pub fn smoother_matrix(u: &[f64], z: &[f64], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = u.len();
    assert_eq!(z.len(), n, "responsibility length must match u");
    let mut s = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut den = 0.0;
        for i in 0..n {
            let w = z[i] * spec.scaled(u[i] - u[j]);
            s[(i, j)] = w;
            den += w;
        }
        if !(den > 0.0) {
            return Err(MopleError::BandwidthInfeasible {
                component: 0,
                point: u[j],
            });
        }
        for i in 0..n {
            s[(i, j)] /= den;
        }
    }
    Ok(s)
}

/// Kernel weights `K_h(u_i - u_j)` restricted to the kernel support, stored
/// as contiguous bands over the sample sorted by `u`.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    spec: KernelSpec,
    /// Sorted position -> original index.
    order: Vec<usize>,
    /// Band `[lo[j], hi[j])` in sorted positions for sorted point `j`.
    lo: Vec<usize>,
    hi: Vec<usize>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
    sorted_u: Vec<f64>,
}

impl KernelWeights {
    pub fn new(u: &[f64], spec: KernelSpec) -> Self {
        let n = u.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
        let sorted_u: Vec<f64> = order.iter().map(|&i| u[i]).collect();
        let reach = spec.h * spec.kind.support();
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut weights = Vec::new();
        offsets.push(0);
        let (mut a, mut b) = (0usize, 0usize);
        for j in 0..n {
            let uj = sorted_u[j];
            while sorted_u[a] < uj - reach {
                a += 1;
            }
            if b < j + 1 {
                b = j + 1;
            }
            while b < n && sorted_u[b] <= uj + reach {
                b += 1;
            }
            lo.push(a);
            hi.push(b);
            weights.extend(sorted_u[a..b].iter().map(|&ui| spec.scaled(ui - uj)));
            offsets.push(weights.len());
        }
        KernelWeights {
            spec,
            order,
            lo,
            hi,
            offsets,
            weights,
            sorted_u,
        }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    /// Fraction of the n x n weight matrix that lies inside the support.
    pub fn density(&self) -> f64 {
        let n = self.n() as f64;
        self.weights.len() as f64 / (n * n)
    }

    /// Smooths each column of `columns` with responsibilities `z`:
    /// `out_k[j] = sum_i z_i K_h(u_i - u_j) v_k[i] / sum_i z_i K_h(u_i - u_j)`.
    ///
    /// All vectors are in the original observation order.
    pub fn smooth(&self, z: &[f64], columns: &[&[f64]], component: usize) -> Result<Vec<Vec<f64>>> {
        self.smooth_with_log(z, None, columns, component)
    }

    /// As [`smooth`](Self::smooth), but points whose weighted kernel mass
    /// underflows are recomputed from `log_z` with max-subtracted weights.
    pub fn smooth_with_log(
        &self,
        z: &[f64],
        log_z: Option<&[f64]>,
        columns: &[&[f64]],
        component: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let n = self.n();
        let zs: Vec<f64> = self.order.iter().map(|&i| z[i]).collect();
        let zv: Vec<Vec<f64>> = columns
            .iter()
            .map(|col| self.order.iter().map(|&i| z[i] * col[i]).collect())
            .collect();
        let mut out = vec![vec![0.0; n]; columns.len()];
        for j in 0..n {
            let w = &self.weights[self.offsets[j]..self.offsets[j + 1]];
            let (a, b) = (self.lo[j], self.hi[j]);
            let den = dot(w, &zs[a..b]);
            let target = self.order[j];
            if den > UNDERFLOW_MASS || (log_z.is_none() && den > f64::MIN_POSITIVE) {
                for (k, v) in zv.iter().enumerate() {
                    out[k][target] = dot(w, &v[a..b]) / den;
                }
                continue;
            }
            let infeasible = MopleError::BandwidthInfeasible {
                component,
                point: self.sorted_u[j],
            };
            let Some(lz) = log_z else {
                return Err(infeasible);
            };
            let lw: Vec<f64> = (a..b)
                .zip(w)
                .map(|(s, &k)| if k > 0.0 { lz[self.order[s]] + k.ln() } else { f64::NEG_INFINITY })
                .collect();
            let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(infeasible);
            }
            let ew: Vec<f64> = lw.iter().map(|l| (l - m).exp()).collect();
            let den: f64 = ew.iter().sum();
            for (k, col) in columns.iter().enumerate() {
                let num: f64 = (a..b).zip(&ew).map(|(s, e)| e * col[self.order[s]]).sum();
                out[k][target] = num / den;
            }
        }
        Ok(out)
    }
}

/// Weighted kernel mass below which smoothing switches to log-space weights.
const UNDERFLOW_MASS: f64 = 1e-200;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
