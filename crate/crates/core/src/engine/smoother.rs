//! Per-component smoothers that partial out `g_c`.
//!
//! Every variant runs through the same profile update; they differ only in
//! the linear smoother used for `g_c`: a kernel smoother (MoPLE, FMPLR), a
//! weighted mean (MoE with intercepts), or a weighted projection on `(1, u)`
//! (MoE with `u` as a linear covariate).

use crate::data::{Dataset, ModelConfig, MoeExpert};
use crate::error::{MopleError, Result};
use crate::kernel::{KernelSpec, KernelWeights};

#[derive(Debug, Clone)]
pub enum ExpertSmoother {
    Kernel(KernelWeights),
    Intercept,
    LinearInU,
}

/// Smoothed response and covariate columns for one component.
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub y: Vec<f64>,
    /// One vector per column of `x`.
    pub x: Vec<Vec<f64>>,
}

impl ExpertSmoother {
    pub fn for_config(cfg: &ModelConfig, data: &Dataset) -> Result<Self> {
        if cfg.variant.uses_kernel() {
            let spec = KernelSpec::new(cfg.kernel, cfg.bandwidth)?;
            Ok(ExpertSmoother::Kernel(KernelWeights::new(&data.u, spec)))
        } else {
            Ok(Self::parametric(cfg.moe_expert))
        }
    }

    pub fn parametric(form: MoeExpert) -> Self {
        match form {
            MoeExpert::Intercept => ExpertSmoother::Intercept,
            MoeExpert::LinearInU => ExpertSmoother::LinearInU,
        }
    }

    /// `log_z`, when given, holds the log responsibilities and is used where
    /// the kernel mass of `z` underflows.
    pub fn smooth(
        &self,
        data: &Dataset,
        z: &[f64],
        log_z: Option<&[f64]>,
        component: usize,
    ) -> Result<Smoothed> {
        let p = data.p();
        let xcols: Vec<&[f64]> = (0..p)
            .map(|j| {
                let start = j * data.n();
                &data.x.as_slice()[start..start + data.n()]
            })
            .collect();
        match self {
            ExpertSmoother::Kernel(weights) => {
                let mut cols = Vec::with_capacity(p + 1);
                cols.push(data.y.as_slice());
                cols.extend(xcols.iter().copied());
                let mut out = weights.smooth_with_log(z, log_z, &cols, component)?;
                let y = out.remove(0);
                Ok(Smoothed { y, x: out })
            }
            ExpertSmoother::Intercept => {
                let sw: f64 = z.iter().sum();
                if !(sw > 0.0) {
                    return Err(MopleError::DegenerateComponent { component, mass: sw });
                }
                let mean = |v: &[f64]| z.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() / sw;
                let n = data.n();
                Ok(Smoothed {
                    y: vec![mean(&data.y); n],
                    x: xcols.iter().map(|c| vec![mean(c); n]).collect(),
                })
            }
            ExpertSmoother::LinearInU => {
                let fit = LineFit::new(&data.u, z, component)?;
                Ok(Smoothed {
                    y: fit.project(&data.y, &data.u),
                    x: xcols.iter().map(|c| fit.project(c, &data.u)).collect(),
                })
            }
        }
    }

    /// Evaluates `g_c(t)` at arbitrary points with the same weighting as the
    /// in-sample update, applied to partial residuals `y - x' beta_c`.
    ///
    /// Kernel points with no mass take the value of the nearest feasible
    /// point in `points`; the number of such fallbacks is returned.
    pub fn evaluate(
        &self,
        data: &Dataset,
        z: &[f64],
        log_z: Option<&[f64]>,
        beta_c: &[f64],
        points: &[f64],
        component: usize,
    ) -> Result<(Vec<f64>, usize)> {
        let resid: Vec<f64> = (0..data.n())
            .map(|i| {
                data.y[i]
                    - beta_c
                        .iter()
                        .enumerate()
                        .map(|(k, b)| data.x[(i, k)] * b)
                        .sum::<f64>()
            })
            .collect();
        match self {
            ExpertSmoother::Kernel(weights) => {
                let spec = weights.spec();
                let raw: Vec<Option<f64>> = points
                    .iter()
                    .map(|&t| {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for i in 0..data.n() {
                            let w = z[i] * spec.scaled(data.u[i] - t);
                            num += w * resid[i];
                            den += w;
                        }
                        if den > 1e-200 {
                            return Some(num / den);
                        }
                        let Some(lz) = log_z else {
                            return (den > f64::MIN_POSITIVE).then(|| num / den);
                        };
                        let lw: Vec<f64> = (0..data.n())
                            .map(|i| {
                                let k = spec.scaled(data.u[i] - t);
                                if k > 0.0 { lz[i] + k.ln() } else { f64::NEG_INFINITY }
                            })
                            .collect();
                        let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        if m == f64::NEG_INFINITY {
                            return None;
                        }
                        let (mut num, mut den) = (0.0, 0.0);
                        for (l, r) in lw.iter().zip(&resid) {
                            let e = (l - m).exp();
                            num += e * r;
                            den += e;
                        }
                        Some(num / den)
                    })
                    .collect();
                let feasible: Vec<usize> = (0..raw.len()).filter(|&k| raw[k].is_some()).collect();
                if feasible.is_empty() {
                    return Err(MopleError::BandwidthInfeasible {
                        component,
                        point: points.first().copied().unwrap_or(f64::NAN),
                    });
                }
                let mut fallbacks = 0;
                let values = (0..raw.len())
                    .map(|k| match raw[k] {
                        Some(v) => v,
                        None => {
                            fallbacks += 1;
                            let nearest = feasible
                                .iter()
                                .copied()
                                .min_by_key(|&f| f.abs_diff(k))
                                .expect("nonempty");
                            raw[nearest].expect("feasible")
                        }
                    })
                    .collect();
                Ok((values, fallbacks))
            }
            ExpertSmoother::Intercept => {
                let sw: f64 = z.iter().sum();
                if !(sw > 0.0) {
                    return Err(MopleError::DegenerateComponent { component, mass: sw });
                }
                let m = z.iter().zip(&resid).map(|(w, r)| w * r).sum::<f64>() / sw;
                Ok((vec![m; points.len()], 0))
            }
            ExpertSmoother::LinearInU => {
                let fit = LineFit::new(&data.u, z, component)?;
                let (a, b) = fit.coefficients(&resid, &data.u);
                Ok((points.iter().map(|t| a + b * t).collect(), 0))
            }
        }
    }
}

/// Weighted least squares on the design `(1, u)`.
struct LineFit<'a> {
    z: &'a [f64],
    sw: f64,
    su: f64,
    det: f64,
    suu: f64,
}

impl<'a> LineFit<'a> {
    fn new(u: &[f64], z: &'a [f64], component: usize) -> Result<Self> {
        let sw: f64 = z.iter().sum();
        if !(sw > 0.0) {
            return Err(MopleError::DegenerateComponent { component, mass: sw });
        }
        let su: f64 = z.iter().zip(u).map(|(w, x)| w * x).sum();
        let suu: f64 = z.iter().zip(u).map(|(w, x)| w * x * x).sum();
        let det = sw * suu - su * su;
        if !(det > 1e-12 * sw * suu.max(f64::MIN_POSITIVE)) {
            return Err(MopleError::ComponentCollapse { component });
        }
        Ok(LineFit { z, sw, su, det, suu })
    }

    fn coefficients(&self, v: &[f64], u: &[f64]) -> (f64, f64) {
        let sv: f64 = self.z.iter().zip(v).map(|(w, x)| w * x).sum();
        let suv: f64 = self
            .z
            .iter()
            .zip(v.iter().zip(u))
            .map(|(w, (x, t))| w * x * t)
            .sum();
        let b = (self.sw * suv - self.su * sv) / self.det;
        let a = (self.suu * sv - self.su * suv) / self.det;
        (a, b)
    }

    fn project(&self, v: &[f64], u: &[f64]) -> Vec<f64> {
        let (a, b) = self.coefficients(v, u);
        u.iter().map(|t| a + b * t).collect()
    }
}
