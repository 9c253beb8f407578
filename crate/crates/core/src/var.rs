//! Sparse VAR(p) on vectorized latent frames.
//!
//! Each output coordinate `j` is an independent lasso regression of
//! `z_t[j] / sigma` on the `p*K` lagged normalized latents, all rows sharing one
//! `lambda`. Feature `f = (lag - 1) * K + l` is `z_{t-lag}[l] / sigma`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lars::{lasso_path, DesignOperator, SolverConfig};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

pub const MIN_SIGMA: f64 = 1e-12;

/// Latent trajectory `[T, H', W']` of one series.
#[derive(Clone, Debug)]
pub struct LatentSeries {
    pub z: Tensor,
    pub series_id: String,
    pub sigma_z: f64,
}

/// Population standard deviation over all entries.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl LatentSeries {
    pub fn new(z: Tensor, series_id: impl Into<String>) -> Result<Self> {
        if z.ndim() != 3 {
            return Err(Error::dim(
                "LatentSeries",
                format!("expected [T, H, W], got {:?}", z.shape()),
            ));
        }
        let sigma_z = population_std(z.data());
        Ok(LatentSeries {
            z,
            series_id: series_id.into(),
            sigma_z,
        })
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.z.shape()[1], self.z.shape()[2])
    }

    pub fn k(&self) -> usize {
        self.z.shape()[1] * self.z.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let k = self.k();
        &self.z.data()[t * k..(t + 1) * k]
    }
}

/// Lag matrices `A_1..A_p`, each `K x K`, stored sparsely.
#[derive(Clone, Debug, PartialEq)]
pub struct VarCoefficients {
    pub series_id: String,
    pub p: usize,
    pub k: usize,
    pub sigma_z: f64,
    /// `lags[lag - 1]` holds `(row, col, value)` with nonzero finite values,
    /// sorted by row then column.
    pub lags: Vec<Vec<(usize, usize, f64)>>,
}

impl VarCoefficients {
    pub fn zeros(series_id: impl Into<String>, p: usize, k: usize, sigma_z: f64) -> Self {
        VarCoefficients {
            series_id: series_id.into(),
            p,
            k,
            sigma_z,
            lags: vec![Vec::new(); p],
        }
    }

    /// Builds from per-row coefficient vectors over the lagged feature index.
    pub fn from_rows(series_id: impl Into<String>, p: usize, k: usize, sigma_z: f64, rows: &[Vec<f64>]) -> Self {
        let mut c = VarCoefficients::zeros(series_id, p, k, sigma_z);
        for (row, beta) in rows.iter().enumerate() {
            for (f, &v) in beta.iter().enumerate() {
                if v != 0.0 && v.is_finite() {
                    c.lags[f / k].push((row, f % k, v));
                }
            }
        }
        c
    }

    /// Dense row-major `K x K` matrix for `lag` (1-based).
    pub fn dense(&self, lag: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.k * self.k];
        for &(r, c, v) in &self.lags[lag - 1] {
            m[r * self.k + c] = v;
        }
        m
    }

    /// Coefficients of output row `j` over the lagged feature index.
    pub fn row(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.p * self.k];
        for (lag, entries) in self.lags.iter().enumerate() {
            for &(r, c, v) in entries {
                if r == j {
                    out[lag * self.k + c] = v;
                }
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.lags.iter().map(Vec::len).sum()
    }
}

/// `sum_lag A_lag z_{t-lag}` for `t = history.len()`, history oldest first.
fn predict_flat(coeffs: &VarCoefficients, history: &[&[f64]]) -> Vec<f64> {
    let p = coeffs.p;
    let mut out = vec![0.0; coeffs.k];
    for (lag, entries) in coeffs.lags.iter().enumerate() {
        let past = history[history.len() - 1 - lag];
        for &(r, c, v) in entries {
            out[r] += v * past[c];
        }
    }
    debug_assert!(history.len() >= p);
    out
}

/// One-step forecast `z_hat_t` from the `p` previous frames, oldest first.
pub fn forecast(coeffs: &VarCoefficients, history: &[Tensor]) -> Result<Tensor> {
    if history.len() != coeffs.p {
        return Err(Error::dim(
            "forecast",
            format!("need {} history frames, got {}", coeffs.p, history.len()),
        ));
    }
    let shape = history[0].shape().to_vec();
    for h in history {
        if h.ndim() != 2 || h.shape() != shape.as_slice() || h.len() != coeffs.k {
            return Err(Error::dim(
                "forecast",
                format!("history frame {:?} does not match K = {}", h.shape(), coeffs.k),
            ));
        }
    }
    let frames: Vec<&[f64]> = history.iter().map(|t| t.data()).collect();
    Tensor::new(shape, predict_flat(coeffs, &frames))
}

fn check_series(op: &'static str, coeffs: &VarCoefficients, z: &LatentSeries) -> Result<()> {
    if z.k() != coeffs.k {
        return Err(Error::dim(
            op,
            format!("series has K = {}, coefficients K = {}", z.k(), coeffs.k),
        ));
    }
    if z.len() <= coeffs.p {
        return Err(Error::Argument(format!(
            "{}: need T > p, got T = {}, p = {}",
            op,
            z.len(),
            coeffs.p
        )));
    }
    Ok(())
}

/// Mean of `||z_t - z_hat_t||^2 / ||z_t||^2` over `t >= p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeError {
    pub value: f64,
    /// Frames with `||z_t|| = 0`, left out of the mean.
    pub skipped: usize,
}

pub fn relative_prediction_error(coeffs: &VarCoefficients, z: &LatentSeries) -> Result<RelativeError> {
    check_series("relative_prediction_error", coeffs, z)?;
    let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
    for t in coeffs.p..z.len() {
        let frames: Vec<&[f64]> = (t - coeffs.p..t).map(|s| z.frame(s)).collect();
        let pred = predict_flat(coeffs, &frames);
        let actual = z.frame(t);
        let norm: f64 = actual.iter().map(|v| v * v).sum();
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        let err: f64 = actual.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum();
        sum += err / norm;
        count += 1;
    }
    Ok(RelativeError {
        value: if count > 0 { sum / count as f64 } else { 0.0 },
        skipped,
    })
}

/// Mean squared one-step error of `z_s` under coefficients `coeffs_r`.
pub fn swap_error(z_s: &LatentSeries, coeffs_r: &VarCoefficients) -> Result<f64> {
    check_series("swap_error", coeffs_r, z_s)?;
    let p = coeffs_r.p;
    let mut sum = 0.0;
    for t in p..z_s.len() {
        let frames: Vec<&[f64]> = (t - p..t).map(|s| z_s.frame(s)).collect();
        let pred = predict_flat(coeffs_r, &frames);
        sum += z_s
            .frame(t)
            .iter()
            .zip(&pred)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(sum / ((z_s.len() - p) * coeffs_r.k) as f64)
}

/// Lagged design over normalized latents `zn: [T, K]`.
///
/// Sample `i` is time `p + i`; feature `(lag - 1) * K + l` is `zn[p + i - lag, l]`.
pub struct LaggedDesign<'t> {
    zn: Var<'t>,
    p: usize,
    t: usize,
    k: usize,
}

impl<'t> LaggedDesign<'t> {
    pub fn new(zn: Var<'t>, p: usize) -> Result<Self> {
        let shape = zn.shape();
        if shape.len() != 2 {
            return Err(Error::dim("LaggedDesign", format!("expected [T, K], got {:?}", shape)));
        }
        if p == 0 || shape[0] <= p {
            return Err(Error::Argument(format!(
                "lag order {} needs more than {} samples",
                p, shape[0]
            )));
        }
        Ok(LaggedDesign {
            zn,
            p,
            t: shape[0],
            k: shape[1],
        })
    }

    /// Normalized response for output row `j`: `zn[t, j]` for `t >= p`.
    pub fn response(&self, j: usize) -> Var<'t> {
        let idx: Vec<usize> = (self.p..self.t).map(|t| t * self.k + j).collect();
        self.zn.reshape(&[self.t * self.k]).gather(&idx)
    }

    fn geometry(&self) -> LagGeometry {
        LagGeometry {
            p: self.p,
            t: self.t,
            k: self.k,
        }
    }
}

#[derive(Clone, Copy)]
struct LagGeometry {
    p: usize,
    t: usize,
    k: usize,
}

impl LagGeometry {
    fn n(&self) -> usize {
        self.t - self.p
    }

    /// Flat offset into `zn` of sample `i`, feature `f`.
    #[inline]
    fn offset(&self, i: usize, f: usize) -> usize {
        let lag = f / self.k + 1;
        (self.p + i - lag) * self.k + f % self.k
    }

    fn apply(&self, zn: &[f64], beta: &[f64]) -> Vec<f64> {
        let nz: Vec<(usize, f64)> = beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(f, b)| (f, *b))
            .collect();
        (0..self.n())
            .map(|i| nz.iter().map(|&(f, b)| zn[self.offset(i, f)] * b).sum())
            .collect()
    }

    fn apply_t(&self, zn: &[f64], r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p * self.k];
        for (i, ri) in r.iter().enumerate() {
            for lag in 1..=self.p {
                let row = &zn[(self.p + i - lag) * self.k..(self.p + i - lag + 1) * self.k];
                let dst = &mut out[(lag - 1) * self.k..lag * self.k];
                dst.iter_mut().zip(row).for_each(|(o, z)| *o += z * ri);
            }
        }
        out
    }
}

struct LagApplyOp(LagGeometry);

impl CustomOp for LagApplyOp {
    fn name(&self) -> &'static str {
        "lagged_apply"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (zn, beta) = (inputs[0].data(), inputs[1].data());
        let g = self.0;
        let mut gz = vec![0.0; zn.len()];
        for (i, gi) in grad.iter().enumerate() {
            for (f, b) in beta.iter().enumerate() {
                if *b != 0.0 {
                    gz[g.offset(i, f)] += gi * b;
                }
            }
        }
        vec![Some(gz), Some(g.apply_t(zn, grad))]
    }
}

struct LagApplyTOp(LagGeometry);

impl CustomOp for LagApplyTOp {
    fn name(&self) -> &'static str {
        "lagged_apply_transpose"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (zn, r) = (inputs[0].data(), inputs[1].data());
        let g = self.0;
        let mut gz = vec![0.0; zn.len()];
        for (i, ri) in r.iter().enumerate() {
            for (f, gf) in grad.iter().enumerate() {
                gz[g.offset(i, f)] += ri * gf;
            }
        }
        vec![Some(gz), Some(g.apply(zn, grad))]
    }
}

struct LagColumnsOp {
    geom: LagGeometry,
    idx: Vec<usize>,
}

impl CustomOp for LagColumnsOp {
    fn name(&self) -> &'static str {
        "lagged_columns"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let m = self.idx.len();
        let mut gz = vec![0.0; inputs[0].len()];
        for i in 0..self.geom.n() {
            for (a, &f) in self.idx.iter().enumerate() {
                gz[self.geom.offset(i, f)] += grad[i * m + a];
            }
        }
        vec![Some(gz)]
    }
}

impl<'t> DesignOperator<'t> for LaggedDesign<'t> {
    fn tape(&self) -> &'t Tape {
        self.zn.tape()
    }

    fn n_samples(&self) -> usize {
        self.t - self.p
    }

    fn n_features(&self) -> usize {
        self.p * self.k
    }

    fn apply_values(&self, beta: &[f64]) -> Vec<f64> {
        self.geometry().apply(self.zn.value().data(), beta)
    }

    fn apply_transpose_values(&self, r: &[f64]) -> Vec<f64> {
        self.geometry().apply_t(self.zn.value().data(), r)
    }

    fn column_values(&self, j: usize) -> Vec<f64> {
        let g = self.geometry();
        let zn = self.zn.value();
        (0..g.n()).map(|i| zn.data()[g.offset(i, j)]).collect()
    }

    fn apply(&self, beta: Var<'t>) -> Var<'t> {
        let out = self.apply_values(beta.value().data());
        self.tape().custom(
            &[self.zn, beta],
            Tensor::from_vec(out),
            Box::new(LagApplyOp(self.geometry())),
        )
    }

    fn apply_transpose(&self, r: Var<'t>) -> Var<'t> {
        let out = self.apply_transpose_values(r.value().data());
        self.tape().custom(
            &[self.zn, r],
            Tensor::from_vec(out),
            Box::new(LagApplyTOp(self.geometry())),
        )
    }

    fn columns(&self, idx: &[usize]) -> Var<'t> {
        let g = self.geometry();
        let zn = self.zn.value();
        let m = idx.len();
        let mut data = vec![0.0; g.n() * m];
        for i in 0..g.n() {
            for (a, &f) in idx.iter().enumerate() {
                data[i * m + a] = zn.data()[g.offset(i, f)];
            }
        }
        let value = Tensor::new(vec![g.n(), m], data).expect("column block shape");
        self.tape().custom(
            &[self.zn],
            value,
            Box::new(LagColumnsOp {
                geom: g,
                idx: idx.to_vec(),
            }),
        )
    }
}

/// Row fits kept on the tape, for differentiating through the coefficients.
pub struct TapedVarFit<'t> {
    pub coeffs: VarCoefficients,
    /// One `[p*K]` coefficient vector per output row.
    pub rows: Vec<Var<'t>>,
}

fn check_fit_args(t: usize, p: usize, lambda: f64, sigma: f64) -> Result<()> {
    if p == 0 || t <= p + 1 {
        return Err(Error::Argument(format!(
            "VAR fit needs T > p + 1, got T = {}, p = {}",
            t, p
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be >= 0, got {}", lambda)));
    }
    if !(sigma > MIN_SIGMA) {
        return Err(Error::Fit("constant latent series".into()));
    }
    Ok(())
}

/// Fits all rows on the tape owning `zn` (latents already divided by `sigma`).
pub fn fit_var_on_tape<'t>(
    zn: Var<'t>,
    sigma: f64,
    p: usize,
    lambda: f64,
    cfg: &SolverConfig,
    series_id: &str,
) -> Result<TapedVarFit<'t>> {
    let shape = zn.shape();
    check_fit_args(shape[0], p, lambda, sigma)?;
    let design = LaggedDesign::new(zn, p)?;
    let mut rows = Vec::with_capacity(design.k);
    let mut dense = Vec::with_capacity(design.k);
    for j in 0..design.k {
        let sol = lasso_path(&design, design.response(j), lambda, cfg)?;
        dense.push(sol.solution.dense());
        rows.push(sol.beta);
    }
    Ok(TapedVarFit {
        coeffs: VarCoefficients::from_rows(series_id, p, design.k, sigma, &dense),
        rows,
    })
}

/// Fits a series outside any training tape; rows run in parallel.
pub fn fit_var(z: &LatentSeries, p: usize, lambda: f64, cfg: &SolverConfig) -> Result<VarCoefficients> {
    check_fit_args(z.len(), p, lambda, z.sigma_z)?;
    let (t, k) = (z.len(), z.k());
    let zn: Vec<f64> = z.z.data().iter().map(|v| v / z.sigma_z).collect();
    let rows = (0..k)
        .into_par_iter()
        .map(|j| {
            let tape = Tape::new();
            let zv = tape.leaf(Tensor::new(vec![t, k], zn.clone())?);
            let design = LaggedDesign::new(zv, p)?;
            Ok(lasso_path(&design, design.response(j), lambda, cfg)?.solution.dense())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VarCoefficients::from_rows(z.series_id.clone(), p, k, z.sigma_z, &rows))
}

/// One-step forecasts in normalized units for `t = p..T`, as `[T - p, K]`.
pub fn forecast_on_tape<'t>(zn: Var<'t>, rows: &[Var<'t>], p: usize) -> Result<Var<'t>> {
    let design = LaggedDesign::new(zn, p)?;
    if rows.len() != design.k {
        return Err(Error::dim(
            "forecast_on_tape",
            format!("{} rows for K = {}", rows.len(), design.k),
        ));
    }
    let preds: Vec<Var<'t>> = rows.iter().map(|&b| design.apply(b)).collect();
    let n = design.n_samples();
    Ok(zn.tape().concat(&preds).reshape(&[design.k, n]).transpose())
}

/// Writes `series_id,lag,row,col,value`, one line per nonzero.
pub fn write_coefficients_csv<W: Write>(out: &mut W, all: &[VarCoefficients]) -> std::io::Result<()> {
    writeln!(out, "series_id,lag,row,col,value")?;
    for c in all {
        for (lag, entries) in c.lags.iter().enumerate() {
            for &(r, col, v) in entries {
                writeln!(out, "{},{},{},{},{:e}", c.series_id, lag + 1, r, col, v)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn series_from(data: Vec<f64>, t: usize, h: usize, w: usize) -> LatentSeries {
        LatentSeries::new(Tensor::new(vec![t, h, w], data).unwrap(), "s").unwrap()
    }

    fn simulate(a: &[f64], k: usize, t: usize, noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = vec![0.0; t * k];
        for i in 0..k {
            z[i] = rng.sample::<f64, _>(StandardNormal);
        }
        for s in 1..t {
            for r in 0..k {
                let mut v: f64 = (0..k).map(|c| a[r * k + c] * z[(s - 1) * k + c]).sum();
                v += noise * rng.sample::<f64, _>(StandardNormal);
                z[s * k + r] = v;
            }
        }
        z
    }

    #[test]
    fn recovers_sparse_support() {
        let k = 4;
        let mut a = vec![0.0; 16];
        a[0] = 0.8;
        a[k + 2] = -0.6;
        a[3 * k + 1] = 0.7;
        let z = series_from(simulate(&a, k, 500, 1.0, 7), 500, 2, 2);
        let c = fit_var(&z, 1, 0.1, &SolverConfig::default()).unwrap();
        let support: Vec<(usize, usize)> = c.lags[0].iter().map(|&(r, c, _)| (r, c)).collect();
        assert_eq!(support, vec![(0, 0), (1, 2), (3, 1)]);
    }

    #[test]
    fn large_lambda_gives_zero_coefficients() {
        let z = series_from(simulate(&[0.5, 0.1, 0.0, 0.4], 2, 60, 1.0, 1), 60, 1, 2);
        let c = fit_var(&z, 2, 1e6, &SolverConfig::default()).unwrap();
        assert_eq!(c.nnz(), 0);
        assert_eq!(c.lags.len(), 2);
        let rel = relative_prediction_error(&c, &z).unwrap();
        assert_eq!(rel.value, 1.0);
    }

    #[test]
    fn constant_series_is_rejected() {
        let z = series_from(vec![3.0; 40], 10, 2, 2);
        match fit_var(&z, 1, 0.01, &SolverConfig::default()) {
            Err(Error::Fit(msg)) => assert!(msg.contains("constant latent series")),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn identity_forecast_returns_previous_frame() {
        let mut c = VarCoefficients::zeros("s", 1, 3, 2.5);
        c.lags[0] = (0..3).map(|i| (i, i, 1.0)).collect();
        let prev = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(forecast(&c, std::slice::from_ref(&prev)).unwrap(), prev);
        let zero = VarCoefficients::zeros("s", 1, 3, 1.0);
        assert!(forecast(&zero, std::slice::from_ref(&prev))
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
        assert!(forecast(&c, &[prev.clone(), prev]).is_err());
    }

    #[test]
    fn sparse_forecast_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (k, p) = (6, 3);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..p * k)
                    .map(|_| {
                        if rng.random_bool(0.3) {
                            rng.random_range(-1.0..1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let c = VarCoefficients::from_rows("s", p, k, 1.0, &rows);
        let hist: Vec<Tensor> = (0..p)
            .map(|_| Tensor::new(vec![2, 3], (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let got = forecast(&c, &hist).unwrap();
        for r in 0..k {
            let mut want = 0.0;
            for lag in 1..=p {
                let m = c.dense(lag);
                for col in 0..k {
                    want += m[r * k + col] * hist[p - lag].data()[col];
                }
            }
            assert!((got.data()[r] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn relative_error_matches_brute_force() {
        let a = [0.6, 0.2, -0.1, 0.5];
        let z = series_from(simulate(&a, 2, 80, 0.3, 4), 80, 1, 2);
        let c = VarCoefficients::from_rows("s", 1, 2, z.sigma_z, &[vec![0.6, 0.2], vec![-0.1, 0.5]]);
        let got = relative_prediction_error(&c, &z).unwrap();
        let d = z.z.data();
        let mut sum = 0.0;
        for t in 1..80 {
            let p0 = 0.6 * d[(t - 1) * 2] + 0.2 * d[(t - 1) * 2 + 1];
            let p1 = -0.1 * d[(t - 1) * 2] + 0.5 * d[(t - 1) * 2 + 1];
            let e = (d[t * 2] - p0).powi(2) + (d[t * 2 + 1] - p1).powi(2);
            sum += e / (d[t * 2].powi(2) + d[t * 2 + 1].powi(2));
        }
        assert!((got.value - sum / 79.0).abs() <= 1e-12);
        assert_eq!(got.skipped, 0);
    }

    #[test]
    fn zero_frames_are_skipped() {
        let z = series_from(vec![1.0, 0.0, 0.0, 0.0, 2.0, 1.0], 3, 1, 2);
        let c = VarCoefficients::zeros("s", 1, 2, 1.0);
        let r = relative_prediction_error(&c, &z).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn self_swap_is_zero_and_k_mismatch_errors() {
        let z = series_from(simulate(&[0.3, 0.0, 0.1, 0.2], 2, 40, 1.0, 2), 40, 1, 2);
        let c = fit_var(&z, 1, 0.01, &SolverConfig::default()).unwrap();
        assert_eq!(swap_error(&z, &c).unwrap() - swap_error(&z, &c.clone()).unwrap(), 0.0);
        let other = VarCoefficients::zeros("o", 1, 3, 1.0);
        assert!(matches!(swap_error(&z, &other), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lagged_design_is_adjoint_and_matches_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, k, p) = (12, 3, 2);
        let tape = Tape::new();
        let zn = tape.leaf(Tensor::new(vec![t, k], (0..t * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let d = LaggedDesign::new(zn, p).unwrap();
        let b: Vec<f64> = (0..p * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..t - p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = d.apply_values(&b).iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = d.apply_transpose_values(&r).iter().zip(&b).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // feature (lag 2, l = 1) at sample 0 is zn[0, 1]
        assert_eq!(d.column_values(k + 1)[0], zn.value().data()[1]);
        let cols = d.columns(&[k + 1, 0]).value();
        assert_eq!(cols.data()[0], zn.value().data()[1]);
        assert_eq!(cols.data()[1], zn.value().data()[k]);
    }

    #[test]
    fn csv_lists_nonzeros() {
        let mut c = VarCoefficients::zeros("a/1", 2, 2, 1.0);
        c.lags[1].push((0, 1, 0.5));
        let mut buf = Vec::new();
        write_coefficients_csv(&mut buf, &[c]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "series_id,lag,row,col,value\na/1,2,0,1,5e-1\n");
    }
}
