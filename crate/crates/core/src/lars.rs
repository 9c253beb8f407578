//! Lasso homotopy by least angle regression with the lasso modification.
//!
//! Minimizes `(1/(2n)) ||y - X b||^2 + lambda ||b||_1` by following the
//! piecewise-linear solution path from `lambda_max = ||X^T y||_inf / n` down to
//! the requested `lambda`. Every arithmetic step is recorded on the tape that
//! owns the design, so backward through the returned coefficients
//! differentiates the unrolled path with its event sequence held fixed.
//!
//! The design is only touched through matrix-vector products and column
//! gathers on the active set ([`DesignOperator`]); it is never materialized.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Implicit design matrix `X` of shape `n_samples x n_features`.
///
/// The `*_values` methods evaluate on plain slices; the others record on the tape.
pub trait DesignOperator<'t> {
    fn tape(&self) -> &'t Tape;
    fn n_samples(&self) -> usize;
    fn n_features(&self) -> usize;

    fn apply_values(&self, beta: &[f64]) -> Vec<f64>;
    fn apply_transpose_values(&self, r: &[f64]) -> Vec<f64>;
    fn column_values(&self, j: usize) -> Vec<f64>;

    /// `X beta`
    fn apply(&self, beta: Var<'t>) -> Var<'t>;
    /// `X^T r`
    fn apply_transpose(&self, r: Var<'t>) -> Var<'t>;
    /// The columns `idx` as an `[n_samples, idx.len()]` matrix.
    fn columns(&self, idx: &[usize]) -> Var<'t>;
}

/// Explicit `[n, p]` matrix on the tape.
pub struct DenseDesign<'t> {
    x: Var<'t>,
    n: usize,
    p: usize,
}

impl<'t> DenseDesign<'t> {
    pub fn new(x: Var<'t>) -> Result<Self> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::dim("DenseDesign", format!("expected [n, p], got {:?}", shape)));
        }
        Ok(DenseDesign {
            x,
            n: shape[0],
            p: shape[1],
        })
    }

    pub fn matrix(&self) -> Var<'t> {
        self.x
    }
}

impl<'t> DesignOperator<'t> for DenseDesign<'t> {
    fn tape(&self) -> &'t Tape {
        self.x.tape()
    }

    fn n_samples(&self) -> usize {
        self.n
    }

    fn n_features(&self) -> usize {
        self.p
    }

    fn apply_values(&self, beta: &[f64]) -> Vec<f64> {
        let x = self.x.value();
        (0..self.n)
            .map(|i| {
                x.data()[i * self.p..(i + 1) * self.p]
                    .iter()
                    .zip(beta)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn apply_transpose_values(&self, r: &[f64]) -> Vec<f64> {
        let x = self.x.value();
        let mut out = vec![0.0; self.p];
        for (i, ri) in r.iter().enumerate() {
            out.iter_mut()
                .zip(&x.data()[i * self.p..(i + 1) * self.p])
                .for_each(|(o, a)| *o += a * ri);
        }
        out
    }

    fn column_values(&self, j: usize) -> Vec<f64> {
        let x = self.x.value();
        (0..self.n).map(|i| x.data()[i * self.p + j]).collect()
    }

    fn apply(&self, beta: Var<'t>) -> Var<'t> {
        self.x.matvec(beta)
    }

    fn apply_transpose(&self, r: Var<'t>) -> Var<'t> {
        self.x.matvec_t(r)
    }

    fn columns(&self, idx: &[usize]) -> Var<'t> {
        self.x.gather_cols(idx)
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Sign-aware constant added to step-size denominators.
    pub eps_gamma: f64,
    /// Event budget; `None` means `4 * n_features`.
    pub max_steps: Option<usize>,
    /// Correlation slack for simultaneous entries at the start of the path.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps_gamma: 1e-8,
            max_steps: None,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Enter(usize),
    Leave(usize),
}

impl Event {
    pub fn feature(&self) -> usize {
        match *self {
            Event::Enter(j) | Event::Leave(j) => j,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Enter(_) => f.write_str("enter"),
            Event::Leave(_) => f.write_str("leave"),
        }
    }
}

/// A kink of the path: the active set changes at `lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct Knot {
    pub lambda: f64,
    pub event: Event,
    /// Nonzero coefficients right after the event, sorted by feature.
    pub coefficients: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoSolution {
    pub n_features: usize,
    /// Nonzero coefficients sorted by feature index.
    pub beta: Vec<(usize, f64)>,
    pub lambda_target: f64,
    pub lambda_max: f64,
    pub knots: Vec<Knot>,
    pub converged: bool,
}

impl LassoSolution {
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        for &(j, v) in &self.beta {
            out[j] = v;
        }
        out
    }

    pub fn support(&self) -> Vec<usize> {
        self.beta.iter().map(|&(j, _)| j).collect()
    }
}

/// Solution plus the tape node holding the dense coefficient vector.
pub struct TapedSolution<'t> {
    pub solution: LassoSolution,
    pub beta: Var<'t>,
}

fn sparse_of(values: &[f64]) -> Vec<(usize, f64)> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| (j, *v))
        .collect()
}

/// Smallest positive ratio `num / (den + eps * sign(den))` and its index.
///
/// Ties go to the lowest index. `None` when no ratio is positive.
pub fn step_size_gamma(candidates: &[(f64, f64)], eps_gamma: f64) -> Option<(f64, usize)> {
    select_step(candidates, eps_gamma, None)
}

fn select_step(candidates: &[(f64, f64)], eps_gamma: f64, skip: Option<usize>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (k, &(num, den)) in candidates.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        let ratio = num / stabilized(den, eps_gamma);
        if ratio > 0.0 && ratio.is_finite() && best.is_none_or(|(b, _)| ratio < b) {
            best = Some((ratio, k));
        }
    }
    best
}

#[inline]
fn stabilized(den: f64, eps: f64) -> f64 {
    den + eps * den.signum()
}

struct StepSizeOp {
    k: usize,
    eps: f64,
}

impl CustomOp for StepSizeOp {
    fn name(&self) -> &'static str {
        "step_size_gamma"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (num, den) = (inputs[0], inputs[1]);
        let d = stabilized(den.data()[self.k], self.eps);
        let mut gnum = vec![0.0; num.len()];
        let mut gden = vec![0.0; den.len()];
        gnum[self.k] = grad[0] / d;
        gden[self.k] = -grad[0] * num.data()[self.k] / (d * d);
        vec![Some(gnum), Some(gden)]
    }
}

/// Tape version of [`step_size_gamma`]; the result is differentiable through
/// the selected candidate.
pub fn step_size_gamma_var<'t>(num: Var<'t>, den: Var<'t>, eps_gamma: f64) -> Option<(Var<'t>, usize)> {
    step_var(num, den, eps_gamma, None)
}

fn step_var<'t>(num: Var<'t>, den: Var<'t>, eps_gamma: f64, skip: Option<usize>) -> Option<(Var<'t>, usize)> {
    let (nv, dv) = (num.value(), den.value());
    assert_eq!(nv.len(), dv.len());
    let cands: Vec<(f64, f64)> = nv.data().iter().copied().zip(dv.data().iter().copied()).collect();
    let (gamma, k) = select_step(&cands, eps_gamma, skip)?;
    let out = num.tape().custom(
        &[num, den],
        Tensor::scalar(gamma),
        Box::new(StepSizeOp { k, eps: eps_gamma }),
    );
    Some((out, k))
}

/// Lower-triangular factor of the active Gram matrix, kept in active-set order.
#[derive(Clone, Debug)]
struct Cholesky {
    m: usize,
    l: Vec<f64>,
}

const CHOL_MIN_DIAG: f64 = 1e-10;

impl Cholesky {
    fn empty() -> Self {
        Cholesky { m: 0, l: Vec::new() }
    }

    fn from_gram(g: &[f64], m: usize) -> Option<Self> {
        let mut c = Cholesky::empty();
        for j in 0..m {
            let cross: Vec<f64> = (0..j).map(|i| g[i * m + j]).collect();
            if !c.push(&cross, g[j * m + j]) {
                return None;
            }
        }
        Some(c)
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.m + j]
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        for i in 0..self.m {
            let s: f64 = (0..i).map(|k| self.at(i, k) * w[k]).sum();
            w[i] = (b[i] - s) / self.at(i, i);
        }
        w
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let w = self.forward(b);
        let mut x = vec![0.0; self.m];
        for i in (0..self.m).rev() {
            let s: f64 = (i + 1..self.m).map(|k| self.at(k, i) * x[k]).sum();
            x[i] = (w[i] - s) / self.at(i, i);
        }
        x
    }

    /// Appends a column with Gram cross terms `cross` and diagonal `diag`.
    /// Returns false (leaving the factor unchanged) if the new pivot is too small.
    fn push(&mut self, cross: &[f64], diag: f64) -> bool {
        let w = self.forward(cross);
        let d2 = diag - w.iter().map(|v| v * v).sum::<f64>();
        // Pivot measured relative to the column norm: cancellation leaves ~1e-8
        // noise on an exactly dependent column.
        if !(d2 > CHOL_MIN_DIAG * diag) || d2.sqrt() < CHOL_MIN_DIAG {
            return false;
        }
        let m = self.m + 1;
        let mut l = vec![0.0; m * m];
        for i in 0..self.m {
            l[i * m..i * m + self.m].copy_from_slice(&self.l[i * self.m..(i + 1) * self.m]);
        }
        l[self.m * m..self.m * m + self.m].copy_from_slice(&w);
        l[self.m * m + self.m] = d2.sqrt();
        self.m = m;
        self.l = l;
        true
    }

    /// Drops active position `q`, restoring triangularity with Givens rotations.
    fn remove(&mut self, q: usize) {
        let m = self.m;
        let mut a: Vec<Vec<f64>> = (0..m)
            .filter(|&i| i != q)
            .map(|i| self.l[i * m..(i + 1) * m].to_vec())
            .collect();
        for k in q..m - 1 {
            let (x, y) = (a[k][k], a[k][k + 1]);
            let r = x.hypot(y);
            if r == 0.0 {
                continue;
            }
            let (c, s) = (x / r, y / r);
            for row in a.iter_mut().skip(k) {
                let (u, v) = (row[k], row[k + 1]);
                row[k] = c * u + s * v;
                row[k + 1] = -s * u + c * v;
            }
        }
        let m2 = m - 1;
        let mut l = vec![0.0; m2 * m2];
        for (i, row) in a.iter().enumerate() {
            for j in 0..=i {
                l[i * m2 + j] = row[j];
            }
            if l[i * m2 + i] < 0.0 {
                for j in 0..=i {
                    l[i * m2 + j] = -row[j];
                }
            }
        }
        self.m = m2;
        self.l = l;
    }

    fn min_diag(&self) -> f64 {
        (0..self.m).map(|i| self.at(i, i)).fold(f64::INFINITY, f64::min)
    }
}

/// `d = (C^T C / n)^{-1} s` for the active columns `C`, via the maintained factor.
struct GramSolveOp {
    factor: Cholesky,
    d: Vec<f64>,
    inv_n: f64,
}

impl CustomOp for GramSolveOp {
    fn name(&self) -> &'static str {
        "gram_solve"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        // d = G^{-1} s, G = C^T C / n  =>  dG = -v d^T with v = G^{-1} grad,
        // dC = C (dG + dG^T) / n.
        let cols = inputs[0];
        let (n, m) = (cols.shape()[0], cols.shape()[1]);
        let v = self.factor.solve(grad);
        let c = cols.data();
        let mut gc = vec![0.0; n * m];
        for i in 0..n {
            let row = &c[i * m..(i + 1) * m];
            let cv: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            let cd: f64 = row.iter().zip(&self.d).map(|(a, b)| a * b).sum();
            for a in 0..m {
                gc[i * m + a] = -self.inv_n * (cv * self.d[a] + cd * v[a]);
            }
        }
        vec![Some(gc)]
    }
}

fn gram_solve<'t>(cols: Var<'t>, signs: &[f64], factor: &Cholesky, inv_n: f64) -> Var<'t> {
    let d = factor.solve(signs);
    cols.tape().custom(
        &[cols],
        Tensor::from_vec(d.clone()),
        Box::new(GramSolveOp {
            factor: factor.clone(),
            d,
            inv_n,
        }),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram_of(design: &dyn DesignOperator<'_>, idx: &[usize], inv_n: f64) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = idx.iter().map(|&j| design.column_values(j)).collect();
    let m = idx.len();
    let mut g = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let v = dot(&cols[a], &cols[b]) * inv_n;
            g[a * m + b] = v;
            g[b * m + a] = v;
        }
    }
    g
}

/// Index of the largest `|c_j|` (lowest index on ties) and that magnitude.
fn argmax_abs(c: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, v) in c.iter().enumerate() {
        if v.abs() > best.1 {
            best = (j, v.abs());
        }
    }
    best
}

/// Traces the lasso path down to `lambda_target`.
///
/// `y` must live on the design's tape. The solution at `lambda_target` is the
/// exact path point; if `lambda_target >= lambda_max` it is zero.
pub fn lasso_path<'t>(
    design: &dyn DesignOperator<'t>,
    y: Var<'t>,
    lambda_target: f64,
    cfg: &SolverConfig,
) -> Result<TapedSolution<'t>> {
    let n = design.n_samples();
    let p = design.n_features();
    if !(lambda_target >= 0.0) || !lambda_target.is_finite() {
        return Err(Error::Argument(format!(
            "lambda must be finite and >= 0, got {}",
            lambda_target
        )));
    }
    if !(cfg.eps_gamma > 0.0) {
        return Err(Error::Argument(format!("eps_gamma must be > 0, got {}", cfg.eps_gamma)));
    }
    if y.len() != n {
        return Err(Error::dim(
            "lasso_path",
            format!("y has {} entries, design has {} samples", y.len(), n),
        ));
    }
    let tape = design.tape();
    let inv_n = 1.0 / n as f64;
    let max_steps = cfg.max_steps.unwrap_or(4 * p.max(1));

    let mut beta = tape.leaf(Tensor::zeros(&[p]));
    let c0 = design.apply_transpose(y).scale(inv_n);
    let c0v = c0.value();
    let (j0, lambda_max) = argmax_abs(c0v.data());
    let mut knots = Vec::new();
    let finish = |beta: Var<'t>, knots: Vec<Knot>, converged: bool| TapedSolution {
        solution: LassoSolution {
            n_features: p,
            beta: sparse_of(beta.value().data()),
            lambda_target,
            lambda_max: lambda_max.max(0.0),
            knots,
            converged,
        },
        beta,
    };
    if p == 0 || lambda_max <= 0.0 {
        return Ok(finish(beta, knots, true));
    }
    knots.push(Knot {
        lambda: lambda_max,
        event: Event::Enter(j0),
        coefficients: Vec::new(),
    });
    if lambda_max <= lambda_target {
        return Ok(finish(beta, knots, true));
    }

    let s0 = c0v.data()[j0].signum();
    // Tracked homotopy parameter: starts at |c_j0| and decreases by each step.
    let mut lambda = c0.gather(&[j0]).scale(s0);
    let mut active = vec![j0];
    let mut signs = vec![s0];
    let mut factor = Cholesky::from_gram(&gram_of(design, &active, inv_n), 1)
        .ok_or_else(|| Error::SingularGram { active: active.clone() })?;
    for j in 0..p {
        if j != j0 && c0v.data()[j].abs() >= lambda_max - cfg.tol {
            enter(
                design,
                &mut factor,
                &mut active,
                &mut signs,
                j,
                c0v.data()[j].signum(),
                inv_n,
            )?;
            knots.push(Knot {
                lambda: lambda_max,
                event: Event::Enter(j),
                coefficients: Vec::new(),
            });
        }
    }

    // Feature that just left and its former sign: re-entering with that sign
    // is the zero-length step back, so that one candidate is skipped.
    let mut dropped: Option<(usize, f64)> = None;
    let mut steps = 0;
    loop {
        if steps >= max_steps {
            return Ok(finish(beta, knots, false));
        }
        steps += 1;

        let cols = design.columns(&active);
        let beta_a = beta.gather(&active);
        let resid = y.sub(cols.matvec(beta_a));
        let corr = design.apply_transpose(resid).scale(inv_n);
        let dir = gram_solve(cols, &signs, &factor, inv_n);
        let equi = cols.matvec(dir);
        let along = design.apply_transpose(equi).scale(inv_n);

        let in_active = {
            let mut mask = vec![false; p];
            active.iter().for_each(|&j| mask[j] = true);
            mask
        };
        let inactive: Vec<usize> = (0..p).filter(|&j| !in_active[j]).collect();
        let mi = inactive.len();
        let ma = active.len();

        // Candidate order: (enter +, enter -) per inactive feature, then leaves.
        let mut parts_num = Vec::new();
        let mut parts_den = Vec::new();
        if mi > 0 {
            let ci = corr.gather(&inactive);
            let ai = along.gather(&inactive);
            let lam_b = lambda.broadcast(mi);
            let ones = Tensor::full(&[mi], 1.0);
            parts_num.push(lam_b.sub(ci));
            parts_num.push(lam_b.add(ci));
            parts_den.push(ai.neg().add_const(&ones));
            parts_den.push(ai.add_const(&ones));
        }
        parts_num.push(beta_a.neg());
        parts_den.push(dir);
        let mut order: Vec<usize> = (0..mi).flat_map(|k| [k, mi + k]).collect();
        order.extend(2 * mi..2 * mi + ma);
        let num = tape.concat(&parts_num).gather(&order);
        let den = tape.concat(&parts_den).gather(&order);
        let skip = dropped.map(|(j, s)| {
            let k = inactive.binary_search(&j).expect("dropped feature is inactive");
            2 * k + usize::from(s < 0.0)
        });

        let to_target = lambda.add_const(&Tensor::scalar(-lambda_target));
        let event = step_var(num, den, cfg.eps_gamma, skip).filter(|(g, _)| g.item() < to_target.item());
        let gamma = event.map_or(to_target, |(g, _)| g);

        beta = beta.add(dir.scale_by(gamma).scatter(&active, p));
        lambda = lambda.sub(gamma);

        let Some((_, k)) = event else {
            return Ok(finish(beta, knots, true));
        };
        let k = order[k];
        let ev = if k < 2 * mi {
            let (j, s) = if k < mi {
                (inactive[k], 1.0)
            } else {
                (inactive[k - mi], -1.0)
            };
            enter(design, &mut factor, &mut active, &mut signs, j, s, inv_n)?;
            dropped = None;
            Event::Enter(j)
        } else {
            let q = k - 2 * mi;
            let j = active[q];
            let s = signs[q];
            let mut keep = Tensor::full(&[p], 1.0);
            keep.data_mut()[j] = 0.0;
            beta = beta.mul_const(&keep);
            active.remove(q);
            signs.remove(q);
            factor.remove(q);
            if !active.is_empty() && factor.min_diag() < CHOL_MIN_DIAG {
                factor = Cholesky::from_gram(&gram_of(design, &active, inv_n), active.len())
                    .ok_or_else(|| Error::SingularGram { active: active.clone() })?;
            }
            dropped = Some((j, s));
            Event::Leave(j)
        };
        knots.push(Knot {
            lambda: lambda.item(),
            event: ev,
            coefficients: sparse_of(beta.value().data()),
        });
        if active.is_empty() {
            // Only reachable through rounding: restart from the largest correlation.
            let r = y.sub(design.apply(beta));
            let c = design.apply_transpose(r).scale(inv_n);
            let (j, _) = argmax_abs(c.value().data());
            let s = c.value().data()[j].signum();
            lambda = c.gather(&[j]).scale(s);
            enter(design, &mut factor, &mut active, &mut signs, j, s, inv_n)?;
            dropped = None;
        }
    }
}

fn enter(
    design: &dyn DesignOperator<'_>,
    factor: &mut Cholesky,
    active: &mut Vec<usize>,
    signs: &mut Vec<f64>,
    j: usize,
    sign: f64,
    inv_n: f64,
) -> Result<()> {
    let xj = design.column_values(j);
    let cross: Vec<f64> = active
        .iter()
        .map(|&a| dot(&design.column_values(a), &xj) * inv_n)
        .collect();
    let diag = dot(&xj, &xj) * inv_n;
    active.push(j);
    signs.push(sign);
    if !factor.push(&cross, diag) {
        *factor = Cholesky::from_gram(&gram_of(design, active, inv_n), active.len())
            .ok_or_else(|| Error::SingularGram { active: active.clone() })?;
    }
    Ok(())
}

/// Convenience wrapper for an explicit `[n, p]` matrix, on a private tape.
pub fn lasso_dense(x: &Tensor, y: &[f64], lambda: f64, cfg: &SolverConfig) -> Result<LassoSolution> {
    let tape = Tape::new();
    let design = DenseDesign::new(tape.leaf(x.clone()))?;
    let yv = tape.leaf(Tensor::from_vec(y.to_vec()));
    Ok(lasso_path(&design, yv, lambda, cfg)?.solution)
}

/// Stationarity check for the lasso objective at `lambda`.
pub fn kkt_check(design: &dyn DesignOperator<'_>, y: &[f64], beta: &[f64], lambda: f64, tol: f64) -> bool {
    let n = design.n_samples() as f64;
    let fit = design.apply_values(beta);
    let resid: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
    let c = design.apply_transpose_values(&resid);
    c.iter().zip(beta).all(|(cj, bj)| {
        let cj = cj / n;
        if *bj != 0.0 {
            (cj - lambda * bj.signum()).abs() <= tol
        } else {
            cj.abs() <= lambda + tol
        }
    })
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on an explicit `[n, p]` matrix, until the largest
/// coefficient change in a sweep is at most `tol`.
pub fn solve_dense_oracle(x: &Tensor, y: &[f64], lambda: f64, tol: f64) -> Result<Vec<f64>> {
    if x.ndim() != 2 || x.shape()[0] != y.len() {
        return Err(Error::dim(
            "solve_dense_oracle",
            format!("X {:?} vs y[{}]", x.shape(), y.len()),
        ));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) || !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument("non-finite input to coordinate descent".into()));
    }
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let nf = n as f64;
    let cols: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x.data()[i * p + j]).collect()).collect();
    let sq: Vec<f64> = cols.iter().map(|c| dot(c, c) / nf).collect();
    let mut beta = vec![0.0; p];
    let mut resid = y.to_vec();
    for _sweep in 0..1_000_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if sq[j] == 0.0 {
                continue;
            }
            let rho = dot(&cols[j], &resid) / nf + sq[j] * beta[j];
            let new = soft_threshold(rho, lambda) / sq[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.iter_mut().zip(&cols[j]).for_each(|(r, c)| *r -= delta * c);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change <= tol {
            return Ok(beta);
        }
    }
    Err(Error::Argument("coordinate descent did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Tensor {
        let data = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, p], data).unwrap()
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(step_size_gamma(&[(1.0, 2.0), (3.0, 1.0)], 1e-300), Some((0.5, 0)));
        let (g, _) = step_size_gamma(&[(1.0, 1e-12)], 1e-8).unwrap();
        assert!(g.is_finite());
        assert!((g - 1.0 / (1e-12 + 1e-8)).abs() / g < 1e-12);
        assert_eq!(step_size_gamma(&[(-1.0, 2.0), (1.0, -3.0)], 1e-8), None);
        // lowest index on ties
        assert_eq!(step_size_gamma(&[(2.0, 4.0), (1.0, 2.0)], 1e-300).unwrap().1, 0);
    }

    #[test]
    fn step_size_gradient_matches_finite_differences() {
        let num = [0.7, 0.3, -0.2, 1.1];
        let den = [0.9, 0.5, 0.4, 0.2];
        let eps = 1e-8;
        let tape = Tape::new();
        let nv = tape.leaf(Tensor::from_vec(num.to_vec()));
        let dv = tape.leaf(Tensor::from_vec(den.to_vec()));
        let (g, k) = step_size_gamma_var(nv, dv, eps).unwrap();
        assert_eq!(k, 1);
        let grads = tape.backward(g).unwrap();
        let gn = grads.wrt(nv);
        let gd = grads.wrt(dv);
        let f = |num: &[f64], den: &[f64]| {
            let c: Vec<(f64, f64)> = num.iter().copied().zip(den.iter().copied()).collect();
            step_size_gamma(&c, eps).unwrap().0
        };
        let h = 1e-6;
        for i in 0..4 {
            let (mut a, mut b) = (num, num);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, &den) - f(&b, &den)) / (2.0 * h);
            assert!(
                (fd - gn.data()[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "num {i}: {fd} vs {}",
                gn.data()[i]
            );
            let (mut a, mut b) = (den, den);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&num, &a) - f(&num, &b)) / (2.0 * h);
            assert!(
                (fd - gd.data()[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "den {i}: {fd} vs {}",
                gd.data()[i]
            );
        }
    }

    #[test]
    fn cholesky_insert_delete_matches_rebuild() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 20, 6);
        let tape = Tape::new();
        let d = DenseDesign::new(tape.leaf(x)).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let g = gram_of(&d, &all, 1.0 / 20.0);
        let mut c = Cholesky::from_gram(&g, 6).unwrap();
        c.remove(2);
        let rest = [0, 1, 3, 4, 5];
        let g2 = gram_of(&d, &rest, 1.0 / 20.0);
        let fresh = Cholesky::from_gram(&g2, 5).unwrap();
        for (a, b) in c.l.iter().zip(&fresh.l) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_at_lambda_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 15, 5);
        let y: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = lasso_dense(&x, &y, 0.0, &SolverConfig::default()).unwrap();
        let sol = lasso_dense(&x, &y, probe.lambda_max, &SolverConfig::default()).unwrap();
        assert!(sol.beta.is_empty());
        assert_eq!(sol.knots.len(), 1);
        assert_eq!(sol.knots[0].lambda, probe.lambda_max);
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        // X^T X = n I with n = 4
        let x = Tensor::new(vec![4, 2], vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]).unwrap();
        let y = [3.0, 1.0, -0.5, 0.25];
        let xty = [(3.0 + 1.0 + 0.5 - 0.25) / 4.0, (3.0 - 1.0 - 0.5 - 0.25) / 4.0];
        for lam in [0.0, 0.1, 0.3, 0.6, 2.0] {
            let sol = lasso_dense(&x, &y, lam, &SolverConfig::default()).unwrap();
            let b = sol.dense();
            for j in 0..2 {
                assert!(
                    (b[j] - soft_threshold(xty[j], lam)).abs() < 1e-6,
                    "lam {lam} j {j}: {:?}",
                    b
                );
            }
        }
    }

    #[test]
    fn oracle_matches_normal_equations_at_zero_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let x = random_matrix(&mut rng, n, n);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = solve_dense_oracle(&x, &y, 0.0, 1e-13).unwrap();
        let xm = nalgebra::DMatrix::from_row_slice(n, n, x.data());
        let ym = nalgebra::DVector::from_row_slice(&y);
        let ls = (xm.transpose() * &xm).lu().solve(&(xm.transpose() * ym)).unwrap();
        for j in 0..n {
            assert!((beta[j] - ls[j]).abs() < 1e-6, "{} vs {}", beta[j], ls[j]);
        }
        assert!(solve_dense_oracle(&x, &y, 1e9, 1e-12)
            .unwrap()
            .iter()
            .all(|b| *b == 0.0));
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(
            solve_dense_oracle(&bad, &y, 0.1, 1e-9),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn kkt_detects_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 30, 8);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let d = DenseDesign::new(tape.leaf(x.clone())).unwrap();
        let lmax = lasso_dense(&x, &y, 1e9, &SolverConfig::default()).unwrap().lambda_max;
        assert!(kkt_check(&d, &y, &[0.0; 8], lmax, 1e-12));
        let lam = 0.2 * lmax;
        let mut b = solve_dense_oracle(&x, &y, lam, 1e-12).unwrap();
        assert!(kkt_check(&d, &y, &b, lam, 1e-6));
        let j = b.iter().position(|v| *v != 0.0).unwrap();
        b[j] += 1e-2;
        assert!(!kkt_check(&d, &y, &b, lam, 1e-6));
    }

    #[test]
    fn dense_design_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 7, 4);
        let tape = Tape::new();
        let d = DenseDesign::new(tape.leaf(x)).unwrap();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&d.apply_values(&b), &r);
        let rhs = dot(&b, &d.apply_transpose_values(&r));
        assert!((lhs - rhs).abs() < 1e-10);
        let mut e = vec![0.0; 4];
        e[2] = 1.0;
        assert_eq!(d.apply_values(&e), d.column_values(2));
    }

    #[test]
    fn singular_design_is_reported() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, -1.0, -1.0]).unwrap();
        let y = [1.0, 0.5, 0.2];
        match lasso_dense(&x, &y, 0.0, &SolverConfig::default()) {
            Err(Error::SingularGram { active }) => assert_eq!(active.len(), 2),
            other => panic!("expected singular Gram error, got {:?}", other.map(|s| s.beta)),
        }
    }

    #[test]
    fn step_budget_exhaustion_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 20, 10);
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = SolverConfig {
            max_steps: Some(1),
            ..Default::default()
        };
        let sol = lasso_dense(&x, &y, 0.0, &cfg).unwrap();
        assert!(!sol.converged);
    }
}
