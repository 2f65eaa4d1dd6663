//! Sparse polynomial identification of terminal output dynamics
//! `y_dot = Theta(y, u) Xi`, its split into a scaled rigid-body part plus a
//! residual, and coefficient-of-determination reporting.
//!
//! Outputs are stacked terminal poses `[x_0, y_0, th_0, x_1, ...]` and inputs
//! are the held terminal twist `[vx, vy, om]`, so output dimension `3t + c`
//! belongs to terminal `t`, channel `c`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::linalg::ridge_solve;
use crate::scalar::Real;
use crate::se2::normalize_angle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SysidError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least as many samples ({rows}) as library terms ({cols})")]
    Underdetermined { rows: usize, cols: usize },
    #[error("library lacks rigid-body monomial {0}")]
    MissingRigidTerms(String),
    #[error("output dimension {dim} has zero variance")]
    DegenerateVariance { dim: usize },
    #[error("least-squares system is singular")]
    Singular,
    #[error("cannot parse model text: {0}")]
    Parse(String),
}

/// Polynomial candidate library over `n_y` outputs followed by `n_u` inputs.
///
/// Term order: the constant, then monomials of degree 1, 2, ... with variable
/// indices non-decreasing inside a term and terms ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyLibrary {
    pub n_y: usize,
    pub n_u: usize,
    pub degree: usize,
    terms: Vec<Vec<usize>>,
}

impl PolyLibrary {
    pub fn new(n_y: usize, n_u: usize, degree: usize) -> Self {
        let n = n_y + n_u;
        let mut terms = vec![Vec::new()];
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..degree {
            let mut next = Vec::new();
            for t in &frontier {
                let start = t.last().copied().unwrap_or(0);
                for v in start..n {
                    let mut m = t.clone();
                    m.push(v);
                    next.push(m);
                }
            }
            terms.extend(next.iter().cloned());
            frontier = next;
        }
        Self { n_y, n_u, degree, terms }
    }

    /// Library for `n_t` stacked terminal poses and a planar twist input.
    pub fn for_terminals(n_t: usize, degree: usize) -> Self {
        Self::new(3 * n_t, 3, degree)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Vec<usize>] {
        &self.terms
    }

    pub fn n_vars(&self) -> usize {
        self.n_y + self.n_u
    }

    /// Index of a monomial given as a multiset of variable indices.
    pub fn index_of(&self, vars: &[usize]) -> Option<usize> {
        let mut key = vars.to_vec();
        key.sort_unstable();
        self.terms.iter().position(|t| *t == key)
    }

    pub fn var_name(&self, v: usize) -> String {
        if v < self.n_y {
            if self.n_y % 3 == 0 {
                let ch = ["x", "y", "th"][v % 3];
                format!("{ch}{}", v / 3)
            } else {
                format!("y{v}")
            }
        } else if self.n_u == 3 {
            ["vx", "vy", "om"][v - self.n_y].to_string()
        } else {
            format!("u{}", v - self.n_y)
        }
    }

    pub fn term_name(&self, i: usize) -> String {
        let t = &self.terms[i];
        if t.is_empty() {
            return "1".into();
        }
        t.iter().map(|&v| self.var_name(v)).collect::<Vec<_>>().join("*")
    }

    pub fn output_name(&self, d: usize) -> String {
        format!("d{}", self.var_name(d))
    }
}

/// Evaluate every monomial of `lib` at `(y, u)`.
pub fn build_features<T: Real>(y: &[T], u: &[T], lib: &PolyLibrary) -> Result<Vec<T>, SysidError> {
    if y.len() != lib.n_y {
        return Err(SysidError::DimensionMismatch { expected: lib.n_y, got: y.len() });
    }
    if u.len() != lib.n_u {
        return Err(SysidError::DimensionMismatch { expected: lib.n_u, got: u.len() });
    }
    let var = |v: usize| if v < lib.n_y { y[v] } else { u[v - lib.n_y] };
    Ok(lib.terms.iter().map(|t| t.iter().fold(T::one(), |acc, &v| acc * var(v))).collect())
}

/// Stack feature rows for many samples.
pub fn feature_matrix<T: Real>(ys: &[Vec<T>], us: &[Vec<T>], lib: &PolyLibrary) -> Result<DMatrix<T>, SysidError> {
    if ys.len() != us.len() {
        return Err(SysidError::DimensionMismatch { expected: ys.len(), got: us.len() });
    }
    let mut m = DMatrix::zeros(ys.len(), lib.len());
    for (r, (y, u)) in ys.iter().zip(us).enumerate() {
        for (c, f) in build_features(y, u, lib)?.into_iter().enumerate() {
            m[(r, c)] = f;
        }
    }
    Ok(m)
}

/// A polynomial vector field: `coefficients` is terms x outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel<T: Real = f64> {
    pub library: PolyLibrary,
    pub coefficients: DMatrix<T>,
}

impl<T: Real> PolyModel<T> {
    pub fn zeros(library: PolyLibrary) -> Self {
        let n = library.len();
        let d = library.n_y;
        Self { library, coefficients: DMatrix::zeros(n, d) }
    }

    pub fn n_outputs(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn nonzeros(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != T::zero()).count()
    }

    pub fn predict(&self, y: &[T], u: &[T]) -> Result<Vec<T>, SysidError> {
        let f = build_features(y, u, &self.library)?;
        Ok((0..self.n_outputs())
            .map(|d| f.iter().enumerate().fold(T::zero(), |acc, (i, fi)| acc + *fi * self.coefficients[(i, d)]))
            .collect())
    }

    /// `name = c * term + ...` per output, skipping zero terms.
    pub fn equations(&self) -> String {
        let mut s = String::new();
        for d in 0..self.n_outputs() {
            let _ = write!(s, "{} =", self.library.output_name(d));
            let mut any = false;
            for i in 0..self.library.len() {
                let c = self.coefficients[(i, d)];
                if c != T::zero() {
                    let _ = write!(s, " {:+.4} {}", c.as_f64(), self.library.term_name(i));
                    any = true;
                }
            }
            if !any {
                s.push_str(" 0");
            }
            s.push('\n');
        }
        s
    }
}

/// Result of sequentially thresholded least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel<T: Real = f64> {
    pub model: PolyModel<T>,
    pub lambda: T,
    pub threshold: T,
    /// Per-term feature scale used during fitting (1 when unscaled).
    pub feature_scale: Vec<T>,
    /// Per-output target scale used during fitting (1 when unscaled).
    pub target_scale: Vec<T>,
    /// Output dimensions whose support thresholded away entirely.
    pub rank_deficient: Vec<usize>,
}

impl<T: Real> SparseModel<T> {
    pub fn coefficients(&self) -> &DMatrix<T> {
        &self.model.coefficients
    }

    /// Coefficient in the scaled space the threshold was applied in.
    pub fn scaled_coefficient(&self, term: usize, dim: usize) -> T {
        self.model.coefficients[(term, dim)] * self.feature_scale[term] / self.target_scale[dim]
    }

    /// Whether no nonzero scaled coefficient is below the threshold.
    pub fn satisfies_threshold(&self) -> bool {
        let tol = T::lit(1e-9) * self.threshold.max(T::one());
        (0..self.model.coefficients.nrows()).all(|i| {
            (0..self.model.coefficients.ncols()).all(|d| {
                let c = self.model.coefficients[(i, d)];
                c == T::zero() || self.scaled_coefficient(i, d).abs() >= self.threshold - tol
            })
        })
    }

    pub fn predict(&self, y: &[T], u: &[T]) -> Result<Vec<T>, SysidError> {
        self.model.predict(y, u)
    }

    /// One `dim` line per output and one `coefficient term` line per nonzero.
    pub fn to_text(&self) -> String {
        let lib = &self.model.library;
        let mut s = format!(
            "library n_y={} n_u={} degree={}\nlambda {:e}\nthreshold {:e}\n",
            lib.n_y,
            lib.n_u,
            lib.degree,
            self.lambda.as_f64(),
            self.threshold.as_f64()
        );
        for d in 0..self.model.n_outputs() {
            let _ = writeln!(s, "dim {} scale {:e}", lib.output_name(d), self.target_scale[d].as_f64());
            for i in 0..lib.len() {
                let c = self.model.coefficients[(i, d)];
                if c != T::zero() {
                    let _ = writeln!(s, "  {:e} {} scale {:e}", c.as_f64(), lib.term_name(i), self.feature_scale[i].as_f64());
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SysidError> {
        let perr = |m: &str| SysidError::Parse(m.to_string());
        let num = |s: Option<&str>| -> Result<f64, SysidError> {
            s.ok_or_else(|| perr("missing number"))?.parse::<f64>().map_err(|e| SysidError::Parse(e.to_string()))
        };
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| perr("empty"))?;
        let mut dims = [0usize; 3];
        for (k, part) in head.split_whitespace().skip(1).enumerate().take(3) {
            let v = part.split('=').nth(1).ok_or_else(|| perr("library header"))?;
            dims[k] = v.parse().map_err(|_| perr("library header"))?;
        }
        let lib = PolyLibrary::new(dims[0], dims[1], dims[2]);
        let lambda = num(lines.next().and_then(|l| l.split_whitespace().nth(1)))?;
        let threshold = num(lines.next().and_then(|l| l.split_whitespace().nth(1)))?;
        let names: Vec<String> = (0..lib.len()).map(|i| lib.term_name(i)).collect();
        let outs: Vec<String> = (0..lib.n_y).map(|d| lib.output_name(d)).collect();
        let mut model = PolyModel::<T>::zeros(lib.clone());
        let mut feature_scale = vec![T::one(); lib.len()];
        let mut target_scale = vec![T::one(); lib.n_y];
        let mut dim = None;
        for line in lines {
            let mut it = line.split_whitespace();
            match it.next() {
                None => continue,
                Some("dim") => {
                    let name = it.next().ok_or_else(|| perr("dim name"))?;
                    let d = outs.iter().position(|o| o == name).ok_or_else(|| perr(name))?;
                    it.next();
                    target_scale[d] = T::lit(num(it.next())?);
                    dim = Some(d);
                }
                Some(c) => {
                    let d = dim.ok_or_else(|| perr("coefficient before dim"))?;
                    let c: f64 = c.parse().map_err(|_| perr(c))?;
                    let name = it.next().ok_or_else(|| perr("term name"))?;
                    let i = names.iter().position(|n| n == name).ok_or_else(|| perr(name))?;
                    it.next();
                    feature_scale[i] = T::lit(num(it.next())?);
                    model.coefficients[(i, d)] = T::lit(c);
                }
            }
        }
        let rank_deficient = (0..lib.n_y).filter(|&d| model.coefficients.column(d).iter().all(|c| *c == T::zero())).collect();
        Ok(Self { model, lambda: T::lit(lambda), threshold: T::lit(threshold), feature_scale, target_scale, rank_deficient })
    }
}

const MAX_STLSQ_ITERATIONS: usize = 25;

fn stlsq_column<T: Real>(theta: &DMatrix<T>, target: &DMatrix<T>, lambda: T, threshold: T) -> Result<Vec<T>, SysidError> {
    let n = theta.ncols();
    let mut support: Vec<usize> = (0..n).collect();
    let mut xi = vec![T::zero(); n];
    for _ in 0..MAX_STLSQ_ITERATIONS {
        if support.is_empty() {
            break;
        }
        let sub = theta.select_columns(support.iter());
        let sol = ridge_solve(&sub, target, lambda).ok_or(SysidError::Singular)?;
        xi.iter_mut().for_each(|x| *x = T::zero());
        for (k, &i) in support.iter().enumerate() {
            xi[i] = sol[(k, 0)];
        }
        let kept: Vec<usize> = support.iter().copied().filter(|&i| xi[i].abs() >= threshold).collect();
        if kept.len() == support.len() {
            return Ok(xi);
        }
        support = kept;
    }
    // not converged: enforce the threshold on whatever is left
    for x in xi.iter_mut() {
        if x.abs() < threshold {
            *x = T::zero();
        }
    }
    if support.is_empty() {
        xi.iter_mut().for_each(|x| *x = T::zero());
    }
    Ok(xi)
}

/// Sequentially thresholded ridge regression, one output column at a time.
/// Works directly on the given features and targets; see [`fit`] for the
/// scaled pipeline.
pub fn stlsq<T: Real>(
    theta: &DMatrix<T>,
    targets: &DMatrix<T>,
    library: &PolyLibrary,
    lambda: T,
    threshold: T,
) -> Result<SparseModel<T>, SysidError> {
    if theta.nrows() != targets.nrows() {
        return Err(SysidError::DimensionMismatch { expected: theta.nrows(), got: targets.nrows() });
    }
    if theta.ncols() != library.len() {
        return Err(SysidError::DimensionMismatch { expected: library.len(), got: theta.ncols() });
    }
    if theta.nrows() < theta.ncols() {
        return Err(SysidError::Underdetermined { rows: theta.nrows(), cols: theta.ncols() });
    }
    let d = targets.ncols();
    let mut coefficients = DMatrix::zeros(theta.ncols(), d);
    let mut rank_deficient = Vec::new();
    for j in 0..d {
        let xi = stlsq_column(theta, &targets.columns(j, 1).into_owned(), lambda, threshold)?;
        if xi.iter().all(|x| *x == T::zero()) {
            rank_deficient.push(j);
        }
        for (i, x) in xi.into_iter().enumerate() {
            coefficients[(i, j)] = x;
        }
    }
    Ok(SparseModel {
        model: PolyModel { library: library.clone(), coefficients },
        lambda,
        threshold,
        feature_scale: vec![T::one(); theta.ncols()],
        target_scale: vec![T::one(); d],
        rank_deficient,
    })
}

fn rms_scales<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    let n = T::from_usize_lossy(m.nrows().max(1));
    m.column_iter()
        .map(|c| {
            let s = (c.iter().fold(T::zero(), |a, v| a + *v * *v) / n).sqrt();
            if s > T::zero() && s.is_finite() { s } else { T::one() }
        })
        .collect()
}

/// STLSQ on RMS-scaled features and targets, coefficients mapped back to raw
/// units. Features are scaled but not centered so the constant term keeps its
/// meaning.
pub fn fit<T: Real>(
    theta: &DMatrix<T>,
    targets: &DMatrix<T>,
    library: &PolyLibrary,
    lambda: T,
    threshold: T,
) -> Result<SparseModel<T>, SysidError> {
    let fs = rms_scales(theta);
    let ts = rms_scales(targets);
    let mut ths = theta.clone();
    for (j, mut c) in ths.column_iter_mut().enumerate() {
        c /= fs[j];
    }
    let mut tgs = targets.clone();
    for (j, mut c) in tgs.column_iter_mut().enumerate() {
        c /= ts[j];
    }
    let mut m = stlsq(&ths, &tgs, library, lambda, threshold)?;
    for i in 0..library.len() {
        for d in 0..targets.ncols() {
            m.model.coefficients[(i, d)] = m.model.coefficients[(i, d)] * ts[d] / fs[i];
        }
    }
    m.feature_scale = fs;
    m.target_scale = ts;
    Ok(m)
}

/// Mean squared error of `model` on `(theta, targets)` in target-scaled units.
pub fn validation_error<T: Real>(model: &SparseModel<T>, theta: &DMatrix<T>, targets: &DMatrix<T>) -> T {
    let pred = theta * &model.model.coefficients;
    let mut acc = T::zero();
    for d in 0..targets.ncols() {
        let s = model.target_scale[d];
        for r in 0..targets.nrows() {
            let e = (pred[(r, d)] - targets[(r, d)]) / s;
            acc += e * e;
        }
    }
    acc / T::from_usize_lossy((targets.nrows() * targets.ncols()).max(1))
}

/// Small multiplicative grid around `(lambda, threshold)`; picks the pair
/// with the lowest validation error, earliest grid point on ties.
pub fn fit_grid<T: Real>(
    train: (&DMatrix<T>, &DMatrix<T>),
    validation: (&DMatrix<T>, &DMatrix<T>),
    library: &PolyLibrary,
    lambda: T,
    threshold: T,
) -> Result<(SparseModel<T>, T), SysidError> {
    let factors = [T::one(), T::lit(0.1), T::lit(10.0)];
    let mut best: Option<(SparseModel<T>, T)> = None;
    for fl in factors {
        for ft in [T::one(), T::lit(0.5), T::lit(2.0)] {
            let m = fit(train.0, train.1, library, lambda * fl, threshold * ft)?;
            let e = validation_error(&m, validation.0, validation.1);
            if best.as_ref().is_none_or(|(_, b)| e < *b) {
                best = Some((m, e));
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// `(monomial, sign)` pairs whose combination is the rigid-body predictor of
/// output dimension `d` with `held` as the grasped terminal.
fn rigid_pattern(lib: &PolyLibrary, d: usize, held: usize) -> Vec<(Vec<usize>, i8)> {
    let (t, c) = (d / 3, d % 3);
    let (vx, vy, om) = (lib.n_y, lib.n_y + 1, lib.n_y + 2);
    match c {
        0 if t == held => vec![(vec![vx], 1)],
        0 => vec![(vec![vx], 1), (vec![3 * held + 1, om], 1), (vec![3 * t + 1, om], -1)],
        1 if t == held => vec![(vec![vy], 1)],
        1 => vec![(vec![vy], 1), (vec![3 * t, om], 1), (vec![3 * held, om], -1)],
        _ => vec![(vec![om], 1)],
    }
}

/// Rigid-body predictor for all outputs as a model over `lib`.
pub fn rigid_model<T: Real>(lib: &PolyLibrary, held: usize) -> Result<PolyModel<T>, SysidError> {
    check_rigid_library(lib, held)?;
    let mut m = PolyModel::zeros(lib.clone());
    for d in 0..lib.n_y {
        for (vars, s) in rigid_pattern(lib, d, held) {
            let i = lib.index_of(&vars).expect("checked above");
            m.coefficients[(i, d)] = T::lit(s as f64);
        }
    }
    Ok(m)
}

fn check_rigid_library(lib: &PolyLibrary, held: usize) -> Result<(), SysidError> {
    if lib.n_u != 3 || lib.n_y % 3 != 0 || held >= lib.n_y / 3 {
        return Err(SysidError::MissingRigidTerms("library is not a terminal-pose library".into()));
    }
    for d in 0..lib.n_y {
        for (vars, _) in rigid_pattern(lib, d, held) {
            if lib.index_of(&vars).is_none() {
                let name = vars.iter().map(|&v| lib.var_name(v)).collect::<Vec<_>>().join("*");
                return Err(SysidError::MissingRigidTerms(name));
            }
        }
    }
    Ok(())
}

/// `model = diag(C) f_rb + residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidDecomposition<T: Real = f64> {
    pub c: Vec<T>,
    pub residual: PolyModel<T>,
    pub rigid: PolyModel<T>,
}

impl<T: Real> RigidDecomposition<T> {
    pub fn is_positive_definite(&self) -> bool {
        self.c.iter().all(|c| *c > T::zero())
    }

    /// `C f_rb(y, u) + f_res(y, u)`.
    pub fn reconstruct(&self, y: &[T], u: &[T]) -> Result<Vec<T>, SysidError> {
        let rb = self.rigid.predict(y, u)?;
        let res = self.residual.predict(y, u)?;
        Ok(rb.iter().zip(&res).zip(&self.c).map(|((r, e), c)| *c * *r + *e).collect())
    }
}

/// Least-squares match of each output's rigid monomial pattern.
pub fn decompose_rigid_residual<T: Real>(model: &PolyModel<T>, held: usize) -> Result<RigidDecomposition<T>, SysidError> {
    let lib = &model.library;
    let rigid = rigid_model(lib, held)?;
    let mut residual = model.clone();
    let mut c = Vec::with_capacity(lib.n_y);
    for d in 0..lib.n_y {
        let pat: Vec<(usize, T)> = rigid_pattern(lib, d, held)
            .into_iter()
            .map(|(v, s)| (lib.index_of(&v).expect("checked"), T::lit(s as f64)))
            .collect();
        let num = pat.iter().fold(T::zero(), |a, (i, s)| a + *s * model.coefficients[(*i, d)]);
        let den = pat.iter().fold(T::zero(), |a, (_, s)| a + *s * *s);
        let cd = num / den;
        for (i, s) in &pat {
            let orig = model.coefficients[(*i, d)];
            let r = orig - cd * *s;
            // rounding leftovers of an exact match are not residual terms
            residual.coefficients[(*i, d)] = if r.abs() <= T::lit(8.0) * T::epsilon() * orig.abs() { T::zero() } else { r };
        }
        c.push(cd);
    }
    Ok(RigidDecomposition { c, residual, rigid })
}

/// `1 - SS_res / SS_tot` per column.
pub fn r_squared<T: Real>(predictions: &DMatrix<T>, actuals: &DMatrix<T>) -> Result<Vec<T>, SysidError> {
    if predictions.shape() != actuals.shape() {
        return Err(SysidError::DimensionMismatch { expected: actuals.len(), got: predictions.len() });
    }
    if actuals.nrows() < 2 {
        return Err(SysidError::DimensionMismatch { expected: 2, got: actuals.nrows() });
    }
    let n = T::from_usize_lossy(actuals.nrows());
    (0..actuals.ncols())
        .map(|d| {
            let a = actuals.column(d);
            let mean = a.sum() / n;
            let ss_tot = a.iter().fold(T::zero(), |acc, v| acc + (*v - mean) * (*v - mean));
            if !(ss_tot > T::epsilon() * T::epsilon()) {
                return Err(SysidError::DegenerateVariance { dim: d });
            }
            let ss_res = a.iter().zip(predictions.column(d).iter()).fold(T::zero(), |acc, (v, p)| acc + (*v - *p) * (*v - *p));
            Ok(T::one() - ss_res / ss_tot)
        })
        .collect()
}

/// Mean R² of the translational (x, y) and rotational channels of all
/// terminals except `held`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquaredSummary {
    pub translational: f64,
    pub rotational: f64,
}

pub fn group_r_squared<T: Real>(per_dim: &[T], held: usize) -> RSquaredSummary {
    let (mut tr, mut rot) = (Vec::new(), Vec::new());
    for (d, r) in per_dim.iter().enumerate() {
        if d / 3 == held {
            continue;
        }
        if d % 3 == 2 { rot.push(r.as_f64()) } else { tr.push(r.as_f64()) }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    RSquaredSummary { translational: mean(&tr), rotational: mean(&rot) }
}

/// Every sample of `dataset` as a regression row: stacked poses, input and
/// stacked output rates.
pub fn dataset_rows(dataset: &Dataset) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, DMatrix<f64>) {
    let samples: Vec<_> = dataset.trajectories.iter().flat_map(|t| &t.samples).collect();
    let ys: Vec<Vec<f64>> = samples.iter().map(|s| s.y.to_vec()).collect();
    let us: Vec<Vec<f64>> = samples.iter().map(|s| s.u.to_array().to_vec()).collect();
    let width = ys.first().map_or(0, Vec::len);
    let targets = DMatrix::from_fn(samples.len(), width, |r, d| samples[r].y_dot[d / 3].to_array()[d % 3]);
    (ys, us, targets)
}

/// Per-dimension R² of the rigid-body predictor (terminal `held` grasped)
/// over every sample of `dataset`.
pub fn rigid_r_squared(dataset: &Dataset, held: usize) -> Result<Vec<f64>, SysidError> {
    let (ys, us, targets) = dataset_rows(dataset);
    let n_t = targets.ncols() / 3;
    let model = rigid_model::<f64>(&PolyLibrary::for_terminals(n_t, 2), held)?;
    let mut pred = DMatrix::zeros(targets.nrows(), targets.ncols());
    for (r, (y, u)) in ys.iter().zip(&us).enumerate() {
        for (d, v) in model.predict(y, u)?.into_iter().enumerate() {
            pred[(r, d)] = v;
        }
    }
    // the held terminal moves exactly with the input; its rows may be constant
    let keep: Vec<usize> = (0..targets.ncols()).filter(|d| d / 3 != held).collect();
    let sel = |m: &DMatrix<f64>| m.select_columns(&keep);
    let free = r_squared(&sel(&pred), &sel(&targets))?;
    let mut out = vec![1.0; targets.ncols()];
    for (k, d) in keep.iter().enumerate() {
        out[*d] = free[k];
    }
    Ok(out)
}

/// Zero-order-hold rollout `y + dt f(y, u)`, wrapping every third output.
pub fn simulate_model<T: Real>(model: &PolyModel<T>, y0: &[T], inputs: &[Vec<T>], dt: T) -> Result<Vec<Vec<T>>, SysidError> {
    let wrap = model.library.n_y % 3 == 0;
    let mut out = Vec::with_capacity(inputs.len() + 1);
    let mut y = y0.to_vec();
    out.push(y.clone());
    for u in inputs {
        let f = model.predict(&y, u)?;
        for (d, (yi, fi)) in y.iter_mut().zip(f).enumerate() {
            *yi += dt * fi;
            if wrap && d % 3 == 2 {
                *yi = normalize_angle(*yi);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_examples() {
        let l1 = PolyLibrary::new(1, 1, 1);
        assert_eq!(build_features(&[2.0], &[3.0], &l1).unwrap(), vec![1.0, 2.0, 3.0]);
        let l2 = PolyLibrary::new(1, 1, 2);
        assert_eq!(build_features(&[2.0], &[3.0], &l2).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        let f = build_features(&[0.0; 6], &[0.0; 3], &PolyLibrary::new(6, 3, 2)).unwrap();
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|v| *v == 0.0));
        assert!(matches!(build_features(&[1.0], &[1.0], &PolyLibrary::new(2, 1, 2)), Err(SysidError::DimensionMismatch { .. })));
    }

    #[test]
    fn library_sizes() {
        // C(n + 2, 2) monomials of degree <= 2 in n variables
        assert_eq!(PolyLibrary::for_terminals(2, 2).len(), 55);
        assert_eq!(PolyLibrary::new(9, 3, 2).len(), 91);
        let l = PolyLibrary::new(2, 1, 2);
        assert_eq!(l.term_name(0), "1");
        assert_eq!(l.index_of(&[2, 0]), l.index_of(&[0, 2]));
    }

    fn ramp_data(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let ys = (0..n).map(|k| vec![((k as f64) * 0.37).sin() + 0.1 * k as f64 / n as f64]).collect();
        let us = (0..n).map(|k| vec![((k as f64) * 0.91).cos()]).collect();
        (ys, us)
    }

    #[test]
    fn recovers_linear_growth() {
        let lib = PolyLibrary::new(1, 1, 2);
        let (ys, us) = ramp_data(200);
        let theta = feature_matrix(&ys, &us, &lib).unwrap();
        let targets = DMatrix::from_fn(200, 1, |r, _| 2.0 * ys[r][0]);
        let m = stlsq(&theta, &targets, &lib, 1e-6, 0.1).unwrap();
        assert_eq!(m.model.nonzeros(), 1);
        assert!((m.coefficients()[(1, 0)] - 2.0).abs() < 1e-6);
        assert!(m.satisfies_threshold());
    }

    #[test]
    fn zero_targets_and_dominant_threshold() {
        let lib = PolyLibrary::new(1, 1, 2);
        let (ys, us) = ramp_data(50);
        let theta = feature_matrix(&ys, &us, &lib).unwrap();
        let m = stlsq(&theta, &DMatrix::zeros(50, 1), &lib, 1e-6, 0.1).unwrap();
        assert_eq!(m.model.nonzeros(), 0);
        let targets = DMatrix::from_fn(50, 1, |r, _| 0.05 * ys[r][0]);
        let m = stlsq(&theta, &targets, &lib, 1e-6, 0.1).unwrap();
        assert_eq!(m.model.nonzeros(), 0);
        assert_eq!(m.rank_deficient, vec![0]);
    }

    #[test]
    fn underdetermined_is_rejected() {
        let lib = PolyLibrary::new(1, 1, 2);
        let theta = DMatrix::from_element(3, lib.len(), 1.0);
        assert!(matches!(stlsq(&theta, &DMatrix::zeros(3, 1), &lib, 0.1, 0.1), Err(SysidError::Underdetermined { .. })));
    }

    #[test]
    fn scaled_fit_respects_threshold() {
        let lib = PolyLibrary::new(1, 1, 2);
        let (ys, us) = ramp_data(300);
        let theta = feature_matrix(&ys, &us, &lib).unwrap();
        let targets = DMatrix::from_fn(300, 1, |r, _| 3.0 * ys[r][0] - 0.5 * us[r][0] * us[r][0]);
        let m = fit(&theta, &targets, &lib, 1e-8, 0.05).unwrap();
        assert!(m.satisfies_threshold());
        assert!((m.coefficients()[(1, 0)] - 3.0).abs() < 1e-5);
        assert!((m.coefficients()[(5, 0)] + 0.5).abs() < 1e-5);
        assert_eq!(m.model.nonzeros(), 2);
    }

    fn unit_rigid(held: usize) -> PolyModel {
        rigid_model(&PolyLibrary::for_terminals(2, 2), held).unwrap()
    }

    #[test]
    fn rigid_model_matches_matrix() {
        let m = unit_rigid(0);
        let y = [2.0, 1.0, 0.2, -1.0, 3.0, 0.4];
        let u = [0.5, -0.2, 0.4];
        let f = m.predict(&y, &u).unwrap();
        assert!((f[3] + 0.3).abs() < 1e-12 && (f[4] + 1.4).abs() < 1e-12 && (f[5] - 0.4).abs() < 1e-12);
        assert_eq!(&f[..3], &u);
    }

    #[test]
    fn decomposition_examples() {
        let m = unit_rigid(0);
        let dec = decompose_rigid_residual(&m, 0).unwrap();
        assert!(dec.c.iter().all(|c| (c - 1.0).abs() < 1e-15));
        assert_eq!(dec.residual.nonzeros(), 0);
        assert!(dec.is_positive_definite());

        let lib = m.library.clone();
        let mut scaled = m.clone();
        scaled.coefficients *= 0.8;
        let sq = lib.index_of(&[1, 1]).unwrap();
        scaled.coefficients[(sq, 4)] = 0.1;
        let dec = decompose_rigid_residual(&scaled, 0).unwrap();
        assert!((dec.c[4] - 0.8).abs() < 1e-12);
        assert_eq!(dec.residual.nonzeros(), 1);
        assert_eq!(dec.residual.coefficients[(sq, 4)], 0.1);

        let dec = decompose_rigid_residual(&PolyModel::<f64>::zeros(lib), 0).unwrap();
        assert!(dec.c.iter().all(|c| *c == 0.0));
        assert!(!dec.is_positive_definite());
    }

    #[test]
    fn decomposition_needs_cross_terms() {
        let lib = PolyLibrary::for_terminals(2, 1);
        let err = decompose_rigid_residual(&PolyModel::<f64>::zeros(lib), 0).unwrap_err();
        assert!(matches!(err, SysidError::MissingRigidTerms(_)));
    }

    #[test]
    fn r_squared_examples() {
        let a = DMatrix::<f64>::from_column_slice(4, 1, &[1.0, 2.0, 4.0, 3.0]);
        assert_eq!(r_squared(&a, &a).unwrap(), vec![1.0]);
        let mean = DMatrix::from_element(4, 1, 2.5);
        assert!(r_squared(&mean, &a).unwrap()[0].abs() < 1e-15);
        let flat = DMatrix::from_element(4, 1, 1.0);
        assert_eq!(r_squared(&a, &flat), Err(SysidError::DegenerateVariance { dim: 0 }));
        let s = group_r_squared(&[0.0, 0.0, 0.0, 0.9, 0.7, 0.5], 0);
        assert!((s.translational - 0.8).abs() < 1e-15 && s.rotational == 0.5);
    }

    #[test]
    fn rollout_examples() {
        let lib = PolyLibrary::new(1, 1, 2);
        let zero = PolyModel::<f64>::zeros(lib.clone());
        let us = vec![vec![1.0]; 5];
        let traj = simulate_model(&zero, &[0.3], &us, 0.1).unwrap();
        assert!(traj.iter().all(|y| y[0] == 0.3));
        let mut ramp = zero.clone();
        ramp.coefficients[(2, 0)] = 1.0;
        let traj = simulate_model(&ramp, &[0.0], &us, 0.1).unwrap();
        for (k, y) in traj.iter().enumerate() {
            assert!((y[0] - 0.1 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let lib = PolyLibrary::new(1, 1, 2);
        let (ys, us) = ramp_data(100);
        let theta = feature_matrix(&ys, &us, &lib).unwrap();
        let targets = DMatrix::from_fn(100, 1, |r, _| 2.0 * ys[r][0] + 0.7 * us[r][0]);
        let m = fit(&theta, &targets, &lib, 1e-6, 0.1).unwrap();
        let back = SparseModel::<f64>::from_text(&m.to_text()).unwrap();
        assert_eq!(back.model, m.model);
        assert_eq!(back.target_scale, m.target_scale);
        assert!(back.satisfies_threshold());
        assert!(m.model.equations().starts_with("dy0 ="));
    }
}
