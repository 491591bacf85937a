//! Levenberg-Marquardt iteration with a scheduled regularization parameter
//! `lambda(i) = 1 / (1 + exp(beta (i + i0)))` and forward-difference Jacobians.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{FemError, ForwardModel};
use crate::source::{Domain, ParamKind, ParamLayout, SourceError, SourceField};
use crate::Point;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid LM configuration: {0}")]
    Config(String),
    #[error("finite difference step for parameter {index} ({name}) is infeasible in both directions")]
    Jacobian { index: usize, name: String },
    #[error("forward solve failed: {0}")]
    Forward(String),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("{0}")]
    Domain(String),
}

impl LmError {
    pub fn is_validation(&self) -> bool {
        matches!(self, LmError::Config(_) | LmError::Source(_) | LmError::Domain(_))
    }
}

impl From<FemError> for LmError {
    fn from(e: FemError) -> Self {
        LmError::Forward(e.to_string())
    }
}

/// `1 / (1 + exp(beta (i + i0)))`.
pub fn lambda_schedule(i: usize, beta: f64, i0: i64) -> f64 {
    1.0 / (1.0 + (beta * (i as f64 + i0 as f64)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub beta: f64,
    pub i0: i64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
    /// Absolute step for geometric parameters.
    #[serde(default = "default_fd")]
    pub geometric_step: f64,
    /// Relative step `h max(1, |phi|)` for intensities.
    #[serde(default = "default_fd")]
    pub intensity_step: f64,
    /// Overrides the per-parameter steps when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_steps: Option<Vec<f64>>,
    #[serde(default = "default_halvings")]
    pub max_halvings: u32,
    /// Indices of parameters held fixed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen: Vec<usize>,
}

fn default_max_iter() -> usize {
    20
}
fn default_stop_tol() -> f64 {
    1e-2
}
fn default_fd() -> f64 {
    1e-3
}
fn default_halvings() -> u32 {
    10
}

impl LmConfig {
    pub fn new(beta: f64, i0: i64) -> LmConfig {
        LmConfig {
            beta,
            i0,
            max_iter: default_max_iter(),
            stop_tol: default_stop_tol(),
            geometric_step: default_fd(),
            intensity_step: default_fd(),
            fd_steps: None,
            max_halvings: default_halvings(),
            frozen: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta = {} must be positive", self.beta));
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.stop_tol > 0.0) {
            return bad(format!("stop_tol = {} must be positive", self.stop_tol));
        }
        if !(self.geometric_step > 0.0 && self.intensity_step > 0.0) {
            return bad("finite difference steps must be positive".into());
        }
        if let Some(s) = &self.fd_steps {
            if s.iter().any(|h| !(*h > 0.0)) {
                return bad("finite difference steps must be positive".into());
            }
        }
        Ok(())
    }
}

/// Parametrized forward map `theta -> F(q(theta))`.
pub trait ForwardMap: Sync {
    fn num_params(&self) -> usize;
    fn eval(&self, theta: &[f64]) -> Result<Vec<f64>, LmError>;
    fn is_feasible(&self, theta: &[f64]) -> bool;
    fn param_kind(&self, j: usize) -> ParamKind;
    fn param_name(&self, j: usize) -> String {
        format!("theta{j}")
    }
}

/// Forward-difference step for parameter `j` at `theta`.
pub fn fd_step<M: ForwardMap + ?Sized>(map: &M, cfg: &LmConfig, theta: &[f64], j: usize) -> f64 {
    if let Some(s) = &cfg.fd_steps {
        return s[j];
    }
    match map.param_kind(j) {
        ParamKind::Geometric => cfg.geometric_step,
        ParamKind::Intensity => cfg.intensity_step * theta[j].abs().max(1.0),
    }
}

/// Columns `(F(theta + h_j e_j) - F(theta)) / h_j` for the free parameters;
/// a step leaving the feasible set is taken in the opposite direction.
pub fn fd_jacobian<M: ForwardMap + ?Sized>(
    map: &M,
    cfg: &LmConfig,
    theta: &[f64],
    base: &[f64],
    free: &[usize],
) -> Result<DMatrix<f64>, LmError> {
    let cols: Vec<Result<Vec<f64>, LmError>> = free
        .par_iter()
        .map(|&j| {
            let h = fd_step(map, cfg, theta, j);
            let mut t = theta.to_vec();
            t[j] = theta[j] + h;
            let h = if map.is_feasible(&t) {
                h
            } else {
                t[j] = theta[j] - h;
                if !map.is_feasible(&t) {
                    return Err(LmError::Jacobian { index: j, name: map.param_name(j) });
                }
                -h
            };
            let f = map.eval(&t)?;
            Ok(f.iter().zip(base).map(|(a, b)| (a - b) / h).collect())
        })
        .collect();
    let m = base.len();
    let mut g = DMatrix::zeros(m, free.len());
    for (k, c) in cols.into_iter().enumerate() {
        g.set_column(k, &DVector::from_vec(c?));
    }
    Ok(g)
}

/// Solves `(G^T G + lambda I) d = G^T r` by Cholesky with one step of
/// iterative refinement.
pub fn lm_step(g: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> DVector<f64> {
    assert!(lambda > 0.0, "lambda must be positive");
    let p = g.ncols();
    let a = g.transpose() * g + DMatrix::identity(p, p) * lambda;
    let b = g.transpose() * r;
    let chol = a.clone().cholesky().expect("G^T G + lambda I is positive definite");
    let mut d = chol.solve(&b);
    let res = &b - &a * &d;
    d += chol.solve(&res);
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub theta: Vec<f64>,
    /// `lambda(iter)`, the value used for the step leaving this iterate.
    pub lambda: f64,
    pub residual_norm: f64,
    /// `|theta^i - theta^{i-1}|_2`; absent for the initial guess.
    pub step_norm: Option<f64>,
    pub rel_error: Option<f64>,
    /// Step halvings needed to keep `theta^i` feasible.
    pub halvings: u32,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    /// `E_i <= stop_tol`.
    Converged { iteration: usize },
    MaxIterations { iteration: usize },
    /// No feasible step after the allowed halvings.
    InfeasibleStep { iteration: usize },
    Failure { iteration: usize, message: String },
}

impl Termination {
    pub fn iteration(&self) -> usize {
        match self {
            Termination::Converged { iteration }
            | Termination::MaxIterations { iteration }
            | Termination::InfeasibleStep { iteration }
            | Termination::Failure { iteration, .. } => *iteration,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Termination::Failure { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrace {
    pub param_names: Vec<String>,
    pub records: Vec<IterRecord>,
    pub termination: Termination,
}

impl LmTrace {
    pub fn final_theta(&self) -> &[f64] {
        &self.records.last().expect("trace has the initial iterate").theta
    }

    pub fn final_record(&self) -> &IterRecord {
        self.records.last().expect("trace has the initial iterate")
    }

    /// Number of LM steps taken.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    /// `iter,lambda,residual_norm,E_i,e_r,<theta...>`; absent values are empty.
    /// Timing is left out so that repeated runs produce identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lambda,residual_norm,E_i,e_r");
        for n in &self.param_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.records {
            let _ = write!(s, "{},{:e},{:e},{},{}", r.iter, r.lambda, r.residual_norm, opt(r.step_norm), opt(r.rel_error));
            for t in &r.theta {
                let _ = write!(s, ",{t:e}");
            }
            s.push('\n');
        }
        s
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the iteration from `theta0` against `data`. `rel_error`, when given,
/// is evaluated at every iterate. Forward failures end the run with a
/// [`Termination::Failure`] marker rather than an error.
pub fn run<M: ForwardMap + ?Sized>(
    map: &M,
    theta0: &[f64],
    data: &[f64],
    cfg: &LmConfig,
    rel_error: Option<&(dyn Fn(&[f64]) -> Option<f64> + Sync)>,
) -> Result<LmTrace, LmError> {
    cfg.validate()?;
    let p = map.num_params();
    if theta0.len() != p {
        return Err(LmError::Config(format!("initial guess has {} parameters, expected {p}", theta0.len())));
    }
    if let Some(s) = &cfg.fd_steps {
        if s.len() != p {
            return Err(LmError::Config(format!("{} finite difference steps for {p} parameters", s.len())));
        }
    }
    if let Some(&j) = cfg.frozen.iter().find(|&&j| j >= p) {
        return Err(LmError::Config(format!("frozen index {j} out of range")));
    }
    if !map.is_feasible(theta0) {
        return Err(LmError::Domain("initial guess is not a valid source".into()));
    }
    let free: Vec<usize> = (0..p).filter(|j| !cfg.frozen.contains(j)).collect();
    let start = Instant::now();
    let param_names = (0..p).map(|j| map.param_name(j)).collect();
    let mut records = Vec::new();
    let mut theta = theta0.to_vec();
    let mut step_norm = None;
    let mut halvings = 0;
    let mut i = 0;
    let termination = loop {
        let f = match map.eval(&theta) {
            Ok(f) => f,
            Err(e) => break Termination::Failure { iteration: i, message: e.to_string() },
        };
        if f.len() != data.len() {
            return Err(LmError::Config(format!("forward map returns {} values for {} data", f.len(), data.len())));
        }
        let r: Vec<f64> = data.iter().zip(&f).map(|(d, f)| d - f).collect();
        let lambda = lambda_schedule(i, cfg.beta, cfg.i0);
        records.push(IterRecord {
            iter: i,
            theta: theta.clone(),
            lambda,
            residual_norm: norm(&r),
            step_norm,
            rel_error: rel_error.and_then(|e| e(&theta)),
            halvings,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if let Some(e) = step_norm {
            if e <= cfg.stop_tol {
                break Termination::Converged { iteration: i };
            }
        }
        if i >= cfg.max_iter {
            break Termination::MaxIterations { iteration: i };
        }
        let g = match fd_jacobian(map, cfg, &theta, &f, &free) {
            Ok(g) => g,
            Err(e) => break Termination::Failure { iteration: i, message: e.to_string() },
        };
        let d = lm_step(&g, &DVector::from_vec(r), lambda);
        let mut full = vec![0.0; p];
        for (k, &j) in free.iter().enumerate() {
            full[j] = d[k];
        }
        let mut scale = 1.0;
        halvings = 0;
        let next = loop {
            let t: Vec<f64> = theta.iter().zip(&full).map(|(a, b)| a + scale * b).collect();
            if map.is_feasible(&t) {
                break Some(t);
            }
            if halvings >= cfg.max_halvings {
                break None;
            }
            halvings += 1;
            scale *= 0.5;
        };
        let Some(next) = next else {
            break Termination::InfeasibleStep { iteration: i };
        };
        step_norm = Some(norm(&next.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>()));
        theta = next;
        i += 1;
    };
    Ok(LmTrace { param_names, records, termination })
}

/// Forward map over packed source parameters.
pub struct SourceForward<'a> {
    pub model: &'a ForwardModel,
    pub layout: ParamLayout,
    names: Vec<String>,
}

impl<'a> SourceForward<'a> {
    pub fn new(model: &'a ForwardModel, layout: ParamLayout) -> SourceForward<'a> {
        let names = layout.names();
        SourceForward { model, layout, names }
    }
}

impl ForwardMap for SourceForward<'_> {
    fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn eval(&self, theta: &[f64]) -> Result<Vec<f64>, LmError> {
        let q = self.layout.unpack(theta)?;
        Ok(self.model.measure(&q)?.values)
    }

    fn is_feasible(&self, theta: &[f64]) -> bool {
        self.layout.unpack(theta).is_ok()
    }

    fn param_kind(&self, j: usize) -> ParamKind {
        self.layout.kinds()[j]
    }

    fn param_name(&self, j: usize) -> String {
        self.names[j].clone()
    }
}

/// `|q_tilde - q_dagger|_L2 / |q_dagger|_L2` by the midpoint rule on a regular
/// grid of the given spacing over the domain.
pub fn relative_error(q_tilde: &SourceField, q_dagger: &SourceField, domain: &Domain, spacing: f64) -> Result<f64, LmError> {
    if !(spacing > 0.0) {
        return Err(LmError::Domain(format!("grid spacing {spacing} must be positive")));
    }
    let n = (2.0 * domain.radius / spacing).ceil() as i64;
    let step = 2.0 * domain.radius / n as f64;
    let c = |i: i64| -domain.radius + (i as f64 + 0.5) * step;
    let nz = if domain.dim == 2 { 1 } else { n };
    let (num, den) = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..n {
                for k in 0..nz {
                    let p = Point::new(c(i), c(j), if domain.dim == 2 { 0.0 } else { c(k) });
                    if p.norm() > domain.radius {
                        continue;
                    }
                    let a = q_tilde.eval(&p);
                    let b = q_dagger.eval(&p);
                    num += (a - b) * (a - b);
                    den += b * b;
                }
            }
            (num, den)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if den == 0.0 {
        return Err(LmError::Domain("reference source is identically zero".into()));
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::Shape;
    use rand::{Rng, SeedableRng};

    #[test]
    fn schedule_values() {
        assert_eq!(lambda_schedule(0, 0.7, 0), 0.5);
        assert!((lambda_schedule(2, 0.5, 0) - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);
        assert!((lambda_schedule(2, 0.5, 0) - 0.268941).abs() < 1e-6);
        let v = lambda_schedule(10, 0.8, 8);
        assert!((v - 1.0 / (1.0 + 14.4f64.exp())).abs() < 1e-20);
        assert!((v - 5.5e-7).abs() < 0.1e-7);
    }

    proptest::proptest! {
        #[test]
        fn schedule_strictly_decreasing(beta in 0.05f64..2.0, i0 in -5i64..10, i in 0usize..30) {
            let a = lambda_schedule(i, beta, i0);
            let b = lambda_schedule(i + 1, beta, i0);
            proptest::prop_assert!(b < a);
            proptest::prop_assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn step_examples() {
        let g = DMatrix::from_row_slice(1, 1, &[2.0]);
        let d = lm_step(&g, &DVector::from_vec(vec![4.0]), 0.5);
        assert!((d[0] - 8.0 / 4.5).abs() < 1e-15);
        let id = DMatrix::<f64>::identity(3, 3);
        let f = DVector::from_vec(vec![1.0, -2.0, 4.0]);
        assert_eq!(lm_step(&id, &f, 1.0), &f / 2.0);
        assert_eq!(lm_step(&id, &DVector::zeros(3), 1.0), DVector::zeros(3));
    }

    #[test]
    fn step_normal_equation_residual() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = DMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
            let r = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
            let lambda = rng.random_range(1e-6..1.0);
            let d = lm_step(&g, &r, lambda);
            let gtr = g.transpose() * &r;
            let res = (g.transpose() * &g * &d + &d * lambda - &gtr).norm();
            assert!(res <= 1e-12 * gtr.norm(), "{}", res / gtr.norm());
        }
    }

    #[test]
    fn small_lambda_matches_pseudoinverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let g = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let d = lm_step(&g, &r, 1e-12);
        let pinv = g.clone().pseudo_inverse(1e-14).unwrap() * &r;
        assert!((d - pinv).norm() < 1e-9);
    }

    /// Linear model `F(theta) = A theta` with a positivity constraint on theta_0.
    struct Linear {
        a: DMatrix<f64>,
    }

    impl ForwardMap for Linear {
        fn num_params(&self) -> usize {
            self.a.ncols()
        }
        fn eval(&self, theta: &[f64]) -> Result<Vec<f64>, LmError> {
            Ok((&self.a * DVector::from_column_slice(theta)).as_slice().to_vec())
        }
        fn is_feasible(&self, theta: &[f64]) -> bool {
            theta[0] > 0.0
        }
        fn param_kind(&self, _: usize) -> ParamKind {
            ParamKind::Intensity
        }
    }

    #[test]
    fn linear_model_matches_dense_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(30, 3, |_, _| rng.random_range(0.0..1.0));
        let map = Linear { a: a.clone() };
        let truth = [1.0, 2.0, -0.5];
        let data: Vec<f64> = map.eval(&truth).unwrap().iter().map(|v| v * (1.0 + 0.01 * rng.random_range(-1.0..1.0))).collect();
        let cfg = LmConfig::new(0.7, 0);
        let trace = run(&map, &[0.5, 0.5, 0.5], &data, &cfg, None).unwrap();
        // oracle: the same recursion done with dense algebra
        let mut theta = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let y = DVector::from_vec(data.clone());
        for rec in &trace.records[1..] {
            let lambda = lambda_schedule(rec.iter - 1, 0.7, 0);
            let r = &y - &a * &theta;
            let m = a.transpose() * &a + DMatrix::identity(3, 3) * lambda;
            theta += m.lu().solve(&(a.transpose() * r)).unwrap();
            for j in 0..3 {
                assert!((theta[j] - rec.theta[j]).abs() < 1e-6);
            }
        }
        assert!(matches!(trace.termination, Termination::Converged { .. }));
        assert!(trace.final_record().residual_norm <= trace.records[0].residual_norm);
    }

    #[test]
    fn exact_start_stops_after_one_step() {
        let a = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j + 1) as f64);
        let map = Linear { a };
        let data = map.eval(&[1.0, 1.0]).unwrap();
        let trace = run(&map, &[1.0, 1.0], &data, &LmConfig::new(0.7, 0), None).unwrap();
        assert_eq!(trace.termination, Termination::Converged { iteration: 1 });
        assert!(trace.records[1].step_norm.unwrap() <= 1e-2);
    }

    #[test]
    fn infeasible_steps_are_halved_or_reported() {
        // the data pull theta_0 below zero; halving keeps it positive until it cannot
        let map = Linear { a: DMatrix::identity(1, 1) };
        let mut cfg = LmConfig::new(5.0, 0);
        cfg.max_halvings = 3;
        let trace = run(&map, &[1.0], &[-1000.0], &cfg, None).unwrap();
        assert!(trace.records.iter().all(|r| r.theta[0] > 0.0));
        assert!(trace.records.iter().skip(1).all(|r| r.halvings > 0));
        assert!(matches!(trace.termination, Termination::InfeasibleStep { .. }));
    }

    #[test]
    fn frozen_parameters_stay_fixed() {
        let a = DMatrix::from_fn(6, 2, |i, j| ((i + 1) * (j + 2)) as f64 + (i * i) as f64);
        let map = Linear { a };
        let data = map.eval(&[2.0, 3.0]).unwrap();
        let mut cfg = LmConfig::new(0.7, 0);
        cfg.frozen = vec![1];
        let trace = run(&map, &[1.0, 3.0], &data, &cfg, None).unwrap();
        assert!(trace.records.iter().all(|r| r.theta[1] == 3.0));
        assert!((trace.final_theta()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn jacobian_flips_infeasible_steps() {
        let map = Linear { a: DMatrix::from_row_slice(2, 1, &[1.0, 3.0]) };
        let mut cfg = LmConfig::new(1.0, 0);
        cfg.fd_steps = Some(vec![0.5]);
        // theta_0 + h is feasible; a negative-going probe would not be needed
        let g = fd_jacobian(&map, &cfg, &[0.1], &[0.1, 0.3], &[0]).unwrap();
        assert!((g[(1, 0)] - 3.0).abs() < 1e-12);
        // a model feasible only below a bound forces the backward step
        struct Upper;
        impl ForwardMap for Upper {
            fn num_params(&self) -> usize {
                1
            }
            fn eval(&self, t: &[f64]) -> Result<Vec<f64>, LmError> {
                Ok(vec![t[0] * t[0]])
            }
            fn is_feasible(&self, t: &[f64]) -> bool {
                t[0] < 1.0 && t[0] > 0.0
            }
            fn param_kind(&self, _: usize) -> ParamKind {
                ParamKind::Geometric
            }
        }
        let cfg = LmConfig::new(1.0, 0);
        let g = fd_jacobian(&Upper, &cfg, &[0.9995], &[0.9995f64.powi(2)], &[0]).unwrap();
        assert!((g[(0, 0)] - 2.0 * 0.9995).abs() < 2e-3);
        let cfg = LmConfig { fd_steps: Some(vec![5.0]), ..LmConfig::new(1.0, 0) };
        assert!(matches!(fd_jacobian(&Upper, &cfg, &[0.5], &[0.25], &[0]), Err(LmError::Jacobian { index: 0, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::new(0.0, 0).validate().is_err());
        let mut c = LmConfig::new(0.5, 0);
        c.max_iter = 0;
        assert!(c.validate().is_err());
        let c: LmConfig = serde_json::from_str(r#"{"beta":0.7,"i0":0}"#).unwrap();
        assert_eq!(c, LmConfig::new(0.7, 0));
        assert!(serde_json::from_str::<LmConfig>(r#"{"beta":0.7,"i0":0,"gamma":1}"#).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let trace = LmTrace {
            param_names: vec!["c_x[0]".into(), "phi[0]".into()],
            records: vec![IterRecord {
                iter: 0,
                theta: vec![0.3, 0.8],
                lambda: 0.5,
                residual_norm: 1.0,
                step_norm: None,
                rel_error: Some(0.25),
                halvings: 0,
                wall_time_s: 1.0,
            }],
            termination: Termination::MaxIterations { iteration: 0 },
        };
        assert_eq!(trace.to_csv(), "iter,lambda,residual_norm,E_i,e_r,c_x[0],phi[0]\n0,5e-1,1e0,,2.5e-1,3e-1,8e-1\n");
    }

    #[test]
    fn relative_error_examples() {
        let dom = Domain { dim: 2, radius: 3.0 };
        let q = SourceField::single(2, Shape::Disk { center: Point::zeros(), radius: 1.0 }, 1.0);
        let zero = SourceField::single(2, Shape::Disk { center: Point::zeros(), radius: 1.0 }, 0.0);
        let double = SourceField::single(2, Shape::Disk { center: Point::zeros(), radius: 1.0 }, 2.0);
        assert_eq!(relative_error(&q, &q, &dom, 0.025).unwrap(), 0.0);
        assert!((relative_error(&zero, &q, &dom, 0.025).unwrap() - 1.0).abs() < 1e-12);
        assert!((relative_error(&double, &q, &dom, 0.025).unwrap() - 1.0).abs() < 1e-12);
        assert!(relative_error(&q, &zero, &dom, 0.025).is_err());
        // disjoint disks of equal area: sqrt(2)
        let moved = SourceField::single(2, Shape::Disk { center: Point::new(1.5, 0.0, 0.0), radius: 0.5 }, 1.0);
        let small = SourceField::single(2, Shape::Disk { center: Point::new(-1.5, 0.0, 0.0), radius: 0.5 }, 1.0);
        assert!((relative_error(&moved, &small, &dom, 0.01).unwrap() - 2f64.sqrt()).abs() < 1e-2);
    }
}
