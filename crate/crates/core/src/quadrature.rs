//! Adaptive Gauss-Kronrod (7/15) quadrature for complex valued integrands.
//!
//! Global bisection: the interval with the largest error estimate is split
//! until the summed estimate meets the tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("quadrature did not converge: error estimate {achieved:e} exceeds requested {requested:e} after {intervals} intervals")]
pub struct QuadratureError {
    pub value: Complex64,
    pub achieved: f64,
    pub requested: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub max_intervals: usize,
}

impl Tolerance {
    pub fn relative(rel: f64) -> Tolerance {
        Tolerance { rel, abs: 0.0, max_intervals: 4000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: Complex64,
    pub error: f64,
    pub evaluations: usize,
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
// Gauss weights for the odd Kronrod nodes 1, 3, 5 and the centre.
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One G7/K15 panel: (Kronrod value, |K - G|).
pub fn gk15(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64) -> (Complex64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += s * WGK[j];
        if j % 2 == 1 {
            g += s * WG[j / 2];
        }
    }
    (k * h, ((k - g) * h).norm())
}

struct Panel {
    a: f64,
    b: f64,
    value: Complex64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integrates `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64, tol: Tolerance) -> Result<Estimate, QuadratureError> {
    if a == b {
        return Ok(Estimate { value: Complex64::new(0.0, 0.0), error: 0.0, evaluations: 0 });
    }
    let (value, error) = gk15(f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total = value;
    let mut total_err = error;
    let mut evaluations = 15;
    loop {
        let requested = tol.abs.max(tol.rel * total.norm());
        if total_err <= requested {
            return Ok(Estimate { value: total, error: total_err, evaluations });
        }
        if heap.len() >= tol.max_intervals {
            return Err(QuadratureError { value: total, achieved: total_err, requested, intervals: heap.len() });
        }
        let p = heap.pop().expect("heap is never empty");
        let m = 0.5 * (p.a + p.b);
        if m <= p.a || m >= p.b {
            // interval cannot be split further in floating point
            return Err(QuadratureError { value: total, achieved: total_err, requested, intervals: heap.len() + 1 });
        }
        let (v1, e1) = gk15(f, p.a, m);
        let (v2, e2) = gk15(f, m, p.b);
        evaluations += 30;
        total += v1 + v2 - p.value;
        total_err += e1 + e2 - p.error;
        heap.push(Panel { a: p.a, b: m, value: v1, error: e1 });
        heap.push(Panel { a: m, b: p.b, value: v2, error: e2 });
        if heap.len() % 64 == 0 {
            // resum to stop drift from the running updates
            total = heap.iter().map(|p| p.value).sum();
            total_err = heap.iter().map(|p| p.error).sum();
        }
    }
}

/// Real-valued convenience wrapper.
pub fn integrate_real(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: Tolerance) -> Result<f64, QuadratureError> {
    integrate(&|x| Complex64::new(f(x), 0.0), a, b, tol).map(|e| e.value.re)
}
