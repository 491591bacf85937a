//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use blt_core::mesh::Mesh;
use blt_core::Point;

pub mod bessel {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn series(x: f64, f: impl Fn(usize, f64) -> f64) -> f64 {
        let y = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 0..200 {
            if k > 0 {
                term *= y / (k * k) as f64;
            }
            let t = f(k, term);
            sum += t;
            if k > 5 && t.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    }

    /// Digamma at positive integers: psi(n) = -gamma + sum_{k<n} 1/k.
    fn psi(n: usize) -> f64 {
        -EULER_GAMMA + (1..n).map(|k| 1.0 / k as f64).sum::<f64>()
    }

    pub fn i0(x: f64) -> f64 {
        series(x, |_, t| t)
    }

    pub fn i1(x: f64) -> f64 {
        0.5 * x * series(x, |k, t| t / (k + 1) as f64)
    }

    pub fn k0(x: f64) -> f64 {
        // K0 = -(ln(x/2) + gamma) I0 + sum_k (x^2/4)^k / (k!)^2 H_k
        let h = |k: usize| (1..=k).map(|j| 1.0 / j as f64).sum::<f64>();
        -((0.5 * x).ln() + EULER_GAMMA) * i0(x) + series(x, |k, t| t * h(k))
    }

    pub fn k1(x: f64) -> f64 {
        // K1 = 1/x + ln(x/2) I1 - (x/4) sum_k (psi(k+1) + psi(k+2)) (x^2/4)^k / (k! (k+1)!)
        1.0 / x + (0.5 * x).ln() * i1(x) - 0.25 * x * series(x, |k, t| t * (psi(k + 1) + psi(k + 2)) / (k + 1) as f64)
    }
}

/// Radial solution of `-D Δu + mu u = chi(r < a)` in the disk of radius `big_r`
/// with `u + 2 D u' = 0` at `r = big_r`.
pub struct RadialOracle {
    kappa: f64,
    mu: f64,
    a: f64,
    coef_in: f64,
    coef_i: f64,
    coef_k: f64,
}

impl RadialOracle {
    pub fn new(d: f64, mu: f64, a: f64, big_r: f64) -> RadialOracle {
        use bessel::*;
        let kappa = (mu / d).sqrt();
        // unknowns (A, B, C): u_in = 1/mu + A I0, u_out = B I0 + C K0
        let (ka, kr) = (kappa * a, kappa * big_r);
        let m = nalgebra::Matrix3::new(
            i0(ka), -i0(ka), -k0(ka),
            i1(ka), -i1(ka), k1(ka),
            0.0, i0(kr) + 2.0 * d * kappa * i1(kr), k0(kr) - 2.0 * d * kappa * k1(kr),
        );
        let rhs = nalgebra::Vector3::new(-1.0 / mu, 0.0, 0.0);
        let s = m.lu().solve(&rhs).expect("regular interface system");
        RadialOracle { kappa, mu, a, coef_in: s[0], coef_i: s[1], coef_k: s[2] }
    }

    pub fn u(&self, r: f64) -> f64 {
        use bessel::*;
        let x = self.kappa * r;
        if r <= self.a {
            1.0 / self.mu + self.coef_in * i0(x)
        } else {
            self.coef_i * i0(x) + self.coef_k * k0(x)
        }
    }

    pub fn du(&self, r: f64) -> f64 {
        use bessel::*;
        let x = self.kappa * r;
        if r <= self.a {
            self.coef_in * self.kappa * i1(x)
        } else {
            self.kappa * (self.coef_i * i1(x) - self.coef_k * k1(x))
        }
    }
}

/// `(|u_h - u|_{L2}, |u|_{L2})` for a P1 field on a 2D mesh against a radial profile.
pub fn l2_error(mesh: &Mesh, u: &[f64], o: &RadialOracle) -> (f64, f64) {
    // 6-point symmetric rule, degree 4
    let (a, b) = (0.445_948_490_915_965, 0.091_576_213_509_771);
    let (wa, wb) = (0.223_381_589_678_011, 0.109_951_743_655_322);
    let pts = [
        ([a, a, 1.0 - 2.0 * a], wa), ([a, 1.0 - 2.0 * a, a], wa), ([1.0 - 2.0 * a, a, a], wa),
        ([b, b, 1.0 - 2.0 * b], wb), ([b, 1.0 - 2.0 * b, b], wb), ([1.0 - 2.0 * b, b, b], wb),
    ];
    let (mut err, mut norm) = (0.0, 0.0);
    for e in 0..mesh.num_elements() {
        let v = mesh.element(e);
        let vol = mesh.volume(e);
        for (l, w) in pts {
            let mut p = Point::zeros();
            let mut uh = 0.0;
            for k in 0..3 {
                p += l[k] * mesh.nodes()[v[k]];
                uh += l[k] * u[v[k]];
            }
            let ex = o.u(p.norm());
            err += w * vol * (uh - ex).powi(2);
            norm += w * vol * ex * ex;
        }
    }
    (err.sqrt(), norm.sqrt())
}
