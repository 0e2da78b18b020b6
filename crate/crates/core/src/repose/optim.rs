//! Derivative-free minimizers: Nelder-Mead, Powell and a COBYLA-style linear
//! trust-region method.
//!
//! Every method tracks the best evaluated point, so the returned value never
//! exceeds `f(x0)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub max_evals: usize,
    /// Outer iterations: simplex steps, Powell sweeps or trust-region steps.
    pub max_iters: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    /// Initial simplex edge, line-search bracket and trust radius.
    pub initial_step: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_evals: 2000,
            max_iters: 1_000_000,
            x_tol: 1e-8,
            f_tol: 1e-12,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

/// Counts evaluations and remembers the best point seen.
struct Tracked<F> {
    f: F,
    evals: usize,
    cap: usize,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<F: FnMut(&[f64]) -> f64> Tracked<F> {
    fn new(f: F, x0: &[f64], cap: usize) -> Self {
        let mut t = Tracked {
            f,
            evals: 0,
            cap: cap.max(1),
            best_x: x0.to_vec(),
            best_f: f64::INFINITY,
        };
        let f0 = t.eval(x0);
        t.best_f = f0;
        t.best_x = x0.to_vec();
        t
    }

    /// Evaluations past the budget are refused and read as +∞.
    fn eval(&mut self, x: &[f64]) -> f64 {
        if self.evals >= self.cap {
            return f64::INFINITY;
        }
        self.evals += 1;
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best_f {
            self.best_f = v;
            self.best_x = x.to_vec();
        }
        v
    }

    fn result(self) -> OptimResult {
        OptimResult {
            x: self.best_x,
            f: self.best_f,
            evals: self.evals,
        }
    }
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Simplex search with dimension-adaptive coefficients.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], cfg: &OptimConfig) -> OptimResult {
    let n = x0.len();
    let mut tr = Tracked::new(f, x0, cfg.max_evals);
    if n == 0 {
        return tr.result();
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), tr.best_f)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += cfg.initial_step;
        let fx = tr.eval(&x);
        simplex.push((x, fx));
    }
    let mut iter = 0;
    while tr.evals < cfg.max_evals && iter < cfg.max_iters {
        iter += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fb, fw) = (simplex[0].1, simplex[n].1);
        let size = simplex[1..].iter().map(|(x, _)| dist(x, &simplex[0].0)).fold(0.0, f64::max);
        if size <= cfg.x_tol && (fw - fb).abs() <= cfg.f_tol.max(f64::EPSILON * fb.abs()) {
            break;
        }
        if size <= cfg.x_tol * 1e-3 {
            break;
        }
        let mut c = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for k in 0..n {
                c[k] += x[k] / nf;
            }
        }
        let dir: Vec<f64> = c.iter().zip(&simplex[n].0).map(|(a, b)| a - b).collect();
        let xr = axpy(&c, alpha, &dir);
        let fr = tr.eval(&xr);
        if fr < fb {
            let xe = axpy(&c, alpha * beta, &dir);
            let fe = tr.eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < fw {
            let x = axpy(&c, alpha * gamma, &dir);
            let v = tr.eval(&x);
            (x, v)
        } else {
            let x = axpy(&c, -gamma, &dir);
            let v = tr.eval(&x);
            (x, v)
        };
        if fc < fr.min(fw) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best.iter().zip(&v.0).map(|(b, x)| b + delta * (x - b)).collect();
            let fx = tr.eval(&x);
            *v = (x, fx);
            if tr.evals >= cfg.max_evals {
                break;
            }
        }
    }
    tr.result()
}

const GOLDEN: f64 = 1.618_033_988_749_895;

/// Minimizes `f(x + t·d)` over `t`; returns the accepted `(t, value)`, `t = 0` when nothing improves.
fn line_minimize<F: FnMut(&[f64]) -> f64>(
    tr: &mut Tracked<F>,
    x: &[f64],
    fx: f64,
    d: &[f64],
    step: f64,
    tol: f64,
    max_evals: usize,
) -> (f64, f64) {
    let phi = |tr: &mut Tracked<F>, t: f64| tr.eval(&axpy(x, t, d));
    let f_plus = phi(tr, step);
    let (mut a, mut b, mut fb) = if f_plus < fx {
        (0.0, step, f_plus)
    } else {
        let f_minus = phi(tr, -step);
        if f_minus < fx {
            (0.0, -step, f_minus)
        } else {
            return golden(tr, x, d, (-step, step), (0.0, fx), tol, max_evals);
        }
    };
    let mut c = b + GOLDEN * (b - a);
    let mut fc = phi(tr, c);
    while fc < fb && tr.evals < max_evals {
        a = b;
        b = c;
        fb = fc;
        c = b + GOLDEN * (b - a);
        fc = phi(tr, c);
    }
    let (lo, hi) = if a < c { (a, c) } else { (c, a) };
    golden(tr, x, d, (lo, hi), (b, fb), tol, max_evals)
}

/// Brent's line minimizer on a bracket `lo < mid < hi` with `f(mid)` below both ends:
/// parabolic steps through the best three points, golden-section steps when those misbehave.
fn golden<F: FnMut(&[f64]) -> f64>(
    tr: &mut Tracked<F>,
    x: &[f64],
    d: &[f64],
    (mut lo, mut hi): (f64, f64),
    (mid, fmid): (f64, f64),
    tol: f64,
    max_evals: usize,
) -> (f64, f64) {
    let r = 2.0 - GOLDEN;
    let (mut b, mut fb) = (mid, fmid);
    let (mut w, mut fw) = (b, fb);
    let (mut v, mut fv) = (b, fb);
    let (mut step, mut prev_step) = (0.0f64, 0.0f64);
    while tr.evals < max_evals {
        let m = 0.5 * (lo + hi);
        let tol1 = tol * (1.0 + b.abs());
        if (b - m).abs() <= 2.0 * tol1 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden_step = true;
        if prev_step.abs() > tol1 {
            let r1 = (b - w) * (fb - fv);
            let mut q = (b - v) * (fb - fw);
            let mut p = (b - v) * q - (b - w) * r1;
            q = 2.0 * (q - r1);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let older = prev_step;
            prev_step = step;
            // accept the parabola only inside the bracket and shrinking faster than bisection
            if p.abs() < (0.5 * q * older).abs() && p > q * (lo - b) && p < q * (hi - b) {
                step = p / q;
                let u = b + step;
                if u - lo < 2.0 * tol1 || hi - u < 2.0 * tol1 {
                    step = if b < m { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            prev_step = if b >= m { lo - b } else { hi - b };
            step = r * prev_step;
        }
        let u = if step.abs() >= tol1 { b + step } else { b + tol1.copysign(step) };
        let fu = tr.eval(&axpy(x, u, d));
        if fu <= fb {
            if u >= b {
                lo = b;
            } else {
                hi = b;
            }
            (v, fv, w, fw, b, fb) = (w, fw, b, fb, u, fu);
        } else {
            if u < b {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == b {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == b || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (b, fb)
}

/// Direction-set method; line searches bracket by golden expansion and refine with Brent's method.
pub fn powell<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], cfg: &OptimConfig) -> OptimResult {
    let n = x0.len();
    let mut tr = Tracked::new(f, x0, cfg.max_evals);
    if n == 0 {
        return tr.result();
    }
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = 1.0;
            d
        })
        .collect();
    let mut x = x0.to_vec();
    let mut fx = tr.best_f;
    let line_tol = (cfg.x_tol * 1e-2).max(1e-12);
    let mut iter = 0;
    while tr.evals < cfg.max_evals && iter < cfg.max_iters {
        iter += 1;
        let (x_start, f_start) = (x.clone(), fx);
        let (mut big_i, mut big_drop) = (0, 0.0);
        for (i, d) in dirs.iter().enumerate() {
            let (t, ft) = line_minimize(&mut tr, &x, fx, d, cfg.initial_step, line_tol, cfg.max_evals);
            if ft < fx {
                if fx - ft > big_drop {
                    big_drop = fx - ft;
                    big_i = i;
                }
                x = axpy(&x, t, d);
                fx = ft;
            }
            if tr.evals >= cfg.max_evals {
                break;
            }
        }
        let moved = dist(&x, &x_start);
        if 2.0 * (f_start - fx) <= cfg.f_tol * (f_start.abs() + fx.abs()) + 1e-300 || moved <= cfg.x_tol {
            break;
        }
        let new_dir: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let extrap: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| 2.0 * a - b).collect();
        let fe = tr.eval(&extrap);
        if fe < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - big_drop).powi(2)
                - big_drop * (f_start - fe).powi(2);
            if t < 0.0 {
                let (s, fs) = line_minimize(&mut tr, &x, fx, &new_dir, 1.0, line_tol, cfg.max_evals);
                if fs < fx {
                    x = axpy(&x, s, &new_dir);
                    fx = fs;
                }
                let nrm = new_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dirs[big_i] = dirs[n - 1].clone();
                dirs[n - 1] = new_dir.iter().map(|v| v / nrm).collect();
            }
        }
    }
    tr.result()
}

/// Unconstrained linear-model trust-region method on an `n + 1` point simplex.
pub fn cobyla_like<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], cfg: &OptimConfig) -> OptimResult {
    let n = x0.len();
    let mut tr = Tracked::new(f, x0, cfg.max_evals);
    if n == 0 {
        return tr.result();
    }
    let rho_max = cfg.initial_step * 16.0;
    let mut rho = cfg.initial_step;
    let mut base = (x0.to_vec(), tr.best_f);
    let build = |tr: &mut Tracked<F>, base: &[f64], rho: f64| -> Vec<(Vec<f64>, f64)> {
        (0..n)
            .map(|i| {
                let mut x = base.to_vec();
                x[i] += rho;
                let v = tr.eval(&x);
                (x, v)
            })
            .collect()
    };
    let mut others = build(&mut tr, &base.0, rho);
    let mut iter = 0;
    while tr.evals < cfg.max_evals && iter < cfg.max_iters && rho > cfg.x_tol {
        iter += 1;
        // keep the best point as the model base
        if let Some(k) = (0..n).filter(|k| others[*k].1 < base.1).min_by(|a, b| others[*a].1.total_cmp(&others[*b].1)) {
            std::mem::swap(&mut base, &mut others[k]);
        }
        let dmat = DMatrix::from_fn(n, n, |r, c| others[r].0[c] - base.0[c]);
        let df = DVector::from_fn(n, |r, _| others[r].1 - base.1);
        let Some(g) = dmat.lu().solve(&df) else {
            others = build(&mut tr, &base.0, rho);
            continue;
        };
        let gn = g.norm();
        if !gn.is_finite() || gn == 0.0 {
            rho *= 0.5;
            others = build(&mut tr, &base.0, rho);
            continue;
        }
        let step: Vec<f64> = g.iter().map(|v| -rho * v / gn).collect();
        let xn = axpy(&base.0, 1.0, &step);
        let fnew = tr.eval(&xn);
        let predicted = rho * gn;
        let ratio = (base.1 - fnew) / predicted;
        if fnew < base.1 {
            // replace the vertex farthest from the new base to keep the simplex local
            let far = (0..n)
                .max_by(|a, b| dist(&others[*a].0, &xn).total_cmp(&dist(&others[*b].0, &xn)))
                .unwrap_or(0);
            let old = std::mem::replace(&mut base, (xn, fnew));
            others[far] = old;
            if ratio > 0.75 {
                rho = (rho * 2.0).min(rho_max);
            } else if ratio < 0.1 {
                rho *= 0.5;
            }
            // refresh geometry if the simplex has become much larger than the radius
            let spread = others.iter().map(|(x, _)| dist(x, &base.0)).fold(0.0, f64::max);
            if spread > 4.0 * rho || spread < 0.25 * rho {
                others = build(&mut tr, &base.0, rho);
            }
        } else {
            rho *= 0.5;
            others = build(&mut tr, &base.0, rho);
        }
        if (base.1 - tr.best_f).abs() <= cfg.f_tol && rho <= cfg.x_tol {
            break;
        }
    }
    tr.result()
}
