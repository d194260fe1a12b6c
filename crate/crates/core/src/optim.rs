//! BFGS with a backtracking Armijo line search.

#[derive(Debug, Clone, Copy)]
pub struct BfgsConfig {
    /// Stop when the infinity norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
    /// Stop once `STALL_ITERS` consecutive steps each lower the objective by
    /// less than `f_tol * (1 + |f|)`.
    pub f_tol: f64,
}

const STALL_ITERS: usize = 3;

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 200,
            max_step: 1.0,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Stopped on the objective-change test rather than the gradient.
    pub stalled: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point.
///
/// Non-finite objective values are treated as +inf by the line search, so
/// the objective may signal an invalid region that way.
pub fn minimize_bfgs<F>(mut f: F, x0: &[f64], cfg: &BfgsConfig) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut trace = vec![fx];
    // inverse Hessian approximation, row-major
    let mut hinv = identity(n);
    let mut scaled = false;
    let mut iterations = 0;
    let mut restarted = false;
    let mut flat = 0;

    while iterations < cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            return BfgsResult { x, f: fx, grad: g, iterations, converged: true, stalled: false, trace };
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&hinv[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            hinv = identity(n);
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }
        let big = inf_norm(&dir);
        if big > cfg.max_step {
            let c = cfg.max_step / big;
            dir.iter_mut().for_each(|d| *d *= c);
            slope *= c;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if restarted {
                break;
            }
            // retry once from steepest descent
            hinv = identity(n);
            scaled = false;
            restarted = true;
            continue;
        };
        restarted = false;
        iterations += 1;

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                hinv = identity(n);
                hinv.iter_mut().for_each(|h| *h *= gamma);
                scaled = true;
            }
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        flat = if fx - fnew < cfg.f_tol * (1.0 + fx.abs()) { flat + 1 } else { 0 };
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);
        if flat >= STALL_ITERS {
            break;
        }
    }
    let converged = inf_norm(&g) <= cfg.grad_tol;
    let stalled = !converged && flat >= STALL_ITERS;
    BfgsResult { x, f: fx, grad: g, iterations, converged, stalled, trace }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

// H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
