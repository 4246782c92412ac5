//! Small dense SQP solver for box-bounded problems with a handful of
//! general constraints.
//!
//! Each iteration solves the quadratic subproblem
//!
//! ```text
//! min ½ dᵀBd + gᵀd   s.t.  aᵢᵀd = −cᵢ (equalities), aⱼᵀd ≥ −cⱼ (inequalities),
//!                          lb − x ≤ d ≤ ub − x
//! ```
//!
//! exactly by enumerating active sets, which is cheap for a few variables. `B`
//! is a damped BFGS approximation of the Lagrangian Hessian and steps are
//! globalized with a backtracking line search on the ℓ1 merit function, with a
//! second-order correction when the full step is rejected.

use crate::numcore::{dot, solve_linear, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub value: f64,
    pub grad: Vec<f64>,
    /// `value = 0` if true, otherwise `value ≥ 0`.
    pub equality: bool,
}

impl Constraint {
    fn violation(&self) -> f64 {
        if self.equality {
            self.value.abs()
        } else {
            (-self.value).max(0.0)
        }
    }
}

pub trait Nlp {
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// Objective value and gradient.
    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>);
    fn constraints(&self, x: &[f64]) -> Vec<Constraint>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub violation: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Free,
    Lower,
    Upper,
}

struct QpSolution {
    d: Vec<f64>,
    lambda: Vec<f64>,
}

/// Exact solution of the strictly convex QP by active-set enumeration.
fn solve_qp(b: &Matrix, g: &[f64], rows: &[Constraint], lo: &[f64], hi: &[f64]) -> QpSolution {
    let n = g.len();
    // Keep each linearized row attainable inside the box and drop flat rows.
    let mut active_rows: Vec<(usize, Vec<f64>, f64, bool)> = Vec::new();
    for (idx, c) in rows.iter().enumerate() {
        let gnorm = dot(&c.grad, &c.grad).sqrt();
        if gnorm < 1e-14 {
            continue;
        }
        let (mut rmin, mut rmax) = (0.0, 0.0);
        for j in 0..n {
            let (p, q) = (c.grad[j] * lo[j], c.grad[j] * hi[j]);
            rmin += p.min(q);
            rmax += p.max(q);
        }
        let rhs = (-c.value).clamp(rmin, rmax);
        active_rows.push((idx, c.grad.clone(), rhs, c.equality));
    }
    let m = active_rows.len();
    let ineq: Vec<usize> = (0..m).filter(|&r| !active_rows[r].3).collect();

    let scale = 1.0 + g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut best: Option<(f64, QpSolution)> = None;

    let combos = 3usize.pow(n as u32);
    for code in 0..combos {
        let mut status = vec![Status::Free; n];
        let mut c = code;
        for s in status.iter_mut() {
            *s = match c % 3 {
                0 => Status::Free,
                1 => Status::Lower,
                _ => Status::Upper,
            };
            c /= 3;
        }
        for ineq_code in 0..(1usize << ineq.len()) {
            let on: Vec<usize> = (0..m)
                .filter(|&r| {
                    active_rows[r].3
                        || ineq
                            .iter()
                            .position(|&q| q == r)
                            .is_some_and(|p| ineq_code & (1 << p) != 0)
                })
                .collect();
            if let Some((score, sol)) = try_active_set(b, g, &active_rows, &status, &on, lo, hi, tol) {
                if score == 0.0 {
                    return finish(sol, rows.len(), &active_rows);
                }
                if best.as_ref().map_or(true, |(s, _)| score < *s) {
                    best = Some((score, sol));
                }
            }
        }
    }
    match best {
        Some((_, sol)) => finish(sol, rows.len(), &active_rows),
        None => QpSolution {
            d: (0..n).map(|j| (-g[j]).clamp(lo[j], hi[j])).collect(),
            lambda: vec![0.0; rows.len()],
        },
    }
}

fn finish(sol: QpSolution, n_rows: usize, kept: &[(usize, Vec<f64>, f64, bool)]) -> QpSolution {
    let mut lambda = vec![0.0; n_rows];
    for (r, row) in kept.iter().enumerate() {
        lambda[row.0] = sol.lambda[r];
    }
    QpSolution { d: sol.d, lambda }
}

/// Solves the equality-constrained QP for one guess of the active set and
/// scores how badly it violates the remaining KKT conditions (0 = valid).
#[allow(clippy::too_many_arguments)]
fn try_active_set(
    b: &Matrix,
    g: &[f64],
    rows: &[(usize, Vec<f64>, f64, bool)],
    status: &[Status],
    on: &[usize],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
) -> Option<(f64, QpSolution)> {
    let n = g.len();
    let free: Vec<usize> = (0..n).filter(|&j| status[j] == Status::Free).collect();
    if on.len() > free.len() {
        return None;
    }
    let mut d = vec![0.0; n];
    for j in 0..n {
        match status[j] {
            Status::Lower => d[j] = lo[j],
            Status::Upper => d[j] = hi[j],
            Status::Free => {}
        }
    }
    let nf = free.len();
    let size = nf + on.len();
    let mut kkt = Matrix::zeros(size, size);
    let mut rhs = vec![0.0; size];
    for (p, &i) in free.iter().enumerate() {
        for (q, &j) in free.iter().enumerate() {
            kkt.set(p, q, b.get(i, j));
        }
        let mut r = -g[i];
        for j in 0..n {
            if status[j] != Status::Free {
                r -= b.get(i, j) * d[j];
            }
        }
        rhs[p] = r;
    }
    for (k, &r) in on.iter().enumerate() {
        let (_, a, target, _) = &rows[r];
        for (p, &i) in free.iter().enumerate() {
            kkt.set(p, nf + k, -a[i]);
            kkt.set(nf + k, p, a[i]);
        }
        let mut t = *target;
        for j in 0..n {
            if status[j] != Status::Free {
                t -= a[j] * d[j];
            }
        }
        rhs[nf + k] = t;
    }
    let sol = if size == 0 { Vec::new() } else { solve_linear(&kkt, &rhs)? };
    for (p, &i) in free.iter().enumerate() {
        d[i] = sol[p];
    }
    let mut lambda = vec![0.0; rows.len()];
    for (k, &r) in on.iter().enumerate() {
        lambda[r] = sol[nf + k];
    }

    let mut score = 0.0;
    for &i in &free {
        score += (lo[i] - d[i] - tol).max(0.0) + (d[i] - hi[i] - tol).max(0.0);
    }
    for (r, (_, a, target, equality)) in rows.iter().enumerate() {
        if !equality {
            if on.contains(&r) {
                score += (-lambda[r] - tol).max(0.0);
            } else {
                score += (target - dot(a, &d) - tol).max(0.0);
            }
        }
    }
    // Bound multipliers: z = Bd + g − Aᵀλ must point into the box.
    for j in 0..n {
        if status[j] == Status::Free {
            continue;
        }
        let mut z = g[j] + (0..n).map(|k| b.get(j, k) * d[k]).sum::<f64>();
        for (r, (_, a, _, _)) in rows.iter().enumerate() {
            z -= lambda[r] * a[j];
        }
        score += match status[j] {
            Status::Lower => (-z - tol).max(0.0),
            Status::Upper => (z - tol).max(0.0),
            Status::Free => 0.0,
        };
    }
    Some((score, QpSolution { d, lambda }))
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for j in 0..x.len() {
        x[j] = x[j].clamp(lo[j], hi[j]);
    }
}

fn total_violation(cons: &[Constraint]) -> f64 {
    cons.iter().map(Constraint::violation).sum()
}

fn lagrangian_grad(g: &[f64], cons: &[Constraint], lambda: &[f64]) -> Vec<f64> {
    let mut out = g.to_vec();
    for (c, l) in cons.iter().zip(lambda) {
        for (o, a) in out.iter_mut().zip(&c.grad) {
            *o -= l * a;
        }
    }
    out
}

fn kkt_residual(x: &[f64], lo: &[f64], hi: &[f64], g: &[f64], cons: &[Constraint], lambda: &[f64]) -> f64 {
    let s = lagrangian_grad(g, cons, lambda);
    let mut r = 0.0f64;
    for j in 0..x.len() {
        r = r.max((x[j] - (x[j] - s[j]).clamp(lo[j], hi[j])).abs());
    }
    for (c, &l) in cons.iter().zip(lambda) {
        r = r.max(c.violation());
        if !c.equality {
            r = r.max((l * c.value).abs()).max(-l);
        }
    }
    r
}

/// Damped BFGS update keeping `b` positive definite.
fn bfgs_update(b: &mut Matrix, s: &[f64], y: &[f64], first: bool) {
    let n = s.len();
    let sy = dot(s, y);
    if first && sy > 0.0 {
        let scale = dot(y, y) / sy;
        *b = Matrix::identity(n).scaled(scale);
    }
    let bs: Vec<f64> = (0..n).map(|i| dot(b.row(i), s)).collect();
    let sbs = dot(s, &bs);
    if !(sbs > 1e-300) {
        return;
    }
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r: Vec<f64> = (0..n).map(|i| theta * y[i] + (1.0 - theta) * bs[i]).collect();
    let sr = dot(s, &r);
    if !(sr > 1e-300) {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            let v = b.get(i, j) + r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
            b.set(i, j, v);
        }
    }
}

/// Runs SQP from `x0` (clipped into the box).
pub fn minimize(nlp: &dyn Nlp, x0: &[f64], opts: SqpOptions) -> SqpResult {
    let (lo, hi) = (nlp.lower().to_vec(), nlp.upper().to_vec());
    let n = x0.len();
    let mut x = x0.to_vec();
    clip(&mut x, &lo, &hi);
    let mut b = Matrix::identity(n);
    let mut mu = 1.0f64;
    let (mut f, mut g) = nlp.objective(&x);
    let mut cons = nlp.constraints(&x);
    let mut lambda = vec![0.0; cons.len()];
    let mut kkt = f64::INFINITY;
    let mut first_update = true;
    let mut failures = 0;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it;
        let dlo: Vec<f64> = (0..n).map(|j| lo[j] - x[j]).collect();
        let dhi: Vec<f64> = (0..n).map(|j| hi[j] - x[j]).collect();
        let qp = solve_qp(&b, &g, &cons, &dlo, &dhi);
        lambda = qp.lambda;
        kkt = kkt_residual(&x, &lo, &hi, &g, &cons, &lambda);
        if kkt <= opts.tol {
            return result(x, f, &cons, kkt, it, true, lambda);
        }
        let d = qp.d;
        let lmax = lambda.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // Penalty may relax again once the multipliers settle.
        mu = (1.5 * lmax + 1e-8).max(0.5 * (mu + 1.5 * lmax));
        let viol = total_violation(&cons);
        let phi0 = f + mu * viol;
        let deriv = dot(&g, &d) - mu * viol;
        let negligible = deriv.abs() <= 1e-15 * (1.0 + phi0.abs());

        let merit = |xt: &[f64]| -> f64 {
            let (ft, _) = nlp.objective(xt);
            ft + mu * total_violation(&nlp.constraints(xt))
        };
        let mut accepted: Option<Vec<f64>> = None;
        let mut alpha = 1.0;
        for k in 0..40 {
            let mut xt: Vec<f64> = (0..n).map(|j| x[j] + alpha * d[j]).collect();
            clip(&mut xt, &lo, &hi);
            if negligible || merit(&xt) <= phi0 + 1e-4 * alpha * deriv.min(0.0) {
                accepted = Some(xt);
                break;
            }
            if k == 0 {
                if let Some(xs) = second_order_correction(nlp, &xt, &lo, &hi) {
                    if merit(&xs) <= phi0 + 1e-4 * deriv.min(0.0) {
                        accepted = Some(xs);
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some(x_new) = accepted else {
            failures += 1;
            if failures >= 2 {
                break;
            }
            b = Matrix::identity(n);
            first_update = true;
            continue;
        };
        failures = 0;
        let (f_new, g_new) = nlp.objective(&x_new);
        let cons_new = nlp.constraints(&x_new);
        let s: Vec<f64> = (0..n).map(|j| x_new[j] - x[j]).collect();
        let gl_old = lagrangian_grad(&g, &cons, &lambda);
        let gl_new = lagrangian_grad(&g_new, &cons_new, &lambda);
        let y: Vec<f64> = (0..n).map(|j| gl_new[j] - gl_old[j]).collect();
        if dot(&s, &s) > 0.0 {
            bfgs_update(&mut b, &s, &y, first_update);
            first_update = false;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        cons = cons_new;
        iterations = it + 1;
    }
    result(x, f, &cons, kkt, iterations, false, lambda)
}

fn result(
    x: Vec<f64>,
    objective: f64,
    cons: &[Constraint],
    kkt_residual: f64,
    iterations: usize,
    converged: bool,
    multipliers: Vec<f64>,
) -> SqpResult {
    SqpResult {
        x,
        objective,
        violation: total_violation(cons),
        kkt_residual,
        iterations,
        converged,
        multipliers,
    }
}

/// Minimum-norm correction pulling violated constraints back to zero at `xt`.
fn second_order_correction(nlp: &dyn Nlp, xt: &[f64], lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
    let cons = nlp.constraints(xt);
    let mut xs = xt.to_vec();
    let mut changed = false;
    for c in &cons {
        if c.violation() == 0.0 {
            continue;
        }
        let gg = dot(&c.grad, &c.grad);
        if gg < 1e-28 {
            continue;
        }
        let t = -c.value / gg;
        for (v, a) in xs.iter_mut().zip(&c.grad) {
            *v += t * a;
        }
        changed = true;
    }
    if !changed {
        return None;
    }
    clip(&mut xs, lo, hi);
    Some(xs)
}
