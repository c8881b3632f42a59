//! ℓ1-penalised linear and logistic regression with an unpenalised intercept.
//!
//! Both objectives are weight-normalised:
//!
//! - Lasso: `(1/Σw) Σ w_i (y_i - b - x_iᵀβ)² + λ‖β‖₁`, solved by cyclic coordinate descent
//!   with soft-thresholding.
//! - Logistic Lasso: `(1/Σw) Σ w_i {log(1 + e^{u_i}) - t_i u_i} + λ‖β‖₁` with
//!   `u_i = b + x_iᵀβ`, solved by monotone proximal gradient descent with backtracking.
//!
//! Features are used as given; no internal standardisation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nnet::{sigmoid, softplus};
use crate::{seed, Error, Result, Scalar};

const MAX_SWEEPS: usize = 10_000;
const MAX_PROX_ITERS: usize = 10_000;
/// Probabilities returned by logistic models are clipped to `[P_CLIP, 1 - P_CLIP]`.
pub const P_CLIP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logistic,
}

/// Column-major design matrix.
#[derive(Clone, Debug)]
pub struct Design<F> {
    n: usize,
    p: usize,
    cols: Vec<F>,
}

impl<F: Scalar> Design<F> {
    pub fn from_rows<R: AsRef<[F]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.as_ref().len());
        let mut cols = vec![F::zero(); n * p];
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != p {
                return Err(Error::Input(format!("row {i} has {} columns, expected {p}", r.len())));
            }
            for (j, v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Input(format!("row {i}, column {j} is not finite")));
                }
                cols[j * n + i] = *v;
            }
        }
        Ok(Self { n, p, cols })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[F] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub fn row(&self, i: usize) -> Vec<F> {
        (0..self.p).map(|j| self.cols[j * self.n + i]).collect()
    }

    /// Rows `idx`, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let m = idx.len();
        let mut cols = vec![F::zero(); m * self.p];
        for j in 0..self.p {
            let src = self.col(j);
            for (k, &i) in idx.iter().enumerate() {
                cols[j * m + k] = src[i];
            }
        }
        Self { n: m, p: self.p, cols }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct LinearModel<F> {
    coefficients: Vec<F>,
    intercept: F,
    link: Link,
    lambda: F,
    /// Sweeps (Lasso) or proximal steps (logistic) taken.
    #[serde(default)]
    iterations: usize,
    #[serde(default)]
    converged: bool,
}

impl<F: Scalar> LinearModel<F> {
    pub fn new(coefficients: Vec<F>, intercept: F, link: Link, lambda: F) -> Self {
        Self { coefficients, intercept, link, lambda, iterations: 0, converged: true }
    }

    pub fn coefficients(&self) -> &[F] {
        &self.coefficients
    }

    pub fn intercept(&self) -> F {
        self.intercept
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn lambda(&self) -> F {
        self.lambda
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// `b + xᵀβ`.
    pub fn linear_predictor(&self, x: &[F]) -> F {
        debug_assert_eq!(x.len(), self.coefficients.len());
        self.coefficients.iter().zip(x).fold(self.intercept, |acc, (b, v)| acc + *b * *v)
    }

    /// Mean response: the linear predictor, or a clipped probability for the logistic link.
    pub fn predict(&self, x: &[F]) -> F {
        let u = self.linear_predictor(x);
        match self.link {
            Link::Identity => u,
            Link::Logistic => {
                let lo = F::lit(P_CLIP);
                sigmoid(u).max(lo).min(F::one() - lo)
            }
        }
    }

    pub fn predict_probability(&self, x: &[F]) -> F {
        debug_assert_eq!(self.link, Link::Logistic);
        self.predict(x)
    }
}

/// `sign(z) max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold<F: Scalar>(z: F, t: F) -> F {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        F::zero()
    }
}

fn normalised_weights<F: Scalar>(n: usize, y_len: usize, weights: &[F]) -> Result<Vec<F>> {
    if n == 0 {
        return Err(Error::Input("no rows".into()));
    }
    if y_len != n || weights.len() != n {
        return Err(Error::Input(format!("length mismatch: {n} rows, {y_len} responses, {} weights", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= F::zero()) || !w.is_finite()) {
        return Err(Error::Input("weights must be finite and nonnegative".into()));
    }
    let total: F = weights.iter().copied().sum();
    if total == F::zero() {
        return Err(Error::EmptySubgroup("all weights are zero".into()));
    }
    Ok(weights.iter().map(|w| *w / total).collect())
}

fn check_lambda<F: Scalar>(lambda: F) -> Result<()> {
    if !(lambda >= F::zero()) || !lambda.is_finite() {
        return Err(Error::Config("lambda must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Weighted Lasso by cyclic coordinate descent.
///
/// Stops when the largest coordinate (or intercept) change in a sweep falls below `1e-8`,
/// or after 10⁴ sweeps.
pub fn lasso_fit<F: Scalar>(x: &Design<F>, y: &[F], weights: &[F], lambda: F) -> Result<LinearModel<F>> {
    lasso_fit_from(x, y, weights, lambda, None, MAX_SWEEPS)
}

fn lasso_fit_from<F: Scalar>(
    x: &Design<F>,
    y: &[F],
    weights: &[F],
    lambda: F,
    warm: Option<&LinearModel<F>>,
    max_sweeps: usize,
) -> Result<LinearModel<F>> {
    check_lambda(lambda)?;
    let wn = normalised_weights(x.n, y.len(), weights)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("response is not finite".into()));
    }
    let (n, p) = (x.n, x.p);
    let col_sq: Vec<F> = (0..p).map(|j| x.col(j).iter().zip(&wn).map(|(v, w)| *w * *v * *v).sum()).collect();

    let mut beta = warm.map_or_else(|| vec![F::zero(); p], |m| m.coefficients.clone());
    let mut r: Vec<F> = y.to_vec();
    for (j, b) in beta.iter().enumerate() {
        if *b != F::zero() {
            for (ri, xi) in r.iter_mut().zip(x.col(j)) {
                *ri -= *b * *xi;
            }
        }
    }
    let b0: F = r.iter().zip(&wn).map(|(ri, w)| *ri * *w).sum();
    r.iter_mut().for_each(|ri| *ri -= b0);
    let mut intercept = b0;

    let half_lambda = lambda / F::lit(2.0);
    let tol = F::tolerance(1e-8);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_change = F::zero();
        for j in 0..p {
            if col_sq[j] == F::zero() {
                continue;
            }
            let xj = x.col(j);
            let old = beta[j];
            let mut g = F::zero();
            for i in 0..n {
                g += wn[i] * xj[i] * r[i];
            }
            let new = soft_threshold(g + col_sq[j] * old, half_lambda) / col_sq[j];
            let delta = new - old;
            if delta != F::zero() {
                for (ri, xi) in r.iter_mut().zip(xj) {
                    *ri -= delta * *xi;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        let shift: F = r.iter().zip(&wn).map(|(ri, w)| *ri * *w).sum();
        if shift != F::zero() {
            intercept += shift;
            r.iter_mut().for_each(|ri| *ri -= shift);
            max_change = max_change.max(shift.abs());
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    let model =
        LinearModel { coefficients: beta, intercept, link: Link::Identity, lambda, iterations: sweeps, converged };
    debug_assert!(
        !converged || kkt_violation(&model, x, y, weights)? <= F::tolerance(1e-6),
        "Lasso solution fails KKT stationarity"
    );
    Ok(model)
}

fn check_labels<F: Scalar>(t: &[F], wn: &[F]) -> Result<()> {
    if t.iter().any(|v| *v != F::zero() && *v != F::one()) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    let ones = t.iter().zip(wn).any(|(v, w)| *w > F::zero() && *v == F::one());
    let zeros = t.iter().zip(wn).any(|(v, w)| *w > F::zero() && *v == F::zero());
    if !(ones && zeros) {
        return Err(Error::Separation("labels with positive weight come from a single class".into()));
    }
    Ok(())
}

struct LogisticProblem<'a, F> {
    x: &'a Design<F>,
    t: &'a [F],
    wn: Vec<F>,
}

impl<F: Scalar> LogisticProblem<'_, F> {
    fn linear(&self, b0: F, beta: &[F], u: &mut [F]) {
        u.fill(b0);
        for (j, b) in beta.iter().enumerate() {
            if *b != F::zero() {
                for (ui, xi) in u.iter_mut().zip(self.x.col(j)) {
                    *ui += *b * *xi;
                }
            }
        }
    }

    fn smooth_loss(&self, u: &[F]) -> F {
        u.iter().zip(self.t).zip(&self.wn).map(|((ui, ti), w)| *w * (softplus(*ui) - *ti * *ui)).sum()
    }

    /// Gradient of the smooth part: `(∂b0, ∂β)`.
    fn gradient(&self, u: &[F], gb: &mut [F]) -> F {
        let resid: Vec<F> = u.iter().zip(self.t).zip(&self.wn).map(|((ui, ti), w)| *w * (sigmoid(*ui) - *ti)).collect();
        for (j, g) in gb.iter_mut().enumerate() {
            *g = self.x.col(j).iter().zip(&resid).map(|(xi, r)| *xi * *r).sum();
        }
        resid.iter().copied().sum()
    }
}

fn l1<F: Scalar>(beta: &[F]) -> F {
    beta.iter().map(|b| b.abs()).sum()
}

/// Weighted logistic Lasso by accelerated proximal gradient descent with backtracking.
///
/// Proximal steps are taken from an extrapolated point; a step is accepted only if it does
/// not increase the penalised objective, otherwise the momentum restarts from the current
/// iterate, so the objective never increases. Stops when the proximal gradient mapping falls
/// below `1e-8` in sup-norm, when the objective stalls, or after 10⁴ steps.
pub fn logistic_lasso_fit<F: Scalar>(x: &Design<F>, t: &[F], weights: &[F], lambda: F) -> Result<LinearModel<F>> {
    logistic_lasso_fit_from(x, t, weights, lambda, None, MAX_PROX_ITERS)
}

fn logistic_lasso_fit_from<F: Scalar>(
    x: &Design<F>,
    t: &[F],
    weights: &[F],
    lambda: F,
    warm: Option<&LinearModel<F>>,
    max_iters: usize,
) -> Result<LinearModel<F>> {
    check_lambda(lambda)?;
    let wn = normalised_weights(x.n, t.len(), weights)?;
    check_labels(t, &wn)?;
    let (n, p) = (x.n, x.p);
    let prob = LogisticProblem { x, t, wn };

    let (mut b0, mut beta) = match warm {
        Some(m) => (m.intercept, m.coefficients.clone()),
        None => {
            let pbar: F = t.iter().zip(&prob.wn).map(|(ti, w)| *ti * *w).sum();
            ((pbar / (F::one() - pbar)).ln(), vec![F::zero(); p])
        }
    };

    // Lipschitz bound of the smooth gradient: trace of the weighted Gram matrix over 4.
    let trace: F =
        F::one() + (0..p).map(|j| x.col(j).iter().zip(&prob.wn).map(|(v, w)| *w * *v * *v).sum::<F>()).sum::<F>();
    let step_floor = F::lit(4.0) / trace;
    let mut step = step_floor;

    let mut u = vec![F::zero(); n];
    prob.linear(b0, &beta, &mut u);
    let mut smooth = prob.smooth_loss(&u);
    // Extrapolated point.
    let (mut yb0, mut ybeta, mut uy) = (b0, beta.clone(), u.clone());
    let mut smooth_y = smooth;
    let mut momentum = F::one();
    let mut plain = true;

    let mut u_new = vec![F::zero(); n];
    let mut g = vec![F::zero(); p];
    let mut beta_new = vec![F::zero(); p];
    let tol = F::tolerance(1e-8);
    let stall = F::epsilon() * F::lit(4.0);
    let two = F::lit(2.0);
    let mut iters = 0;
    let mut converged = false;
    while iters < max_iters {
        iters += 1;
        let gb0 = prob.gradient(&uy, &mut g);
        step = (step * two).max(step_floor);
        let (b0_new, smooth_new) = loop {
            let b0_try = yb0 - step * gb0;
            for j in 0..p {
                beta_new[j] = soft_threshold(ybeta[j] - step * g[j], step * lambda);
            }
            prob.linear(b0_try, &beta_new, &mut u_new);
            let s_new = prob.smooth_loss(&u_new);
            let mut lin = gb0 * (b0_try - yb0);
            let mut sq = (b0_try - yb0) * (b0_try - yb0);
            for j in 0..p {
                let d = beta_new[j] - ybeta[j];
                lin += g[j] * d;
                sq += d * d;
            }
            if s_new <= smooth_y + lin + sq / (two * step) || step <= step_floor {
                break (b0_try, s_new);
            }
            step = (step / two).max(step_floor);
        };

        let mut mapping = (b0_new - yb0).abs();
        for j in 0..p {
            mapping = mapping.max((beta_new[j] - ybeta[j]).abs());
        }
        mapping /= step;
        let obj_old = smooth + lambda * l1(&beta);
        let obj_new = smooth_new + lambda * l1(&beta_new);
        if obj_new > obj_old {
            if plain {
                // Numerical noise at the optimum; keep the current iterate.
                converged = true;
                break;
            }
            momentum = F::one();
            plain = true;
            yb0 = b0;
            ybeta.copy_from_slice(&beta);
            uy.copy_from_slice(&u);
            smooth_y = smooth;
            continue;
        }
        let next = (F::one() + (F::one() + F::lit(4.0) * momentum * momentum).sqrt()) / two;
        let c = (momentum - F::one()) / next;
        momentum = next;
        plain = c == F::zero();
        yb0 = b0_new + c * (b0_new - b0);
        for j in 0..p {
            ybeta[j] = beta_new[j] + c * (beta_new[j] - beta[j]);
        }
        for i in 0..n {
            uy[i] = u_new[i] + c * (u_new[i] - u[i]);
        }
        smooth_y = if plain { smooth_new } else { prob.smooth_loss(&uy) };
        b0 = b0_new;
        std::mem::swap(&mut beta, &mut beta_new);
        std::mem::swap(&mut u, &mut u_new);
        smooth = smooth_new;
        if mapping < tol || obj_old - obj_new <= stall * obj_old.abs().max(F::one()) && mapping < F::tolerance(1e-6) {
            converged = true;
            break;
        }
    }
    let model =
        LinearModel { coefficients: beta, intercept: b0, link: Link::Logistic, lambda, iterations: iters, converged };
    debug_assert!(
        !converged || kkt_violation(&model, x, t, weights)? <= F::tolerance(1e-6),
        "logistic Lasso solution fails KKT stationarity"
    );
    Ok(model)
}

/// Penalised objective of `model` on the given data.
pub fn objective<F: Scalar>(model: &LinearModel<F>, x: &Design<F>, y: &[F], weights: &[F]) -> Result<F> {
    let wn = normalised_weights(x.n, y.len(), weights)?;
    let mut total = F::zero();
    for i in 0..x.n {
        let u = model.linear_predictor(&x.row(i));
        total += wn[i]
            * match model.link {
                Link::Identity => (y[i] - u) * (y[i] - u),
                Link::Logistic => softplus(u) - y[i] * u,
            };
    }
    Ok(total + model.lambda * l1(&model.coefficients))
}

/// Largest violation of the subgradient optimality conditions: the intercept gradient must
/// vanish, `|g_j| <= λ` where `β_j = 0`, and `g_j = -λ sign(β_j)` elsewhere.
pub fn kkt_violation<F: Scalar>(model: &LinearModel<F>, x: &Design<F>, y: &[F], weights: &[F]) -> Result<F> {
    let wn = normalised_weights(x.n, y.len(), weights)?;
    let resid: Vec<F> = (0..x.n)
        .map(|i| {
            let u = model.linear_predictor(&x.row(i));
            match model.link {
                Link::Identity => F::lit(-2.0) * (y[i] - u) * wn[i],
                Link::Logistic => (sigmoid(u) - y[i]) * wn[i],
            }
        })
        .collect();
    let mut worst = resid.iter().copied().sum::<F>().abs();
    for (j, b) in model.coefficients.iter().enumerate() {
        let g: F = x.col(j).iter().zip(&resid).map(|(v, r)| *v * *r).sum();
        let v = if *b == F::zero() {
            (g.abs() - model.lambda).max(F::zero())
        } else {
            (g + model.lambda * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Smallest λ at which the fitted slope vector is exactly zero.
pub fn lambda_max<F: Scalar>(x: &Design<F>, y: &[F], weights: &[F], link: Link) -> Result<F> {
    let wn = normalised_weights(x.n, y.len(), weights)?;
    let ybar: F = y.iter().zip(&wn).map(|(v, w)| *v * *w).sum();
    let scale = match link {
        Link::Identity => F::lit(2.0),
        Link::Logistic => F::one(),
    };
    Ok((0..x.p)
        .map(|j| {
            let s: F = x.col(j).iter().zip(y).zip(&wn).map(|((v, yi), w)| *w * *v * (*yi - ybar)).sum();
            scale * s.abs()
        })
        .fold(F::zero(), F::max))
}

/// Fits with the given link.
pub fn fit<F: Scalar>(x: &Design<F>, y: &[F], weights: &[F], lambda: F, link: Link) -> Result<LinearModel<F>> {
    match link {
        Link::Identity => lasso_fit(x, y, weights, lambda),
        Link::Logistic => logistic_lasso_fit(x, y, weights, lambda),
    }
}

fn heldout_loss<F: Scalar>(model: &LinearModel<F>, x: &Design<F>, y: &[F], w: &[F]) -> F {
    let total: F = w.iter().copied().sum();
    if total == F::zero() {
        return F::zero();
    }
    let mut acc = F::zero();
    for i in 0..x.n {
        if w[i] == F::zero() {
            continue;
        }
        let u = model.linear_predictor(&x.row(i));
        acc += w[i]
            * match model.link {
                Link::Identity => (y[i] - u) * (y[i] - u),
                Link::Logistic => softplus(u) - y[i] * u,
            };
    }
    acc / total
}

/// `grid_size` values log-spaced from `lambda_max` down to `lambda_max * 1e-3`.
pub fn lambda_grid<F: Scalar>(lambda_max: F, grid_size: usize) -> Vec<F> {
    (0..grid_size).map(|k| lambda_max * F::lit(10f64.powf(-3.0 * k as f64 / (grid_size - 1) as f64))).collect()
}

/// Chooses λ by a seeded 80/20 split: fits the 80% part along the grid (warm-started from
/// the largest λ) and returns the λ with the smallest held-out loss, preferring the larger λ
/// on ties.
pub fn select_lambda<F: Scalar>(
    x: &Design<F>,
    y: &[F],
    weights: &[F],
    link: Link,
    grid_size: usize,
    seed: u64,
) -> Result<F> {
    Ok(select_lambda_path(x, y, weights, link, grid_size, seed)?.0)
}

/// Like [`select_lambda`], also returning the grid and held-out losses.
pub fn select_lambda_path<F: Scalar>(
    x: &Design<F>,
    y: &[F],
    weights: &[F],
    link: Link,
    grid_size: usize,
    seed: u64,
) -> Result<(F, Vec<F>, Vec<F>)> {
    if grid_size < 2 {
        return Err(Error::Config("grid_size must be at least 2".into()));
    }
    normalised_weights(x.n, y.len(), weights)?;
    if x.n < 2 {
        return Err(Error::Input("need at least two rows to select lambda".into()));
    }
    let mut order: Vec<usize> = (0..x.n).collect();
    order.shuffle(&mut seed::rng(seed));
    let n_train = ((0.8 * x.n as f64).round() as usize).clamp(1, x.n - 1);
    let (tr, te) = order.split_at(n_train);
    let (mut tr, mut te) = (tr.to_vec(), te.to_vec());
    tr.sort_unstable();
    te.sort_unstable();
    let pick = |idx: &[usize], v: &[F]| idx.iter().map(|&i| v[i]).collect::<Vec<F>>();
    let (x_tr, y_tr, w_tr) = (x.select_rows(&tr), pick(&tr, y), pick(&tr, weights));
    let (x_te, y_te, w_te) = (x.select_rows(&te), pick(&te, y), pick(&te, weights));

    let grid = lambda_grid(lambda_max(&x_tr, &y_tr, &w_tr, link)?, grid_size);
    let mut losses = Vec::with_capacity(grid_size);
    let mut warm: Option<LinearModel<F>> = None;
    for &lam in &grid {
        let m = match link {
            Link::Identity => lasso_fit_from(&x_tr, &y_tr, &w_tr, lam, warm.as_ref(), MAX_SWEEPS)?,
            Link::Logistic => logistic_lasso_fit_from(&x_tr, &y_tr, &w_tr, lam, warm.as_ref(), MAX_SWEEPS)?,
        };
        losses.push(heldout_loss(&m, &x_te, &y_te, &w_te));
        warm = Some(m);
    }
    let mut best = 0;
    for k in 1..grid_size {
        if losses[k] < losses[best] {
            best = k;
        }
    }
    Ok((grid[best], grid, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_problem(n: usize, p: usize, seed_: u64) -> (Design<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = seed::rng(seed_);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| 0.5 + 2.0 * r[0] - r[1 % p] + rng.random_range(-0.5..0.5)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        (Design::from_rows(&rows).unwrap(), y, w)
    }

    #[test]
    fn one_dimensional_closed_form() {
        let x = Design::<f64>::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let m = lasso_fit(&x, &[2.0, -2.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((m.coefficients()[0] - 1.5).abs() < 1e-10);
        assert!(m.intercept().abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_matches_grid_search() {
        // Oracle: dense grid over β of the 1-D objective (intercept is 0 by symmetry).
        let obj = |b: f64, lam: f64| 0.5 * ((2.0 - b).powi(2) + (-2.0 + b).powi(2)) + lam * b.abs();
        let x = Design::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        for lam in [0.0, 0.3, 1.0, 2.5, 3.9] {
            let grid_best = (0..=800_000)
                .map(|k| -4.0 + k as f64 * 1e-5)
                .min_by(|a, b| obj(*a, lam).partial_cmp(&obj(*b, lam)).unwrap())
                .unwrap();
            let m = lasso_fit(&x, &[2.0, -2.0], &[1.0, 1.0], lam).unwrap();
            assert!((m.coefficients()[0] - grid_best).abs() < 1e-4, "lam {lam}");
            assert!((m.coefficients()[0] - (2.0 - lam / 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lambda_orthonormal_is_least_squares() {
        // Columns orthogonal under uniform weights and centred, so OLS slopes are x_jᵀy / x_jᵀx_j.
        let rows = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let y = [3.0, 1.0, -0.5, 0.25];
        let x = Design::from_rows(&rows).unwrap();
        let m = lasso_fit(&x, &y, &[1.0; 4], 0.0).unwrap();
        let ols = |j: usize| rows.iter().zip(&y).map(|(r, v)| r[j] * v).sum::<f64>() / 4.0;
        assert!((m.coefficients()[0] - ols(0)).abs() < 1e-6);
        assert!((m.coefficients()[1] - ols(1)).abs() < 1e-6);
        assert!((m.intercept() - y.iter().sum::<f64>() / 4.0).abs() < 1e-6);
    }

    #[test]
    fn lambda_max_zeroes_every_slope() {
        let (x, y, w) = random_problem(60, 5, 3);
        let lmax = lambda_max(&x, &y, &w, Link::Identity).unwrap();
        let m = lasso_fit(&x, &y, &w, lmax).unwrap();
        assert!(m.coefficients().iter().all(|b| *b == 0.0));
        let m = lasso_fit(&x, &y, &w, lmax * 0.9).unwrap();
        assert!(m.coefficients().iter().any(|b| *b != 0.0));
    }

    #[test]
    fn kkt_holds_on_random_lasso_fits() {
        for s in 0..20 {
            let (x, y, w) = random_problem(50, 6, s);
            let lmax = lambda_max(&x, &y, &w, Link::Identity).unwrap();
            for frac in [0.0, 0.01, 0.2, 0.7] {
                let m = lasso_fit(&x, &y, &w, lmax * frac).unwrap();
                assert!(m.converged());
                assert!(kkt_violation(&m, &x, &y, &w).unwrap() <= 1e-6);
            }
        }
    }

    #[test]
    fn empty_weights_error() {
        let x = Design::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(lasso_fit(&x, &[1.0, 2.0], &[0.0, 0.0], 0.1), Err(Error::EmptySubgroup(_))));
        assert!(matches!(logistic_lasso_fit(&x, &[1.0, 0.0], &[0.0, 0.0], 0.1), Err(Error::EmptySubgroup(_))));
    }

    #[test]
    fn logistic_symmetric_null() {
        let rows = vec![vec![0.0, 0.0]; 10];
        let t: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let x = Design::from_rows(&rows).unwrap();
        let m = logistic_lasso_fit(&x, &t, &[1.0; 10], 0.1).unwrap();
        assert!(m.coefficients().iter().all(|b| *b == 0.0));
        assert!(m.intercept().abs() < 1e-12);
        assert!((m.predict_probability(&[0.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logistic_huge_lambda_is_intercept_only() {
        let (x, _, w) = random_problem(80, 4, 11);
        let mut rng = seed::rng(12);
        let t: Vec<f64> = (0..80).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let m = logistic_lasso_fit(&x, &t, &w, 1e6).unwrap();
        assert!(m.coefficients().iter().all(|b| *b == 0.0));
        let pbar = t.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
        assert!((m.intercept() - (pbar / (1.0 - pbar)).ln()).abs() < 1e-4);
    }

    #[test]
    fn logistic_single_class_is_separation_error() {
        let x = Design::from_rows(&[vec![0.1], vec![0.2], vec![0.3]]).unwrap();
        let r = logistic_lasso_fit(&x, &[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], 0.1);
        assert!(matches!(r, Err(Error::Separation(_))));
    }

    #[test]
    fn logistic_kkt_and_probability_bounds() {
        for s in 0..10 {
            let (x, _, w) = random_problem(120, 5, 100 + s);
            let mut rng = seed::rng(200 + s);
            let t: Vec<f64> = (0..120)
                .map(|i| {
                    let r = x.row(i);
                    if rng.random::<f64>() < sigmoid(1.5 * r[0] - r[2]) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let lmax = lambda_max(&x, &t, &w, Link::Logistic).unwrap();
            for frac in [0.001, 0.05, 0.5] {
                let m = logistic_lasso_fit(&x, &t, &w, lmax * frac).unwrap();
                assert!(m.converged());
                let v = kkt_violation(&m, &x, &t, &w).unwrap();
                assert!(v <= 1e-6, "kkt {v}");
                for i in 0..120 {
                    let pr = m.predict_probability(&x.row(i));
                    assert!(pr > 0.0 && pr < 1.0);
                }
            }
        }
    }

    #[test]
    fn grid_size_two_returns_a_candidate() {
        let (x, y, w) = random_problem(40, 3, 5);
        let (lam, grid, _) = select_lambda_path(&x, &y, &w, Link::Identity, 2, 9).unwrap();
        assert!(grid.contains(&lam));
        assert_eq!(grid.len(), 2);
    }

    #[test]
    fn noise_selects_heavy_shrinkage() {
        let grid_size = 20;
        let mut hits = 0;
        for s in 0..50 {
            let mut rng = seed::rng(1000 + s);
            let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Design::from_rows(&rows).unwrap();
            let (lam, grid, _) = select_lambda_path(&x, &y, &[1.0; 200], Link::Identity, grid_size, s).unwrap();
            let k = grid.iter().position(|g| *g == lam).unwrap();
            if k < grid_size / 4 {
                hits += 1;
            }
        }
        assert!(hits >= 40, "{hits} of 50");
    }

    #[test]
    fn linear_signal_selects_light_shrinkage() {
        let grid_size = 20;
        let mut hits = 0;
        for s in 0..50 {
            let mut rng = seed::rng(2000 + s);
            let rows: Vec<Vec<f64>> = (0..500).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[3]).collect();
            let x = Design::from_rows(&rows).unwrap();
            let (lam, grid, _) = select_lambda_path(&x, &y, &[1.0; 500], Link::Identity, grid_size, s).unwrap();
            let k = grid.iter().position(|g| *g == lam).unwrap();
            if k >= grid_size / 2 {
                hits += 1;
            }
        }
        assert!(hits >= 40, "{hits} of 50");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn lasso_objective_is_monotone_over_sweeps(seed_ in 0u64..1000, frac in 0.0f64..1.0) {
            let (x, y, w) = random_problem(30, 4, seed_);
            let lam = lambda_max(&x, &y, &w, Link::Identity).unwrap() * frac;
            let mut prev = f64::INFINITY;
            let mut warm: Option<LinearModel<f64>> = None;
            // One sweep at a time, warm-started, traces the coordinate-descent path.
            for _ in 0..15 {
                let m = one_sweep(&x, &y, &w, lam, warm.as_ref());
                let o = objective(&m, &x, &y, &w).unwrap();
                prop_assert!(o <= prev + 1e-12);
                prev = o;
                warm = Some(m);
            }
        }

        #[test]
        fn logistic_objective_is_monotone(seed_ in 0u64..1000, frac in 0.001f64..1.0) {
            let (x, _, w) = random_problem(40, 3, seed_);
            let t: Vec<f64> = (0..40).map(|i| if x.row(i)[0] + 0.3 * x.row(i)[1] > 0.0 { 1.0 } else { 0.0 }).collect();
            prop_assume!(t.contains(&1.0) && t.contains(&0.0));
            let lam = lambda_max(&x, &t, &w, Link::Logistic).unwrap() * frac;
            let mut prev = f64::INFINITY;
            let mut warm: Option<LinearModel<f64>> = None;
            for _ in 0..15 {
                let m = one_prox_step(&x, &t, &w, lam, warm.as_ref());
                let o = objective(&m, &x, &t, &w).unwrap();
                prop_assert!(o <= prev + 1e-12);
                prev = o;
                warm = Some(m);
            }
        }

        #[test]
        fn soft_threshold_homogeneity(seed_ in 0u64..1000, c in 0.1f64..10.0, frac in 0.0f64..0.9) {
            let (x, y, w) = random_problem(40, 4, seed_);
            let lam = lambda_max(&x, &y, &w, Link::Identity).unwrap() * frac;
            let a = lasso_fit(&x, &y, &w, lam).unwrap();
            let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
            let b = lasso_fit(&x, &yc, &w, lam * c).unwrap();
            for (ba, bb) in a.coefficients().iter().zip(b.coefficients()) {
                prop_assert!((ba * c - bb).abs() <= 1e-8 * (1.0 + bb.abs()));
            }
            prop_assert!((a.intercept() * c - b.intercept()).abs() <= 1e-8 * (1.0 + b.intercept().abs()));
        }

        #[test]
        fn zero_weight_rows_have_no_influence(seed_ in 0u64..1000, junk in -50.0f64..50.0) {
            let (x, y, mut w) = random_problem(30, 3, seed_);
            let a = lasso_fit(&x, &y, &w, 0.05).unwrap();
            w[0] = 0.0;
            w[7] = 0.0;
            let b = lasso_fit(&x, &y, &w, 0.05).unwrap();
            let mut y2 = y.clone();
            y2[0] = junk;
            y2[7] = -junk;
            let c = lasso_fit(&x, &y2, &w, 0.05).unwrap();
            prop_assert_eq!(&b, &c);
            prop_assert_ne!(&a, &b);
        }
    }

    fn one_sweep(x: &Design<f64>, y: &[f64], w: &[f64], lam: f64, warm: Option<&LinearModel<f64>>) -> LinearModel<f64> {
        lasso_fit_from(x, y, w, lam, warm, 1).unwrap()
    }

    fn one_prox_step(
        x: &Design<f64>,
        t: &[f64],
        w: &[f64],
        lam: f64,
        warm: Option<&LinearModel<f64>>,
    ) -> LinearModel<f64> {
        logistic_lasso_fit_from(x, t, w, lam, warm, 1).unwrap()
    }
}
