//! Moment models and the GMM step: solve the sample moment conditions
//! against a signed jump measure, and against the uniform stayer measure for
//! the naive estimator that ignores attrition.
//!
//! The solver ladder: models exposing a linear decomposition
//! `m(z, theta) = a(z) - B(z) theta` are solved directly as a linear system.
//! Everything else runs Newton iteration with a forward-difference Jacobian,
//! falling back to Nelder-Mead minimization of the squared moment norm.
//! Because the jump measure can carry negative weight, the squared norm can
//! have spurious stationary points; the residual norm is reported so callers
//! can detect non-roots.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ValidatedData;
use crate::error::Error;
use crate::link::LinkFunction;
use crate::measure::{integrate, jump_masses, GridStrategy, JumpGrid, MeasureError, SignedMeasure};
use crate::stats::Accumulator;
use crate::transform::CorrectedCdf;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("integrated Jacobian is singular")]
    SingularSystem,
    #[error("demeaned design matrix is singular; no within variation")]
    SingularDesign,
    #[error("initial point has dimension {got}, expected {expected}")]
    BadInitial { got: usize, expected: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

type EvalFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
type PartFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Linear structure `m(z, theta) = a(z) - B(z) theta`.
#[derive(Clone)]
pub struct LinearParts {
    /// Fills a `dim_m` buffer with `a(z)`.
    pub a: PartFn,
    /// Fills a row-major `dim_m x dim_theta` buffer with `B(z)`.
    pub b: PartFn,
}

/// A moment function `m(z, theta)` with `dim_m = dim_theta`.
#[derive(Clone)]
pub struct MomentModel {
    name: String,
    dim_theta: usize,
    eval: EvalFn,
    linear: Option<LinearParts>,
}

impl std::fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentModel")
            .field("name", &self.name)
            .field("dim_theta", &self.dim_theta)
            .field("linear", &self.linear.is_some())
            .finish()
    }
}

impl MomentModel {
    pub fn new<F>(name: &str, dim_theta: usize, eval: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        MomentModel {
            name: name.into(),
            dim_theta,
            eval: Arc::new(eval),
            linear: None,
        }
    }

    pub fn with_linear<A, B>(mut self, a: A, b: B) -> Self
    where
        A: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        B: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.linear = Some(LinearParts {
            a: Arc::new(a),
            b: Arc::new(b),
        });
        self
    }

    /// `m(z, theta) = z - theta`: theta is the mean of the atom vector.
    pub fn mean(dim: usize) -> Self {
        MomentModel::new("mean", dim, move |z, theta, out| {
            for k in 0..dim {
                out[k] = z[k] - theta[k];
            }
        })
        .with_linear(
            move |z, out| out.copy_from_slice(&z[..dim]),
            move |_, out| {
                out.fill(0.0);
                for k in 0..dim {
                    out[k * dim + k] = 1.0;
                }
            },
        )
    }

    /// `m(z, theta) = z_i * z_j - theta`: a scalar product moment.
    pub fn product_moment(i: usize, j: usize) -> Self {
        MomentModel::new("product-moment", 1, move |z, theta, out| {
            out[0] = z[i] * z[j] - theta[0];
        })
        .with_linear(
            move |z, out| out[0] = z[i] * z[j],
            |_, out| out[0] = 1.0,
        )
    }

    /// `m(z, theta) = 1(z1 = b) (1(z2 = a) - theta)` for scalar waves:
    /// theta is the conditional probability P(Z2 = a | Z1 = b).
    ///
    /// Comparisons are exact; this model is meant for discrete data whose
    /// support values are exactly representable.
    pub fn cond_prob(a: f64, b: f64) -> Self {
        MomentModel::new("cond-prob", 1, move |z, theta, out| {
            let sel = (z[0] == b) as u8 as f64;
            let hit = (z[1] == a) as u8 as f64;
            out[0] = sel * (hit - theta[0]);
        })
        .with_linear(
            move |z, out| out[0] = ((z[0] == b) as u8 as f64) * ((z[1] == a) as u8 as f64),
            move |z, out| out[0] = (z[0] == b) as u8 as f64,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn is_linear(&self) -> bool {
        self.linear.is_some()
    }

    pub fn evaluate(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        (self.eval)(z, theta, out)
    }
}

/// Options for the GMM solve.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SolveOptions {
    /// Convergence requires the max-norm of the integrated moments below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 60,
        }
    }
}

/// Options for the full corrected-estimation pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateOptions {
    pub grid: GridStrategy,
    pub solve: SolveOptions,
    /// Starting point for nonlinear solves; defaults to the naive estimate.
    pub theta0: Option<Vec<f64>>,
    /// Multiplier in `(0, 1]` applied to the grid offsets; any admissible
    /// value yields the same estimate.
    pub h_scale: Option<f64>,
}

/// Estimate plus solver and measure diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimateResult {
    pub theta_hat: Vec<f64>,
    pub residual_norm: f64,
    pub solver_iterations: usize,
    pub converged: bool,
    pub method: String,
    pub total_mass: f64,
    pub negative_mass: f64,
    pub clamp_events: u64,
    pub grid_atoms: usize,
    pub dropped_atoms: usize,
    pub dropped_mass: f64,
}

fn integrated_moments(
    mu: &SignedMeasure,
    model: &MomentModel,
    theta: &[f64],
) -> Result<Vec<f64>, MeasureError> {
    integrate(mu, model.dim_theta(), |z, out| {
        model.evaluate(z, theta, out)
    })
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solve `A x = rhs` in place by partial-pivot elimination. `A` is row-major
/// `n x n`. Returns `None` when a pivot is numerically zero.
fn solve_linear(mut a: Vec<f64>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r * n + col]
                    .abs()
                    .partial_cmp(&a[s * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-13 * scale {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            rhs.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = rhs[col];
        for k in col + 1..n {
            v -= a[col * n + k] * rhs[k];
        }
        rhs[col] = v / a[col * n + col];
    }
    Some(rhs)
}

/// Set `theta` so the integrated moments vanish.
pub fn solve_gmm(
    mu: &SignedMeasure,
    model: &MomentModel,
    theta0: &[f64],
    opts: &SolveOptions,
) -> Result<EstimateResult, SolveError> {
    let dt = model.dim_theta();
    if theta0.len() != dt {
        return Err(SolveError::BadInitial {
            got: theta0.len(),
            expected: dt,
        });
    }

    let (theta, iterations, method, converged) = if let Some(linear) = &model.linear {
        let a_int = integrate(mu, dt, |z, out| (linear.a)(z, out))?;
        let b_int = integrate(mu, dt * dt, |z, out| (linear.b)(z, out))?;
        let theta = solve_linear(b_int, a_int).ok_or(SolveError::SingularSystem)?;
        (theta, 1, "linear", true)
    } else {
        match newton_solve(mu, model, theta0, opts)? {
            NewtonOutcome::Converged { theta, iterations } => {
                (theta, iterations, "newton", true)
            }
            NewtonOutcome::Failed { best } => {
                let (theta, iterations) = nelder_mead(
                    |t| {
                        integrated_moments(mu, model, t)
                            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
                            .unwrap_or(f64::INFINITY)
                    },
                    &best,
                    opts.max_iter * 40,
                );
                let residual = integrated_moments(mu, model, &theta)?;
                let ok = max_norm(&residual) <= opts.tol;
                (theta, iterations, "newton+nelder-mead", ok)
            }
        }
    };

    let residual = integrated_moments(mu, model, &theta)?;
    Ok(EstimateResult {
        theta_hat: theta,
        residual_norm: max_norm(&residual),
        solver_iterations: iterations,
        converged,
        method: method.into(),
        total_mass: mu.total_mass(),
        negative_mass: mu.negative_mass(),
        clamp_events: 0,
        grid_atoms: mu.len(),
        dropped_atoms: mu.dropped_atoms(),
        dropped_mass: mu.dropped_mass(),
    })
}

enum NewtonOutcome {
    Converged { theta: Vec<f64>, iterations: usize },
    Failed { best: Vec<f64> },
}

fn newton_solve(
    mu: &SignedMeasure,
    model: &MomentModel,
    theta0: &[f64],
    opts: &SolveOptions,
) -> Result<NewtonOutcome, SolveError> {
    let dt = model.dim_theta();
    let mut theta = theta0.to_vec();
    let mut best = theta.clone();
    let mut best_norm = f64::INFINITY;
    for it in 0..opts.max_iter {
        let m = integrated_moments(mu, model, &theta)?;
        let norm = max_norm(&m);
        if norm < best_norm {
            best_norm = norm;
            best = theta.clone();
        }
        if norm <= opts.tol {
            return Ok(NewtonOutcome::Converged {
                theta,
                iterations: it,
            });
        }
        // forward-difference Jacobian, column per parameter
        let mut jac = vec![0.0; dt * dt];
        for j in 0..dt {
            let step = 1e-6f64.max(1e-6 * theta[j].abs());
            let mut bumped = theta.clone();
            bumped[j] += step;
            let mj = integrated_moments(mu, model, &bumped)?;
            for i in 0..dt {
                jac[i * dt + j] = (mj[i] - m[i]) / step;
            }
        }
        match solve_linear(jac, m) {
            Some(delta) => {
                for (t, d) in theta.iter_mut().zip(&delta) {
                    *t -= d;
                }
                if theta.iter().any(|v| !v.is_finite()) {
                    return Ok(NewtonOutcome::Failed { best });
                }
            }
            None => return Ok(NewtonOutcome::Failed { best }),
        }
    }
    Ok(NewtonOutcome::Failed { best })
}

/// Standard Nelder-Mead on an objective, used as the derivative-free
/// fallback. Deterministic given the starting point.
fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], max_iter: usize) -> (Vec<f64>, usize) {
    let n = x0.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    // a wide initial simplex so piecewise-constant objectives are not
    // trapped on a single plateau
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for j in 0..n {
        let mut v = x0.to_vec();
        v[j] += 0.5f64.max(0.5 * v[j].abs());
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let pvalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = permuted;
        values = pvalues;

        let spread = values[n] - values[0];
        if spread.abs() < 1e-24 {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|x| x[k]).sum::<f64>() / n as f64)
            .collect();
        let reflect: Vec<f64> = (0..n)
            .map(|k| centroid[k] + alpha * (centroid[k] - simplex[n][k]))
            .collect();
        let fr = f(&reflect);
        if fr < values[0] {
            let expand: Vec<f64> = (0..n)
                .map(|k| centroid[k] + gamma * (reflect[k] - centroid[k]))
                .collect();
            let fe = f(&expand);
            if fe < fr {
                simplex[n] = expand;
                values[n] = fe;
            } else {
                simplex[n] = reflect;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflect;
            values[n] = fr;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|k| centroid[k] + rho * (simplex[n][k] - centroid[k]))
                .collect();
            let fc = f(&contract);
            if fc < values[n] {
                simplex[n] = contract;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    for k in 0..n {
                        simplex[i][k] = simplex[0][k] + sigma * (simplex[i][k] - simplex[0][k]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    (simplex[best].clone(), iterations)
}

/// Full corrected estimation: corrected CDF, jump measure, GMM solve.
pub fn estimate_corrected(
    data: &ValidatedData,
    link: &LinkFunction,
    model: &MomentModel,
    opts: &EstimateOptions,
) -> Result<EstimateResult, Error> {
    let f = CorrectedCdf::build(data, link.clone())?;
    let mut grid = JumpGrid::build(data, opts.grid);
    if let Some(scale) = opts.h_scale {
        grid = grid.with_h_scaled(scale);
    }
    let mu = jump_masses(&f, &grid)?;
    let theta0 = match (&opts.theta0, model.is_linear()) {
        (Some(t0), _) => t0.clone(),
        // linear models solve directly; zeros are a placeholder
        (None, true) => vec![0.0; model.dim_theta()],
        (None, false) => estimate_naive(data, model, opts)?.theta_hat,
    };
    let mut result = solve_gmm(&mu, model, &theta0, &opts.solve)?;
    result.clamp_events = f.clamp_events();
    Ok(result)
}

/// GMM against the uniform empirical measure on the stayers, ignoring
/// attrition.
pub fn estimate_naive(
    data: &ValidatedData,
    model: &MomentModel,
    opts: &EstimateOptions,
) -> Result<EstimateResult, Error> {
    let mu = SignedMeasure::uniform(&data.stayer_joint_rows())?;
    let theta0 = opts
        .theta0
        .clone()
        .unwrap_or_else(|| vec![0.0; model.dim_theta()]);
    let mut result = solve_gmm(&mu, model, &theta0, &opts.solve)?;
    result.method = format!("naive-{}", result.method);
    Ok(result)
}

/// Moment engine over the full-product corrected measure.
///
/// Materializing the product of all coordinate walls is infeasible beyond
/// small samples, but any integrand touching at most two coordinates
/// marginalizes exactly to a two-coordinate wall measure
/// ([`measure::corrected_pair_measure`]). The built-in moment models are
/// sums of such terms, so their full-product estimates assemble from pair
/// integrals. Pair measures are cached across requests.
pub struct MarginalMoments<'a> {
    f: &'a CorrectedCdf,
    pairs: std::collections::HashMap<(usize, usize), SignedMeasure>,
    atoms: usize,
    negative_mass: f64,
    dropped_atoms: usize,
    dropped_mass: f64,
}

impl<'a> MarginalMoments<'a> {
    pub fn new(f: &'a CorrectedCdf) -> Self {
        MarginalMoments {
            f,
            pairs: std::collections::HashMap::new(),
            atoms: 0,
            negative_mass: 0.0,
            dropped_atoms: 0,
            dropped_mass: 0.0,
        }
    }

    /// Mass of the full-product measure: the transform at the upper limit.
    pub fn total_mass(&self) -> f64 {
        let n1 = self.f.n1();
        let n2 = self.f.n2();
        let nr = self.f.nr();
        self.f.corner_from_counts(n1, n2, nr, n2, n2)
    }

    fn pair(&mut self, i: usize, j: usize) -> Result<&SignedMeasure, MeasureError> {
        let key = (i.min(j), i.max(j));
        if !self.pairs.contains_key(&key) {
            let mu = crate::measure::corrected_pair_measure(self.f, key.0, key.1)?;
            self.atoms += mu.len();
            self.negative_mass += mu.negative_mass();
            self.dropped_atoms += mu.dropped_atoms();
            self.dropped_mass += mu.dropped_mass();
            self.pairs.insert(key, mu);
        }
        Ok(&self.pairs[&key])
    }

    /// Unnormalized integral of `g(z_i, z_j)` against the full-product
    /// measure.
    pub fn integrate_pair<G: Fn(f64, f64) -> f64>(
        &mut self,
        i: usize,
        j: usize,
        g: G,
    ) -> Result<f64, MeasureError> {
        assert_ne!(i, j, "pair integrals need two distinct coordinates");
        let swap = i > j;
        let mu = self.pair(i, j)?;
        let v = integrate(mu, 1, |z, out| {
            out[0] = if swap { g(z[1], z[0]) } else { g(z[0], z[1]) }
        })?;
        Ok(v[0])
    }

    /// Unnormalized integral of a single-coordinate function; the partner
    /// coordinate comes from the opposite block, where the tables are
    /// one-dimensional.
    pub fn integrate_single<G: Fn(f64) -> f64>(
        &mut self,
        i: usize,
        g: G,
    ) -> Result<f64, MeasureError> {
        let d = self.f.d();
        let partner = if i < d { d } else { 0 };
        self.integrate_pair(i, partner, |a, _| g(a))
    }

    fn diagnostics(&self, result: &mut EstimateResult) {
        result.total_mass = self.total_mass();
        result.negative_mass = self.negative_mass;
        result.grid_atoms = self.atoms;
        result.dropped_atoms = self.dropped_atoms;
        result.dropped_mass = self.dropped_mass;
        result.clamp_events = self.f.clamp_events();
    }
}

/// `E[Z_i * Z_j]` under the full-product corrected measure, as used for the
/// product-moment model on multivariate waves.
pub fn product_moment_marginal(
    f: &CorrectedCdf,
    i: usize,
    j: usize,
) -> Result<EstimateResult, Error> {
    let mut mm = MarginalMoments::new(f);
    let raw = mm.integrate_pair(i, j, |a, b| a * b)?;
    let mass = mm.total_mass();
    let theta = raw / mass;
    let mut result = EstimateResult {
        theta_hat: vec![theta],
        residual_norm: (raw - theta * mass).abs(),
        solver_iterations: 1,
        converged: true,
        method: "marginal-linear".into(),
        total_mass: mass,
        negative_mass: 0.0,
        clamp_events: 0,
        grid_atoms: 0,
        dropped_atoms: 0,
        dropped_mass: 0.0,
    };
    mm.diagnostics(&mut result);
    Ok(result)
}

/// Componentwise mean under the full-product corrected measure.
pub fn mean_marginal(f: &CorrectedCdf) -> Result<EstimateResult, Error> {
    let dim = 2 * f.d();
    let mut mm = MarginalMoments::new(f);
    let mass = mm.total_mass();
    let mut theta = Vec::with_capacity(dim);
    for i in 0..dim {
        theta.push(mm.integrate_single(i, |a| a)? / mass);
    }
    let mut result = EstimateResult {
        theta_hat: theta,
        residual_norm: 0.0,
        solver_iterations: 1,
        converged: true,
        method: "marginal-linear".into(),
        total_mass: mass,
        negative_mass: 0.0,
        clamp_events: 0,
        grid_atoms: 0,
        dropped_atoms: 0,
        dropped_mass: 0.0,
    };
    mm.diagnostics(&mut result);
    Ok(result)
}

/// Covariate and outcome positions within each period's block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TwowayFeSpec {
    pub x_indices: Vec<usize>,
    pub y_index: usize,
}

/// Two-period within estimator under a (possibly signed) measure on
/// `(z1, z2) = ((x1, y1), (x2, y2))` blocks.
///
/// Demeans each variable by its period mean and by the unit's two-period
/// average, then solves the demeaned normal equations. Atoms are summed in
/// canonical point order, so any permutation of the input atoms yields a bit
/// identical slope.
pub fn twoway_fe_estimand(
    mu: &SignedMeasure,
    spec: &TwowayFeSpec,
) -> Result<Vec<f64>, SolveError> {
    let dim = mu.dim();
    assert!(dim % 2 == 0, "atoms must stack two equal-length periods");
    let d = dim / 2;
    let k = spec.x_indices.len();
    for &xi in &spec.x_indices {
        assert!(xi < d, "x index {xi} out of range for period length {d}");
    }
    assert!(spec.y_index < d, "y index out of range");

    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_by(|&i, &j| mu.point(i).partial_cmp(mu.point(j)).unwrap());

    // period means under the measure
    let mut mass = Accumulator::new();
    let mut mx = vec![Accumulator::new(); 2 * k];
    let mut my = [Accumulator::new(), Accumulator::new()];
    for &i in &order {
        let (z, w) = (mu.point(i), mu.weight(i));
        mass.add(w);
        for (c, &xi) in spec.x_indices.iter().enumerate() {
            mx[c].add(w * z[xi]);
            mx[k + c].add(w * z[d + xi]);
        }
        my[0].add(w * z[spec.y_index]);
        my[1].add(w * z[d + spec.y_index]);
    }
    let total = mass.value();
    if total.abs() < 1e-12 {
        return Err(SolveError::SingularDesign);
    }
    let mean_x: Vec<f64> = mx.iter().map(|a| a.value() / total).collect();
    let mean_y = [my[0].value() / total, my[1].value() / total];

    // within transformation for two periods: subtract the period mean and
    // the unit average, add back the grand average of the period means
    let grand_x: Vec<f64> = (0..k).map(|c| 0.5 * (mean_x[c] + mean_x[k + c])).collect();
    let grand_y = 0.5 * (mean_y[0] + mean_y[1]);

    let mut xtx = vec![Accumulator::new(); k * k];
    let mut xty = vec![Accumulator::new(); k];
    let mut xdot = vec![0.0; k];
    for &i in &order {
        let (z, w) = (mu.point(i), mu.weight(i));
        for t in 0..2 {
            let off = t * d;
            for (c, &xi) in spec.x_indices.iter().enumerate() {
                let unit_avg = 0.5 * (z[xi] + z[d + xi]);
                xdot[c] = z[off + xi] - mean_x[t * k + c] - unit_avg + grand_x[c];
            }
            let unit_avg_y = 0.5 * (z[spec.y_index] + z[d + spec.y_index]);
            let ydot = z[off + spec.y_index] - mean_y[t] - unit_avg_y + grand_y;
            for r in 0..k {
                for c in 0..k {
                    xtx[r * k + c].add(w * xdot[r] * xdot[c]);
                }
                xty[r].add(w * xdot[r] * ydot);
            }
        }
    }
    let a: Vec<f64> = xtx.iter().map(|v| v.value()).collect();
    let b: Vec<f64> = xty.iter().map(|v| v.value()).collect();
    solve_linear(a, b).ok_or(SolveError::SingularDesign)
}

/// Two-period within slope under the full-product corrected measure,
/// assembled from first and second pair moments.
///
/// With two periods the within transformation reduces the normal equations
/// to centered cross-period differences: with `V[t][s]` the covariance of
/// the period-`t` and period-`s` covariates and `C[t][s]` their covariance
/// with the outcome, the slope solves
/// `(V11 + V22 - V12 - V21) theta = C11 + C22 - C12 - C21`.
pub fn twoway_fe_marginal(
    f: &CorrectedCdf,
    spec: &TwowayFeSpec,
) -> Result<EstimateResult, Error> {
    let d = f.d();
    let k = spec.x_indices.len();
    let mut mm = MarginalMoments::new(f);
    let mass = mm.total_mass();
    let coord_x = |t: usize, a: usize| t * d + spec.x_indices[a];
    let coord_y = |t: usize| t * d + spec.y_index;

    fn moment2(mm: &mut MarginalMoments, i: usize, j: usize) -> Result<f64, MeasureError> {
        if i == j {
            mm.integrate_single(i, |a| a * a)
        } else {
            mm.integrate_pair(i, j, |a, b| a * b)
        }
    }
    let mut xx = vec![0.0; 2 * k * 2 * k];
    for t in 0..2 {
        for s in 0..2 {
            for a in 0..k {
                for b in 0..k {
                    xx[(t * k + a) * 2 * k + (s * k + b)] =
                        moment2(&mut mm, coord_x(t, a), coord_x(s, b))? / mass;
                }
            }
        }
    }
    let mut xy = vec![0.0; 2 * k * 2];
    for t in 0..2 {
        for a in 0..k {
            for s in 0..2 {
                xy[(t * k + a) * 2 + s] = moment2(&mut mm, coord_x(t, a), coord_y(s))? / mass;
            }
        }
    }
    let mut mean_x = vec![0.0; 2 * k];
    for t in 0..2 {
        for a in 0..k {
            mean_x[t * k + a] = mm.integrate_single(coord_x(t, a), |v| v)? / mass;
        }
    }
    let mean_y = [
        mm.integrate_single(coord_y(0), |v| v)? / mass,
        mm.integrate_single(coord_y(1), |v| v)? / mass,
    ];

    let v = |t: usize, s: usize, a: usize, b: usize| {
        xx[(t * k + a) * 2 * k + (s * k + b)] - mean_x[t * k + a] * mean_x[s * k + b]
    };
    let c = |t: usize, s: usize, a: usize| xy[(t * k + a) * 2 + s] - mean_x[t * k + a] * mean_y[s];
    let mut a_mat = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for a in 0..k {
        for b in 0..k {
            a_mat[a * k + b] = v(0, 0, a, b) + v(1, 1, a, b) - v(0, 1, a, b) - v(1, 0, a, b);
        }
        rhs[a] = c(0, 0, a) + c(1, 1, a) - c(0, 1, a) - c(1, 0, a);
    }
    let theta = solve_linear(a_mat, rhs).ok_or(SolveError::SingularDesign)?;
    let mut result = EstimateResult {
        theta_hat: theta,
        residual_norm: 0.0,
        solver_iterations: 1,
        converged: true,
        method: "marginal-within".into(),
        total_mass: mass,
        negative_mass: 0.0,
        clamp_events: 0,
        grid_atoms: 0,
        dropped_atoms: 0,
        dropped_mass: 0.0,
    };
    mm.diagnostics(&mut result);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measure(atoms: &[(Vec<f64>, f64)]) -> SignedMeasure {
        SignedMeasure::from_weighted_rows(atoms).unwrap()
    }

    #[test]
    fn mean_model_weighted_mean() {
        let mu = measure(&[(vec![1.0], 0.5), (vec![3.0], 0.5)]);
        let r = solve_gmm(&mu, &MomentModel::mean(1), &[0.0], &SolveOptions::default()).unwrap();
        assert!((r.theta_hat[0] - 2.0).abs() < 1e-12);
        assert!(r.converged);
        assert_eq!(r.method, "linear");
        assert!(r.residual_norm <= 1e-10);
    }

    #[test]
    fn cond_prob_by_hand() {
        let mu = measure(&[
            (vec![1.0, 1.0], 0.1),
            (vec![1.0, 2.0], 0.3),
            (vec![2.0, 1.0], 0.2),
            (vec![2.0, 2.0], 0.4),
        ]);
        let model = MomentModel::cond_prob(1.0, 1.0);
        let r = solve_gmm(&mu, &model, &[0.0], &SolveOptions::default()).unwrap();
        assert!((r.theta_hat[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mean_model_with_signed_atoms() {
        let mu = measure(&[(vec![0.0], -0.1), (vec![1.0], 0.6), (vec![2.0], 0.5)]);
        let r = solve_gmm(&mu, &MomentModel::mean(1), &[0.0], &SolveOptions::default()).unwrap();
        assert!((r.theta_hat[0] - 1.6).abs() < 1e-12);
        assert!((r.negative_mass + 0.1).abs() < 1e-12);
    }

    #[test]
    fn newton_path_for_nonlinear_model() {
        // m(z, theta) = exp(theta) - z, root at ln(mean)
        let mu = measure(&[(vec![1.0], 0.5), (vec![3.0], 0.5)]);
        let model = MomentModel::new("log-mean", 1, |z, theta, out| {
            out[0] = theta[0].exp() - z[0];
        });
        let r = solve_gmm(&mu, &model, &[0.0], &SolveOptions::default()).unwrap();
        assert!(r.converged, "newton failed: {r:?}");
        assert_eq!(r.method, "newton");
        assert!((r.theta_hat[0] - 2.0f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn fallback_handles_flat_jacobian() {
        // median-style moment, piecewise constant in theta: the Jacobian is
        // identically zero, Newton gives up, Nelder-Mead localizes a root
        let mu = measure(&[
            (vec![0.0], 0.25),
            (vec![1.0], 0.25),
            (vec![2.0], 0.25),
            (vec![3.0], 0.25),
        ]);
        let model = MomentModel::new("median", 1, |z, theta, out| {
            out[0] = if z[0] <= theta[0] { 1.0 } else { 0.0 } - 0.5;
        });
        let opts = SolveOptions {
            tol: 1e-8,
            max_iter: 40,
        };
        // start on a non-root plateau
        let r = solve_gmm(&mu, &model, &[2.6], &opts).unwrap();
        assert_eq!(r.method, "newton+nelder-mead");
        assert!(r.converged, "{r:?}");
        assert!(r.theta_hat[0] >= 1.0 && r.theta_hat[0] < 2.0, "{r:?}");
    }

    #[test]
    fn singular_linear_system_is_an_error() {
        let mu = measure(&[(vec![1.0], 1.0)]);
        // B(z) = 0: no parameter sensitivity at all
        let model = MomentModel::new("degenerate", 1, |_, _, out| out[0] = 1.0)
            .with_linear(|_, out| out[0] = 1.0, |_, out| out[0] = 0.0);
        let err = solve_gmm(&mu, &model, &[0.0], &SolveOptions::default()).unwrap_err();
        assert!(matches!(err, SolveError::SingularSystem));
    }

    #[test]
    fn twoway_fe_recovers_noiseless_slope() {
        // y_it = alpha_i + f_t + 2 x_it over nine units, uniform weights
        let mut atoms = Vec::new();
        for i in 0..9 {
            let alpha = (i % 3) as f64;
            let x1 = (i / 3) as f64;
            let x2 = x1 + ((i % 2) as f64) + 0.5;
            let (f1, f2) = (0.25, 0.75);
            let y1 = alpha + f1 + 2.0 * x1;
            let y2 = alpha + f2 + 2.0 * x2;
            atoms.push((vec![x1, y1, x2, y2], 1.0 / 9.0));
        }
        let mu = measure(&atoms);
        let spec = TwowayFeSpec {
            x_indices: vec![0],
            y_index: 1,
        };
        let slope = twoway_fe_estimand(&mu, &spec).unwrap();
        assert!((slope[0] - 2.0).abs() < 1e-10, "slope = {slope:?}");
    }

    #[test]
    fn twoway_fe_constant_covariate_is_singular() {
        let atoms: Vec<(Vec<f64>, f64)> = (0..4)
            .map(|i| (vec![1.0, i as f64, 1.0, i as f64 + 0.5], 0.25))
            .collect();
        let mu = measure(&atoms);
        let spec = TwowayFeSpec {
            x_indices: vec![0],
            y_index: 1,
        };
        assert!(matches!(
            twoway_fe_estimand(&mu, &spec).unwrap_err(),
            SolveError::SingularDesign
        ));
    }

    #[test]
    fn twoway_fe_order_invariant_bitwise() {
        let base = vec![
            (vec![0.1, 1.0, 0.4, 2.0], 0.2),
            (vec![0.9, 2.2, 1.4, 3.1], 0.3),
            (vec![0.5, 1.5, 0.2, 1.9], 0.4),
            (vec![0.7, 2.0, 1.0, 2.5], 0.1),
        ];
        let spec = TwowayFeSpec {
            x_indices: vec![0],
            y_index: 1,
        };
        let a = twoway_fe_estimand(&measure(&base), &spec).unwrap();
        let mut permuted = base.clone();
        permuted.reverse();
        permuted.swap(0, 2);
        let b = twoway_fe_estimand(&measure(&permuted), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_solver_handles_permuted_pivots() {
        // needs row swaps to avoid a zero pivot
        let a = vec![0.0, 1.0, 1.0, 0.0];
        let x = solve_linear(a, vec![2.0, 3.0]).unwrap();
        assert_eq!(x, vec![3.0, 2.0]);
    }
}
