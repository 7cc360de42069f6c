//! Simulation designs: a discrete Markov process and a Gumbel-copula model
//! with continuous marginals, both with attrition acting through the
//! rectangle-conditional staying probability.
//!
//! The separability assumption fixes `P(W=1 | Z1 <= z1, Z2 <= z2)` as
//! `G(k1(z1) + k2(z2))`, a statement about rectangles. Unit-level simulation
//! needs a per-point Bernoulli probability, recovered here by differencing
//! `H(z) = G(k1 + k2) * F(z)` over the support cells: the stay probability on
//! a cell is the cell's H-increment divided by its F-probability. On the
//! discrete support this is exact, so the separability holds by construction
//! at every support rectangle. The continuous design does the same on a
//! rectangular lattice with the attrition index capped at the lattice box,
//! making the construction exact at lattice corners.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, PanelDataset, PanelRow, RefreshmentDataset};
use crate::link::LinkFunction;
use crate::seed::{substream, tags};
use crate::stats::Accumulator;

/// Internal master seed for deterministic quadrature streams. Calibration
/// and true-parameter quadrature reuse the same draws on every call, which
/// keeps those functions pure.
const QUADRATURE_SEED: u64 = 0x5eed_ab1e_0001;

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("transition matrix must be {m}x{m} with positive entries")]
    BadTransition { m: usize },
    #[error("transition row {row} sums to {sum}, must be 1 within 1e-12")]
    RowSum { row: usize, sum: f64 },
    #[error("copula parameter nu must be >= 1, got {nu}")]
    BadNu { nu: f64 },
    #[error("exponential means must be positive")]
    BadMean,
    #[error("support size m must be >= 1")]
    BadSupport,
    #[error(
        "pointwise stay probability {value} at cell {cell:?} lies outside [0,1]; \
         the attrition slopes are too large for a proper law"
    )]
    SpecInvalid { value: f64, cell: Vec<usize> },
    #[error("target attrition rate {target} must be inside (0,1)")]
    BadTarget { target: f64 },
    #[error("attrition target {target} unreachable within the validity region")]
    CalibrationUnreachable { target: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Built-in link selection for serialized specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkName {
    Logit,
    Exp,
}

impl LinkName {
    pub fn link(&self) -> LinkFunction {
        match self {
            LinkName::Logit => LinkFunction::logit(),
            LinkName::Exp => LinkFunction::exp(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LinkName::Logit => "logit",
            LinkName::Exp => "exp",
        }
    }
}

/// Discrete Markov design: `Z1` uniform on `{1..m}`, `Z2` drawn from a
/// row-stochastic transition matrix with positive entries, attrition
/// components linear in the outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DiscreteDgp {
    pub m: usize,
    pub transition: Vec<Vec<f64>>,
    pub c1: f64,
    pub c2: f64,
    #[serde(default)]
    pub intercept: f64,
    pub link: LinkName,
}

/// Transition matrix with the given diagonal and the remaining row mass
/// spread uniformly off the diagonal. Strictly positive for `diag` in (0,1).
pub fn diagonal_transition(m: usize, diag: f64) -> Vec<Vec<f64>> {
    if m == 1 {
        return vec![vec![1.0]];
    }
    let off = (1.0 - diag) / (m - 1) as f64;
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { diag } else { off }).collect())
        .collect()
}

impl DiscreteDgp {
    pub fn validate(&self) -> Result<(), DgpError> {
        if self.m == 0 {
            return Err(DgpError::BadSupport);
        }
        if self.transition.len() != self.m {
            return Err(DgpError::BadTransition { m: self.m });
        }
        for (row, r) in self.transition.iter().enumerate() {
            if r.len() != self.m || r.iter().any(|&p| !(p > 0.0)) {
                return Err(DgpError::BadTransition { m: self.m });
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(DgpError::RowSum { row, sum });
            }
        }
        Ok(())
    }

    fn k1(&self, z1: f64) -> f64 {
        self.intercept + self.c1 * z1
    }

    fn k2(&self, z2: f64) -> f64 {
        self.c2 * z2
    }

    /// Cell probabilities `P(Z1 = i+1, Z2 = j+1)`.
    fn joint(&self) -> Vec<f64> {
        let m = self.m;
        let mut p = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                p[i * m + j] = self.transition[i][j] / m as f64;
            }
        }
        p
    }

    /// Joint CDF on the support, with a zero guard row and column:
    /// `cdf[i][j] = P(Z1 <= i, Z2 <= j)` for i, j in 0..=m.
    fn joint_cdf(&self) -> Vec<f64> {
        let m = self.m;
        let p = self.joint();
        let w = m + 1;
        let mut cdf = vec![0.0; w * w];
        for i in 1..=m {
            for j in 1..=m {
                cdf[i * w + j] =
                    p[(i - 1) * m + (j - 1)] + cdf[(i - 1) * w + j] + cdf[i * w + (j - 1)]
                        - cdf[(i - 1) * w + (j - 1)];
            }
        }
        cdf
    }

    /// Per-cell staying probabilities recovered by differencing
    /// `H = G(k1 + k2) * F` over the support cells. Errors when a cell value
    /// leaves `[0,1]` by more than 1e-9; values inside the noise band are
    /// clipped.
    pub fn pointwise_stay_prob(&self) -> Result<Vec<f64>, DgpError> {
        self.validate()?;
        let m = self.m;
        let link = self.link.link();
        let w = m + 1;
        let cdf = self.joint_cdf();
        let h = |i: usize, j: usize| -> f64 {
            if i == 0 || j == 0 {
                return 0.0;
            }
            link.forward(self.k1(i as f64) + self.k2(j as f64)) * cdf[i * w + j]
        };
        let p = self.joint();
        let mut ps = vec![0.0; m * m];
        for i in 1..=m {
            for j in 1..=m {
                let dh = h(i, j) - h(i - 1, j) - h(i, j - 1) + h(i - 1, j - 1);
                let prob = dh / p[(i - 1) * m + (j - 1)];
                if !(-1e-9..=1.0 + 1e-9).contains(&prob) {
                    return Err(DgpError::SpecInvalid {
                        value: prob,
                        cell: vec![i, j],
                    });
                }
                ps[(i - 1) * m + (j - 1)] = prob.clamp(0.0, 1.0);
            }
        }
        Ok(ps)
    }

    /// Exact overall staying rate implied by the pointwise law.
    pub fn implied_stay_rate(&self) -> Result<f64, DgpError> {
        let ps = self.pointwise_stay_prob()?;
        let p = self.joint();
        let mut acc = Accumulator::new();
        for (prob, mass) in ps.iter().zip(&p) {
            acc.add(prob * mass);
        }
        Ok(acc.value())
    }

    /// Staying rate used during calibration: same differencing with values
    /// clipped instead of rejected, so bisection can traverse intercepts
    /// whose law is not yet proper.
    fn clipped_stay_rate(&self) -> f64 {
        let m = self.m;
        let link = self.link.link();
        let w = m + 1;
        let cdf = self.joint_cdf();
        let h = |i: usize, j: usize| -> f64 {
            if i == 0 || j == 0 {
                return 0.0;
            }
            link.forward(self.k1(i as f64) + self.k2(j as f64)) * cdf[i * w + j]
        };
        let p = self.joint();
        let mut acc = Accumulator::new();
        for i in 1..=m {
            for j in 1..=m {
                let dh = h(i, j) - h(i - 1, j) - h(i, j - 1) + h(i - 1, j - 1);
                let prob = (dh / p[(i - 1) * m + (j - 1)]).clamp(0.0, 1.0);
                acc.add(prob * p[(i - 1) * m + (j - 1)]);
            }
        }
        acc.value()
    }

    /// The target parameter `P(Z2 = 1 | Z1 = 1)`, read off the matrix.
    pub fn true_theta(&self) -> f64 {
        self.transition[0][0]
    }
}

/// Gumbel copula CDF `exp(-((-ln u)^nu + (-ln v)^nu)^(1/nu))` with the
/// boundary convention `C(u, 0) = C(0, v) = 0`.
pub fn gumbel_copula_cdf(u: f64, v: f64, nu: f64) -> Result<f64, DgpError> {
    if nu < 1.0 {
        return Err(DgpError::BadNu { nu });
    }
    if u <= 0.0 || v <= 0.0 {
        return Ok(0.0);
    }
    if nu == 1.0 {
        return Ok(u * v);
    }
    let a = (-u.ln()).powf(nu);
    let b = (-v.ln()).powf(nu);
    Ok((-(a + b).powf(1.0 / nu)).exp())
}

/// One-sided positive stable draw with Laplace transform `exp(-t^alpha)`,
/// via Kanter's representation: `(A(theta)/W)^((1-alpha)/alpha)` with
/// `theta ~ U(0, pi)` and `W ~ Exp(1)`.
fn sample_positive_stable<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    let theta = std::f64::consts::PI * rng.random::<f64>();
    let w: f64 = sample_exp(rng).max(1e-300);
    let a = (alpha * theta).sin().powf(alpha / (1.0 - alpha)) * ((1.0 - alpha) * theta).sin()
        / theta.sin().powf(1.0 / (1.0 - alpha));
    (a / w).powf((1.0 - alpha) / alpha)
}

#[inline]
fn sample_exp<R: Rng>(rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

/// Draw a pair with uniform marginals and Gumbel dependence through the
/// Archimedean frailty construction. Kendall's tau is `1 - 1/nu`.
pub fn sample_copula_pair<R: Rng>(nu: f64, rng: &mut R) -> (f64, f64) {
    assert!(nu >= 1.0, "nu must be >= 1");
    if nu == 1.0 {
        return (rng.random(), rng.random());
    }
    let frailty = sample_positive_stable(1.0 / nu, rng);
    let e1 = sample_exp(rng);
    let e2 = sample_exp(rng);
    let u = (-(e1 / frailty).powf(1.0 / nu)).exp();
    let v = (-(e2 / frailty).powf(1.0 / nu)).exp();
    (u, v)
}

fn default_lattice_cells() -> usize {
    200
}

fn default_lattice_quantile() -> f64 {
    0.9999
}

/// Continuous design. The joint target CDF factors as a Gumbel copula in
/// `(z11, z21)` (both uniform) times independent exponential CDFs for `z12`
/// and `z22`. The attrition components act through bounded scores of the
/// exponential coordinates,
///
/// ```text
/// k1(z1) = intercept + c1 * Exp(z12; mu1)
/// k2(z2) =             c2 * Exp(z22; mu2)
/// ```
///
/// Rectangle-level separability pins down how much attrition this joint
/// distribution can carry. Components that vary with the copula coordinates
/// (such as the raw products `c * z11 * z12`) make the differenced
/// `G(k1+k2) * F` non-dominated by `F` near the copula's discordant corners,
/// where the Gumbel density vanishes while its CDF blocks do not, so no
/// proper per-cell law exists at any useful slope. Components in the
/// exponential coordinates factor out of the copula block entirely, and
/// their CDF scores reduce validity to a two-dimensional problem on uniform
/// scores that holds for moderate slopes. The cost is that the attrition is
/// independent of `(z11, z21)`, so the selection does not bias the target
/// moment; the corrected and naive estimators differ in noise, not center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CopulaDgp {
    pub nu: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub c1: f64,
    pub c2: f64,
    #[serde(default)]
    pub intercept: f64,
    pub link: LinkName,
    #[serde(default = "default_lattice_cells")]
    pub lattice_cells: usize,
    #[serde(default = "default_lattice_quantile")]
    pub lattice_quantile: f64,
}

/// Axis layout: 0 = z11 (uniform), 1 = z12 (exp mu1), 2 = z21 (uniform),
/// 3 = z22 (exp mu2).
impl CopulaDgp {
    pub fn validate(&self) -> Result<(), DgpError> {
        if self.nu < 1.0 {
            return Err(DgpError::BadNu { nu: self.nu });
        }
        if !(self.mu1 > 0.0 && self.mu2 > 0.0) {
            return Err(DgpError::BadMean);
        }
        if self.lattice_cells < 2 || !(0.0 < self.lattice_quantile && self.lattice_quantile < 1.0)
        {
            return Err(DgpError::BadSupport);
        }
        Ok(())
    }

    /// Upper edge of the lattice box for each axis.
    fn box_top(&self) -> [f64; 4] {
        let q = self.lattice_quantile;
        [
            q,
            -self.mu1 * (1.0 - q).ln(),
            q,
            -self.mu2 * (1.0 - q).ln(),
        ]
    }

    /// Finite lattice edges on one axis; the final cell extends to infinity.
    fn edges(&self, axis: usize) -> Vec<f64> {
        let top = self.box_top()[axis];
        let n = self.lattice_cells;
        (0..n).map(|i| top * i as f64 / (n - 1) as f64).collect()
    }

    fn exp_cdf(x: f64, mu: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x.is_infinite() {
            1.0
        } else {
            -(-x / mu).exp_m1()
        }
    }

    /// Joint CDF of `(z11, z12, z21, z22)`.
    pub fn joint_cdf(&self, z: &[f64; 4]) -> f64 {
        let u = z[0].min(1.0);
        let v = z[2].min(1.0);
        if u <= 0.0 || v <= 0.0 {
            return 0.0;
        }
        let cop = gumbel_copula_cdf(u, v, self.nu).expect("validated nu");
        cop * Self::exp_cdf(z[1], self.mu1) * Self::exp_cdf(z[3], self.mu2)
    }

    /// Attrition index: bounded CDF scores of the exponential coordinates.
    fn index_at(&self, z: &[f64; 4]) -> f64 {
        self.intercept
            + self.c1 * Self::exp_cdf(z[1], self.mu1)
            + self.c2 * Self::exp_cdf(z[3], self.mu2)
    }

    /// Cell index of a point on each axis.
    fn cell_of(&self, edges: &[Vec<f64>; 4], z: &[f64; 4]) -> [usize; 4] {
        let mut cell = [0usize; 4];
        for (axis, c) in cell.iter_mut().enumerate() {
            let e = &edges[axis];
            *c = e.partition_point(|&v| v <= z[axis]).saturating_sub(1);
        }
        cell
    }

    fn cell_bounds(&self, edges: &[Vec<f64>; 4], cell: &[usize; 4]) -> ([f64; 4], [f64; 4]) {
        let mut lo = [0.0; 4];
        let mut hi = [0.0; 4];
        for axis in 0..4 {
            let e = &edges[axis];
            lo[axis] = e[cell[axis]];
            hi[axis] = if cell[axis] + 1 < e.len() {
                e[cell[axis] + 1]
            } else {
                f64::INFINITY
            };
        }
        (lo, hi)
    }

    /// Staying probability of the cell containing `z`: the cell's
    /// H-increment over its F-probability, clipped into `[0, 1]`.
    ///
    /// Unlike the discrete support, a smooth density gets arbitrarily small
    /// in the copula's discordant corners while the CDF blocks do not, so
    /// for any nonzero slope a few low-mass cells yield ratios outside
    /// `[0, 1]`. Those cells are clipped here; whether their total mass is
    /// small enough for the law to count as proper is the job of
    /// [`CopulaDgp::attrition_validity`], which calibration enforces.
    pub fn stay_prob_at(&self, z: &[f64; 4]) -> f64 {
        let edges = [self.edges(0), self.edges(1), self.edges(2), self.edges(3)];
        self.stay_prob_in_cell(&edges, &self.cell_of(&edges, z)).0
    }

    /// Clipped cell probability and the raw differencing ratio.
    fn stay_prob_in_cell(&self, edges: &[Vec<f64>; 4], cell: &[usize; 4]) -> (f64, f64) {
        let (lo, hi) = self.cell_bounds(edges, cell);
        let link = self.link.link();

        // factorized F-increment: copula block times exponential differences,
        // no 16-corner cancellation
        let cop = |x: f64, u: f64| {
            gumbel_copula_cdf(x.clamp(0.0, 1.0), u.clamp(0.0, 1.0), self.nu)
                .expect("validated nu")
        };
        let d_cop = cop(hi[0], hi[2]) - cop(lo[0], hi[2]) - cop(hi[0], lo[2]) + cop(lo[0], lo[2]);
        let d_e1 = Self::exp_cdf(hi[1], self.mu1) - Self::exp_cdf(lo[1], self.mu1);
        let d_e2 = Self::exp_cdf(hi[3], self.mu2) - Self::exp_cdf(lo[3], self.mu2);
        let df = d_cop * d_e1 * d_e2;

        // H-increment centered at the base corner's link value
        let g_base = link.forward(self.index_at(&lo));
        let mut dh_centered = 0.0;
        let mut corner = [0.0; 4];
        for pattern in 0..16usize {
            for axis in 0..4 {
                corner[axis] = if pattern >> axis & 1 == 1 {
                    lo[axis]
                } else {
                    hi[axis]
                };
            }
            let term = (link.forward(self.index_at(&corner)) - g_base) * self.joint_cdf(&corner);
            if pattern.count_ones() % 2 == 0 {
                dh_centered += term;
            } else {
                dh_centered -= term;
            }
        }
        let dh = dh_centered + g_base * df;
        let raw = dh / df;
        (raw.clamp(0.0, 1.0), raw)
    }

    /// Estimate by quadrature the F-mass of cells whose differencing ratio
    /// leaves `[0, 1]`, together with the worst offender. The construction
    /// distorts the separability identity by at most this mass.
    pub fn attrition_validity(&self, draws: usize) -> AttritionValidity {
        let edges = [self.edges(0), self.edges(1), self.edges(2), self.edges(3)];
        let mut rng = substream(QUADRATURE_SEED, tags::QUADRATURE, 3);
        let mut violating = 0usize;
        let mut worst_value = f64::NAN;
        let mut worst_excess = 0.0;
        let mut worst_cell = Vec::new();
        for _ in 0..draws {
            let z = self.draw_joint(&mut rng);
            let cell = self.cell_of(&edges, &z);
            let (_, raw) = self.stay_prob_in_cell(&edges, &cell);
            if !(-1e-9..=1.0 + 1e-9).contains(&raw) {
                violating += 1;
                let excess = (raw - 1.0).max(-raw);
                if excess > worst_excess {
                    worst_excess = excess;
                    worst_value = raw;
                    worst_cell = cell.to_vec();
                }
            }
        }
        AttritionValidity {
            violating_mass: violating as f64 / draws as f64,
            worst_value,
            worst_cell,
        }
    }

    /// Staying rate implied by the construction in closed form: the cell
    /// increments telescope to `G` at the index supremum.
    pub fn closed_form_stay_rate(&self) -> f64 {
        self.link
            .link()
            .forward(self.intercept + self.c1 + self.c2)
    }

    /// Staying rate by quadrature over a fixed internal stream: the average
    /// pointwise staying probability across `draws` joint draws.
    pub fn implied_stay_rate(&self, draws: usize) -> f64 {
        let edges = [self.edges(0), self.edges(1), self.edges(2), self.edges(3)];
        let mut rng = substream(QUADRATURE_SEED, tags::QUADRATURE, 1);
        let mut acc = Accumulator::new();
        for _ in 0..draws {
            let z = self.draw_joint(&mut rng);
            let cell = self.cell_of(&edges, &z);
            acc.add(self.stay_prob_in_cell(&edges, &cell).0);
        }
        acc.value() / draws as f64
    }

    fn draw_joint<R: Rng>(&self, rng: &mut R) -> [f64; 4] {
        let (u, v) = sample_copula_pair(self.nu, rng);
        let z12 = -self.mu1 * (1.0 - rng.random::<f64>()).ln();
        let z22 = -self.mu2 * (1.0 - rng.random::<f64>()).ln();
        [u, z12, v, z22]
    }

    /// Target parameter `E[Z11 * Z21]` by low-discrepancy quadrature of the
    /// survival identity `E[UV] = integral of (1 - u - v + C(u, v))`, with a
    /// batch-means standard error.
    pub fn true_theta(&self) -> (f64, f64) {
        // additive Kronecker sequence (R2 rotation constants)
        const A1: f64 = 0.754_877_666_246_692_7;
        const A2: f64 = 0.569_840_290_998_053_2;
        let total = 2_000_000usize;
        let batches = 200;
        let per = total / batches;
        let mut batch_means = Vec::with_capacity(batches);
        let (mut x, mut y) = (0.5, 0.5);
        for _ in 0..batches {
            let mut acc = Accumulator::new();
            for _ in 0..per {
                x += A1;
                if x >= 1.0 {
                    x -= 1.0;
                }
                y += A2;
                if y >= 1.0 {
                    y -= 1.0;
                }
                let c = gumbel_copula_cdf(x, y, self.nu).expect("validated nu");
                acc.add(1.0 - x - y + c);
            }
            batch_means.push(acc.value() / per as f64);
        }
        let mean = crate::stats::mean(&batch_means);
        let se = crate::stats::sample_sd(&batch_means) / (batches as f64).sqrt();
        (mean, se)
    }
}

/// Share of F-mass on cells whose differencing ratio leaves `[0, 1]`, and
/// the worst offending cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AttritionValidity {
    pub violating_mass: f64,
    pub worst_value: f64,
    pub worst_cell: Vec<usize>,
}

/// Largest violating F-mass accepted when validating a continuous design.
pub const VALIDITY_MASS_BUDGET: f64 = 2e-3;

/// A simulation design plus its attrition parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DgpSpec {
    Discrete(DiscreteDgp),
    Copula(CopulaDgp),
}

impl DgpSpec {
    pub fn validate(&self) -> Result<(), DgpError> {
        match self {
            DgpSpec::Discrete(d) => d.validate(),
            DgpSpec::Copula(c) => c.validate(),
        }
    }

    pub fn link(&self) -> LinkFunction {
        match self {
            DgpSpec::Discrete(d) => d.link.link(),
            DgpSpec::Copula(c) => c.link.link(),
        }
    }

    pub fn intercept(&self) -> f64 {
        match self {
            DgpSpec::Discrete(d) => d.intercept,
            DgpSpec::Copula(c) => c.intercept,
        }
    }

    pub fn with_intercept(&self, intercept: f64) -> Self {
        let mut spec = self.clone();
        match &mut spec {
            DgpSpec::Discrete(d) => d.intercept = intercept,
            DgpSpec::Copula(c) => c.intercept = intercept,
        }
        spec
    }

    /// True parameter value; the second component is the quadrature standard
    /// error (zero for the discrete design, where the value is exact).
    pub fn true_theta(&self) -> (Vec<f64>, f64) {
        match self {
            DgpSpec::Discrete(d) => (vec![d.true_theta()], 0.0),
            DgpSpec::Copula(c) => {
                let (v, se) = c.true_theta();
                (vec![v], se)
            }
        }
    }

    /// Staying rate used by calibration (clipped; see the per-design docs).
    fn calibration_stay_rate(&self, draws: usize) -> f64 {
        match self {
            DgpSpec::Discrete(d) => d.clipped_stay_rate(),
            DgpSpec::Copula(c) => c.implied_stay_rate(draws),
        }
    }
}

/// Default quadrature draws for continuous-design calibration.
pub const CALIBRATION_DRAWS: usize = 1_000_000;

/// Find the intercept that hits the target attrition rate by bisection.
///
/// The implied rate is exact for the discrete design and a fixed-stream
/// quadrature average for the continuous one. The calibrated spec is
/// validated before being returned.
pub fn calibrate_attrition(
    spec: &DgpSpec,
    target_attrition: f64,
    tol: f64,
) -> Result<DgpSpec, DgpError> {
    calibrate_attrition_with(spec, target_attrition, tol, CALIBRATION_DRAWS)
}

/// Calibration with an explicit quadrature budget.
pub fn calibrate_attrition_with(
    spec: &DgpSpec,
    target_attrition: f64,
    tol: f64,
    draws: usize,
) -> Result<DgpSpec, DgpError> {
    if !(0.0 < target_attrition && target_attrition < 1.0) {
        return Err(DgpError::BadTarget {
            target: target_attrition,
        });
    }
    spec.validate()?;
    let target_stay = 1.0 - target_attrition;
    let rate = |a: f64| spec.with_intercept(a).calibration_stay_rate(draws) - target_stay;

    let (mut lo, mut hi) = (-80.0, 80.0);
    let (f_lo, f_hi) = (rate(lo), rate(hi));
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(DgpError::CalibrationUnreachable {
            target: target_attrition,
        });
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let f_mid = rate(mid);
        if f_mid.abs() <= tol {
            break;
        }
        if f_mid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let calibrated = spec.with_intercept(mid);
    // validity check at the solution: exact for the discrete design, a
    // violating-mass budget for the continuous one
    match &calibrated {
        DgpSpec::Discrete(d) => {
            d.pointwise_stay_prob()?;
        }
        DgpSpec::Copula(c) => {
            let validity = c.attrition_validity(draws.min(200_000).max(10_000));
            if validity.violating_mass > VALIDITY_MASS_BUDGET {
                return Err(DgpError::SpecInvalid {
                    value: validity.worst_value,
                    cell: validity.worst_cell,
                });
            }
        }
    }
    Ok(calibrated)
}

/// One simulated study: panel with attrition, refreshment sample, truth.
#[derive(Debug, Clone)]
pub struct SimulatedStudy {
    pub panel: PanelDataset,
    pub refreshment: RefreshmentDataset,
    pub theta_true: Vec<f64>,
    pub realized_attrition: f64,
}

/// Simulate a study of `n1` panel units and `nr` refreshment units.
///
/// Unit `i` draws from `substream(seed, SIM_PANEL, i)` and refreshment unit
/// `j` from `substream(seed, SIM_REFRESH, j)`, so output is reproducible and
/// independent of evaluation order.
pub fn simulate(
    spec: &DgpSpec,
    n1: usize,
    nr: usize,
    seed: u64,
) -> Result<SimulatedStudy, DgpError> {
    spec.validate()?;
    let (theta_true, _) = spec.true_theta();
    let rows = match spec {
        DgpSpec::Discrete(d) => {
            let ps = d.pointwise_stay_prob()?;
            (0..n1)
                .map(|i| {
                    let mut rng = substream(seed, tags::SIM_PANEL, i as u64);
                    let (z1, z2) = discrete_unit(d, &mut rng);
                    let stay = rng.random::<f64>() < ps[(z1 - 1) * d.m + (z2 - 1)];
                    PanelRow {
                        id: format!("u{i}"),
                        z1: vec![z1 as f64],
                        w: stay,
                        z2: stay.then(|| vec![z2 as f64]),
                    }
                })
                .collect::<Vec<_>>()
        }
        DgpSpec::Copula(c) => {
            let edges = [c.edges(0), c.edges(1), c.edges(2), c.edges(3)];
            (0..n1)
                .map(|i| {
                    let mut rng = substream(seed, tags::SIM_PANEL, i as u64);
                    let z = c.draw_joint(&mut rng);
                    let p = c.stay_prob_in_cell(&edges, &c.cell_of(&edges, &z)).0;
                    let stay = rng.random::<f64>() < p;
                    PanelRow {
                        id: format!("u{i}"),
                        z1: vec![z[0], z[1]],
                        w: stay,
                        z2: stay.then(|| vec![z[2], z[3]]),
                    }
                })
                .collect::<Vec<_>>()
        }
    };
    let refreshment: Vec<Vec<f64>> = match spec {
        DgpSpec::Discrete(d) => (0..nr)
            .map(|j| {
                let mut rng = substream(seed, tags::SIM_REFRESH, j as u64);
                let (_, z2) = discrete_unit(d, &mut rng);
                vec![z2 as f64]
            })
            .collect(),
        DgpSpec::Copula(c) => (0..nr)
            .map(|j| {
                // the unconditional second wave: uniform and exponential
                // coordinates, independent
                let mut rng = substream(seed, tags::SIM_REFRESH, j as u64);
                let z21: f64 = rng.random();
                let z22 = -c.mu2 * (1.0 - rng.random::<f64>()).ln();
                vec![z21, z22]
            })
            .collect(),
    };
    let panel = PanelDataset::new(rows)?;
    let refreshment = RefreshmentDataset::new(refreshment)?;
    let realized_attrition = 1.0 - panel.n2() as f64 / panel.n1() as f64;
    Ok(SimulatedStudy {
        panel,
        refreshment,
        theta_true,
        realized_attrition,
    })
}

/// Draw `(z1, z2)` on `{1..m}^2`: uniform first wave, transition row second.
fn discrete_unit<R: Rng>(d: &DiscreteDgp, rng: &mut R) -> (usize, usize) {
    let z1 = rng.random_range(0..d.m) + 1;
    let u: f64 = rng.random();
    let row = &d.transition[z1 - 1];
    let mut cum = 0.0;
    for (j, &p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return (z1, j + 1);
        }
    }
    (z1, d.m)
}
