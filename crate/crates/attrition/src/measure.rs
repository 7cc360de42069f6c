//! The discontinuity grid of the corrected CDF, its signed jump measure, and
//! integration against that measure.
//!
//! The corrected CDF is piecewise constant. Its jump mass at a grid point is
//! the alternating sum of the CDF over the `2^{2d}` corners of a small box
//! around the point, with half-gap offsets `h_k` on each coordinate. Any
//! offset below the minimal coordinate gap yields the same masses, so `h` is
//! not a tuning parameter; the implementation uses half the minimal gap.
//!
//! Weights can be negative in finite samples. They are kept that way in the
//! estimation path; trimming to a probability measure exists only for the
//! sampling variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ValidatedData;
use crate::ecdf::Ecdf;
use crate::link::LinkKind;
use crate::stats::Accumulator;
use crate::transform::CorrectedCdf;

/// Atoms with absolute weight below this are not materialized.
pub const WEIGHT_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("grid dimension {grid_d} does not match data dimension {expected}")]
    DimensionMismatch { grid_d: usize, expected: usize },
    #[error("{block} atom {index} lies outside the corresponding observed support")]
    UnsupportedAtom { block: &'static str, index: usize },
    #[error("integrand returned a non-finite value at atom {point:?}")]
    NonFiniteIntegrand { point: Vec<f64> },
    #[error("all weights are nonpositive; nothing to normalize")]
    AllWeightsNonpositive,
    #[error("atom has dimension {got}, expected {expected}")]
    AtomDimension { got: usize, expected: usize },
}

/// How the grid blocks are formed from the observed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridStrategy {
    /// Observed tuples: first-wave `z1` points crossed with the union of
    /// stayer and refreshment `z2` points. Matches the estimator definition.
    #[default]
    PaperTuples,
    /// Per-coordinate Cartesian products within each block. For `d > 1` the
    /// corrected CDF can carry mass off the observed tuples; this strategy
    /// exists to audit that, at combinatorial cost. Identical to
    /// `PaperTuples` when `d = 1`.
    FullProduct,
}

/// Discontinuity grid: `z1` atoms crossed with `z2` atoms, plus per-axis
/// half-gap offsets.
#[derive(Debug, Clone)]
pub struct JumpGrid {
    d: usize,
    n_z1: usize,
    n_z2: usize,
    z1: Vec<f64>,
    z2: Vec<f64>,
    h: Vec<f64>,
    strategy: GridStrategy,
    dropped_z1: usize,
    dropped_z2: usize,
}

impl JumpGrid {
    /// Build the grid for a dataset.
    ///
    /// `z2` atoms below the refreshment support (and, under `FullProduct`,
    /// `z1` product atoms below the first-wave support) are excluded, since
    /// the transform divides by the corresponding marginal CDF there. The
    /// offsets `h` are computed from the full coordinate wall sets before any
    /// exclusion, so differencing still separates every discontinuity.
    pub fn build(data: &ValidatedData, strategy: GridStrategy) -> Self {
        let d = data.d();
        let panel = data.panel();
        let z1_rows: Vec<&[f64]> = panel.rows().iter().map(|r| r.z1.as_slice()).collect();
        let mut z2_rows: Vec<&[f64]> = panel
            .stayers()
            .map(|r| r.z2.as_ref().expect("stayer has z2").as_slice())
            .collect();
        z2_rows.extend(data.refreshment().rows().iter().map(|r| r.as_slice()));

        let mut h = Vec::with_capacity(2 * d);
        for axis in 0..d {
            h.push(half_min_gap(z1_rows.iter().map(|r| r[axis])));
        }
        for axis in 0..d {
            h.push(half_min_gap(z2_rows.iter().map(|r| r[axis])));
        }

        let (z1_atoms, z2_atoms) = match strategy {
            GridStrategy::PaperTuples => (
                sorted_dedup_rows(&z1_rows, d),
                sorted_dedup_rows(&z2_rows, d),
            ),
            GridStrategy::FullProduct => (axis_product(&z1_rows, d), axis_product(&z2_rows, d)),
        };

        // keep only atoms with positive marginal CDF
        let f1 = Ecdf::from_rows(&z1_rows).expect("validated data is nonempty");
        let refresh: Vec<&[f64]> = data
            .refreshment()
            .rows()
            .iter()
            .map(|r| r.as_slice())
            .collect();
        let f2 = Ecdf::from_rows(&refresh).expect("refreshment is nonempty");
        let (z1_kept, dropped_z1) = filter_supported(z1_atoms, d, &f1);
        let (z2_kept, dropped_z2) = filter_supported(z2_atoms, d, &f2);

        JumpGrid {
            d,
            n_z1: z1_kept.len() / d,
            n_z2: z2_kept.len() / d,
            z1: z1_kept,
            z2: z2_kept,
            h,
            strategy,
            dropped_z1,
            dropped_z2,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_z1(&self) -> usize {
        self.n_z1
    }

    pub fn n_z2(&self) -> usize {
        self.n_z2
    }

    /// Number of grid tuples.
    pub fn len(&self) -> usize {
        self.n_z1 * self.n_z2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z1_atom(&self, i: usize) -> &[f64] {
        &self.z1[i * self.d..(i + 1) * self.d]
    }

    pub fn z2_atom(&self, j: usize) -> &[f64] {
        &self.z2[j * self.d..(j + 1) * self.d]
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn strategy(&self) -> GridStrategy {
        self.strategy
    }

    pub fn dropped_z1_atoms(&self) -> usize {
        self.dropped_z1
    }

    pub fn dropped_z2_atoms(&self) -> usize {
        self.dropped_z2
    }

    /// Same grid with every offset multiplied by `factor` in `(0, 1]`.
    /// Any admissible offset gives identical jump masses.
    pub fn with_h_scaled(&self, factor: f64) -> Self {
        assert!(factor > 0.0 && factor <= 1.0, "h scale must be in (0, 1]");
        let mut g = self.clone();
        for h in &mut g.h {
            *h *= factor;
        }
        g
    }

    /// Componentwise maximum over grid tuples.
    pub fn top_corner(&self) -> Vec<f64> {
        let mut top = vec![f64::NEG_INFINITY; 2 * self.d];
        for i in 0..self.n_z1 {
            for (t, v) in top[..self.d].iter_mut().zip(self.z1_atom(i)) {
                if *v > *t {
                    *t = *v;
                }
            }
        }
        for j in 0..self.n_z2 {
            for (t, v) in top[self.d..].iter_mut().zip(self.z2_atom(j)) {
                if *v > *t {
                    *t = *v;
                }
            }
        }
        top
    }
}

/// Half the minimal nonzero gap between observed values, or 1 for a
/// degenerate axis where no interior differencing happens.
fn half_min_gap(values: impl Iterator<Item = f64>) -> f64 {
    let mut vals: Vec<f64> = values.collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    let min_gap = vals
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if min_gap.is_finite() {
        min_gap / 2.0
    } else {
        1.0
    }
}

fn sorted_dedup_rows(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[a].partial_cmp(rows[b]).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(rows.len() * d);
    for &i in &idx {
        if out.is_empty() || out[out.len() - d..] != *rows[i] {
            out.extend_from_slice(rows[i]);
        }
    }
    out
}

/// Cartesian product of the per-axis supports, in lexicographic order.
fn axis_product(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let supports: Vec<Vec<f64>> = (0..d)
        .map(|axis| {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[axis]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            vals
        })
        .collect();
    let total: usize = supports.iter().map(|s| s.len()).product();
    let mut out = Vec::with_capacity(total * d);
    let mut counter = vec![0usize; d];
    for _ in 0..total {
        for (axis, &c) in counter.iter().enumerate() {
            out.push(supports[axis][c]);
        }
        for axis in (0..d).rev() {
            counter[axis] += 1;
            if counter[axis] < supports[axis].len() {
                break;
            }
            counter[axis] = 0;
        }
    }
    out
}

fn filter_supported(atoms: Vec<f64>, d: usize, marginal: &Ecdf) -> (Vec<f64>, usize) {
    let mut kept = Vec::with_capacity(atoms.len());
    let mut dropped = 0;
    for atom in atoms.chunks_exact(d) {
        if marginal.count_le(atom) > 0 {
            kept.extend_from_slice(atom);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

/// Signed discrete measure: distinct atoms with real weights.
#[derive(Debug, Clone)]
pub struct SignedMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    total_mass: f64,
    negative_mass: f64,
    dropped_atoms: usize,
    dropped_mass: f64,
}

impl SignedMeasure {
    fn from_parts(
        dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        dropped_atoms: usize,
        dropped_mass: f64,
    ) -> Self {
        let mut total = Accumulator::new();
        let mut negative = Accumulator::new();
        for &w in &weights {
            total.add(w);
            if w < 0.0 {
                negative.add(w);
            }
        }
        SignedMeasure {
            dim,
            points,
            weights,
            total_mass: total.value(),
            negative_mass: negative.value(),
            dropped_atoms,
            dropped_mass,
        }
    }

    /// Build from explicit atoms. Rows are sorted into canonical
    /// (lexicographic) order and equal points are merged by summing weights.
    pub fn from_weighted_rows<R: AsRef<[f64]>>(rows: &[(R, f64)]) -> Result<Self, MeasureError> {
        assert!(!rows.is_empty(), "measure needs at least one atom");
        let dim = rows[0].0.as_ref().len();
        for (r, _) in rows {
            if r.as_ref().len() != dim {
                return Err(MeasureError::AtomDimension {
                    got: r.as_ref().len(),
                    expected: dim,
                });
            }
        }
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&a, &b| rows[a].0.as_ref().partial_cmp(rows[b].0.as_ref()).unwrap());
        let mut points = Vec::with_capacity(rows.len() * dim);
        let mut weights: Vec<f64> = Vec::with_capacity(rows.len());
        for &i in &idx {
            let (p, w) = (&rows[i].0, rows[i].1);
            if !points.is_empty() && points[points.len() - dim..] == *p.as_ref() {
                let last = weights.len() - 1;
                weights[last] += w;
            } else {
                points.extend_from_slice(p.as_ref());
                weights.push(w);
            }
        }
        Ok(Self::from_parts(dim, points, weights, 0, 0.0))
    }

    /// Uniform empirical measure: each distinct row gets weight
    /// `multiplicity / n`, computed as one exact division.
    pub fn uniform<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MeasureError> {
        assert!(!rows.is_empty(), "measure needs at least one atom");
        let dim = rows[0].as_ref().len();
        let n = rows.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| rows[a].as_ref().partial_cmp(rows[b].as_ref()).unwrap());
        let mut points: Vec<f64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for &i in &idx {
            let r = rows[i].as_ref();
            if r.len() != dim {
                return Err(MeasureError::AtomDimension {
                    got: r.len(),
                    expected: dim,
                });
            }
            if !points.is_empty() && points[points.len() - dim..] == *r {
                *counts.last_mut().unwrap() += 1;
            } else {
                points.extend_from_slice(r);
                counts.push(1);
            }
        }
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self::from_parts(dim, points, weights, 0, 0.0))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// Sum of all weights.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Sum of the negative weights (nonpositive by construction).
    pub fn negative_mass(&self) -> f64 {
        self.negative_mass
    }

    /// Atoms not materialized because their weight was below [`WEIGHT_FLOOR`].
    pub fn dropped_atoms(&self) -> usize {
        self.dropped_atoms
    }

    /// Total weight of the dropped atoms.
    pub fn dropped_mass(&self) -> f64 {
        self.dropped_mass
    }

    /// Weight at an exact point, zero if absent.
    pub fn weight_at(&self, point: &[f64]) -> f64 {
        self.atoms()
            .find(|(p, _)| *p == point)
            .map_or(0.0, |(_, w)| w)
    }

    /// Export as CSV with header `z_1,..,z_dim,weight`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("z_{k}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for (p, weight) in self.atoms() {
            let mut rec: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{weight}"));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Nonnegative atoms summing to one.
#[derive(Debug, Clone)]
pub struct ProbabilityMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ProbabilityMeasure {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Packed bit rows for stayer dominance masks.
struct BitMat {
    words: usize,
    data: Vec<u64>,
}

impl BitMat {
    fn new(rows: usize, bits: usize) -> Self {
        let words = bits.div_ceil(64);
        BitMat {
            words,
            data: vec![0; rows * words],
        }
    }

    #[inline]
    fn set(&mut self, row: usize, bit: usize) {
        self.data[row * self.words + bit / 64] |= 1 << (bit % 64);
    }

    #[inline]
    fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words..(r + 1) * self.words]
    }
}

#[inline]
fn intersect_count(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

/// Corner coordinates for an atom under a sign pattern: bit k set means the
/// offset on coordinate k points down.
#[inline]
fn corner_into(atom: &[f64], h: &[f64], pattern: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = if pattern >> k & 1 == 1 {
            atom[k] - h[k]
        } else {
            atom[k] + h[k]
        };
    }
}

/// Per-block corner tables: clamped marginal ratios and stayer masks.
struct CornerTables {
    /// Clamped ratio `p * Fmw / Fm` per (atom, pattern); NaN when the stayer
    /// mask is empty, in which case every joint count through it is zero and
    /// the ratio is never read.
    ratios: Vec<f64>,
    masks: BitMat,
}

fn z1_corner_tables(f: &CorrectedCdf, grid: &JumpGrid) -> CornerTables {
    let d = grid.d();
    let pats = 1usize << d;
    let n2 = f.n2();
    let mut ratios = vec![f64::NAN; grid.n_z1() * pats];
    let mut masks = BitMat::new(grid.n_z1() * pats, n2);
    let mut corner = vec![0.0; d];
    for a in 0..grid.n_z1() {
        for s in 0..pats {
            corner_into(grid.z1_atom(a), &grid.h()[..d], s, &mut corner);
            let row = a * pats + s;
            let mut c1w = 0usize;
            for (i, z1i) in f.f1w().rows().enumerate() {
                if z1i.iter().zip(&corner).all(|(v, q)| v <= q) {
                    masks.set(row, i);
                    c1w += 1;
                }
            }
            if c1w > 0 {
                let c1 = f.f1().count_le(&corner);
                ratios[row] = f.clamped_ratio_z1(c1, c1w);
            }
        }
    }
    CornerTables { ratios, masks }
}

fn z2_corner_tables(f: &CorrectedCdf, grid: &JumpGrid) -> CornerTables {
    let d = grid.d();
    let pats = 1usize << d;
    let n2 = f.n2();
    let mut ratios = vec![f64::NAN; grid.n_z2() * pats];
    let mut masks = BitMat::new(grid.n_z2() * pats, n2);
    let mut corner = vec![0.0; d];
    for b in 0..grid.n_z2() {
        for t in 0..pats {
            corner_into(grid.z2_atom(b), &grid.h()[d..], t, &mut corner);
            let row = b * pats + t;
            let mut c2w = 0usize;
            for (i, z2i) in f.f2w().rows().enumerate() {
                if z2i.iter().zip(&corner).all(|(v, q)| v <= q) {
                    masks.set(row, i);
                    c2w += 1;
                }
            }
            if c2w > 0 {
                let c2 = f.f2().count_le(&corner);
                ratios[row] = f.clamped_ratio_z2(c2, c2w);
            }
        }
    }
    CornerTables { ratios, masks }
}

/// Corner values factorize for the built-in links, so the inner loop over
/// corner pairs multiplies two precomputed terms instead of composing
/// transcendental functions:
///
/// logit: `1/G(t1+t2-gp) = 1 + e1*e2` with `e = (1-r)/r` terms,
/// exp:   `1/G(t1+t2-gp) = e1*e2` with `e1 = 1/r1`, `e2 = pc/r2`.
///
/// Custom links evaluate the composition as written.
enum LinkEval {
    Factorized {
        e1: Vec<f64>,
        e2: Vec<f64>,
        add_one: bool,
    },
    Generic {
        t1: Vec<f64>,
        t2: Vec<f64>,
        gp: f64,
    },
}

impl LinkEval {
    fn prepare(f: &CorrectedCdf, z1: &CornerTables, z2: &CornerTables) -> Self {
        let pc = f.clamped_p();
        match f.link().kind() {
            LinkKind::Logit => LinkEval::Factorized {
                e1: z1.ratios.iter().map(|r| (1.0 - r) / r).collect(),
                e2: z2
                    .ratios
                    .iter()
                    .map(|r| ((1.0 - r) / r) * (pc / (1.0 - pc)))
                    .collect(),
                add_one: true,
            },
            LinkKind::Exp => LinkEval::Factorized {
                e1: z1.ratios.iter().map(|r| 1.0 / r).collect(),
                e2: z2.ratios.iter().map(|r| pc / r).collect(),
                add_one: false,
            },
            LinkKind::Custom => {
                let link = f.link();
                LinkEval::Generic {
                    t1: z1.ratios.iter().map(|&r| link.inverse(r)).collect(),
                    t2: z2.ratios.iter().map(|&r| link.inverse(r)).collect(),
                    gp: link.inverse(pc),
                }
            }
        }
    }
}

/// Jump masses of the corrected CDF over the grid.
///
/// Corner evaluations decompose into a `z1` part, a `z2` part, and a joint
/// stayer count obtained by intersecting dominance bitmasks, so the cost per
/// atom is `2^{2d}` mask intersections rather than full CDF evaluations.
/// Atoms whose weight ends up below [`WEIGHT_FLOOR`] are dropped, with count
/// and mass reported on the result.
pub fn jump_masses(f: &CorrectedCdf, grid: &JumpGrid) -> Result<SignedMeasure, MeasureError> {
    if grid.d() != f.d() {
        return Err(MeasureError::DimensionMismatch {
            grid_d: grid.d(),
            expected: f.d(),
        });
    }
    for a in 0..grid.n_z1() {
        if f.f1().count_le(grid.z1_atom(a)) == 0 {
            return Err(MeasureError::UnsupportedAtom {
                block: "z1",
                index: a,
            });
        }
    }
    for b in 0..grid.n_z2() {
        if f.f2().count_le(grid.z2_atom(b)) == 0 {
            return Err(MeasureError::UnsupportedAtom {
                block: "z2",
                index: b,
            });
        }
    }

    let d = grid.d();
    let pats = 1usize << d;
    let tab1 = z1_corner_tables(f, grid);
    let tab2 = z2_corner_tables(f, grid);
    let eval = LinkEval::prepare(f, &tab1, &tab2);
    let p_hat = f.p_hat();
    let n2f = f.n2() as f64;
    let link = f.link();

    // one row of the product grid per z1 atom, assembled in index order
    let rows: Vec<(Vec<f64>, Vec<f64>, usize, f64)> = (0..grid.n_z1())
        .into_par_iter()
        .map(|a| {
            let m1: Vec<&[u64]> = (0..pats).map(|s| tab1.masks.row(a * pats + s)).collect();
            let mut points = Vec::new();
            let mut weights = Vec::new();
            let mut dropped = 0usize;
            let mut dropped_mass = Accumulator::new();
            for b in 0..grid.n_z2() {
                let mut sum = 0.0;
                // ascending combined pattern: z1 bits low, z2 bits high
                for t in 0..pats {
                    let m2 = tab2.masks.row(b * pats + t);
                    for (s, m1s) in m1.iter().enumerate() {
                        let cnt = intersect_count(m1s, m2);
                        if cnt == 0 {
                            continue;
                        }
                        let fw = cnt as f64 / n2f;
                        let corner = match &eval {
                            LinkEval::Factorized { e1, e2, add_one } => {
                                let prod = e1[a * pats + s] * e2[b * pats + t];
                                p_hat * fw * if *add_one { 1.0 + prod } else { prod }
                            }
                            LinkEval::Generic { t1, t2, gp } => {
                                let arg = t1[a * pats + s] + t2[b * pats + t] - gp;
                                p_hat * fw / link.forward(arg)
                            }
                        };
                        if (s.count_ones() + t.count_ones()) % 2 == 0 {
                            sum += corner;
                        } else {
                            sum -= corner;
                        }
                    }
                }
                if sum.abs() >= WEIGHT_FLOOR {
                    points.extend_from_slice(grid.z1_atom(a));
                    points.extend_from_slice(grid.z2_atom(b));
                    weights.push(sum);
                } else {
                    dropped += 1;
                    dropped_mass.add(sum);
                }
            }
            (points, weights, dropped, dropped_mass.value())
        })
        .collect();

    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut dropped_atoms = 0;
    let mut dropped_mass = Accumulator::new();
    for (p, w, dn, dm) in rows {
        points.extend_from_slice(&p);
        weights.extend_from_slice(&w);
        dropped_atoms += dn;
        dropped_mass.add(dm);
    }
    Ok(SignedMeasure::from_parts(
        2 * d,
        points,
        weights,
        dropped_atoms,
        dropped_mass.value(),
    ))
}

/// Jump masses of a plain joint empirical CDF over the grid.
///
/// Corner values are integer dominance counts, the alternating sum runs over
/// integers, and a single division by `n` happens at the end, so an ECDF of
/// `n` distinct points yields weight exactly `1/n` at each of them.
pub fn ecdf_jump_masses(joint: &Ecdf, grid: &JumpGrid) -> Result<SignedMeasure, MeasureError> {
    let d = grid.d();
    if joint.d() != 2 * d {
        return Err(MeasureError::DimensionMismatch {
            grid_d: grid.d(),
            expected: joint.d() / 2,
        });
    }
    let pats = 1usize << d;
    let n = joint.n();

    let mut mask1 = BitMat::new(grid.n_z1() * pats, n);
    let mut corner = vec![0.0; d];
    for a in 0..grid.n_z1() {
        for s in 0..pats {
            corner_into(grid.z1_atom(a), &grid.h()[..d], s, &mut corner);
            for (i, row) in joint.rows().enumerate() {
                if row[..d].iter().zip(&corner).all(|(v, q)| v <= q) {
                    mask1.set(a * pats + s, i);
                }
            }
        }
    }
    let mut mask2 = BitMat::new(grid.n_z2() * pats, n);
    for b in 0..grid.n_z2() {
        for t in 0..pats {
            corner_into(grid.z2_atom(b), &grid.h()[d..], t, &mut corner);
            for (i, row) in joint.rows().enumerate() {
                if row[d..].iter().zip(&corner).all(|(v, q)| v <= q) {
                    mask2.set(b * pats + t, i);
                }
            }
        }
    }

    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut dropped_atoms = 0;
    let mut dropped_mass = Accumulator::new();
    for a in 0..grid.n_z1() {
        for b in 0..grid.n_z2() {
            let mut cell: i64 = 0;
            for t in 0..pats {
                for s in 0..pats {
                    let cnt = intersect_count(mask1.row(a * pats + s), mask2.row(b * pats + t));
                    if (s.count_ones() + t.count_ones()) % 2 == 0 {
                        cell += cnt as i64;
                    } else {
                        cell -= cnt as i64;
                    }
                }
            }
            let w = cell as f64 / n as f64;
            if w.abs() >= WEIGHT_FLOOR {
                points.extend_from_slice(grid.z1_atom(a));
                points.extend_from_slice(grid.z2_atom(b));
                weights.push(w);
            } else {
                dropped_atoms += 1;
                dropped_mass.add(w);
            }
        }
    }
    Ok(SignedMeasure::from_parts(
        2 * d,
        points,
        weights,
        dropped_atoms,
        dropped_mass.value(),
    ))
}

/// Classifies a coordinate pair by block membership.
enum PairLayout {
    /// First coordinate in the `z1` block, second in the `z2` block.
    Cross,
    /// Both in the `z1` block: the marginal reduces to first-wave CDFs.
    WithinZ1,
    /// Both in the `z2` block: refreshment and stayer `z2` CDFs.
    WithinZ2,
}

/// Two-coordinate marginal of the corrected measure over the full product
/// of coordinate walls.
///
/// For `d > 1` the corrected CDF carries jump mass on the product of its
/// per-coordinate discontinuity walls, a set too large to materialize. For
/// an integrand touching only coordinates `i` and `j`, every other
/// coordinate telescopes to its upper limit, so the integral against the
/// full-product measure equals the integral against this two-dimensional
/// wall measure. Atoms are plateau differences, which is equivalent to
/// corner differencing at any admissible offset.
///
/// Marginalizing first also sidesteps the unsupported-atom problem: product
/// tuples below the joint refreshment support have no defined transform
/// value and a materialized grid drops their mass, while the marginal
/// functions here are defined everywhere above the per-coordinate support.
/// The two routes coincide exactly when every product atom is supported.
pub fn corrected_pair_measure(
    f: &CorrectedCdf,
    i: usize,
    j: usize,
) -> Result<SignedMeasure, MeasureError> {
    let d = f.d();
    assert!(i < j && j < 2 * d, "pair must be two distinct coordinates");
    let layout = if j < d {
        PairLayout::WithinZ1
    } else if i >= d {
        PairLayout::WithinZ2
    } else {
        PairLayout::Cross
    };

    let walls_i = coordinate_walls(f, i);
    let walls_j = coordinate_walls(f, j);
    // refreshment-side walls below the refreshment support carry an
    // undefined transform value and are excluded, as in grid construction
    let walls_i = filter_walls(f, i, walls_i);
    let walls_j = filter_walls(f, j, walls_j);
    let (wi, wj) = (walls_i.len(), walls_j.len());
    if wi == 0 || wj == 0 {
        return Err(MeasureError::UnsupportedAtom {
            block: "z2",
            index: 0,
        });
    }

    // plateau count tables, index 0 = below every wall; prefix tables make
    // each plateau evaluation O(1)
    let tables = PairTables::build(f, i, j, &walls_i, &walls_j, &layout);
    let mut matrix = vec![0.0; (wi + 1) * (wj + 1)];
    for k in 0..=wi {
        for l in 0..=wj {
            matrix[k * (wj + 1) + l] = tables.value(f, k, l);
        }
    }

    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut dropped_atoms = 0;
    let mut dropped_mass = Accumulator::new();
    for k in 1..=wi {
        for l in 1..=wj {
            let w = matrix[k * (wj + 1) + l] - matrix[(k - 1) * (wj + 1) + l]
                - matrix[k * (wj + 1) + (l - 1)]
                + matrix[(k - 1) * (wj + 1) + (l - 1)];
            if w.abs() >= WEIGHT_FLOOR {
                points.push(walls_i[k - 1]);
                points.push(walls_j[l - 1]);
                weights.push(w);
            } else {
                dropped_atoms += 1;
                dropped_mass.add(w);
            }
        }
    }
    Ok(SignedMeasure::from_parts(
        2,
        points,
        weights,
        dropped_atoms,
        dropped_mass.value(),
    ))
}

fn coordinate_walls(f: &CorrectedCdf, coord: usize) -> Vec<f64> {
    let d = f.d();
    if coord < d {
        f.f1().coordinate_support(coord)
    } else {
        let mut vals = f.f2().coordinate_support(coord - d);
        vals.extend(f.f2w().coordinate_support(coord - d));
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals
    }
}

fn filter_walls(f: &CorrectedCdf, coord: usize, walls: Vec<f64>) -> Vec<f64> {
    let d = f.d();
    if coord < d {
        return walls; // first-wave walls are observed values
    }
    walls
        .into_iter()
        .filter(|&v| count_1d(f.f2(), coord - d, v) > 0)
        .collect()
}

fn count_1d(e: &Ecdf, axis: usize, v: f64) -> usize {
    e.rows().filter(|r| r[axis] <= v).count()
}

/// Prefix-count tables for one coordinate pair.
struct PairTables {
    wj: usize,
    /// Joint stayer counts, `(wi + 1) x (wj + 1)`.
    joint: Vec<usize>,
    /// Marginal counts per plateau on each side.
    c1: Vec<usize>,
    c1w: Vec<usize>,
    c2: Vec<usize>,
    c2w: Vec<usize>,
    /// Two-dimensional marginals for the within-block layouts.
    big1: Option<Vec<usize>>,
    n1: usize,
    n2: usize,
    nr: usize,
    cross: bool,
    within_z1: bool,
}

impl PairTables {
    fn build(
        f: &CorrectedCdf,
        i: usize,
        j: usize,
        walls_i: &[f64],
        walls_j: &[f64],
        layout: &PairLayout,
    ) -> Self {
        let d = f.d();
        let (wi, wj) = (walls_i.len(), walls_j.len());
        let rank = |walls: &[f64], v: f64| walls.partition_point(|&w| w <= v);
        let prefix_2d = |e: &Ecdf, ai: usize, aj: usize| -> Vec<usize> {
            let mut hist = vec![0usize; (wi + 1) * (wj + 1)];
            for row in e.rows() {
                let k = rank(walls_i, row[ai]);
                let l = rank(walls_j, row[aj]);
                // histogram of the plateau a point belongs to; points above
                // the last wall never count
                if k <= wi && l <= wj {
                    hist[k * (wj + 1) + l] += 1;
                }
            }
            // shift so plateau (k, l) counts points with value <= wall
            let mut pre = vec![0usize; (wi + 1) * (wj + 1)];
            for k in 1..=wi {
                for l in 1..=wj {
                    pre[k * (wj + 1) + l] = hist[k * (wj + 1) + l]
                        + pre[(k - 1) * (wj + 1) + l]
                        + pre[k * (wj + 1) + (l - 1)]
                        - pre[(k - 1) * (wj + 1) + (l - 1)];
                }
            }
            pre
        };
        let prefix_1d = |e: &Ecdf, axis: usize, walls: &[f64]| -> Vec<usize> {
            let w = walls.len();
            let mut hist = vec![0usize; w + 1];
            for row in e.rows() {
                let k = rank(walls, row[axis]);
                if k <= w {
                    hist[k] += 1;
                }
            }
            let mut pre = vec![0usize; w + 1];
            for k in 1..=w {
                pre[k] = pre[k - 1] + hist[k];
            }
            pre
        };
        let prefix_joint_cross = |ai: usize, aj: usize| -> Vec<usize> {
            let mut hist = vec![0usize; (wi + 1) * (wj + 1)];
            for (a, b) in f.f1w().rows().zip(f.f2w().rows()) {
                let k = rank(walls_i, a[ai]);
                let l = rank(walls_j, b[aj]);
                if k <= wi && l <= wj {
                    hist[k * (wj + 1) + l] += 1;
                }
            }
            let mut pre = vec![0usize; (wi + 1) * (wj + 1)];
            for k in 1..=wi {
                for l in 1..=wj {
                    pre[k * (wj + 1) + l] = hist[k * (wj + 1) + l]
                        + pre[(k - 1) * (wj + 1) + l]
                        + pre[k * (wj + 1) + (l - 1)]
                        - pre[(k - 1) * (wj + 1) + (l - 1)];
                }
            }
            pre
        };

        match layout {
            PairLayout::Cross => PairTables {
                wj,
                joint: prefix_joint_cross(i, j - d),
                c1: prefix_1d(f.f1(), i, walls_i),
                c1w: prefix_1d(f.f1w(), i, walls_i),
                c2: prefix_1d(f.f2(), j - d, walls_j),
                c2w: prefix_1d(f.f2w(), j - d, walls_j),
                big1: None,
                n1: f.n1(),
                n2: f.n2(),
                nr: f.nr(),
                cross: true,
                within_z1: false,
            },
            PairLayout::WithinZ1 => PairTables {
                wj,
                joint: prefix_2d(f.f1w(), i, j),
                c1: Vec::new(),
                c1w: Vec::new(),
                c2: Vec::new(),
                c2w: Vec::new(),
                big1: Some(prefix_2d(f.f1(), i, j)),
                n1: f.n1(),
                n2: f.n2(),
                nr: f.nr(),
                cross: false,
                within_z1: true,
            },
            PairLayout::WithinZ2 => PairTables {
                wj,
                joint: prefix_2d(f.f2w(), i - d, j - d),
                c1: Vec::new(),
                c1w: Vec::new(),
                c2: Vec::new(),
                c2w: Vec::new(),
                big1: Some(prefix_2d(f.f2(), i - d, j - d)),
                n1: f.n1(),
                n2: f.n2(),
                nr: f.nr(),
                cross: false,
                within_z1: false,
            },
        }
    }

    fn value(&self, f: &CorrectedCdf, k: usize, l: usize) -> f64 {
        let idx = k * (self.wj + 1) + l;
        if self.cross {
            f.corner_from_counts(
                self.c1[k],
                self.c1w[k],
                self.c2[l],
                self.c2w[l],
                self.joint[idx],
            )
        } else if self.within_z1 {
            let c1 = self.big1.as_ref().unwrap()[idx];
            let c1w = self.joint[idx];
            f.corner_from_counts(c1, c1w, self.nr, self.n2, c1w)
        } else {
            let c2 = self.big1.as_ref().unwrap()[idx];
            let c2w = self.joint[idx];
            f.corner_from_counts(self.n1, self.n2, c2, c2w, c2w)
        }
    }
}

/// Integrate a vector-valued function against the measure with compensated
/// accumulation.
pub fn integrate<G>(mu: &SignedMeasure, dim_out: usize, g: G) -> Result<Vec<f64>, MeasureError>
where
    G: Fn(&[f64], &mut [f64]),
{
    let mut acc = vec![Accumulator::new(); dim_out];
    let mut buf = vec![0.0; dim_out];
    for (point, w) in mu.atoms() {
        g(point, &mut buf);
        for (slot, &v) in acc.iter_mut().zip(&buf) {
            if !v.is_finite() {
                return Err(MeasureError::NonFiniteIntegrand {
                    point: point.to_vec(),
                });
            }
            slot.add(w * v);
        }
    }
    Ok(acc.iter().map(|a| a.value()).collect())
}

/// Set negative weights to zero and renormalize the rest.
///
/// Inputs that are already probability weights (no negatives, unit mass
/// within 1e-12) pass through unchanged, which makes trimming idempotent.
pub fn trim_and_normalize(mu: &SignedMeasure) -> Result<ProbabilityMeasure, MeasureError> {
    let mut pos = Accumulator::new();
    let mut any_negative = false;
    for &w in &mu.weights {
        if w > 0.0 {
            pos.add(w);
        } else if w < 0.0 {
            any_negative = true;
        }
    }
    let total = pos.value();
    if !(total > 0.0) {
        return Err(MeasureError::AllWeightsNonpositive);
    }
    let weights = if !any_negative && (total - 1.0).abs() <= 1e-12 {
        mu.weights.clone()
    } else {
        mu.weights.iter().map(|&w| w.max(0.0) / total).collect()
    };
    Ok(ProbabilityMeasure {
        dim: mu.dim,
        points: mu.points.clone(),
        weights,
    })
}

/// Draw `n` i.i.d. atoms from a probability measure by inverse-CDF lookup.
pub fn sample_atoms<R: rand::Rng>(pm: &ProbabilityMeasure, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut cum = Vec::with_capacity(pm.len());
    let mut acc = 0.0;
    for &w in &pm.weights {
        acc += w;
        cum.push(acc);
    }
    let last = pm.len() - 1;
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let idx = cum.partition_point(|&c| c <= u).min(last);
            pm.points[idx * pm.dim..(idx + 1) * pm.dim].to_vec()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{PanelDataset, PanelRow, RefreshmentDataset};
    use crate::link::LinkFunction;
    use crate::seed::substream;
    use rand::Rng;

    fn row(id: usize, z1: Vec<f64>, z2: Option<Vec<f64>>) -> PanelRow {
        PanelRow {
            id: format!("u{id}"),
            z1,
            w: z2.is_some(),
            z2,
        }
    }

    fn scalar_data(z1w: &[(f64, Option<f64>)], refresh: &[f64]) -> ValidatedData {
        let rows = z1w
            .iter()
            .enumerate()
            .map(|(i, (z1, z2))| row(i, vec![*z1], z2.map(|v| vec![v])))
            .collect();
        let p = PanelDataset::new(rows).unwrap();
        let r = RefreshmentDataset::new(refresh.iter().map(|&v| vec![v]).collect()).unwrap();
        ValidatedData::validate(p, r).unwrap()
    }

    #[test]
    fn grid_atoms_and_dedup() {
        // first wave {1,2}, stayers' z2 {3}, refreshment {3,4}
        let d = scalar_data(&[(1.0, Some(3.0)), (2.0, None)], &[3.0, 4.0]);
        let g = JumpGrid::build(&d, GridStrategy::PaperTuples);
        assert_eq!(g.n_z1(), 2);
        assert_eq!(g.n_z2(), 2);
        assert_eq!(g.len(), 4);
        assert_eq!(g.z1_atom(0), &[1.0]);
        assert_eq!(g.z1_atom(1), &[2.0]);
        assert_eq!(g.z2_atom(0), &[3.0]);
        assert_eq!(g.z2_atom(1), &[4.0]);
    }

    #[test]
    fn h_is_half_min_gap() {
        let d = scalar_data(
            &[(1.0, Some(1.0)), (1.5, None), (4.0, Some(4.0))],
            &[1.0, 4.0],
        );
        let g = JumpGrid::build(&d, GridStrategy::PaperTuples);
        assert_eq!(g.h()[0], 0.25);
        assert_eq!(g.h()[1], 1.5);
    }

    #[test]
    fn singleton_axis_gets_unit_h() {
        let d = scalar_data(&[(1.0, Some(2.0))], &[2.0]);
        let g = JumpGrid::build(&d, GridStrategy::PaperTuples);
        assert_eq!(g.h(), &[1.0, 1.0]);
    }

    #[test]
    fn full_product_blocks() {
        let rows = vec![
            row(0, vec![0.0, 0.0], Some(vec![1.0, 1.0])),
            row(1, vec![1.0, 1.0], Some(vec![1.0, 1.0])),
        ];
        let p = PanelDataset::new(rows).unwrap();
        let r = RefreshmentDataset::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let d = ValidatedData::validate(p, r).unwrap();
        let g = JumpGrid::build(&d, GridStrategy::FullProduct);
        // (0,0) is observed, so the whole product block {0,1}^2 is supported
        assert_eq!(g.n_z1(), 4);
        assert_eq!(g.z1_atom(0), &[0.0, 0.0]);
        assert_eq!(g.z1_atom(1), &[0.0, 1.0]);
        assert_eq!(g.z1_atom(2), &[1.0, 0.0]);
        assert_eq!(g.z1_atom(3), &[1.0, 1.0]);
    }

    #[test]
    fn full_product_filters_unsupported_atoms() {
        let rows = vec![
            row(0, vec![0.0, 1.0], Some(vec![1.0, 1.0])),
            row(1, vec![1.0, 0.0], Some(vec![2.0, 2.0])),
        ];
        let p = PanelDataset::new(rows).unwrap();
        let r = RefreshmentDataset::new(vec![vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let d = ValidatedData::validate(p, r).unwrap();
        let g = JumpGrid::build(&d, GridStrategy::FullProduct);
        // (0,0) dominates no observed first-wave point
        assert_eq!(g.dropped_z1_atoms(), 1);
        assert_eq!(g.n_z1(), 3);
    }

    fn plain_ecdf_measure(points: &[f64]) -> SignedMeasure {
        // scalar points doubled into (z1, z2) pairs; difference the plain
        // joint ECDF over the induced grid
        let joint: Vec<Vec<f64>> = points.iter().map(|&v| vec![v, v]).collect();
        let e = Ecdf::from_rows(&joint).unwrap();
        let data = scalar_data(
            &points.iter().map(|&v| (v, Some(v))).collect::<Vec<_>>(),
            points,
        );
        let g = JumpGrid::build(&data, GridStrategy::PaperTuples);
        ecdf_jump_masses(&e, &g).unwrap()
    }

    #[test]
    fn ecdf_recovery_uniform_exact() {
        let points: Vec<f64> = (0..100).map(|i| i as f64 * 0.37 + 0.11).collect();
        let mu = plain_ecdf_measure(&points);
        assert_eq!(mu.len(), 100);
        for (_, w) in mu.atoms() {
            assert_eq!(w, 1.0 / 100.0);
        }
        assert_eq!(mu.total_mass(), 1.0);
    }

    #[test]
    fn single_atom_cdf_weight_one() {
        let mu = plain_ecdf_measure(&[5.0]);
        assert_eq!(mu.len(), 1);
        assert_eq!(mu.point(0), &[5.0, 5.0]);
        assert_eq!(mu.weight(0), 1.0);
    }

    #[test]
    fn bivariate_product_ecdf_masses() {
        // joint ECDF of {(0,0),(1,1)} over the product grid {0,1}^2
        let joint = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let e = Ecdf::from_rows(&joint).unwrap();
        let data = scalar_data(&[(0.0, Some(0.0)), (1.0, Some(1.0))], &[0.0, 1.0]);
        let g = JumpGrid::build(&data, GridStrategy::PaperTuples);
        assert_eq!(g.len(), 4);
        let mu = ecdf_jump_masses(&e, &g).unwrap();
        assert_eq!(mu.weight_at(&[0.0, 0.0]), 0.5);
        assert_eq!(mu.weight_at(&[1.0, 1.0]), 0.5);
        assert_eq!(mu.weight_at(&[0.0, 1.0]), 0.0);
        assert_eq!(mu.weight_at(&[1.0, 0.0]), 0.0);
    }

    /// Brute-force oracle: difference the corner evaluations directly, one
    /// full CDF evaluation per corner, in the same ascending pattern order.
    fn oracle_weight(f: &CorrectedCdf, grid: &JumpGrid, a: usize, b: usize) -> f64 {
        let d = grid.d();
        let mut sum = 0.0;
        let mut z1c = vec![0.0; d];
        let mut z2c = vec![0.0; d];
        for u in 0..(1usize << (2 * d)) {
            let s = u & ((1 << d) - 1);
            let t = u >> d;
            corner_into(grid.z1_atom(a), &grid.h()[..d], s, &mut z1c);
            corner_into(grid.z2_atom(b), &grid.h()[d..], t, &mut z2c);
            let c1 = f.f1().count_le(&z1c);
            let c1w = f.f1w().count_le(&z1c);
            let c2 = f.f2().count_le(&z2c);
            let c2w = f.f2w().count_le(&z2c);
            let mut q = z1c.clone();
            q.extend_from_slice(&z2c);
            let cw = f.fw().count_le(&q);
            let v = f.corner_from_counts(c1, c1w, c2, c2w, cw);
            if u.count_ones() % 2 == 0 {
                sum += v;
            } else {
                sum -= v;
            }
        }
        sum
    }

    fn assert_matches_oracle(data: &ValidatedData, link: LinkFunction) {
        let f = CorrectedCdf::build(data, link).unwrap();
        let grid = JumpGrid::build(data, GridStrategy::PaperTuples);
        let mu = jump_masses(&f, &grid).unwrap();
        for a in 0..grid.n_z1() {
            for b in 0..grid.n_z2() {
                let want = oracle_weight(&f, &grid, a, b);
                let mut point = grid.z1_atom(a).to_vec();
                point.extend_from_slice(grid.z2_atom(b));
                let got = mu.weight_at(&point);
                let want = if want.abs() < WEIGHT_FLOOR { 0.0 } else { want };
                assert!(
                    (got - want).abs() <= 1e-12,
                    "atom ({a},{b}): {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn masses_match_brute_force_oracle_scalar() {
        let data = scalar_data(
            &[
                (1.0, Some(2.5)),
                (2.0, None),
                (3.0, Some(1.5)),
                (4.5, Some(4.0)),
                (5.0, None),
            ],
            &[1.5, 2.5, 3.5, 4.0],
        );
        assert_matches_oracle(&data, LinkFunction::logit());
        assert_matches_oracle(&data, LinkFunction::exp());
    }

    #[test]
    fn masses_match_brute_force_oracle_bivariate() {
        let mut rng = substream(11, 99, 0);
        let rows: Vec<PanelRow> = (0..8)
            .map(|i| {
                let z1 = vec![rng.random::<f64>(), rng.random::<f64>()];
                let stay = rng.random::<f64>() < 0.7;
                let z2 = stay.then(|| vec![rng.random::<f64>(), rng.random::<f64>()]);
                row(i, z1, z2)
            })
            .collect();
        let p = PanelDataset::new(rows).unwrap();
        let refresh: Vec<Vec<f64>> = (0..6)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let r = RefreshmentDataset::new(refresh).unwrap();
        let data = ValidatedData::validate(p, r).unwrap();
        assert_matches_oracle(&data, LinkFunction::logit());
    }

    #[test]
    fn masses_match_oracle_with_custom_link() {
        // custom link goes through the generic corner evaluation
        let link = LinkFunction::custom(
            "logit-copy",
            |x| 1.0 / (1.0 + (-x).exp()),
            |y| (y / (1.0 - y)).ln(),
            crate::link::LinkRange { lo: 0.0, hi: 1.0 },
        )
        .unwrap();
        let data = scalar_data(
            &[(1.0, Some(2.5)), (2.0, None), (3.0, Some(1.5))],
            &[1.5, 2.5],
        );
        assert_matches_oracle(&data, link);
    }

    #[test]
    fn h_invariance_atomwise() {
        let data = scalar_data(
            &[
                (0.3, Some(1.1)),
                (0.7, None),
                (1.9, Some(0.4)),
                (2.2, Some(2.0)),
            ],
            &[0.4, 1.0, 2.1],
        );
        let f = CorrectedCdf::build(&data, LinkFunction::logit()).unwrap();
        let grid = JumpGrid::build(&data, GridStrategy::PaperTuples);
        let mu_h = jump_masses(&f, &grid).unwrap();
        let mu_h3 = jump_masses(&f, &grid.with_h_scaled(1.0 / 3.0)).unwrap();
        assert_eq!(mu_h.len(), mu_h3.len());
        for ((p1, w1), (p2, w2)) in mu_h.atoms().zip(mu_h3.atoms()) {
            assert_eq!(p1, p2);
            assert!((w1 - w2).abs() <= 1e-12);
        }
    }

    #[test]
    fn mass_telescopes_to_top_corner() {
        let data = scalar_data(
            &[
                (1.0, Some(2.5)),
                (2.0, None),
                (3.0, Some(1.5)),
                (4.5, Some(4.0)),
            ],
            &[1.5, 2.5, 4.0],
        );
        let f = CorrectedCdf::build(&data, LinkFunction::logit()).unwrap();
        let grid = JumpGrid::build(&data, GridStrategy::PaperTuples);
        assert_eq!(grid.dropped_z2_atoms(), 0);
        let mu = jump_masses(&f, &grid).unwrap();
        let top = grid.top_corner();
        let d = grid.d();
        let z1_top: Vec<f64> = top[..d]
            .iter()
            .zip(&grid.h()[..d])
            .map(|(v, h)| v + h)
            .collect();
        let z2_top: Vec<f64> = top[d..]
            .iter()
            .zip(&grid.h()[d..])
            .map(|(v, h)| v + h)
            .collect();
        let top_eval = f.eval(&z1_top, &z2_top).unwrap();
        let total = mu.total_mass() + mu.dropped_mass();
        assert!((total - top_eval).abs() < 1e-9, "{total} vs {top_eval}");
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn integrate_identity_and_constant() {
        let mu = SignedMeasure::from_weighted_rows(&[(vec![1.0], 0.5), (vec![3.0], 0.5)]).unwrap();
        let mean = integrate(&mu, 1, |z, out| out[0] = z[0]).unwrap();
        assert_eq!(mean[0], 2.0);
        let mass = integrate(&mu, 1, |_, out| out[0] = 1.0).unwrap();
        assert_eq!(mass[0], mu.total_mass());
    }

    #[test]
    fn integrate_signed_atoms() {
        let mu = SignedMeasure::from_weighted_rows(&[
            (vec![0.0], -0.1),
            (vec![1.0], 0.6),
            (vec![2.0], 0.5),
        ])
        .unwrap();
        let v = integrate(&mu, 1, |z, out| out[0] = z[0]).unwrap();
        assert!((v[0] - 1.6).abs() < 1e-15);
        assert!((mu.negative_mass() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn integrate_rejects_non_finite() {
        let mu = SignedMeasure::from_weighted_rows(&[(vec![0.0], 1.0)]).unwrap();
        let err = integrate(&mu, 1, |_, out| out[0] = f64::NAN).unwrap_err();
        assert!(matches!(err, MeasureError::NonFiniteIntegrand { .. }));
    }

    #[test]
    fn trim_and_normalize_examples() {
        let mu = SignedMeasure::from_weighted_rows(&[
            (vec![0.0], -0.1),
            (vec![1.0], 0.6),
            (vec![2.0], 0.5),
        ])
        .unwrap();
        let pm = trim_and_normalize(&mu).unwrap();
        let w: Vec<f64> = pm.weights().to_vec();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 6.0 / 11.0).abs() < 1e-15);
        assert!((w[2] - 5.0 / 11.0).abs() < 1e-15);

        let already =
            SignedMeasure::from_weighted_rows(&[(vec![0.0], 0.25), (vec![1.0], 0.75)]).unwrap();
        let pm = trim_and_normalize(&already).unwrap();
        assert_eq!(pm.weights(), &[0.25, 0.75]);

        let allneg =
            SignedMeasure::from_weighted_rows(&[(vec![0.0], -1.0), (vec![1.0], -2.0)]).unwrap();
        assert!(matches!(
            trim_and_normalize(&allneg).unwrap_err(),
            MeasureError::AllWeightsNonpositive
        ));
    }

    #[test]
    fn sampling_single_atom_and_determinism() {
        let mu = SignedMeasure::from_weighted_rows(&[(vec![7.0, 1.0], 1.0)]).unwrap();
        let pm = trim_and_normalize(&mu).unwrap();
        let draws = sample_atoms(&pm, 5, &mut substream(3, 1, 0));
        assert_eq!(draws.len(), 5);
        assert!(draws.iter().all(|p| p == &[7.0, 1.0]));

        let two =
            SignedMeasure::from_weighted_rows(&[(vec![0.0], 0.5), (vec![1.0], 0.5)]).unwrap();
        let pm = trim_and_normalize(&two).unwrap();
        let a = sample_atoms(&pm, 100, &mut substream(9, 2, 7));
        let b = sample_atoms(&pm, 100, &mut substream(9, 2, 7));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequencies_concentrate() {
        let two =
            SignedMeasure::from_weighted_rows(&[(vec![0.0], 0.5), (vec![1.0], 0.5)]).unwrap();
        let pm = trim_and_normalize(&two).unwrap();
        let n = 100_000;
        let draws = sample_atoms(&pm, n, &mut substream(42, 5, 0));
        let ones = draws.iter().filter(|p| p[0] == 1.0).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq = {freq}");
    }

    #[test]
    fn uniform_measure_merges_duplicates() {
        let mu = SignedMeasure::uniform(&[vec![1.0], vec![2.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.weight_at(&[1.0]), 3.0 / 4.0);
        assert_eq!(mu.weight_at(&[2.0]), 1.0 / 4.0);
    }

    #[test]
    fn csv_export_has_expected_header() {
        let mu = SignedMeasure::from_weighted_rows(&[(vec![1.0, 2.0], 0.5)]).unwrap();
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("z_1,z_2,weight\n"));
        assert!(text.contains("1,2,0.5"));
    }

    #[test]
    fn pair_measure_matches_tuple_grid_for_scalar_waves() {
        // for d = 1 the tuple grid is the full product, so the (0, 1) pair
        // marginal must reproduce the jump measure
        let data = scalar_data(
            &[
                (1.0, Some(2.5)),
                (2.0, None),
                (3.0, Some(1.5)),
                (4.5, Some(4.0)),
                (5.0, None),
            ],
            &[1.5, 2.5, 3.5, 4.0],
        );
        for link in [LinkFunction::logit(), LinkFunction::exp()] {
            let f = CorrectedCdf::build(&data, link).unwrap();
            let grid = JumpGrid::build(&data, GridStrategy::PaperTuples);
            let tuple = jump_masses(&f, &grid).unwrap();
            let pair = corrected_pair_measure(&f, 0, 1).unwrap();
            assert_eq!(tuple.len(), pair.len());
            for ((p1, w1), (p2, w2)) in tuple.atoms().zip(pair.atoms()) {
                assert_eq!(p1, p2);
                assert!((w1 - w2).abs() < 1e-12, "{w1} vs {w2}");
            }
        }
    }

    #[test]
    fn pair_measure_matches_materialized_full_product() {
        // small bivariate dataset: integrals of pairwise monomials against
        // the materialized full-product measure equal the pair marginals.
        // One refreshment point sits below everything so every product atom
        // is supported and no mass is dropped on either route.
        let mut rng = substream(21, 77, 0);
        let rows: Vec<PanelRow> = (0..12)
            .map(|i| {
                let z1 = vec![rng.random::<f64>(), rng.random::<f64>()];
                let stay = rng.random::<f64>() < 0.7;
                let z2 = stay.then(|| vec![rng.random::<f64>(), rng.random::<f64>()]);
                row(i, z1, z2)
            })
            .collect();
        let p = PanelDataset::new(rows).unwrap();
        let mut refresh: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        refresh.push(vec![0.0, 0.0]);
        let r = RefreshmentDataset::new(refresh).unwrap();
        let data = ValidatedData::validate(p, r).unwrap();
        let f = CorrectedCdf::build(&data, LinkFunction::logit()).unwrap();
        let grid = JumpGrid::build(&data, GridStrategy::FullProduct);
        assert_eq!(grid.dropped_z2_atoms(), 0);
        let full = jump_masses(&f, &grid).unwrap();
        for (i, j) in [(0usize, 2usize), (0, 1), (2, 3), (1, 3), (0, 3)] {
            let direct = integrate(&full, 1, |z, out| out[0] = z[i] * z[j]).unwrap()[0];
            let pair = corrected_pair_measure(&f, i, j).unwrap();
            let marginal = integrate(&pair, 1, |z, out| out[0] = z[0] * z[1]).unwrap()[0];
            assert!(
                (direct - marginal).abs() < 1e-9,
                "pair ({i},{j}): {direct} vs {marginal}"
            );
        }
        let pair = corrected_pair_measure(&f, 0, 2).unwrap();
        assert!(
            (full.total_mass() + full.dropped_mass()
                - (pair.total_mass() + pair.dropped_mass()))
            .abs()
                < 1e-9
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_dataset() -> impl Strategy<Value = ValidatedData> {
            // up to 8 atoms per block, values on a coarse lattice so ties
            // and shared walls actually occur
            let z = || (0..=12u8).prop_map(|v| v as f64 * 0.5);
            let panel_row = (z(), z(), any::<bool>());
            (
                proptest::collection::vec(panel_row, 2..8),
                proptest::collection::vec(z(), 1..8),
            )
                .prop_filter_map("needs a stayer", |(rows, refresh)| {
                    let rows: Vec<PanelRow> = rows
                        .into_iter()
                        .enumerate()
                        .map(|(i, (z1, z2, w))| PanelRow {
                            id: format!("u{i}"),
                            z1: vec![z1],
                            w,
                            z2: w.then_some(vec![z2]),
                        })
                        .collect();
                    let panel = PanelDataset::new(rows).ok()?;
                    let refresh =
                        RefreshmentDataset::new(refresh.into_iter().map(|v| vec![v]).collect())
                            .ok()?;
                    ValidatedData::validate(panel, refresh).ok()
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn masses_match_oracle_on_random_small_datasets(data in small_dataset()) {
                for link in [LinkFunction::logit(), LinkFunction::exp()] {
                    let f = CorrectedCdf::build(&data, link).unwrap();
                    let grid = JumpGrid::build(&data, GridStrategy::PaperTuples);
                    let mu = jump_masses(&f, &grid).unwrap();
                    for a in 0..grid.n_z1() {
                        for b in 0..grid.n_z2() {
                            let want = oracle_weight(&f, &grid, a, b);
                            let want = if want.abs() < WEIGHT_FLOOR { 0.0 } else { want };
                            let mut point = grid.z1_atom(a).to_vec();
                            point.extend_from_slice(grid.z2_atom(b));
                            let got = mu.weight_at(&point);
                            prop_assert!(
                                (got - want).abs() <= 1e-12,
                                "atom ({a},{b}): {got} vs {want}"
                            );
                        }
                    }
                }
            }

            #[test]
            fn jump_masses_invariant_to_admissible_offsets(
                data in small_dataset(),
                scale in 0.05f64..1.0,
            ) {
                let f = CorrectedCdf::build(&data, LinkFunction::logit()).unwrap();
                let grid = JumpGrid::build(&data, GridStrategy::PaperTuples);
                let a = jump_masses(&f, &grid).unwrap();
                let b = jump_masses(&f, &grid.with_h_scaled(scale)).unwrap();
                prop_assert_eq!(a.len(), b.len());
                for ((p1, w1), (p2, w2)) in a.atoms().zip(b.atoms()) {
                    prop_assert_eq!(p1, p2);
                    prop_assert!((w1 - w2).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn unsupported_atom_rejected() {
        // grid from one dataset, corrected CDF from another whose
        // refreshment support sits higher
        let data = scalar_data(&[(1.0, Some(1.0)), (2.0, Some(2.0))], &[1.0, 2.0]);
        let other = scalar_data(&[(1.0, Some(1.0)), (2.0, Some(2.0))], &[5.0]);
        let grid = JumpGrid::build(&data, GridStrategy::PaperTuples);
        let f = CorrectedCdf::build(&other, LinkFunction::logit()).unwrap();
        let err = jump_masses(&f, &grid).unwrap_err();
        assert!(matches!(
            err,
            MeasureError::UnsupportedAtom { block: "z2", .. }
        ));
    }
}
