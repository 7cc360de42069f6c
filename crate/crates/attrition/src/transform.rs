//! The corrected joint CDF.
//!
//! Under the separability assumption, the target CDF is a closed-form
//! transform of six identified quantities: the stay fraction `p`, the two
//! marginal CDFs `F1` (first wave) and `F2` (refreshment), their stayer
//! counterparts `F1w` and `F2w`, and the stayers' joint CDF `Fw`:
//!
//! ```text
//! F = p * Fw / G( G^{-1}(p*F1w/F1) + G^{-1}(p*F2w/F2) - G^{-1}(p) )
//! ```
//!
//! Plugging in the empirical CDFs gives the first-step estimator. The result
//! is not necessarily a valid CDF in finite samples; downstream code tolerates
//! that. Ratios that fall outside the link's attainable range are clamped, and
//! every clamp that changes a value is counted in a diagnostic surfaced by the
//! estimation results.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::dataio::ValidatedData;
use crate::ecdf::{Ecdf, EcdfError};
use crate::link::LinkFunction;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("domain error: {arg} = {value} must be positive")]
    Domain { arg: &'static str, value: f64 },
    #[error("evaluation point lies below the observed {axis} support")]
    SupportViolation { axis: &'static str },
    #[error("panel has no stayers")]
    NoStayers,
    #[error(transparent)]
    Ecdf(#[from] EcdfError),
}

/// The CDF transform as a pure function of its six arguments.
///
/// All three inverse-link arguments pass through the link's range clamp.
pub fn phi(
    p: f64,
    f1: f64,
    f2: f64,
    f1w: f64,
    f2w: f64,
    fw: f64,
    link: &LinkFunction,
) -> Result<f64, TransformError> {
    if !(f1 > 0.0) {
        return Err(TransformError::Domain {
            arg: "F1",
            value: f1,
        });
    }
    if !(f2 > 0.0) {
        return Err(TransformError::Domain {
            arg: "F2",
            value: f2,
        });
    }
    let pc = link.clamp_to_range(p);
    let r1 = link.clamp_to_range(p * f1w / f1);
    let r2 = link.clamp_to_range(p * f2w / f2);
    let arg = link.inverse(r1) + link.inverse(r2) - link.inverse(pc);
    Ok(p * fw / link.forward(arg))
}

/// Plug-in estimator of the corrected CDF.
///
/// Immutable after construction; evaluation from many threads is safe. The
/// clamp counter is the only interior mutability and is purely diagnostic.
#[derive(Debug)]
pub struct CorrectedCdf {
    p_hat: f64,
    n1: usize,
    n2: usize,
    nr: usize,
    f1: Ecdf,
    f2: Ecdf,
    f1w: Ecdf,
    f2w: Ecdf,
    fw: Ecdf,
    link: LinkFunction,
    clamp_events: AtomicU64,
}

impl CorrectedCdf {
    /// Build the five empirical CDFs and the stay fraction from the data.
    pub fn build(data: &ValidatedData, link: LinkFunction) -> Result<Self, TransformError> {
        let panel = data.panel();
        let n1 = panel.n1();
        let n2 = panel.n2();
        if n2 == 0 {
            return Err(TransformError::NoStayers);
        }
        let z1_all: Vec<&[f64]> = panel.rows().iter().map(|r| r.z1.as_slice()).collect();
        let z1_stay: Vec<&[f64]> = panel.stayers().map(|r| r.z1.as_slice()).collect();
        let z2_stay: Vec<&[f64]> = panel
            .stayers()
            .map(|r| r.z2.as_ref().expect("stayer has z2").as_slice())
            .collect();
        let joint = data.stayer_joint_rows();
        let refresh: Vec<&[f64]> = data.refreshment().rows().iter().map(|r| r.as_slice()).collect();

        Ok(CorrectedCdf {
            p_hat: n2 as f64 / n1 as f64,
            n1,
            n2,
            nr: data.n_r(),
            f1: Ecdf::from_rows(&z1_all)?,
            f2: Ecdf::from_rows(&refresh)?,
            f1w: Ecdf::from_rows(&z1_stay)?,
            f2w: Ecdf::from_rows(&z2_stay)?,
            fw: Ecdf::from_rows(&joint)?,
            link,
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn p_hat(&self) -> f64 {
        self.p_hat
    }

    pub fn d(&self) -> usize {
        self.f1.d()
    }

    pub fn link(&self) -> &LinkFunction {
        &self.link
    }

    pub fn f1(&self) -> &Ecdf {
        &self.f1
    }

    pub fn f2(&self) -> &Ecdf {
        &self.f2
    }

    pub fn f1w(&self) -> &Ecdf {
        &self.f1w
    }

    pub fn f2w(&self) -> &Ecdf {
        &self.f2w
    }

    pub fn fw(&self) -> &Ecdf {
        &self.fw
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    /// Number of clamp events recorded so far.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Evaluate the corrected CDF at `(z1, z2)`.
    ///
    /// Errors when the point lies below the first-wave support (`F1 = 0`) or
    /// below the refreshment support (`F2 = 0`), since the transform divides
    /// by both.
    pub fn eval(&self, z1: &[f64], z2: &[f64]) -> Result<f64, TransformError> {
        let c1 = self.f1.count_le(z1);
        if c1 == 0 {
            return Err(TransformError::SupportViolation { axis: "z1" });
        }
        let c2 = self.f2.count_le(z2);
        if c2 == 0 {
            return Err(TransformError::SupportViolation { axis: "z2" });
        }
        let c1w = self.f1w.count_le(z1);
        let c2w = self.f2w.count_le(z2);
        let mut q = Vec::with_capacity(z1.len() + z2.len());
        q.extend_from_slice(z1);
        q.extend_from_slice(z2);
        let cw = self.fw.count_le(&q);
        Ok(self.corner_from_counts(c1, c1w, c2, c2w, cw))
    }

    /// First attrition component, `G^{-1}(p * F1w(z1) / F1(z1))`.
    pub fn k1_hat(&self, z1: &[f64]) -> Result<f64, TransformError> {
        let c1 = self.f1.count_le(z1);
        if c1 == 0 {
            return Err(TransformError::SupportViolation { axis: "z1" });
        }
        let f1 = c1 as f64 / self.n1 as f64;
        let f1w = self.f1w.count_le(z1) as f64 / self.n2 as f64;
        let r = self
            .link
            .clamp_counted(self.p_hat * f1w / f1, &self.clamp_events);
        Ok(self.link.inverse(r))
    }

    /// Second attrition component, normalized to vanish at the top of the
    /// support: `G^{-1}(p * F2w(z2) / F2(z2)) - G^{-1}(p)`.
    pub fn k2_hat(&self, z2: &[f64]) -> Result<f64, TransformError> {
        let c2 = self.f2.count_le(z2);
        if c2 == 0 {
            return Err(TransformError::SupportViolation { axis: "z2" });
        }
        let f2 = c2 as f64 / self.nr as f64;
        let f2w = self.f2w.count_le(z2) as f64 / self.n2 as f64;
        let r = self
            .link
            .clamp_counted(self.p_hat * f2w / f2, &self.clamp_events);
        let pc = self.link.clamp_counted(self.p_hat, &self.clamp_events);
        Ok(self.link.inverse(r) - self.link.inverse(pc))
    }

    /// Corner evaluation from raw counts.
    ///
    /// This is the transform the jump-measure extraction applies at grid
    /// corners, where points one half-gap below the smallest observations are
    /// routine. With no stayer mass below the corner the value is exactly
    /// zero. A zero refreshment count with positive stayer mass gives an
    /// infinite ratio, which the clamp policy resolves: bounded links cap it
    /// at the top of the range, half-open links send the denominator to
    /// infinity and the value to zero.
    pub(crate) fn corner_from_counts(
        &self,
        c1: usize,
        c1w: usize,
        c2: usize,
        c2w: usize,
        cw: usize,
    ) -> f64 {
        if cw == 0 {
            return 0.0;
        }
        // cw > 0 forces c1 >= c1w >= cw > 0 (stayers are first-wave units)
        // and c2w >= cw > 0; only c2 can still be zero.
        debug_assert!(c1 >= c1w && c1w >= cw && c2w >= cw);
        let p = self.p_hat;
        let f1 = c1 as f64 / self.n1 as f64;
        let f1w = c1w as f64 / self.n2 as f64;
        let f2 = c2 as f64 / self.nr as f64;
        let f2w = c2w as f64 / self.n2 as f64;
        let fw = cw as f64 / self.n2 as f64;
        let pc = self.link.clamp_counted(p, &self.clamp_events);
        let r1 = self.link.clamp_counted(p * f1w / f1, &self.clamp_events);
        let r2 = self.link.clamp_counted(p * f2w / f2, &self.clamp_events);
        let arg = self.link.inverse(r1) + self.link.inverse(r2) - self.link.inverse(pc);
        p * fw / self.link.forward(arg)
    }

    /// Clamped ratio ingredients used by the optimized measure extraction.
    pub(crate) fn clamped_ratio_z1(&self, c1: usize, c1w: usize) -> f64 {
        let f1 = c1 as f64 / self.n1 as f64;
        let f1w = c1w as f64 / self.n2 as f64;
        self.link
            .clamp_counted(self.p_hat * f1w / f1, &self.clamp_events)
    }

    pub(crate) fn clamped_ratio_z2(&self, c2: usize, c2w: usize) -> f64 {
        let f2 = c2 as f64 / self.nr as f64;
        let f2w = c2w as f64 / self.n2 as f64;
        self.link
            .clamp_counted(self.p_hat * f2w / f2, &self.clamp_events)
    }

    pub(crate) fn clamped_p(&self) -> f64 {
        self.link.clamp_counted(self.p_hat, &self.clamp_events)
    }
}
