//! Link functions tying the rectangle-conditional staying probability to the
//! additive attrition components.
//!
//! A link is a known, strictly increasing, differentiable map from the reals
//! onto an interval of positive values. The corrected-CDF transform only needs
//! the forward map, the inverse, and a policy for arguments that finite-sample
//! ratios push outside the attainable range.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Default padding fraction used by [`LinkFunction::clamp_to_range`].
pub const DEFAULT_CLAMP_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("link '{name}': forward map is not strictly increasing near x={x}")]
    NotIncreasing { name: String, x: f64 },
    #[error("link '{name}': round trip failed at y={y} (|err| = {err:e})")]
    RoundTrip { name: String, y: f64, err: f64 },
    #[error("link range is empty or not ordered: ({lo}, {hi})")]
    BadRange { lo: f64, hi: f64 },
}

/// Open interval of values the forward map can attain. `hi` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkRange {
    pub lo: f64,
    pub hi: f64,
}

/// Tags the built-in links so hot paths can use their closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Logit,
    Exp,
    Custom,
}

type Map = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct LinkFunction {
    name: String,
    kind: LinkKind,
    forward: Map,
    inverse: Map,
    range: LinkRange,
    eps: f64,
}

impl fmt::Debug for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkFunction")
            .field("name", &self.name)
            .field("range", &self.range)
            .finish()
    }
}

impl LinkFunction {
    /// Logistic link: `forward(x) = 1 / (1 + exp(-x))`, range `(0, 1)`.
    pub fn logit() -> Self {
        LinkFunction {
            name: "logit".into(),
            kind: LinkKind::Logit,
            forward: Arc::new(|x| 1.0 / (1.0 + (-x).exp())),
            inverse: Arc::new(|y| (y / (1.0 - y)).ln()),
            range: LinkRange { lo: 0.0, hi: 1.0 },
            eps: DEFAULT_CLAMP_EPS,
        }
    }

    /// Exponential link: `forward = exp`, `inverse = ln`, range `(0, inf)`.
    pub fn exp() -> Self {
        LinkFunction {
            name: "exp".into(),
            kind: LinkKind::Exp,
            forward: Arc::new(f64::exp),
            inverse: Arc::new(f64::ln),
            range: LinkRange {
                lo: 0.0,
                hi: f64::INFINITY,
            },
            eps: DEFAULT_CLAMP_EPS,
        }
    }

    /// Register a user-supplied link after validating strict monotonicity of
    /// the forward map and both round trips on a 1000-point lattice strictly
    /// inside the range.
    pub fn custom<F, G>(name: &str, forward: F, inverse: G, range: LinkRange) -> Result<Self, LinkError>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        // attainable values must be positive, so lo >= 0
        if !(range.lo < range.hi) || !range.lo.is_finite() || range.lo < 0.0 {
            return Err(LinkError::BadRange {
                lo: range.lo,
                hi: range.hi,
            });
        }
        let link = LinkFunction {
            name: name.into(),
            kind: LinkKind::Custom,
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
            range,
            eps: DEFAULT_CLAMP_EPS,
        };
        link.validate()?;
        Ok(link)
    }

    /// Look up a built-in link by its configuration name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "logit" => Some(Self::logit()),
            "exp" => Some(Self::exp()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), LinkError> {
        let ys = self.interior_lattice(1000);
        let mut prev_x = f64::NEG_INFINITY;
        for &y in &ys {
            let x = self.inverse(y);
            if !(x > prev_x) {
                return Err(LinkError::NotIncreasing {
                    name: self.name.clone(),
                    x,
                });
            }
            prev_x = x;
            let back = self.forward(x);
            let err = (back - y).abs();
            if err > 1e-12 * y.abs().max(1.0) {
                return Err(LinkError::RoundTrip {
                    name: self.name.clone(),
                    y,
                    err,
                });
            }
        }
        Ok(())
    }

    /// Lattice of range values strictly inside `(lo, hi)` used for validation.
    fn interior_lattice(&self, points: usize) -> Vec<f64> {
        let lo = self.range.lo;
        let hi = if self.range.hi.is_finite() {
            self.range.hi
        } else {
            // probe several orders of magnitude above lo
            self.range.lo + 1e6
        };
        let span = hi - lo;
        (1..=points)
            .map(|i| lo + span * i as f64 / (points + 1) as f64)
            .collect()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LinkKind {
        self.kind
    }

    pub fn range(&self) -> LinkRange {
        self.range
    }

    pub fn clamp_eps(&self) -> f64 {
        self.eps
    }

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        (self.forward)(x)
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        (self.inverse)(y)
    }

    /// Pull `y` strictly inside the attainable range.
    ///
    /// Bounded ranges are padded by `eps * span` on both ends; half-open
    /// ranges only from below. Values already strictly inside pass through
    /// unchanged, so clamping is idempotent.
    #[inline]
    pub fn clamp_to_range(&self, y: f64) -> f64 {
        let LinkRange { lo, hi } = self.range;
        if hi.is_finite() {
            let pad = self.eps * (hi - lo);
            y.max(lo + pad).min(hi - pad)
        } else {
            y.max(lo + self.eps)
        }
    }

    /// Clamp and record whether the value actually moved.
    #[inline]
    pub(crate) fn clamp_counted(&self, y: f64, events: &AtomicU64) -> f64 {
        let c = self.clamp_to_range(y);
        if c != y {
            events.fetch_add(1, Ordering::Relaxed);
        }
        c
    }
}
