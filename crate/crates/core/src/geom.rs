//! Axis-aligned boxes and scalar interval arithmetic.
//!
//! Boxes double as abstract-state cells, controller-parameter cells,
//! disturbance bounds, and reachable-set over-approximations. Intervals carry
//! the natural interval extension of the dynamics used by the reachability
//! routine; `sin`/`cos` envelopes account for interior extrema.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed axis-aligned box `[lo_1, hi_1] × … × [lo_d, hi_d]`.
///
/// Degenerate (zero-width) and unbounded entries are allowed; grid cells are
/// validated separately where a nonempty interior is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (dim, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || h.is_nan() || l > h {
                return Err(Error::InvalidBox { dim, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    /// Box spanning `[c, c]` in every dimension.
    pub fn point(c: &[f64]) -> Self {
        Self {
            lo: c.to_vec(),
            hi: c.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| 0.5 * (l + h))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| h - l).collect()
    }

    /// Euclidean diameter: the largest distance between two points of the box.
    pub fn diameter(&self) -> f64 {
        self.widths().iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Largest per-entry width; the max-norm diameter.
    pub fn max_entry_width(&self) -> f64 {
        self.widths().iter().fold(0.0, |a: f64, &w| a.max(w))
    }

    /// Closed membership test.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    /// Closed intersection test (shared faces count).
    pub fn intersects(&self, other: &AxisBox) -> bool {
        debug_assert_eq!(self.dim(), other.dim());
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .all(|((&l, &h), (&ol, &oh))| l <= oh && ol <= h)
    }

    pub fn contains_box(&self, inner: &AxisBox) -> bool {
        debug_assert_eq!(self.dim(), inner.dim());
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(inner.lo.iter().zip(&inner.hi))
            .all(|((&l, &h), (&il, &ih))| l <= il && ih <= h)
    }

    /// Minkowski sum with another box (componentwise interval sum).
    pub fn minkowski_sum(&self, other: &AxisBox) -> AxisBox {
        debug_assert_eq!(self.dim(), other.dim());
        AxisBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a + b).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a + b).collect(),
        }
    }

    /// The box translated by `delta` along one axis.
    pub fn shifted(&self, axis: usize, delta: f64) -> AxisBox {
        let mut out = self.clone();
        out.lo[axis] += delta;
        out.hi[axis] += delta;
        out
    }

    pub fn interval(&self, axis: usize) -> Interval {
        Interval::new(self.lo[axis], self.hi[axis])
    }

    pub fn from_intervals(ivs: &[Interval]) -> AxisBox {
        AxisBox {
            lo: ivs.iter().map(|iv| iv.lo).collect(),
            hi: ivs.iter().map(|iv| iv.hi).collect(),
        }
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..h) })
            .collect()
    }

    /// All `2^d` corner points, in lexicographic lo/hi order.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 0 { self.lo[i] } else { self.hi[i] })
                    .collect()
            })
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }
}

/// Closed scalar interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval bounds out of order: [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn add(self, o: Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn sub(self, o: Interval) -> Interval {
        Interval::new(self.lo - o.hi, self.hi - o.lo)
    }

    pub fn mul(self, o: Interval) -> Interval {
        let c = [
            self.lo * o.lo,
            self.lo * o.hi,
            self.hi * o.lo,
            self.hi * o.hi,
        ];
        Interval::new(
            c.iter().cloned().fold(f64::INFINITY, f64::min),
            c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn scale(self, s: f64) -> Interval {
        if s >= 0.0 {
            Interval::new(self.lo * s, self.hi * s)
        } else {
            Interval::new(self.hi * s, self.lo * s)
        }
    }

    pub fn offset(self, c: f64) -> Interval {
        Interval::new(self.lo + c, self.hi + c)
    }

    /// Largest absolute value attained on the interval.
    pub fn abs_max(self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// Smallest absolute value attained on the interval.
    pub fn abs_min(self) -> f64 {
        if self.contains(0.0) {
            0.0
        } else {
            self.lo.abs().min(self.hi.abs())
        }
    }

    /// Hull of two intervals.
    pub fn hull(self, o: Interval) -> Interval {
        Interval::new(self.lo.min(o.lo), self.hi.max(o.hi))
    }

    /// Division by an interval that does not contain zero.
    pub fn div(self, o: Interval) -> Interval {
        debug_assert!(!o.contains(0.0), "interval division by zero");
        self.mul(Interval::new(1.0 / o.hi, 1.0 / o.lo))
    }
}

/// Range of `cos` over an interval, rounded outward so the envelope stays
/// sound under floating-point evaluation.
pub fn interval_cos(iv: Interval) -> Interval {
    use std::f64::consts::TAU;
    if iv.width() >= TAU {
        return Interval::new(-1.0, 1.0);
    }
    let mut lo = iv.lo.cos().min(iv.hi.cos()) - TRIG_OUTWARD;
    let mut hi = iv.lo.cos().max(iv.hi.cos()) + TRIG_OUTWARD;
    // cos attains +1 at 2πk, -1 at π + 2πk; check whether any lie inside.
    if contains_multiple(iv, 0.0) {
        hi = 1.0;
    }
    if contains_multiple(iv, std::f64::consts::PI) {
        lo = -1.0;
    }
    Interval::new(lo, hi)
}

const TRIG_OUTWARD: f64 = 1e-12;

/// Range of `sin` over an interval.
pub fn interval_sin(iv: Interval) -> Interval {
    interval_cos(Interval::new(
        iv.lo - std::f64::consts::FRAC_PI_2,
        iv.hi - std::f64::consts::FRAC_PI_2,
    ))
}

/// Does `[lo, hi]` contain a point `phase + 2πk` for integer k?
fn contains_multiple(iv: Interval, phase: f64) -> bool {
    use std::f64::consts::TAU;
    let k = ((iv.lo - phase) / TAU).ceil();
    phase + k * TAU <= iv.hi
}
