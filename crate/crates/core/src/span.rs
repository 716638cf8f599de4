//! Interval geometry on normalized temporal spans.
//!
//! A [`Span`] is a closed interval `[start, end]` with `0 <= start <= end <= 1`,
//! measured as a fraction of the sequence duration. Zero-width spans are legal
//! (they appear after clamping far-out noisy proposals); any IoU involving a
//! zero-width span is 0.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    start: f64,
    end: f64,
}

impl Span {
    /// Builds a span, rejecting anything outside `0 <= start <= end <= 1`.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "span endpoints must be finite, got ({start}, {end})"
            )));
        }
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err(Error::InvalidArgument(format!(
                "span ({start}, {end}) violates 0 <= start <= end <= 1"
            )));
        }
        Ok(Span { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn is_degenerate(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn intersection_len(&self, other: &Span) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn hull(&self, other: &Span) -> Span {
        Span {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }
}

impl TryFrom<[f64; 2]> for Span {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4})", self.start, self.end)
    }
}

/// Sorts the two endpoints ascending, then clips each into `[0, 1]`.
///
/// Sorting happens before clipping so that symmetric noise around a span
/// stays symmetric. Non-finite input is rejected.
pub fn clamp_and_order(raw_start: f64, raw_end: f64) -> Result<Span> {
    if !(raw_start.is_finite() && raw_end.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cannot clamp non-finite endpoints ({raw_start}, {raw_end})"
        )));
    }
    let (lo, hi) = if raw_start <= raw_end {
        (raw_start, raw_end)
    } else {
        (raw_end, raw_start)
    };
    Ok(Span {
        start: lo.clamp(0.0, 1.0),
        end: hi.clamp(0.0, 1.0),
    })
}

/// Intersection over union; 0 whenever either span has zero width.
pub fn iou_1d(a: &Span, b: &Span) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection_len(b);
    let union = a.width() + b.width() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |C \ (a ∪ b)| / |C|` with `C` the enclosing interval.
///
/// When the enclosing interval itself has zero length the gap term is taken
/// as 0, so two identical zero-width spans score 0.
pub fn giou_1d(a: &Span, b: &Span) -> f64 {
    let iou = iou_1d(a, b);
    let hull = a.hull(b).width();
    if hull <= 0.0 {
        return iou;
    }
    let inter = a.intersection_len(b);
    let union = a.width() + b.width() - inter;
    iou - (hull - union) / hull
}

/// Sum of absolute endpoint differences.
pub fn l1_1d(a: &Span, b: &Span) -> f64 {
    (a.start - b.start).abs() + (a.end - b.end).abs()
}

/// Values and partial derivatives of IoU pieces for a raw (possibly
/// unvalidated) predicted interval against a fixed target. Used by the
/// differentiable span loss, which needs gradients with respect to the
/// prediction endpoints.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GiouGrad {
    pub giou: f64,
    pub d_start: f64,
    pub d_end: f64,
}

pub(crate) fn giou_with_grad(ps: f64, pe: f64, ts: f64, te: f64) -> GiouGrad {
    let pw = pe - ps;
    let tw = te - ts;
    if pw <= 0.0 || tw <= 0.0 {
        // zero-width prediction: IoU is pinned at 0, only the gap term moves
        let hull = pe.max(te) - ps.min(ts);
        if hull <= 0.0 {
            return GiouGrad { giou: 0.0, d_start: 0.0, d_end: 0.0 };
        }
        let inter = (pe.min(te) - ps.max(ts)).max(0.0);
        let union = pw.max(0.0) + tw.max(0.0) - inter;
        let giou = union / hull - 1.0;
        // d(union/hull) with union = pw + tw - inter
        let (du_s, du_e) = (-1.0, 1.0);
        let dh_s = if ps < ts { -1.0 } else { 0.0 };
        let dh_e = if pe > te { 1.0 } else { 0.0 };
        let d_start = (du_s * hull - union * dh_s) / (hull * hull);
        let d_end = (du_e * hull - union * dh_e) / (hull * hull);
        return GiouGrad { giou, d_start, d_end };
    }

    let lo = ps.max(ts);
    let hi = pe.min(te);
    let overlap = hi > lo;
    let inter = if overlap { hi - lo } else { 0.0 };
    let union = pw + tw - inter;
    let hull = pe.max(te) - ps.min(ts);

    let di_s = if overlap && ps >= ts { -1.0 } else { 0.0 };
    let di_e = if overlap && pe <= te { 1.0 } else { 0.0 };
    let du_s = -1.0 - di_s;
    let du_e = 1.0 - di_e;
    let dh_s = if ps < ts { -1.0 } else { 0.0 };
    let dh_e = if pe > te { 1.0 } else { 0.0 };

    let iou = inter / union;
    let diou_s = (di_s * union - inter * du_s) / (union * union);
    let diou_e = (di_e * union - inter * du_e) / (union * union);
    let dr_s = (du_s * hull - union * dh_s) / (hull * hull);
    let dr_e = (du_e * hull - union * dh_e) / (hull * hull);

    GiouGrad {
        giou: iou - 1.0 + union / hull,
        d_start: diou_s + dr_s,
        d_end: diou_e + dr_e,
    }
}
