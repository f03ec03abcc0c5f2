//! Domain value types and interval arithmetic shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal segment of a video, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    start: f64,
    end: f64,
}

impl Moment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "moment bounds must be finite, got ({start}, {end})"
            )));
        }
        if start < 0.0 || end < start {
            return Err(Error::InvalidArgument(format!(
                "moment requires 0 <= start <= end, got ({start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }

    /// Like [`Moment::new`] but also checks `end <= duration`.
    pub fn within(start: f64, end: f64, duration: f64) -> Result<Self> {
        let m = Self::new(start, end)?;
        if end > duration {
            return Err(Error::InvalidArgument(format!(
                "moment end {end} exceeds video duration {duration}"
            )));
        }
        Ok(m)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Intersection over union of two intervals.
///
/// Two zero-length intervals have IoU 1 when they are the same point and 0
/// otherwise; any other zero-union pair cannot occur.
pub fn iou(a: &Moment, b: &Moment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A candidate segment in normalized video time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub center: f64,
    pub width: f64,
    /// Reliability weight from mask aggregation, when known.
    pub score: Option<f64>,
}

impl Proposal {
    pub fn new(center: f64, width: f64, width_cap: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&center) {
            return Err(Error::InvalidArgument(format!(
                "proposal center {center} outside [0, 1]"
            )));
        }
        if !(width_cap > 0.0 && width_cap <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "width cap {width_cap} outside (0, 1]"
            )));
        }
        if !(width > 0.0 && width <= width_cap) {
            return Err(Error::InvalidArgument(format!(
                "proposal width {width} outside (0, {width_cap}]"
            )));
        }
        Ok(Self {
            center,
            width,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// The proposal as a clamped interval of the unit timeline.
    pub fn unit_interval(&self) -> Moment {
        let start = (self.center - self.width / 2.0).max(0.0);
        let end = (self.center + self.width / 2.0).min(1.0);
        Moment {
            start,
            end: end.max(start),
        }
    }
}

/// Converts a normalized proposal into seconds, clamping to the video.
pub fn proposal_to_moment(p: &Proposal, duration: f64) -> Result<Moment> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration}"
        )));
    }
    let unit = p.unit_interval();
    let start = unit.start * duration;
    let end = (unit.end * duration).min(duration);
    Ok(Moment {
        start,
        end: end.max(start),
    })
}

/// An ordered, non-empty list of proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(proposals: Vec<Proposal>) -> Result<Self> {
        if proposals.is_empty() {
            return Err(Error::InvalidArgument(
                "a proposal set needs at least one proposal".into(),
            ));
        }
        for p in &proposals {
            if !(0.0..=1.0).contains(&p.center) || !(p.width > 0.0 && p.width <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "invalid proposal (center {}, width {})",
                    p.center, p.width
                )));
            }
        }
        Ok(Self { proposals })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn as_slice(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Proposal> {
        self.proposals.iter()
    }
}

/// Positive, easy-negative and hard-negative clip weights for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTriplet {
    pub positive: Vec<f64>,
    pub easy: Vec<f64>,
    pub hard: Vec<f64>,
}
