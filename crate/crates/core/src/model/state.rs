use serde::{Deserialize, Serialize};

/// Type and age of one individual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub kind: usize,
    pub age: f64,
}

impl State {
    pub fn new(kind: usize, age: f64) -> Self {
        State { kind, age }
    }
}

pub const FEMALE: usize = 0;
pub const MALE: usize = 1;
pub const COUPLE: usize = 2;

/// State in the serial-monogamy model. The shape carries the absent age slot:
/// singles have exactly one age, couples carry both partners' ages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoupleState {
    Female { v: f64 },
    Male { w: f64 },
    Couple { v: f64, w: f64 },
}

impl CoupleState {
    pub fn kind(&self) -> usize {
        match self {
            CoupleState::Female { .. } => FEMALE,
            CoupleState::Male { .. } => MALE,
            CoupleState::Couple { .. } => COUPLE,
        }
    }

    /// `(v, w)` with `None` for the absent slot.
    pub fn ages(&self) -> (Option<f64>, Option<f64>) {
        match *self {
            CoupleState::Female { v } => (Some(v), None),
            CoupleState::Male { w } => (None, Some(w)),
            CoupleState::Couple { v, w } => (Some(v), Some(w)),
        }
    }

    /// Oldest age carried by the state.
    pub fn max_age(&self) -> f64 {
        match *self {
            CoupleState::Female { v } => v,
            CoupleState::Male { w } => w,
            CoupleState::Couple { v, w } => v.max(w),
        }
    }
}
