use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Ground-truth class of a presentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    BonaFide,
    Attack,
}

/// Species tag carried by every bona-fide sample.
pub const BONA_FIDE_SPECIES: &str = "bonafide";

impl Label {
    pub fn is_bona_fide(self) -> bool {
        self == Label::BonaFide
    }

    /// SVM target: +1 for bona fide, -1 for attack.
    pub fn sign(self) -> f64 {
        match self {
            Label::BonaFide => 1.0,
            Label::Attack => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::BonaFide => Label::Attack,
            Label::Attack => Label::BonaFide,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::BonaFide => "bonafide",
            Label::Attack => "attack",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bonafide" | "bona_fide" | "bona-fide" | "real" | "live" | "1" => Ok(Label::BonaFide),
            "attack" | "fake" | "spoof" | "0" => Ok(Label::Attack),
            other => Err(Error::invalid("Label::from_str", format!("unknown label {other:?}"))),
        }
    }
}
