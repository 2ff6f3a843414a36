//! ICO grades, acquisition attributes and the referral-category mapping.

use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, ParseError};

/// Diabetic-retinopathy grade on the ICO scale, extended with R5
/// (enucleated eye) and R6 (ungradable image).
///
/// Only R0..R4 are ordered by severity. R5 and R6 compare equal to
/// themselves and are incomparable with everything else, so `<` and `>`
/// return false whenever either side sits outside the severity scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grade {
    R0,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
}

impl Grade {
    pub const ALL: [Grade; 7] = [
        Grade::R0,
        Grade::R1,
        Grade::R2,
        Grade::R3,
        Grade::R4,
        Grade::R5,
        Grade::R6,
    ];

    /// Position on the severity scale, `None` for R5 and R6.
    pub fn severity(self) -> Option<u8> {
        match self {
            Grade::R0 => Some(0),
            Grade::R1 => Some(1),
            Grade::R2 => Some(2),
            Grade::R3 => Some(3),
            Grade::R4 => Some(4),
            Grade::R5 | Grade::R6 => None,
        }
    }

    pub fn is_gradable(self) -> bool {
        self.severity().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::R0 => "R0",
            Grade::R1 => "R1",
            Grade::R2 => "R2",
            Grade::R3 => "R3",
            Grade::R4 => "R4",
            Grade::R5 => "R5",
            Grade::R6 => "R6",
        }
    }
}

impl PartialOrd for Grade {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        if self == other {
            return Some(Ordering::Equal);
        }
        match (self.severity(), other.severity()) {
            (Some(a), Some(b)) => Some(a.cmp(&b)),
            _ => None,
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grade {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Grade::ALL
            .into_iter()
            .find(|g| g.as_str() == s.trim())
            .ok_or_else(|| ParseError::new("grade", s))
    }
}

/// Fundus photograph centring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    /// Macula-centred.
    A,
    /// Optic-nerve-centred.
    B,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::A => "A",
            Projection::B => "B",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" => Ok(Projection::A),
            "B" => Ok(Projection::B),
            other => Err(ParseError::new("projection", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Laterality {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Laterality {
    pub fn as_str(self) -> &'static str {
        match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Laterality {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "L" => Ok(Laterality::Left),
            "R" => Ok(Laterality::Right),
            other => Err(ParseError::new("laterality", other)),
        }
    }
}

/// Recorded sex. `Unknown` is accepted on ingestion only and never forms a
/// group in sex-sliced fairness runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "U")]
    Unknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
            Sex::Unknown => "U",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" => Ok(Sex::Male),
            "F" => Ok(Sex::Female),
            "U" => Ok(Sex::Unknown),
            other => Err(ParseError::new("sex", other)),
        }
    }
}

/// Which grades count as "refer".
///
/// `Rdr` refers R3/R4 and drops ungradable material; `Acr` additionally
/// refers ungradable (R6) images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReferralScheme {
    #[serde(rename = "RDR")]
    Rdr,
    #[serde(rename = "ACR")]
    Acr,
}

impl ReferralScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferralScheme::Rdr => "RDR",
            ReferralScheme::Acr => "ACR",
        }
    }
}

impl fmt::Display for ReferralScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferralScheme {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RDR" => Ok(ReferralScheme::Rdr),
            "ACR" => Ok(ReferralScheme::Acr),
            _ => Err(ParseError::new("referral scheme", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferralCategory {
    NonReferable,
    Referable,
    /// Ungradable material under RDR; dropped before confusion counting.
    Excluded,
}

impl ReferralCategory {
    /// Class code used in label files: 0 non-referable, 1 referable.
    pub fn code(self) -> Option<u8> {
        match self {
            ReferralCategory::NonReferable => Some(0),
            ReferralCategory::Referable => Some(1),
            ReferralCategory::Excluded => None,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ReferralCategory::NonReferable),
            1 => Some(ReferralCategory::Referable),
            _ => None,
        }
    }

    pub fn is_referable(self) -> bool {
        self == ReferralCategory::Referable
    }
}

/// Final outcome of screening one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    #[serde(rename = "review_12_months")]
    Review12Months,
    #[serde(rename = "review_6_months")]
    Review6Months,
    ReferSpecialist,
    ReferUngradable,
    Retake,
}

impl Disposition {
    pub const ALL: [Disposition; 5] = [
        Disposition::Review12Months,
        Disposition::Review6Months,
        Disposition::ReferSpecialist,
        Disposition::ReferUngradable,
        Disposition::Retake,
    ];

    pub fn is_terminal(self) -> bool {
        self != Disposition::Retake
    }

    /// Referral category implied by a terminal disposition. `None` for
    /// `Retake`, which has no outcome yet.
    pub fn referral(self, scheme: ReferralScheme) -> Option<ReferralCategory> {
        match self {
            Disposition::Review12Months | Disposition::Review6Months => {
                Some(ReferralCategory::NonReferable)
            }
            Disposition::ReferSpecialist => Some(ReferralCategory::Referable),
            Disposition::ReferUngradable => Some(match scheme {
                ReferralScheme::Rdr => ReferralCategory::Excluded,
                ReferralScheme::Acr => ReferralCategory::Referable,
            }),
            Disposition::Retake => None,
        }
    }
}

impl fmt::Display for Disposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Disposition::Review12Months => "review_12_months",
            Disposition::Review6Months => "review_6_months",
            Disposition::ReferSpecialist => "refer_specialist",
            Disposition::ReferUngradable => "refer_ungradable",
            Disposition::Retake => "retake",
        })
    }
}

/// Map a consensus grade to its referral category under `scheme`.
///
/// R5 (enucleation) has no category in either scheme; callers must filter
/// enucleated eyes out before asking.
pub fn referral_category(
    grade: Grade,
    scheme: ReferralScheme,
) -> Result<ReferralCategory, DomainError> {
    use ReferralCategory::*;
    match grade {
        Grade::R0 | Grade::R1 | Grade::R2 => Ok(NonReferable),
        Grade::R3 | Grade::R4 => Ok(Referable),
        Grade::R6 => Ok(match scheme {
            ReferralScheme::Rdr => Excluded,
            ReferralScheme::Acr => Referable,
        }),
        Grade::R5 => Err(DomainError::UnsupportedGrade(grade)),
    }
}
