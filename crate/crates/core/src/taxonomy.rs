//! Tissue-type label set: 23 morphological and 4 functional classes plus the
//! synthetic Background and Other labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 27;
/// Mask index of the synthetic Background label.
pub const BACKGROUND: usize = NUM_CLASSES;
/// Mask index of the synthetic Other label.
pub const OTHER: usize = NUM_CLASSES + 1;
/// Number of distinct values a segmentation mask can hold.
pub const NUM_MASK_LABELS: usize = NUM_CLASSES + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Morphological,
    Functional,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Morphological => "morph",
            Mode::Functional => "func",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "morph" | "morphological" => Ok(Mode::Morphological),
            "func" | "functional" => Ok(Mode::Functional),
            other => Err(Error::Config(format!(
                "unknown mode {:?} (expected morph or func)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub code: &'static str,
    pub name: &'static str,
    pub mode: Mode,
    pub color: [u8; 3],
}

const fn class(code: &'static str, name: &'static str, mode: Mode, color: [u8; 3]) -> ClassInfo {
    ClassInfo {
        code,
        name,
        mode,
        color,
    }
}

use Mode::{Functional as F, Morphological as M};

pub static CLASSES: [ClassInfo; NUM_CLASSES] = [
    class("E.M.S", "Simple squamous epithelium", M, [73, 0, 106]),
    class("E.M.U", "Simple cuboidal epithelium", M, [108, 0, 115]),
    class("E.M.O", "Simple columnar epithelium", M, [145, 1, 122]),
    class("E.T.S", "Stratified squamous epithelium", M, [181, 9, 130]),
    class("E.T.U", "Stratified cuboidal epithelium", M, [216, 47, 148]),
    class("E.T.O", "Stratified columnar epithelium", M, [236, 85, 157]),
    class("E.P", "Pseudostratified epithelium", M, [120, 60, 140]),
    class("C.D.I", "Dense irregular connective", M, [248, 123, 168]),
    class("C.D.R", "Dense regular connective", M, [0, 0, 255]),
    class("C.L", "Loose connective", M, [0, 255, 255]),
    class("H.E", "Erythrocytes", M, [255, 0, 0]),
    class("H.K", "Leukocytes", M, [255, 128, 0]),
    class("H.Y", "Lymphocytes", M, [200, 100, 50]),
    class("S.M", "Mature bone", M, [255, 255, 0]),
    class("S.E", "Immature bone", M, [180, 180, 0]),
    class("S.C", "Cartilage", M, [120, 120, 0]),
    class("S.R", "Marrow", M, [60, 120, 60]),
    class("A", "Adipose", M, [255, 170, 255]),
    class("A.W", "White adipose", M, [230, 200, 230]),
    class("A.B", "Brown adipose", M, [150, 90, 60]),
    class("M", "Skeletal muscle", M, [0, 200, 0]),
    class("N.P", "Neuropil", M, [0, 128, 255]),
    class("N.G", "Nerve and ganglion", M, [128, 0, 255]),
    class("G.O", "Exocrine gland", F, [0, 160, 160]),
    class("G.N", "Endocrine gland", F, [160, 80, 0]),
    class("G.E", "Glandular epithelium", F, [80, 160, 255]),
    class("T", "Transport vessel", F, [255, 64, 64]),
];

pub const BACKGROUND_COLOR: [u8; 3] = [255, 255, 255];
pub const OTHER_COLOR: [u8; 3] = [64, 64, 64];

/// Index of a class code (or `"Background"`/`"Other"`) in mask space.
pub fn index_of(code: &str) -> Result<usize> {
    match code {
        "Background" | "B" => return Ok(BACKGROUND),
        "Other" | "O" => return Ok(OTHER),
        _ => {}
    }
    CLASSES
        .iter()
        .position(|c| c.code == code)
        .ok_or_else(|| Error::Config(format!("unknown class code {:?}", code)))
}

/// Code for a mask label, including the synthetic ones.
pub fn code_of(label: usize) -> Result<&'static str> {
    match label {
        BACKGROUND => Ok("Background"),
        OTHER => Ok("Other"),
        j if j < NUM_CLASSES => Ok(CLASSES[j].code),
        j => Err(Error::invalid("taxonomy", format!("label {} out of range", j))),
    }
}

pub fn color_of(label: usize) -> Result<[u8; 3]> {
    match label {
        BACKGROUND => Ok(BACKGROUND_COLOR),
        OTHER => Ok(OTHER_COLOR),
        j if j < NUM_CLASSES => Ok(CLASSES[j].color),
        j => Err(Error::invalid("taxonomy", format!("label {} out of range", j))),
    }
}

/// Mode tag used in reports; Background belongs to both modes, Other to functional.
pub fn mode_tag(label: usize) -> &'static str {
    match label {
        BACKGROUND => "both",
        OTHER => "func",
        j if j < NUM_CLASSES => CLASSES[j].mode.as_str(),
        _ => "?",
    }
}

/// Tissue classes of one mode.
pub fn classes_in(mode: Mode) -> Vec<usize> {
    (0..NUM_CLASSES).filter(|&j| CLASSES[j].mode == mode).collect()
}

/// Every label a mask produced in `mode` may contain.
pub fn mask_universe(mode: Mode) -> Vec<usize> {
    let mut out = classes_in(mode);
    out.push(BACKGROUND);
    if mode == Mode::Functional {
        out.push(OTHER);
    }
    out
}

/// Class indices used by the background and Other constructions.
#[derive(Clone, Copy, Debug)]
pub struct DesignatedClasses {
    pub white_adipose: usize,
    pub adipose: usize,
    pub exocrine: usize,
    pub endocrine: usize,
    pub transport: usize,
}

pub fn designated() -> DesignatedClasses {
    let idx = |c| index_of(c).expect("designated code is in the table");
    DesignatedClasses {
        white_adipose: idx("A.W"),
        adipose: idx("A"),
        exocrine: idx("G.O"),
        endocrine: idx("G.N"),
        transport: idx("T"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_by_mode() {
        assert_eq!(classes_in(Mode::Morphological).len(), 23);
        assert_eq!(classes_in(Mode::Functional).len(), 4);
    }

    #[test]
    fn codes_and_colors_are_unique() {
        let codes: HashSet<_> = CLASSES.iter().map(|c| c.code).collect();
        assert_eq!(codes.len(), NUM_CLASSES);
        let mut colors: HashSet<_> = CLASSES.iter().map(|c| c.color).collect();
        colors.insert(BACKGROUND_COLOR);
        colors.insert(OTHER_COLOR);
        assert_eq!(colors.len(), NUM_MASK_LABELS);
    }

    #[test]
    fn designated_codes_resolve() {
        let d = designated();
        assert_eq!(CLASSES[d.white_adipose].code, "A.W");
        assert_eq!(CLASSES[d.transport].mode, Mode::Functional);
        assert_eq!(CLASSES[d.adipose].mode, Mode::Morphological);
        assert!(index_of("X.Y").is_err());
        assert_eq!(code_of(index_of("Other").unwrap()).unwrap(), "Other");
    }

    #[test]
    fn universes() {
        assert_eq!(mask_universe(Mode::Morphological).len(), 24);
        assert!(mask_universe(Mode::Functional).contains(&OTHER));
        assert!("func".parse::<Mode>().is_ok());
        assert!("x".parse::<Mode>().is_err());
    }
}
