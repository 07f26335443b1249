//! Per-pixel label masks.

use crate::error::{Error, Result};
use crate::taxonomy::NUM_MASK_LABELS;

/// Row-major `height × width` grid of mask labels (see [`crate::taxonomy`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!(
                    "{}×{} mask needs {} labels, got {}",
                    height,
                    width,
                    height * width,
                    data.len()
                ),
            ));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_MASK_LABELS) {
            return Err(Error::Data(format!("mask label {} out of range", bad)));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Labels present, ascending.
    pub fn labels_present(&self) -> Vec<usize> {
        let mut seen = [false; NUM_MASK_LABELS];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..NUM_MASK_LABELS).filter(|&l| seen[l]).collect()
    }
}
