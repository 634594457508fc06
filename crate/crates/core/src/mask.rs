//! Binary masks and click coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rect::Rect;

/// A pixel position: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Click {
    pub x: usize,
    pub y: usize,
}

impl Click {
    pub fn new(x: usize, y: usize) -> Self {
        Click { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn contains(&self, c: Click) -> bool {
        c.y < self.height && c.x < self.width && self.get(c.y, c.x)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `(row, col)` of every set pixel, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    /// Tight bounding box, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<Rect> {
        self.pixels().fold(None, |acc: Option<Rect>, (r, c)| {
            let p = Rect::pixel(r as i64, c as i64);
            Some(acc.map_or(p, |a| a.union(&p)))
        })
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "mask",
                format!(
                    "{}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.check_dims(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Pixels of `self` not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }
}
