//! Soft and binary instance masks, IoU and run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel foreground probability in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("soft mask", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Pixel is foreground iff its probability is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Centre of mass in pixel units, pixel `(x, y)` centred at `(x+0.5, y+0.5)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            sx += (i % self.width) as f64 + 0.5;
            sy += (i / self.width) as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn overlaps(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Run lengths alternating background/foreground, starting with a
    /// (possibly zero-length) background run.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in &self.data {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let total: usize = runs.iter().sum();
        if total != height * width {
            return Err(Error::Data(format!(
                "RLE covers {total} pixels, canvas has {}",
                height * width
            )));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &r) in runs.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        Ok(Self { height, width, data })
    }
}

/// |a ∩ b| / |a ∪ b|, zero when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim("mask_iou", &[a.height, a.width], &[b.height, b.width]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
