//! Axis-aligned box arithmetic.
//!
//! Coordinates are continuous pixel positions: a box spanning pixels 0..=9
//! in VOC's integer convention is `[0, 0, 10, 10]` here, and its area is
//! exactly `100`. There is no `+1` term anywhere. Zero-area boxes are legal
//! and have IoU 0 with everything, including themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|v| !v.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(coords));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box of the given size whose top-left corner is `(x, y)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area of the overlap region, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clip into `[0, width] x [0, height]`. A box entirely outside collapses
    /// onto the border as a zero-area box.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Row-major IoU matrix, `rows = proposals.len()`, `cols = gts.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IouMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `(max, argmax)` of row `i`; ties resolve to the lowest column.
    pub fn row_max(&self, i: usize) -> (f64, Option<usize>) {
        argmax(self.row(i))
    }
}

pub fn iou_matrix(proposals: &[BBox], gts: &[BBox]) -> IouMatrix {
    let mut data = Vec::with_capacity(proposals.len() * gts.len());
    for p in proposals {
        data.extend(gts.iter().map(|g| iou(p, g)));
    }
    IouMatrix {
        rows: proposals.len(),
        cols: gts.len(),
        data,
    }
}

/// Highest IoU of `proposal` against `gts` and the index achieving it.
/// Returns `(0.0, None)` for an empty set. When every IoU is zero the first
/// box is still reported as the argmax.
pub fn max_overlap(proposal: &BBox, gts: &[BBox]) -> (f64, Option<usize>) {
    let overlaps: Vec<f64> = gts.iter().map(|g| iou(proposal, g)).collect();
    argmax(&overlaps)
}

fn argmax(values: &[f64]) -> (f64, Option<usize>) {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((j, v)),
        }
    }
    match best {
        Some((j, v)) => (v, Some(j)),
        None => (0.0, None),
    }
}
