//! Axis-aligned boxes in normalized `(cx, cy, w, h)` form.

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegenerateBox;

impl fmt::Display for DegenerateBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("box has zero or negative area")
    }
}

impl core::error::Error for DegenerateBox {}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxCxcywh { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn l1(&self, other: &BoxCxcywh) -> f64 {
        self.as_array().iter().zip(other.as_array()).map(|(a, b)| (a - b).abs()).sum()
    }
}

fn intersection_union(a: &BoxCxcywh, b: &BoxCxcywh) -> (f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Intersection over union; 0 for degenerate inputs.
pub fn iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (inter, union) = intersection_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`, in `(-1, 1]`.
pub fn giou(a: &BoxCxcywh, b: &BoxCxcywh) -> Result<f64, DegenerateBox> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(DegenerateBox);
    }
    let (inter, union) = intersection_union(a, b);
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (hull - union) / hull)
}

/// Row-wise GIoU between two `[n, 4]` box tensors, result `[n, 1]`.
pub fn giou_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let corners = |tape: &mut Tape, x: Var| -> Result<[Var; 4], TensorError> {
        let cx = tape.slice_cols(x, 0, 1)?;
        let cy = tape.slice_cols(x, 1, 1)?;
        let w = tape.slice_cols(x, 2, 1)?;
        let h = tape.slice_cols(x, 3, 1)?;
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let area = |tape: &mut Tape, c: &[Var; 4]| -> Result<Var, TensorError> {
        let w = tape.sub(c[2], c[0])?;
        let h = tape.sub(c[3], c[1])?;
        tape.mul(w, h)
    };
    let ca = corners(tape, a)?;
    let cb = corners(tape, b)?;
    let area_a = area(tape, &ca)?;
    let area_b = area(tape, &cb)?;

    let ix0 = tape.maximum(ca[0], cb[0])?;
    let iy0 = tape.maximum(ca[1], cb[1])?;
    let ix1 = tape.minimum(ca[2], cb[2])?;
    let iy1 = tape.minimum(ca[3], cb[3])?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let hx0 = tape.minimum(ca[0], cb[0])?;
    let hy0 = tape.minimum(ca[1], cb[1])?;
    let hx1 = tape.maximum(ca[2], cb[2])?;
    let hy1 = tape.maximum(ca[3], cb[3])?;
    let hw = tape.sub(hx1, hx0)?;
    let hh = tape.sub(hy1, hy0)?;
    let hull = tape.mul(hw, hh)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}
