//! RGB images and axis-aligned boxes.

use regionedit_tensor::Tensor;

use crate::error::{EditError, Result};

/// Channels-last RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            &[h, w, 3] => Ok(Self { height: h, width: w, data: t.data().to_vec() }),
            s => Err(EditError::contract(format!("image tensor must be [H, W, 3], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.height, self.width, 3], self.data.clone()).expect("image extents")
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn fill_rect(&mut self, r: &Rect, rgb: [f32; 3]) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let i = (y * self.width + x) * 3;
                self.data[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }

    pub fn clip(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// True when the boxes overlap or touch within `gap` pixels.
    pub fn near(&self, other: &Rect, gap: usize) -> bool {
        self.x0 < other.x1 + gap && other.x0 < self.x1 + gap && self.y0 < other.y1 + gap && other.y0 < self.y1 + gap
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height {
            Ok(())
        } else {
            Err(EditError::contract(format!("box {self:?} invalid for a {height}x{width} image")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionSource {
    Oracle,
    Grid,
}

/// Region proposals for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    pub boxes: Vec<Rect>,
    pub source: RegionSource,
}

impl RegionSet {
    pub fn oracle(boxes: Vec<Rect>) -> Self {
        Self { boxes, source: RegionSource::Oracle }
    }

    pub fn empty() -> Self {
        Self::oracle(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Boxes sorted by area (largest first), ties broken by `x0` then `y0`.
    pub fn canonical(&self) -> Vec<Rect> {
        let mut boxes = self.boxes.clone();
        boxes.sort_by_key(|r| (std::cmp::Reverse(r.area()), r.x0, r.y0, r.x1, r.y1));
        boxes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_area_then_position() {
        let set = RegionSet::oracle(vec![
            Rect::new(4, 0, 6, 2),
            Rect::new(0, 0, 4, 4),
            Rect::new(0, 8, 2, 10),
            Rect::new(0, 4, 2, 6),
        ]);
        let sorted = set.canonical();
        assert_eq!(
            sorted,
            vec![Rect::new(0, 0, 4, 4), Rect::new(0, 4, 2, 6), Rect::new(0, 8, 2, 10), Rect::new(4, 0, 6, 2)]
        );
    }

    #[test]
    fn box_validation() {
        assert!(Rect::new(0, 0, 16, 16).check(16, 16).is_ok());
        assert!(Rect::new(0, 0, 17, 16).check(16, 16).is_err());
        assert!(Rect::new(3, 0, 3, 16).check(16, 16).is_err());
    }
}
