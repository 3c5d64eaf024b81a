use serde::{Deserialize, Serialize};

/// Axis-aligned box `[x1, y1, x2, y2]` in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self([x1, y1, x2, y2])
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    pub fn y1(&self) -> f64 {
        self.0[1]
    }
    pub fn x2(&self) -> f64 {
        self.0[2]
    }
    pub fn y2(&self) -> f64 {
        self.0[3]
    }

    pub fn width(&self) -> f64 {
        self.x2() - self.x1()
    }

    pub fn height(&self) -> f64 {
        self.y2() - self.y1()
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1() + self.x2()) / 2.0, (self.y1() + self.y2()) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.x1() < self.x2() && self.y1() < self.y2()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2().min(other.x2()) - self.x1().max(other.x1());
        let h = self.y2().min(other.y2()) - self.y1().max(other.y1());
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1() <= other.x1() && self.y1() <= other.y1() && other.x2() <= self.x2() && other.y2() <= self.y2()
    }
}
