use serde::{Deserialize, Serialize};

/// 8-bit RGB video frame.
pub type Frame = image::RgbImage;

/// Axis-aligned box in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Area measured through the corners, so `intersection(a, a) == area(a)`
    /// holds exactly.
    pub fn area(&self) -> f64 {
        (self.right() - self.x).max(0.0) * (self.bottom() - self.y).max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Minimal axis-aligned box around a set of points.
    pub fn bounding(points: &[(f64, f64)]) -> Option<BBox> {
        let (first, rest) = points.split_first()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.0, first.1, first.0, first.1);
        for &(x, y) in rest {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 2.0, 2.0)), 0.0);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 0.0, 0.0), &BBox::new(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn bounding_box_of_polygon() {
        let b = BBox::bounding(&[(0.0, 0.0), (4.0, 0.0), (4.0, 2.0), (0.0, 2.0)]).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 4.0, 2.0));
        assert!(BBox::bounding(&[]).is_none());
    }

    fn boxes() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in boxes(), b in boxes()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in boxes()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn shrinking_overlap_lowers_iou(a in boxes(), d in 0.0..1.0f64) {
            // slide a copy of `a` further away: overlap can only fall
            let near = BBox::new(a.x + d * a.w * 0.5, a.y, a.w, a.h);
            let far = BBox::new(a.x + (0.5 + d * 0.5) * a.w, a.y, a.w, a.h);
            prop_assert!(iou(&a, &far) <= iou(&a, &near));
        }
    }
}
