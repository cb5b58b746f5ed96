use serde::{Deserialize, Serialize};

/// Axis-aligned box given by center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Half-open containment `[x1, x2) x [y1, y2)`, so touching boxes never share a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x < self.x2() && y >= self.y1() && y < self.y2()
    }

    /// True if the interiors intersect.
    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x1() < other.x2() && other.x1() < self.x2() && self.y1() < other.y2() && other.y1() < self.y2()
    }

    pub fn expanded(&self, margin: f64) -> BBox {
        BBox::new(self.cx, self.cy, self.w + 2.0 * margin, self.h + 2.0 * margin)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Whether the closed segment `a -> b` touches the closed box.
    pub fn intersects_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let d = (b.0 - a.0, b.1 - a.1);
        for (p, q) in [
            (-d.0, a.0 - self.x1()),
            (d.0, self.x2() - a.0),
            (-d.1, a.1 - self.y1()),
            (d.1, self.y2() - a.1),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Intersection over union; 0 when either box is the empty box.
pub fn iou(a: Option<&BBox>, b: Option<&BBox>) -> f64 {
    let (Some(a), Some(b)) = (a, b) else {
        return 0.0;
    };
    if a == b && a.w > 0.0 && a.h > 0.0 {
        return 1.0;
    }
    let iw = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let ih = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}
