use crate::geometry::BBox;

/// Largest log-scale change a decoded delta may apply.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Dense anchors laid out channel-major: index `(a * rows + y) * cols + x`,
/// matching the `[A, H, W]` layout of the objectness map.
pub fn anchor_grid(
    sizes: &[f64],
    ratios: &[f64],
    rows: usize,
    cols: usize,
    image_h: usize,
    image_w: usize,
) -> Vec<BBox> {
    let sy = image_h as f64 / rows as f64;
    let sx = image_w as f64 / cols as f64;
    let mut shapes = Vec::new();
    for &s in sizes {
        for &r in ratios {
            shapes.push((s * r.sqrt(), s / r.sqrt()));
        }
    }
    let mut anchors = Vec::with_capacity(shapes.len() * rows * cols);
    for &(w, h) in &shapes {
        for y in 0..rows {
            for x in 0..cols {
                let cx = (x as f64 + 0.5) * sx;
                let cy = (y as f64 + 0.5) * sy;
                anchors.push(BBox {
                    x_min: cx - 0.5 * w,
                    y_min: cy - 0.5 * h,
                    x_max: cx + 0.5 * w,
                    y_max: cy + 0.5 * h,
                });
            }
        }
    }
    anchors
}

/// Standard `(dx, dy, dw, dh)` parameterisation relative to a reference box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rw, rh) = (reference.width().max(1e-6), reference.height().max(1e-6));
        let (rx, ry) = reference.center();
        let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BBox, deltas: [f64; 4]) -> BBox {
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = rx + deltas[0] / wx * rw;
        let cy = ry + deltas[1] / wy * rh;
        let w = rw * (deltas[2] / ww).min(MAX_LOG_SCALE).exp();
        let h = rh * (deltas[3] / wh).min(MAX_LOG_SCALE).exp();
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_shapes() {
        let a = anchor_grid(&[32.0], &[1.0, 4.0], 2, 3, 32, 48);
        assert_eq!(a.len(), 12);
        assert_eq!(a[0].center(), (8.0, 8.0));
        assert_eq!(a[4].center(), (24.0, 24.0));
        assert!((a[6].width() - 64.0).abs() < 1e-9 && (a[6].height() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip() {
        let coder = BoxCoder {
            weights: [10.0, 10.0, 5.0, 5.0],
        };
        let r = BBox::new(10.0, 20.0, 50.0, 40.0).unwrap();
        let t = BBox::new(12.0, 18.0, 70.0, 45.0).unwrap();
        let back = coder.decode(&r, coder.encode(&r, &t));
        for (a, b) in [
            (back.x_min, t.x_min),
            (back.y_min, t.y_min),
            (back.x_max, t.x_max),
            (back.y_max, t.y_max),
        ] {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(coder.encode(&r, &r), [0.0, 0.0, 0.0, 0.0]);
    }
}
