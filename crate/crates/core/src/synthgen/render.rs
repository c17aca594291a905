use std::f64::consts::PI;

use rand::Rng;

use super::{MAX_FOREGROUND, MIN_FOREGROUND};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    /// Regular polygon with the given number of sides.
    Polygon(usize),
}

impl ShapeKind {
    /// 1 → disk, 2 → square, 3 → triangle, k ≥ 4 → regular (k+1)-gon.
    pub fn for_label(label: usize) -> Self {
        match label {
            0 | 1 => ShapeKind::Disk,
            2 => ShapeKind::Polygon(4),
            3 => ShapeKind::Polygon(3),
            k => ShapeKind::Polygon(k + 1),
        }
    }

    fn contains(&self, cx: f64, cy: f64, radius: f64, angle: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match *self {
            ShapeKind::Disk => dx * dx + dy * dy <= radius * radius,
            ShapeKind::Polygon(n) => {
                // Inside iff on the inner side of every edge's supporting line.
                let apothem = radius * (PI / n as f64).cos();
                (0..n).all(|i| {
                    let normal = angle + (2 * i + 1) as f64 * PI / n as f64;
                    dx * normal.cos() + dy * normal.sin() <= apothem
                })
            }
        }
    }
}

/// Low-frequency colored noise plus a linear gradient and fine grain, in `[0, 1]`.
pub fn background_texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    const GRID: usize = 5;
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        let base = rng.gen_range(0.2..0.8);
        let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let phi = rng.gen_range(0.0..2.0 * PI);
        let slope = rng.gen_range(-0.2..0.2);
        let plane = out.plane_mut(c);
        for y in 0..h {
            let gy = y as f64 / (h - 1).max(1) as f64 * (GRID - 1) as f64;
            let (y0, fy) = split(gy, GRID);
            for x in 0..w {
                let gx = x as f64 / (w - 1).max(1) as f64 * (GRID - 1) as f64;
                let (x0, fx) = split(gx, GRID);
                let at = |yy: usize, xx: usize| grid[yy * GRID + xx];
                let low = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                let ramp = slope * ((x as f64 * phi.cos() + y as f64 * phi.sin()) / w.max(h) as f64);
                let grain = rng.gen_range(-0.04..0.04);
                plane[y * w + x] = (base + low + ramp + grain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn split(g: f64, grid: usize) -> (usize, f64) {
    let i = (g.floor() as usize).min(grid - 2);
    (i, g - i as f64)
}

fn mean_color(image: &Tensor) -> [f64; 3] {
    let n = (image.shape()[1] * image.shape()[2]) as f64;
    [0, 1, 2].map(|c| image.plane(c).iter().sum::<f64>() / n)
}

/// Paint one shape of `kind` into `image` and `mask`. Size and position are
/// redrawn until the foreground fraction lies within the generator bounds.
pub(crate) fn draw_shape<R: Rng + ?Sized>(
    image: &mut Tensor,
    mask: &mut LabelMask,
    kind: ShapeKind,
    label: u8,
    rng: &mut R,
) {
    let (h, w) = mask.dims();
    let side = h.min(w) as f64;
    let bg = mean_color(image);
    let color = loop {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let d2: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum();
        if d2 >= 0.4 * 0.4 {
            break c;
        }
    };
    loop {
        let radius = rng.gen_range(0.12 * side..0.30 * side);
        let cx = rng.gen_range(radius + 1.0..w as f64 - radius - 1.0);
        let cy = rng.gen_range(radius + 1.0..h as f64 - radius - 1.0);
        let angle = rng.gen_range(0.0..2.0 * PI);
        let inside: Vec<bool> = (0..h * w)
            .map(|i| kind.contains(cx, cy, radius, angle, (i % w) as f64, (i / w) as f64))
            .collect();
        let fraction = inside.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
            continue;
        }
        for (i, _) in inside.iter().enumerate().filter(|(_, &b)| b) {
            mask.labels_mut()[i] = label;
            for (c, &col) in color.iter().enumerate() {
                let grain = rng.gen_range(-0.04..0.04);
                image.plane_mut(c)[i] = (col + grain).clamp(0.0, 1.0);
            }
        }
        return;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_to_shape() {
        assert_eq!(ShapeKind::for_label(1), ShapeKind::Disk);
        assert_eq!(ShapeKind::for_label(2), ShapeKind::Polygon(4));
        assert_eq!(ShapeKind::for_label(3), ShapeKind::Polygon(3));
        assert_eq!(ShapeKind::for_label(4), ShapeKind::Polygon(5));
    }

    #[test]
    fn square_area_close_to_geometry() {
        let kind = ShapeKind::Polygon(4);
        let n = (0..200 * 200)
            .filter(|i| kind.contains(100.0, 100.0, 50.0, 0.3, (i % 200) as f64, (i / 200) as f64))
            .count() as f64;
        // Square inscribed in a circle of radius R has area 2R².
        assert!((n / 5000.0 - 1.0).abs() < 0.02, "{n}");
    }
}
