//! Flow visualization on the standard 55-colour wheel.

use crate::types::{FlowField, Image};

/// Bins per wheel segment: red-yellow, yellow-green, green-cyan, cyan-blue,
/// blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55 wheel colours in 0..=255.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(55);
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    for i in 0..ry {
        wheel.push([255.0, (255 * i / ry) as f32, 0.0]);
    }
    for i in 0..yg {
        wheel.push([255.0 - (255 * i / yg) as f32, 255.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 255.0, (255 * i / gc) as f32]);
    }
    for i in 0..cb {
        wheel.push([0.0, 255.0 - (255 * i / cb) as f32, 255.0]);
    }
    for i in 0..bm {
        wheel.push([(255 * i / bm) as f32, 0.0, 255.0]);
    }
    for i in 0..mr {
        wheel.push([255.0, 0.0, 255.0 - (255 * i / mr) as f32]);
    }
    wheel
}

/// Direction picks the hue, magnitude over `max_rad` the saturation
/// (zero flow is white). `max_rad` defaults to the largest magnitude present.
pub fn flow_to_color(flow: &FlowField, max_rad: Option<f32>) -> Image {
    let wheel = color_wheel();
    let n = wheel.len();
    let rad_max = max_rad.unwrap_or_else(|| flow.max_magnitude());
    let rad_max = if rad_max > 0.0 { rad_max } else { 1.0 };
    let mut img = Image::zeros(flow.height, flow.width);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (u, v) = flow.get(y, x);
            let (u, v) = (u / rad_max, v / rad_max);
            let rad = (u * u + v * v).sqrt();
            let a = (-v).atan2(-u) / std::f32::consts::PI;
            let fk = (a + 1.0) / 2.0 * (n - 1) as f32;
            let k0 = (fk.floor() as usize).min(n - 1);
            let k1 = (k0 + 1) % n;
            let f = fk - k0 as f32;
            for c in 0..3 {
                let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
                img.set(c, y, x, (255.0 * col).floor() / 255.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(img: &Image, y: usize, x: usize) -> [f32; 3] {
        [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)]
    }

    #[test]
    fn wheel_has_55_bins() {
        assert_eq!(color_wheel().len(), 55);
    }

    #[test]
    fn zero_is_white_and_scaling_is_invisible() {
        let mut f = FlowField::zeros(2, 2);
        f.set(0, 1, (3.0, -1.0));
        f.set(1, 0, (-0.5, 2.0));
        let a = flow_to_color(&f, None);
        assert_eq!(pixel(&a, 0, 0), [1.0, 1.0, 1.0]);
        let mut g = f.clone();
        g.data.iter_mut().for_each(|v| *v *= 2.0);
        assert_eq!(flow_to_color(&g, None), a);
    }

    #[test]
    fn opposite_directions_sit_half_a_wheel_apart() {
        let mut f = FlowField::zeros(1, 2);
        f.set(0, 0, (1.0, 0.5));
        f.set(0, 1, (-1.0, -0.5));
        let img = flow_to_color(&f, None);
        let hue = |p: [f32; 3]| {
            let (r, g, b) = (p[0], p[1], p[2]);
            let (mx, mn) = (r.max(g).max(b), r.min(g).min(b));
            let d = mx - mn;
            let h = if mx == r { ((g - b) / d).rem_euclid(6.0) } else if mx == g { (b - r) / d + 2.0 } else { (r - g) / d + 4.0 };
            60.0 * h
        };
        let sep = (hue(pixel(&img, 0, 0)) - hue(pixel(&img, 0, 1))).abs();
        let sep = sep.min(360.0 - sep);
        assert!(sep > 120.0, "hue separation {sep}");
    }
}
