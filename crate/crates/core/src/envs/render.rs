//! Rasterisation of point entities into small `3×H×W` images.
//!
//! World coordinates in `[-1, 1]` map linearly onto pixel centres
//! `0..W-1` (x) and `0..H-1` (y). Each entity is splatted bilinearly, so the
//! intensity-weighted centroid of a channel recovers the position exactly.

/// One splat: `(channel, x, y, intensity)`.
pub type Splat = (usize, f64, f64, f64);

pub const CHANNELS: usize = 3;

pub fn world_to_pixel(x: f64, n: usize) -> f64 {
    (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64
}

pub fn pixel_to_world(u: f64, n: usize) -> f64 {
    u / (n - 1) as f64 * 2.0 - 1.0
}

pub fn render(splats: &[Splat], h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![0.0; CHANNELS * h * w];
    for &(c, x, y, intensity) in splats {
        let u = world_to_pixel(x, w);
        let v = world_to_pixel(y, h);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
            for (du, wu) in [(0, 1.0 - fu), (1, fu)] {
                let (px, py) = (u0 + du, v0 + dv);
                let wgt = wu * wv;
                if wgt > 0.0 && px < w && py < h {
                    img[(c * h + py) * w + px] += intensity * wgt;
                }
            }
        }
    }
    img
}

/// Intensity-weighted centroid of one channel in world coordinates.
pub fn decode_centroid(img: &[f64], channel: usize, h: usize, w: usize) -> Option<(f64, f64)> {
    let mut total = 0.0;
    let (mut su, mut sv) = (0.0, 0.0);
    for py in 0..h {
        for px in 0..w {
            let m = img[(channel * h + py) * w + px];
            total += m;
            su += m * px as f64;
            sv += m * py as f64;
        }
    }
    (total > 0.0).then(|| (pixel_to_world(su / total, w), pixel_to_world(sv / total, h)))
}

/// Total intensity in a channel.
pub fn channel_mass(img: &[f64], channel: usize, h: usize, w: usize) -> f64 {
    img[channel * h * w..(channel + 1) * h * w].iter().sum()
}
