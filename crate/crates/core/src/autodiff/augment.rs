use rand::Rng;

use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Replicate-pads each image by `pad` and crops back to `H×W` at a
/// per-sample uniform integer offset in `[0, 2·pad]²`. Not recorded on a tape.
pub fn random_shift<R: Rng + ?Sized>(x: &Tensor, pad: usize, rng: &mut R) -> Result<Tensor> {
    let [b, c, h, w] = *x.shape() else {
        return dim_err(format!("random_shift expects B×C×H×W, got {:?}", x.shape()));
    };
    if pad == 0 {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for y in 0..h {
                let sy = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                for xx in 0..w {
                    let sx = (xx as isize + ox).clamp(0, w as isize - 1) as usize;
                    out[base + y * w + xx] = src[base + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..b * c * h * w).map(|i| (i % 97) as f64).collect();
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    #[test]
    fn zero_pad_is_identity() {
        let x = image(2, 3, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_shift(&x, 0, &mut rng).unwrap(), x);
    }

    #[test]
    fn shape_is_preserved_and_content_is_a_shift() {
        let x = image(3, 1, 84, 84);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_shift(&x, 4, &mut rng).unwrap();
        assert_eq!(y.shape(), &[3, 1, 84, 84]);
        // Each sample must equal the input shifted by some offset in [-4, 4]².
        for bi in 0..3 {
            let found = (-4isize..=4).any(|oy| {
                (-4isize..=4).any(|ox| {
                    (0..84).all(|yy| {
                        (0..84).all(|xx| {
                            let sy = (yy as isize + oy).clamp(0, 83) as usize;
                            let sx = (xx as isize + ox).clamp(0, 83) as usize;
                            y.data()[bi * 84 * 84 + yy * 84 + xx] == x.data()[bi * 84 * 84 + sy * 84 + sx]
                        })
                    })
                })
            });
            assert!(found, "sample {bi} is not a bounded shift");
        }
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let x = image(4, 3, 24, 24);
        let a = random_shift(&x, 2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = random_shift(&x, 2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
