//! Netpbm output for sample grids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn to_byte<T: Scalar>(v: T) -> u8 {
    let x = (v.as_f64().clamp(-1.0, 1.0) + 1.0) * 127.5;
    x.round() as u8
}

/// Encodes `[b, C, S, S]` images in `[−1, 1]` as one horizontal strip: binary
/// PPM when `C = 3`, otherwise binary PGM with channels stacked vertically.
pub fn encode_image_grid<T: Scalar>(images: &Tensor<T>) -> Result<Vec<u8>> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::shape("encode_image_grid", format!("expected [b, C, H, W], got {:?}", images.shape())));
    };
    let d = images.data();
    let at = |bi: usize, ci: usize, i: usize, j: usize| d[((bi * c + ci) * h + i) * w + j];
    let mut out;
    if c == 3 {
        out = format!("P6\n{} {}\n255\n", b * w, h).into_bytes();
        for i in 0..h {
            for bi in 0..b {
                for j in 0..w {
                    for ci in 0..3 {
                        out.push(to_byte(at(bi, ci, i, j)));
                    }
                }
            }
        }
    } else {
        out = format!("P5\n{} {}\n255\n", b * w, c * h).into_bytes();
        for ci in 0..c {
            for i in 0..h {
                for bi in 0..b {
                    for j in 0..w {
                        out.push(to_byte(at(bi, ci, i, j)));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn save_image_grid<T: Scalar>(images: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_image_grid(images)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_extremes() {
        let t = Tensor::<f64>::from_f64([1, 1, 1, 2], &[-1.0, 1.0]).unwrap();
        let bytes = encode_image_grid(&t).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 255]);
    }
}
