//! Dense kernels backing the layers: im2col-based convolution helpers
//! and max pooling.

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfold one sample `(c, h, w)` into column-major patches
/// `(c*k*k) x (ho*wo)`, zero-filling the padding border.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_dim(h, kernel, stride, padding);
    let wo = conv_out_dim(w, kernel, stride, padding);
    let pdim = ho * wo;
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kernel * kernel * pdim);
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * pdim..(row + 1) * pdim];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        dst[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold column gradients back onto the input layout, accumulating where
/// patches overlap. Inverse of [`im2col`] in the backward sense.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    x_grad: &mut [f64],
) {
    let ho = conv_out_dim(h, kernel, stride, padding);
    let wo = conv_out_dim(w, kernel, stride, padding);
    let pdim = ho * wo;
    debug_assert_eq!(x_grad.len(), c * h * w);
    x_grad.fill(0.0);
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let src = &cols[row * pdim..(row + 1) * pdim];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            x_grad[dst_row + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over non-overlapping `size x size` windows for one sample.
/// Writes the flat input index of each window maximum into `argmax`
/// (first maximum wins on ties).
pub fn maxpool(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    size: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let ho = h / size;
    let wo = w / size;
    debug_assert_eq!(out.len(), c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (ci * h + oy * size + ky) * w + ox * size + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel: columns are the input itself
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut cols = vec![0.0; 9];
        im2col(&x, 1, 3, 3, 1, 1, 0, &mut cols);
        assert_eq!(cols, x);
    }

    #[test]
    fn im2col_padding_zero_fills() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut cols = vec![0.0; 9 * 4];
        im2col(&x, 1, 2, 2, 3, 1, 1, &mut cols);
        // center tap of the first output position is x[0]
        assert_eq!(cols[4 * 4], 1.0);
        // top-left tap of the first output position is padding
        assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random data
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (c, h, w, k, s, p) = (2, 5, 5, 3, 2, 1);
        let ho = conv_out_dim(h, k, s, p);
        let wo = conv_out_dim(w, k, s, p);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c * k * k * ho * wo)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, s, p, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, s, p, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = vec![
            1.0, 2.0, 5.0, 0.0, //
            3.0, 4.0, 1.0, 1.0, //
            0.0, 0.0, 9.0, 8.0, //
            0.0, 0.0, 7.0, 6.0,
        ];
        let mut out = vec![0.0; 4];
        let mut idx = vec![0; 4];
        maxpool(&x, 1, 4, 4, 2, &mut out, &mut idx);
        assert_eq!(out, vec![4.0, 5.0, 0.0, 9.0]);
        assert_eq!(idx[1], 2);
    }
}
