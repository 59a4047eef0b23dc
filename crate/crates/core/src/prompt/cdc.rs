//! 3×3 central difference convolution over token grids.
//!
//! Feature maps are `(height·width) × channels` tensors, row index
//! `y·width + x`. Kernels are `(9·c_in) × c_out`, row index
//! `(ky·3 + kx)·c_in + ci` for offsets `(ky−1, kx−1)`.
//!
//! `y(p₀) = Σₙ w(pₙ)·x(p₀+pₙ) − θ·x(p₀)·Σₙ w(pₙ) + b`
//!
//! Neighbours outside the grid read as zero; the centre term always uses
//! the true centre value.

use crate::error::PromptError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const KERNEL_TAPS: usize = 9;

pub fn cdc2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    theta: T,
    height: usize,
    width: usize,
) -> Result<Tensor<T>, PromptError> {
    if x.rows() != height * width {
        return Err(PromptError::GridMismatch {
            tokens: x.rows(),
            height,
            width,
        });
    }
    if weights.rows() != KERNEL_TAPS * x.cols() {
        return Err(PromptError::ChannelMismatch {
            expected: weights.rows() / KERNEL_TAPS,
            got: x.cols(),
        });
    }
    if bias.shape() != (1, weights.cols()) {
        return Err(PromptError::ChannelMismatch {
            expected: weights.cols(),
            got: bias.cols(),
        });
    }
    if !(T::zero()..=T::one()).contains(&theta) {
        return Err(PromptError::Theta(theta.to_f64_lossy()));
    }
    let cols = im2col(x, height, width);
    Ok(forward_from_cols(&cols, x, weights, bias, theta))
}

pub(crate) fn im2col<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let c = x.cols();
    let mut cols = Tensor::zeros(height * width, KERNEL_TAPS * c);
    for y in 0..height {
        for xx in 0..width {
            let p = y * width + xx;
            let out = cols.row_mut(p);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let k = ky * 3 + kx;
                    let src = x.row(sy as usize * width + sx as usize);
                    out[k * c..(k + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// `c_in × c_out` sum of the kernel over its nine taps.
pub(crate) fn kernel_sum<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let c_in = w.rows() / KERNEL_TAPS;
    let mut s = Tensor::zeros(c_in, w.cols());
    for k in 0..KERNEL_TAPS {
        for ci in 0..c_in {
            let src = w.row(k * c_in + ci);
            for (o, &v) in s.row_mut(ci).iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    s
}

pub(crate) fn forward_from_cols<T: Scalar>(
    cols: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    theta: T,
) -> Tensor<T> {
    let vanilla = cols.matmul(w);
    let out = if theta == T::zero() {
        vanilla
    } else {
        let centre = x.matmul(&kernel_sum(w)).scale(theta);
        vanilla.sub(&centre)
    };
    out.add_row(b)
}

pub(crate) fn weight_grad<T: Scalar>(
    cols: &Tensor<T>,
    x: &Tensor<T>,
    g: &Tensor<T>,
    theta: T,
) -> Tensor<T> {
    let mut dw = cols.t_matmul(g);
    if theta != T::zero() {
        let c_in = x.cols();
        let centre = x.t_matmul(g).scale(theta);
        for k in 0..KERNEL_TAPS {
            for ci in 0..c_in {
                let row = dw.row_mut(k * c_in + ci);
                for (o, &v) in row.iter_mut().zip(centre.row(ci)) {
                    *o = *o - v;
                }
            }
        }
    }
    dw
}

pub(crate) fn input_grad<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    theta: T,
    height: usize,
    width: usize,
) -> Tensor<T> {
    let c_in = w.rows() / KERNEL_TAPS;
    let dcols = g.matmul_t(w);
    let mut dx = Tensor::zeros(height * width, c_in);
    for y in 0..height {
        for xx in 0..width {
            let p = y * width + xx;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let k = ky * 3 + kx;
                    let dst = sy as usize * width + sx as usize;
                    let src = &dcols.row(p)[k * c_in..(k + 1) * c_in];
                    for (o, &v) in dx.row_mut(dst).iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
    if theta != T::zero() {
        let centre = g.matmul_t(&kernel_sum(w)).scale(theta);
        dx = dx.sub(&centre);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop reference, independent of the im2col path.
    fn reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        theta: f64,
        h: usize,
        wd: usize,
    ) -> Tensor<f64> {
        let c_in = x.cols();
        let c_out = w.cols();
        Tensor::from_fn(h * wd, c_out, |p, co| {
            let (py, px) = ((p / wd) as isize, (p % wd) as isize);
            let mut acc = b.get(0, co);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let k = ((dy + 1) * 3 + dx + 1) as usize;
                    for ci in 0..c_in {
                        let wk = w.get(k * c_in + ci, co);
                        let (sy, sx) = (py + dy, px + dx);
                        let nb = if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            x.get(sy as usize * wd + sx as usize, ci)
                        } else {
                            0.0
                        };
                        acc += wk * nb - theta * wk * x.get(p, ci);
                    }
                }
            }
            acc
        })
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn theta_zero_is_vanilla_convolution() {
        let mut r = rng(1);
        let x = Tensor::<f64>::uniform(9, 2, 1.0, &mut r);
        let w = Tensor::uniform(18, 3, 1.0, &mut r);
        let b = Tensor::uniform(1, 3, 1.0, &mut r);
        let y = cdc2d(&x, &w, &b, 0.0, 3, 3).unwrap();
        let vanilla = im2col(&x, 3, 3).matmul(&w).add_row(&b);
        assert_eq!(y, vanilla);
    }

    #[test]
    fn theta_one_constant_input_cancels_in_interior() {
        let mut r = rng(2);
        let x = Tensor::<f64>::full(25, 2, 0.7);
        let w = Tensor::uniform(18, 2, 1.0, &mut r);
        let b = Tensor::zeros(1, 2);
        let y = cdc2d(&x, &w, &b, 1.0, 5, 5).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                for c in 0..2 {
                    assert!(y.get(yy * 5 + xx, c).abs() < 1e-12);
                }
            }
        }
        // corner: only 4 of 9 taps see data, centre term still uses the full kernel sum
        assert!(y.max_abs_diff(&reference(&x, &w, &b, 1.0, 5, 5)) < 1e-12);
        assert!(y.get(0, 0).abs() > 1e-6);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut r = rng(3);
        let x = Tensor::<f64>::uniform(25, 1, 1.0, &mut r);
        let w = Tensor::uniform(9, 1, 1.0, &mut r);
        let b = Tensor::uniform(1, 1, 1.0, &mut r);
        let y = cdc2d(&x, &w, &b, 0.5, 5, 5).unwrap();
        assert!(y.max_abs_diff(&reference(&x, &w, &b, 0.5, 5, 5)) < 1e-12);
    }

    #[test]
    fn output_is_affine_in_theta() {
        let mut r = rng(4);
        let x = Tensor::<f64>::uniform(16, 3, 1.0, &mut r);
        let w = Tensor::uniform(27, 2, 1.0, &mut r);
        let b = Tensor::uniform(1, 2, 1.0, &mut r);
        let y0 = cdc2d(&x, &w, &b, 0.0, 4, 4).unwrap();
        let y1 = cdc2d(&x, &w, &b, 1.0, 4, 4).unwrap();
        for theta in [0.25, 0.5, 0.9] {
            let y = cdc2d(&x, &w, &b, theta, 4, 4).unwrap();
            let lerp = y0.zip_map(&y1, |a, c| a + theta * (c - a));
            assert!(y.max_abs_diff(&lerp) < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_and_theta_errors() {
        let x = Tensor::<f64>::zeros(4, 2);
        let w = Tensor::zeros(27, 1);
        let b = Tensor::zeros(1, 1);
        assert!(matches!(
            cdc2d(&x, &w, &b, 0.5, 2, 2),
            Err(PromptError::ChannelMismatch { .. })
        ));
        let w = Tensor::zeros(18, 1);
        assert!(matches!(cdc2d(&x, &w, &b, 1.5, 2, 2), Err(PromptError::Theta(_))));
        assert!(matches!(
            cdc2d(&x, &w, &b, 0.5, 3, 2),
            Err(PromptError::GridMismatch { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(5);
        let x0 = Tensor::<f64>::uniform(9, 2, 1.0, &mut r);
        let w0 = Tensor::uniform(18, 2, 1.0, &mut r);
        let b0 = Tensor::uniform(1, 2, 1.0, &mut r);
        let probe = Tensor::uniform(9, 2, 1.0, &mut r);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            reference(x, w, b, 0.5, 3, 3).dot(&probe)
        };
        let mut g = Graph::new();
        let xv = g.leaf(&x0, true);
        let wv = g.leaf(&w0, true);
        let bv = g.leaf(&b0, true);
        let y = g.cdc(xv, wv, bv, 0.5, 3, 3);
        let grads = g.backward_with(y, probe.clone());
        let h = 1e-6;
        for (var, base) in [(xv, &x0), (wv, &w0), (bv, &b0)] {
            let an = grads.get(var).unwrap();
            for i in 0..base.len() {
                let mut p = base.clone();
                p.data_mut()[i] += h;
                let mut m = base.clone();
                m.data_mut()[i] -= h;
                let (lp, lm) = if var == xv {
                    (loss(&p, &w0, &b0), loss(&m, &w0, &b0))
                } else if var == wv {
                    (loss(&x0, &p, &b0), loss(&x0, &m, &b0))
                } else {
                    (loss(&x0, &w0, &p), loss(&x0, &w0, &m))
                };
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - an.data()[i]).abs() < 1e-7);
            }
        }
    }
}
