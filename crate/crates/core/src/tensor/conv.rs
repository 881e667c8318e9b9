//! 2-D cross-correlation kernels via im2col + matmul.
//!
//! Patch rows are laid out `[M, K]` with `M = B·H'·W'` and
//! `K = C_in·kh·kw`, matching the flattened weight layout
//! `[C_out, C_in, kh, kw]`. Parallel sections split along the batch axis so
//! each image is produced by exactly one task.

use super::gemm;
use super::scalar::Scalar;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Output extent per axis: `floor((in + 2·pad − k)/stride) + 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<ConvDims> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        Some(ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col_image<S: Scalar>(x_img: &[S], d: &ConvDims, col_img: &mut [S]) {
    let k = d.patch_len();
    let mut row = 0;
    for oh in 0..d.h_out {
        for ow in 0..d.w_out {
            let dst = &mut col_img[row * k..row * k + k];
            let mut idx = 0;
            for ci in 0..d.c_in {
                let plane = &x_img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ki in 0..d.kh {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    for kj in 0..d.kw {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        dst[idx] = if ih >= 0
                            && iw >= 0
                            && (ih as usize) < d.h
                            && (iw as usize) < d.w
                        {
                            plane[ih as usize * d.w + iw as usize]
                        } else {
                            S::zero()
                        };
                        idx += 1;
                    }
                }
            }
            row += 1;
        }
    }
}

/// Expand `x [B,C_in,H,W]` into patch rows `[B·H'·W', K]`.
pub fn im2col<S: Scalar>(x: &[S], d: &ConvDims) -> Vec<S> {
    let k = d.patch_len();
    let rows_per_img = d.out_pixels();
    let mut col = vec![S::zero(); d.batch * rows_per_img * k];
    let img_len = d.c_in * d.h * d.w;
    col.par_chunks_mut(rows_per_img * k)
        .zip(x.par_chunks(img_len))
        .for_each(|(col_img, x_img)| im2col_image(x_img, d, col_img));
    col
}

/// Scatter-add patch-row gradients back onto the input image layout.
pub fn col2im_acc<S: Scalar>(dcol: &[S], d: &ConvDims, dx: &mut [S]) {
    let k = d.patch_len();
    let rows_per_img = d.out_pixels();
    let img_len = d.c_in * d.h * d.w;
    dx.par_chunks_mut(img_len)
        .zip(dcol.par_chunks(rows_per_img * k))
        .for_each(|(dx_img, dcol_img)| {
            let mut row = 0;
            for oh in 0..d.h_out {
                for ow in 0..d.w_out {
                    let src = &dcol_img[row * k..row * k + k];
                    let mut idx = 0;
                    for ci in 0..d.c_in {
                        for ki in 0..d.kh {
                            let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                            for kj in 0..d.kw {
                                let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                                if ih >= 0
                                    && iw >= 0
                                    && (ih as usize) < d.h
                                    && (iw as usize) < d.w
                                {
                                    dx_img[ci * d.h * d.w + ih as usize * d.w + iw as usize] +=
                                        src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        });
}

/// Forward cross-correlation. Returns `y [B, C_out, H', W']`.
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &ConvDims) -> Vec<S> {
    let k = d.patch_len();
    let m = d.batch * d.out_pixels();
    let col = im2col(x, d);
    let wt = gemm::transpose(w, d.c_out, k);
    let mut y_mn = vec![S::zero(); m * d.c_out];
    gemm::matmul_acc(&col, m, k, &wt, d.c_out, &mut y_mn);

    // [M, C_out] → [B, C_out, H', W'] with bias.
    let px = d.out_pixels();
    let mut y = vec![S::zero(); d.batch * d.c_out * px];
    y.par_chunks_mut(d.c_out * px)
        .zip(y_mn.par_chunks(px * d.c_out))
        .for_each(|(y_img, y_mn_img)| {
            for p in 0..px {
                let src = &y_mn_img[p * d.c_out..(p + 1) * d.c_out];
                for co in 0..d.c_out {
                    y_img[co * px + p] = src[co] + bias[co];
                }
            }
        });
    y
}

pub struct ConvGrads<S: Scalar> {
    pub dx: Option<Vec<S>>,
    pub dw: Vec<S>,
    pub db: Vec<S>,
}

/// Backward pass; recomputes im2col from the saved input instead of caching it.
pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    d: &ConvDims,
    dy: &[S],
    need_dx: bool,
) -> ConvGrads<S> {
    let k = d.patch_len();
    let px = d.out_pixels();
    let m = d.batch * px;

    // [B, C_out, H', W'] → [M, C_out]
    let mut dy_mn = vec![S::zero(); m * d.c_out];
    dy_mn
        .par_chunks_mut(px * d.c_out)
        .zip(dy.par_chunks(d.c_out * px))
        .for_each(|(dst_img, dy_img)| {
            for p in 0..px {
                for co in 0..d.c_out {
                    dst_img[p * d.c_out + co] = dy_img[co * px + p];
                }
            }
        });

    let col = im2col(x, d);

    // dWᵀ[K, C_out] = colᵀ · dY, then transpose into [C_out, K].
    let mut dwt = vec![S::zero(); k * d.c_out];
    gemm::a_transpose_b_acc(&col, m, k, &dy_mn, d.c_out, &mut dwt);
    let dw = gemm::transpose(&dwt, k, d.c_out);

    let mut db = vec![S::zero(); d.c_out];
    for row in dy_mn.chunks(d.c_out) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let dx = if need_dx {
        let mut dcol = vec![S::zero(); m * k];
        gemm::matmul_acc(&dy_mn, m, d.c_out, w, k, &mut dcol);
        let mut dx = vec![S::zero(); d.batch * d.c_in * d.h * d.w];
        col2im_acc(&dcol, d, &mut dx);
        Some(dx)
    } else {
        None
    };

    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, the brute-force oracle.
    fn naive_conv(
        x: &[f64],
        w: &[f64],
        bias: &[f64],
        d: &ConvDims,
    ) -> Vec<f64> {
        let mut y = vec![0.0; d.batch * d.c_out * d.h_out * d.w_out];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut s = bias[co];
                        for ci in 0..d.c_in {
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                                    let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < d.h
                                        && (iw as usize) < d.w
                                    {
                                        let xv = x[((b * d.c_in + ci) * d.h
                                            + ih as usize)
                                            * d.w
                                            + iw as usize];
                                        let wv = w[((co * d.c_in + ci) * d.kh + ki) * d.kw
                                            + kj];
                                        s += xv * wv;
                                    }
                                }
                            }
                        }
                        y[((b * d.c_out + co) * d.h_out + oh) * d.w_out + ow] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn output_extent_formula() {
        let d = ConvDims::new(1, 3, 224, 224, 8, 3, 3, 2, 1).unwrap();
        assert_eq!((d.h_out, d.w_out), (112, 112));
        let d = ConvDims::new(1, 1, 4, 4, 1, 2, 2, 1, 0).unwrap();
        assert_eq!((d.h_out, d.w_out), (3, 3));
    }

    #[test]
    fn kernel_larger_than_padded_input_rejected() {
        assert!(ConvDims::new(1, 1, 2, 2, 1, 5, 5, 1, 1).is_none());
        assert!(ConvDims::new(1, 1, 2, 2, 1, 4, 4, 1, 1).is_some());
    }

    #[test]
    fn identity_one_by_one_kernel() {
        let d = ConvDims::new(1, 1, 3, 3, 1, 1, 1, 1, 0).unwrap();
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let y = conv2d_forward(&x, &[1.0], &[0.0], &d);
        assert_eq!(x, y);
    }

    #[test]
    fn matches_bruteforce_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(b, ci, h, w, co, kh, kw, s, p) in &[
            (1, 1, 4, 4, 1, 2, 2, 1, 0),
            (2, 3, 7, 5, 4, 3, 3, 2, 1),
            (1, 2, 6, 6, 3, 3, 3, 1, 1),
        ] {
            let d = ConvDims::new(b, ci, h, w, co, kh, kw, s, p).unwrap();
            let x: Vec<f64> = (0..b * ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..co * ci * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d_forward(&x, &wt, &bias, &d);
            let want = naive_conv(&x, &wt, &bias, &d);
            for (g, w_) in got.iter().zip(&want) {
                assert!((g - w_).abs() < 1e-12);
            }
        }
    }
}

#[cfg(test)]
mod perf_probe {
    use super::*;

    #[test]
    #[ignore]
    fn conv_throughput_probe() {
        // batch-8 pass over the default backbone stage sizes
        let stages: &[(usize, usize, usize, usize, usize)] = &[
            // c_in, h, c_out, k, stride
            (3, 224, 16, 3, 2),
            (16, 112, 32, 3, 2),
            (32, 56, 64, 3, 2),
            (64, 28, 128, 3, 2),
            (128, 14, 1280, 1, 1),
        ];
        let b = 8;
        let mut total_macs = 0usize;
        let t0 = std::time::Instant::now();
        for &(ci, h, co, k, s) in stages {
            let pad = k / 2;
            let d = ConvDims::new(b, ci, h, h, co, k, k, s, pad).unwrap();
            let x = vec![0.5f32; b * ci * h * h];
            let w = vec![0.01f32; co * ci * k * k];
            let bias = vec![0.0f32; co];
            let y = conv2d_forward(&x, &w, &bias, &d);
            let dy = vec![1.0f32; y.len()];
            let _ = conv2d_backward(&x, &w, &d, &dy, ci != 3);
            let m = d.batch * d.h_out * d.w_out * d.c_out * ci * k * k;
            total_macs += 3 * m;
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "probe: {:.1} GMAC in {:.3}s → {:.2} GMAC/s ({:.2} GFLOP/s)",
            total_macs as f64 / 1e9,
            dt,
            total_macs as f64 / 1e9 / dt,
            2.0 * total_macs as f64 / 1e9 / dt
        );
    }
}
