//! Convolution kernels shared by the tape's forward and backward passes.
//!
//! Convolution is lowered to a patch matrix (`im2col`) and a GEMM per image.
//! The patch matrix is built a band of output rows at a time so it stays in
//! cache while the GEMM consumes it.
//! Images in a batch are processed in parallel; reductions over the batch
//! are summed sequentially in image order so results are bit-reproducible
//! regardless of the thread count.

use rayon::prelude::*;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_image(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per band: as many as keep the band's patch matrix within
    /// `BAND_BYTES`, at least one.
    fn band_rows<T>(&self) -> usize {
        if self.is_pointwise() {
            return self.oh;
        }
        let row_bytes = self.patch_rows() * self.ow * std::mem::size_of::<T>();
        (BAND_BYTES / row_bytes.max(1)).clamp(1, self.oh.max(1))
    }

    fn bands<T>(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_rows::<T>();
        let oh = self.oh;
        (0..oh)
            .step_by(step)
            .map(move |r0| (r0, (r0 + step).min(oh)))
    }
}

const BAND_BYTES: usize = 256 * 1024;

/// Output columns `ox` whose input column `ox*stride + kj - pad` lies inside
/// the image, as a half-open range.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj {
        (g.pad - kj).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kj {
        ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Patch matrix of output rows `oy0..oy1`: row `(c, ki, kj)`, one column per
/// output pixel of the band.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, (oy0, oy1): (usize, usize), cols: &mut [T]) {
    let band = (oy1 - oy0) * g.ow;
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * band..(row + 1) * band];
                let (lo, hi) = valid_cols(g, kj);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (i, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src[x0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for one band: scatters-adds `cols` into `img`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, (oy0, oy1): (usize, usize), img: &mut [T]) {
    let band = (oy1 - oy0) * g.ow;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * band..(row + 1) * band];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let r = (oy - oy0) * g.ow;
                    let line = &src[r + lo..r + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + hi - lo].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            let d = &mut dst[x0 + i * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-worker band buffer; every element used is overwritten first.
fn scratch<T: Real>(g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_rows() * g.band_rows::<T>() * g.ow]
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let ohw = g.out_plane();
    let rows = g.patch_rows();
    let mut out = vec![T::zero(); g.n * g.c_out * ohw];
    out.par_chunks_mut(g.c_out * ohw).enumerate().for_each_init(
        || scratch(g),
        |cols_buf, (n, out_n)| {
            let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
            for (co, plane) in out_n.chunks_mut(ohw).enumerate() {
                plane.fill(bias[co]);
            }
            for band in g.bands::<T>() {
                let width = (band.1 - band.0) * g.ow;
                let cols: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(img, g, band, cols_buf);
                    cols_buf
                };
                T::gemm(
                    g.c_out,
                    rows,
                    width,
                    weight,
                    (rows as isize, 1),
                    cols,
                    (width as isize, 1),
                    T::one(),
                    &mut out_n[band.0 * g.ow..],
                    (ohw as isize, 1),
                );
            }
        },
    );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_input, need_weight, need_bias] = need;
    let ohw = g.out_plane();
    let rows = g.patch_rows();

    let per_image: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map_init(
            || scratch(g),
            |cols_buf, n| {
                let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
                let dout = &grad_out[n * g.c_out * ohw..(n + 1) * g.c_out * ohw];
                let mut dw = need_weight.then(|| vec![T::zero(); g.c_out * rows]);
                let mut dx = need_input.then(|| vec![T::zero(); g.in_image()]);
                for band in g.bands::<T>() {
                    let width = (band.1 - band.0) * g.ow;
                    let dout_band = &dout[band.0 * g.ow..];
                    if let Some(dw) = dw.as_mut() {
                        let cols: &[T] = if g.is_pointwise() {
                            img
                        } else {
                            im2col(img, g, band, cols_buf);
                            cols_buf
                        };
                        T::gemm(
                            g.c_out,
                            width,
                            rows,
                            dout_band,
                            (ohw as isize, 1),
                            cols,
                            (1, width as isize),
                            T::one(),
                            dw,
                            (rows as isize, 1),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dcols: &mut [T] = if g.is_pointwise() { dx } else { cols_buf };
                        T::gemm(
                            rows,
                            g.c_out,
                            width,
                            weight,
                            (1, rows as isize),
                            dout_band,
                            (ohw as isize, 1),
                            T::zero(),
                            dcols,
                            (width as isize, 1),
                        );
                        if !g.is_pointwise() {
                            col2im(cols_buf, g, band, dx);
                        }
                    }
                }
                (dx, dw)
            },
        )
        .collect();

    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if need_input {
        let mut dx = Vec::with_capacity(input.len());
        for (img_grad, _) in &per_image {
            dx.extend_from_slice(img_grad.as_ref().expect("input grad computed"));
        }
        grads.input = Some(dx);
    }
    if need_weight {
        let mut dw = vec![T::zero(); weight.len()];
        for (_, img_dw) in &per_image {
            let img_dw = img_dw.as_ref().expect("weight grad computed");
            dw.iter_mut().zip(img_dw).for_each(|(a, &b)| *a = *a + b);
        }
        grads.weight = Some(dw);
    }
    if need_bias {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (n * g.c_out + co) * ohw;
                *acc = grad_out[start..start + ohw]
                    .iter()
                    .fold(*acc, |s, &v| s + v);
            }
        }
        grads.bias = Some(db);
    }
    grads
}
