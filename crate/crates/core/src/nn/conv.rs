//! 2-D convolution as im2col + batched matmul.
//!
//! The column layout is `[B, C*k*k, OH*OW]`, so the product with the
//! `[Cout, C*k*k]` kernel lands directly in NCHW order. The backward pass of
//! `Im2Col` is `Col2Im` (scatter-add) and vice versa, which keeps both
//! gradients on the matmul path.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Input column index for output column `o` and kernel tap `t`, if inside the frame.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && i < extent as isize).then_some(i as usize)
    }
}

fn im2col_kernel<T: WithDType>(src: &[T], g: &Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let cols = g.cols();
    let plane_len = g.h * g.w;
    let mut dst = vec![T::zero(); g.b * cols * n];
    for b in 0..g.b {
        for c in 0..g.c {
            let plane = &src[(b * g.c + c) * plane_len..][..plane_len];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (b * cols + (c * g.k + ky) * g.k + kx) * n;
                    let out = &mut dst[row..row + n];
                    for oy in 0..oh {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        let src_row = &plane[iy * g.w..][..g.w];
                        let out_row = &mut out[oy * ow..][..ow];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                *v = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_kernel<T: WithDType>(src: &[T], g: &Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let cols = g.cols();
    let plane_len = g.h * g.w;
    let mut dst = vec![T::zero(); g.b * g.c * plane_len];
    for b in 0..g.b {
        for c in 0..g.c {
            let plane = &mut dst[(b * g.c + c) * plane_len..][..plane_len];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (b * cols + (c * g.k + ky) * g.k + kx) * n;
                    let inp = &src[row..row + n];
                    for oy in 0..oh {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        let dst_row = &mut plane[iy * g.w..][..g.w];
                        let in_row = &inp[oy * ow..][..ow];
                        for (ox, v) in in_row.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst_row[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((g.b, g.cols(), oh * ow));
        Ok(match s {
            CpuStorage::F32(v) => (CpuStorage::F32(im2col_kernel(contiguous(v, l)?, g)), shape),
            CpuStorage::F64(v) => (CpuStorage::F64(im2col_kernel(contiguous(v, l)?, g)), shape),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        Ok(match s {
            CpuStorage::F32(v) => (CpuStorage::F32(col2im_kernel(contiguous(v, l)?, g)), shape),
            CpuStorage::F64(v) => (CpuStorage::F64(col2im_kernel(contiguous(v, l)?, g)), shape),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `x: [B, C, H, W]`, `w: [Cout, C, k, k]` -> `[B, Cout, OH, OW]`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, k, k2) = w.dims4()?;
    if c != ci || k != k2 {
        candle_core::bail!("conv2d: input has {c} channels, kernel expects {ci} ({k}x{k2})");
    }
    let g = Geometry {
        b,
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (oh, ow) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    // candle's matmul mishandles stride-0 batch dims, so materialize the broadcast
    let wm = w
        .reshape((1, co, c * k * k))?
        .broadcast_as((b, co, c * k * k))?
        .contiguous()?;
    wm.matmul(&cols)?.reshape((b, co, oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_reference_convolution() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::rand(0f64, 1., (2, 3, 8, 8), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::rand(-0.5f64, 0.5, (5, 3, 3, 3), &dev).unwrap()).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let a = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            let b = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let d = (&a - &b)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(d < 1e-12);
            let ga = a.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = b.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), w.as_tensor()] {
                let d = (ga.get(v).unwrap() - gb.get(v).unwrap())
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
                assert!(d < 1e-10, "grad mismatch {d}");
            }
        }
    }
}
