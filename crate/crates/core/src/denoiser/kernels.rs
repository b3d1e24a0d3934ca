//! CPU kernels with hand-written gradients for the two hot spots of the
//! network: patch extraction for convolutions and group normalization.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

fn contiguous<'a, T: WithDType>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let data = storage.as_slice::<T>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

macro_rules! dispatch_float {
    ($storage:expr, $f:ident ( $($arg:expr),* )) => {
        match $storage {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            _ => candle_core::bail!("kernels support f32 and f64 only"),
        }
    };
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }

    /// Calls `f(patch_index, input_index)` for every in-bounds tap, where
    /// `patch_index` addresses the `(pixels, taps)` patch matrix.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let k = self.kernel;
        let taps = self.rows();
        for c in 0..self.channels {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + dy) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let in_row = plane + iy as usize * self.width;
                            let pixel_row = (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + dx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f((pixel_row + ox) * taps + row, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Im2Col(Geometry);

fn im2col_impl<T: WithDType>(g: &Geometry, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let src = contiguous::<T>(storage, layout)?;
    let mut out = vec![T::zero(); g.rows() * g.cols()];
    g.for_each_tap(|dst, src_i| out[dst] = src[src_i]);
    Ok((T::to_cpu_storage_owned(out), Shape::from((g.cols(), g.rows()))))
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(storage, im2col_impl(&self.0, storage, layout))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

/// Adjoint of [`Im2Col`]: scatters patch columns back onto the image.
struct Col2Im(Geometry);

fn col2im_impl<T: WithDType>(g: &Geometry, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let src = contiguous::<T>(storage, layout)?;
    let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    g.for_each_tap(|patch, img| out[img] += src[patch]);
    Ok((
        T::to_cpu_storage_owned(out),
        Shape::from((g.batch, g.channels, g.height, g.width)),
    ))
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(storage, col2im_impl(&self.0, storage, layout))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Patch matrix `(B·H_out·W_out, C·k·k)` of a `(B, C, H, W)` tensor, with
/// columns ordered to match a `(O, C, k, k)` weight reshaped to `(O, C·k·k)`.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<(Tensor, usize, usize)> {
    let (batch, channels, height, width) = x.dims4()?;
    if height + 2 * padding < kernel || width + 2 * padding < kernel {
        candle_core::bail!("{height}x{width} input is smaller than a {kernel}x{kernel} window");
    }
    let g = Geometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    };
    let (ho, wo) = g.out_hw();
    Ok((x.contiguous()?.apply_op1(Im2Col(g))?, ho, wo))
}

/// Zero-mean, unit-variance normalization over channel groups of a
/// `(B, C, H, W)` tensor (no affine part).
struct GroupNormalize {
    groups: usize,
    eps: f64,
}

struct GroupStats {
    batch: usize,
    groups: usize,
    group_len: usize,
}

fn group_stats(layout: &Layout, groups: usize) -> candle_core::Result<GroupStats> {
    let dims = layout.shape().dims();
    if dims.len() < 2 || dims[1] % groups != 0 {
        candle_core::bail!("cannot split {dims:?} into {groups} channel groups");
    }
    let batch = dims[0];
    let per_sample: usize = dims[1..].iter().product();
    Ok(GroupStats {
        batch,
        groups,
        group_len: per_sample / groups,
    })
}

fn normalize_impl<T: WithDType + Float>(
    op: &GroupNormalize,
    storage: &CpuStorage,
    layout: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let src = contiguous::<T>(storage, layout)?;
    let s = group_stats(layout, op.groups)?;
    let mut out = vec![T::zero(); src.len()];
    let n = T::from(s.group_len).unwrap();
    let eps = T::from(op.eps).unwrap();
    for (chunk, dst) in src.chunks_exact(s.group_len).zip(out.chunks_exact_mut(s.group_len)) {
        let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rstd = (var + eps).sqrt().recip();
        for (d, &v) in dst.iter_mut().zip(chunk) {
            *d = (v - mean) * rstd;
        }
    }
    debug_assert_eq!(out.len(), s.batch * s.groups * s.group_len);
    Ok((T::to_cpu_storage_owned(out), layout.shape().clone()))
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(storage, normalize_impl(self, storage, layout))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let backward = GroupNormalizeBackward {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &backward)?))
    }
}

struct GroupNormalizeBackward {
    groups: usize,
    eps: f64,
}

fn normalize_backward_impl<T: WithDType + Float>(
    op: &GroupNormalizeBackward,
    x: &CpuStorage,
    x_layout: &Layout,
    g: &CpuStorage,
    g_layout: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let xs = contiguous::<T>(x, x_layout)?;
    let gs = contiguous::<T>(g, g_layout)?;
    let s = group_stats(x_layout, op.groups)?;
    let n = T::from(s.group_len).unwrap();
    let eps = T::from(op.eps).unwrap();
    let mut out = vec![T::zero(); xs.len()];
    let mut xhat = vec![T::zero(); s.group_len];
    for ((xc, gc), dst) in xs
        .chunks_exact(s.group_len)
        .zip(gs.chunks_exact(s.group_len))
        .zip(out.chunks_exact_mut(s.group_len))
    {
        let mean = xc.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xc.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rstd = (var + eps).sqrt().recip();
        let (mut g_mean, mut gx_mean) = (T::zero(), T::zero());
        for ((h, &v), &gv) in xhat.iter_mut().zip(xc).zip(gc) {
            *h = (v - mean) * rstd;
            g_mean = g_mean + gv;
            gx_mean = gx_mean + gv * *h;
        }
        g_mean = g_mean / n;
        gx_mean = gx_mean / n;
        for ((d, &h), &gv) in dst.iter_mut().zip(&xhat).zip(gc) {
            *d = rstd * (gv - g_mean - h * gx_mean);
        }
    }
    Ok((T::to_cpu_storage_owned(out), x_layout.shape().clone()))
}

impl CustomOp2 for GroupNormalizeBackward {
    fn name(&self) -> &'static str {
        "group-normalize-backward"
    }

    fn cpu_fwd(
        &self,
        x: &CpuStorage,
        x_layout: &Layout,
        g: &CpuStorage,
        g_layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(x, normalize_backward_impl(self, x, x_layout, g, g_layout))
    }
}

pub fn group_normalize(x: &Tensor, groups: usize, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(GroupNormalize { groups, eps })
}
