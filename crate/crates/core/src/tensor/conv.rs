//! 3-D convolution (cross-correlation) with stride, dilation and zero
//! padding, plus its exact adjoint for backpropagation.
//!
//! Both directions are gather-formulated: every output cell is produced by
//! exactly one task with a fixed internal summation order, so results do not
//! depend on the rayon thread count.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Filter bank and geometry of one convolution layer.
///
/// Weights are stored flat as `[filters][in_channels][kx][ky][kz]`
/// (kz fastest); biases are one per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dParams<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub dilation: usize,
    pub padding: [usize; 3],
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients produced by [`conv3d_backward`], in the same layouts as the
/// forward inputs.
#[derive(Debug, Clone)]
pub struct Conv3dGrads<T> {
    pub input: Tensor<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Padding that preserves spatial extent at stride 1: `dilation*(k-1)/2`
/// per axis. Requires `dilation*(k-1)` even (any odd kernel qualifies).
pub fn same_padding(kernel: [usize; 3], dilation: usize) -> Result<[usize; 3]> {
    let mut pad = [0usize; 3];
    for a in 0..3 {
        let span = dilation * (kernel[a] - 1);
        if span % 2 != 0 {
            return Err(Error::invalid(
                "same_padding",
                format!("dilation {dilation} with kernel {:?} has no centered padding", kernel),
            ));
        }
        pad[a] = span / 2;
    }
    Ok(pad)
}

impl<T: Scalar> Conv3dParams<T> {
    /// Zero-initialized parameters; weights are filled in by the caller.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: usize,
        dilation: usize,
        padding: [usize; 3],
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("Conv3dParams", "channel counts must be at least 1"));
        }
        if kernel.iter().any(|&k| k == 0) {
            return Err(Error::invalid("Conv3dParams", "kernel extents must be at least 1"));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("Conv3dParams", "stride and dilation must be at least 1"));
        }
        let weights = vec![T::zero(); out_channels * in_channels * kernel[0] * kernel[1] * kernel[2]];
        let bias = vec![T::zero(); out_channels];
        Ok(Self { in_channels, out_channels, kernel, stride, dilation, padding, weights, bias })
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        [self.out_channels, self.in_channels, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    #[inline]
    pub fn weight_index(&self, f: usize, ci: usize, i: usize, j: usize, l: usize) -> usize {
        (((f * self.in_channels + ci) * self.kernel[0] + i) * self.kernel[1] + j) * self.kernel[2] + l
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn check_consistent(&self) -> Result<()> {
        let expect_w = self.out_channels * self.in_channels * self.kernel_volume();
        if self.weights.len() != expect_w {
            return Err(Error::shape("conv3d weights", expect_w.to_string(), self.weights.len().to_string()));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::shape(
                "conv3d bias",
                self.out_channels.to_string(),
                self.bias.len().to_string(),
            ));
        }
        Ok(())
    }

    /// Weights re-laid as `[f][i][j][l][ci]` so the innermost channel loop
    /// reads both operands contiguously.
    fn weights_channel_minor(&self) -> Vec<T> {
        let [kx, ky, kz] = self.kernel;
        let c_in = self.in_channels;
        let mut out = vec![T::zero(); self.weights.len()];
        for f in 0..self.out_channels {
            for ci in 0..c_in {
                for i in 0..kx {
                    for j in 0..ky {
                        for l in 0..kz {
                            let dst = (((f * kx + i) * ky + j) * kz + l) * c_in + ci;
                            out[dst] = self.weights[self.weight_index(f, ci, i, j, l)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Weights re-laid as `[ci][i][j][l][f]` for the input-gradient gather.
    fn weights_filter_minor(&self) -> Vec<T> {
        let [kx, ky, kz] = self.kernel;
        let mut out = vec![T::zero(); self.weights.len()];
        for f in 0..self.out_channels {
            for ci in 0..self.in_channels {
                for i in 0..kx {
                    for j in 0..ky {
                        for l in 0..kz {
                            let dst = (((ci * kx + i) * ky + j) * kz + l) * self.out_channels + f;
                            out[dst] = self.weights[self.weight_index(f, ci, i, j, l)];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Output spatial extents: `(d + 2p - dilation*(k-1) - 1) / stride + 1`.
pub fn conv3d_output_dims<T: Scalar>(input: [usize; 3], p: &Conv3dParams<T>) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * p.padding[a];
        let span = p.dilation * (p.kernel[a] - 1) + 1;
        if padded < span {
            return Err(Error::invalid(
                "conv3d",
                format!(
                    "input extent {} (+2*{} pad) is smaller than the receptive span {span}",
                    input[a], p.padding[a]
                ),
            ));
        }
        out[a] = (padded - span) / p.stride + 1;
    }
    Ok(out)
}

pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Tensor<T>> {
    p.check_consistent()?;
    if x.channels() != p.in_channels {
        return Err(Error::shape(
            "conv3d input channels",
            p.in_channels.to_string(),
            x.channels().to_string(),
        ));
    }
    let [x_n, y_n, z_n] = x.spatial();
    let [ox_n, oy_n, oz_n] = conv3d_output_dims(x.spatial(), p)?;
    let c_in = p.in_channels;
    let f_n = p.out_channels;
    let [kx, ky, kz] = p.kernel;
    let (s, r) = (p.stride as isize, p.dilation as isize);
    let [px, py, pz] = [p.padding[0] as isize, p.padding[1] as isize, p.padding[2] as isize];
    let wt = p.weights_channel_minor();
    let xd = x.data();

    let mut out = Tensor::zeros([f_n, ox_n, oy_n, oz_n]);
    let slice_len = f_n * ox_n * oy_n;
    out.data_mut()
        .par_chunks_mut(slice_len)
        .enumerate()
        .for_each(|(oz, slab)| {
            let oz = oz as isize;
            for oy in 0..oy_n as isize {
                for ox in 0..ox_n as isize {
                    let cell = ((oy * ox_n as isize + ox) * f_n as isize) as usize;
                    for f in 0..f_n {
                        let mut acc = p.bias[f];
                        for i in 0..kx {
                            let ix = ox * s - px + r * i as isize;
                            if ix < 0 || ix >= x_n as isize {
                                continue;
                            }
                            for j in 0..ky {
                                let iy = oy * s - py + r * j as isize;
                                if iy < 0 || iy >= y_n as isize {
                                    continue;
                                }
                                for l in 0..kz {
                                    let iz = oz * s - pz + r * l as isize;
                                    if iz < 0 || iz >= z_n as isize {
                                        continue;
                                    }
                                    let xb = c_in
                                        * (ix as usize + x_n * (iy as usize + y_n * iz as usize));
                                    let wb = (((f * kx + i) * ky + j) * kz + l) * c_in;
                                    let xs = &xd[xb..xb + c_in];
                                    let ws = &wt[wb..wb + c_in];
                                    let mut dot = T::zero();
                                    for ci in 0..c_in {
                                        dot += ws[ci] * xs[ci];
                                    }
                                    acc += dot;
                                }
                            }
                        }
                        slab[cell + f] = acc;
                    }
                }
            }
        });
    out.debug_check("conv3d_forward");
    Ok(out)
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv3dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv3dGrads<T>> {
    p.check_consistent()?;
    let out_dims = conv3d_output_dims(x.spatial(), p)?;
    let expected = [p.out_channels, out_dims[0], out_dims[1], out_dims[2]];
    if x.channels() != p.in_channels || grad_out.shape() != expected {
        return Err(Error::shape(
            "conv3d_backward",
            format!("input {} channels, grad {:?}", p.in_channels, expected),
            format!("input {} channels, grad {:?}", x.channels(), grad_out.shape()),
        ));
    }
    let [x_n, y_n, z_n] = x.spatial();
    let [ox_n, oy_n, oz_n] = out_dims;
    let c_in = p.in_channels;
    let f_n = p.out_channels;
    let [kx, ky, kz] = p.kernel;
    let (s, r) = (p.stride as isize, p.dilation as isize);
    let [px, py, pz] = [p.padding[0] as isize, p.padding[1] as isize, p.padding[2] as isize];
    let xd = x.data();
    let god = grad_out.data();

    let mut grad_bias = vec![T::zero(); f_n];
    for cell in god.chunks(f_n) {
        for (gb, &g) in grad_bias.iter_mut().zip(cell) {
            *gb += g;
        }
    }

    // Weight gradients: one independent task per filter, each accumulating
    // into a channel-minor scratch block, transposed to canonical layout at
    // the end.
    let kernel_cells = kx * ky * kz;
    let per_filter: Vec<Vec<T>> = (0..f_n)
        .into_par_iter()
        .map(|f| {
            let mut block = vec![T::zero(); c_in * kernel_cells];
            for oz in 0..oz_n as isize {
                for oy in 0..oy_n as isize {
                    for ox in 0..ox_n as isize {
                        let go = god
                            [((oz as usize * oy_n + oy as usize) * ox_n + ox as usize) * f_n + f];
                        if go == T::zero() {
                            continue;
                        }
                        for i in 0..kx {
                            let ix = ox * s - px + r * i as isize;
                            if ix < 0 || ix >= x_n as isize {
                                continue;
                            }
                            for j in 0..ky {
                                let iy = oy * s - py + r * j as isize;
                                if iy < 0 || iy >= y_n as isize {
                                    continue;
                                }
                                for l in 0..kz {
                                    let iz = oz * s - pz + r * l as isize;
                                    if iz < 0 || iz >= z_n as isize {
                                        continue;
                                    }
                                    let xb = c_in
                                        * (ix as usize + x_n * (iy as usize + y_n * iz as usize));
                                    let bb = ((i * ky + j) * kz + l) * c_in;
                                    let xs = &xd[xb..xb + c_in];
                                    let bs = &mut block[bb..bb + c_in];
                                    for ci in 0..c_in {
                                        bs[ci] += go * xs[ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            block
        })
        .collect();
    let mut grad_weights = vec![T::zero(); p.weights.len()];
    for (f, block) in per_filter.iter().enumerate() {
        for ci in 0..c_in {
            for i in 0..kx {
                for j in 0..ky {
                    for l in 0..kz {
                        grad_weights[p.weight_index(f, ci, i, j, l)] =
                            block[((i * ky + j) * kz + l) * c_in + ci];
                    }
                }
            }
        }
    }

    // Input gradients: gather per input voxel over the kernel offsets that
    // map it onto a valid output cell.
    let wt = p.weights_filter_minor();
    let mut grad_input = Tensor::zeros(x.shape());
    let slice_len = c_in * x_n * y_n;
    grad_input
        .data_mut()
        .par_chunks_mut(slice_len)
        .enumerate()
        .for_each(|(iz, slab)| {
            let iz = iz as isize;
            let mut zs: Vec<(usize, usize)> = Vec::with_capacity(kz);
            let mut ys: Vec<(usize, usize)> = Vec::with_capacity(ky);
            let mut xs: Vec<(usize, usize)> = Vec::with_capacity(kx);
            zs.clear();
            for l in 0..kz {
                let t = iz + pz - r * l as isize;
                if t >= 0 && t % s == 0 && (t / s) < oz_n as isize {
                    zs.push((l, (t / s) as usize));
                }
            }
            for iy in 0..y_n as isize {
                ys.clear();
                for j in 0..ky {
                    let t = iy + py - r * j as isize;
                    if t >= 0 && t % s == 0 && (t / s) < oy_n as isize {
                        ys.push((j, (t / s) as usize));
                    }
                }
                for ix in 0..x_n as isize {
                    xs.clear();
                    for i in 0..kx {
                        let t = ix + px - r * i as isize;
                        if t >= 0 && t % s == 0 && (t / s) < ox_n as isize {
                            xs.push((i, (t / s) as usize));
                        }
                    }
                    let cell = ((iy * x_n as isize + ix) * c_in as isize) as usize;
                    for ci in 0..c_in {
                        let mut acc = T::zero();
                        for &(i, ox) in &xs {
                            for &(j, oy) in &ys {
                                for &(l, oz) in &zs {
                                    let gb = ((oz * oy_n + oy) * ox_n + ox) * f_n;
                                    let wb = (((ci * kx + i) * ky + j) * kz + l) * f_n;
                                    let gs = &god[gb..gb + f_n];
                                    let ws = &wt[wb..wb + f_n];
                                    let mut dot = T::zero();
                                    for f in 0..f_n {
                                        dot += ws[f] * gs[f];
                                    }
                                    acc += dot;
                                }
                            }
                        }
                        slab[cell + ci] = acc;
                    }
                }
            }
        });

    Ok(Conv3dGrads { input: grad_input, weights: grad_weights, bias: grad_bias })
}
