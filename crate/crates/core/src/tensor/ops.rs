//! Pointwise and structural operators with explicit backward companions.

use super::{require_same_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// `max(0, x)` elementwise.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
    out.debug_check("relu");
    out
}

/// Routes `grad_out` through the positive support of the forward output.
/// At exactly zero the gradient is zero.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("relu_backward", output, grad_out)?;
    let mut grad = grad_out.clone();
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad)
}

/// Elementwise sum of two equally-shaped tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("add", a, b)?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out.debug_check("add");
    Ok(out)
}

/// Addition passes the output gradient to both operands unchanged.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Accumulates `delta` into `acc` in place (gradient fan-in).
pub fn add_into<T: Scalar>(acc: &mut Tensor<T>, delta: &Tensor<T>) -> Result<()> {
    require_same_shape("add_into", acc, delta)?;
    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
    Ok(())
}

/// Elementwise maximum; ties take the first operand's value.
pub fn elementwise_max<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("elementwise_max", a, b)?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        if v > *o {
            *o = v;
        }
    }
    out.debug_check("elementwise_max");
    Ok(out)
}

/// The gradient flows to whichever operand won; ties route to the first.
pub fn elementwise_max_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    require_same_shape("elementwise_max_backward", a, b)?;
    require_same_shape("elementwise_max_backward", a, grad_out)?;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for i in 0..grad_out.len() {
        if a.data()[i] >= b.data()[i] {
            ga.data_mut()[i] = grad_out.data()[i];
        } else {
            gb.data_mut()[i] = grad_out.data()[i];
        }
    }
    Ok((ga, gb))
}

/// Stacks tensors along the channel axis; spatial extents must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::empty("concat_channels", "no input tensors"))?;
    let spatial = first.spatial();
    let mut channels = 0;
    for p in parts {
        if p.spatial() != spatial {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial {spatial:?}"),
                format!("{:?}", p.spatial()),
            ));
        }
        channels += p.channels();
    }
    let [x_n, y_n, z_n] = spatial;
    let mut out = Tensor::zeros([channels, x_n, y_n, z_n]);
    let voxels = x_n * y_n * z_n;
    let out_c = channels;
    for v in 0..voxels {
        let mut base = 0;
        for p in parts {
            let c_n = p.channels();
            let src = &p.data()[v * c_n..(v + 1) * c_n];
            out.data_mut()[v * out_c + base..v * out_c + base + c_n].copy_from_slice(src);
            base += c_n;
        }
    }
    Ok(out)
}

/// Splits the output gradient back into per-input channel ranges.
pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_channels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let total: usize = input_channels.iter().sum();
    if grad_out.channels() != total {
        return Err(Error::shape(
            "concat_channels_backward",
            format!("{total} channels"),
            grad_out.channels().to_string(),
        ));
    }
    let [x_n, y_n, z_n] = grad_out.spatial();
    let voxels = x_n * y_n * z_n;
    let out_c = grad_out.channels();
    let mut grads: Vec<Tensor<T>> = input_channels
        .iter()
        .map(|&c| Tensor::zeros([c, x_n, y_n, z_n]))
        .collect();
    for v in 0..voxels {
        let mut base = 0;
        for (g, &c_n) in grads.iter_mut().zip(input_channels) {
            let src = &grad_out.data()[v * out_c + base..v * out_c + base + c_n];
            g.data_mut()[v * c_n..(v + 1) * c_n].copy_from_slice(src);
            base += c_n;
        }
    }
    Ok(grads)
}

fn pool_output_dims(input: [usize; 3], window: [usize; 3], stride: usize) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::invalid("maxpool3d", "stride must be at least 1"));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        if window[a] == 0 || window[a] > input[a] {
            return Err(Error::invalid(
                "maxpool3d",
                format!("window {:?} does not fit input {:?}", window, input),
            ));
        }
        out[a] = (input[a] - window[a]) / stride + 1;
    }
    Ok(out)
}

/// Max pooling over non-overlapping-or-strided windows, no padding.
/// Output extent per axis is `(d - w) / s + 1`.
pub fn maxpool3d<T: Scalar>(x: &Tensor<T>, window: [usize; 3], stride: usize) -> Result<Tensor<T>> {
    let out_dims = pool_output_dims(x.spatial(), window, stride)?;
    let c_n = x.channels();
    let mut out = Tensor::zeros([c_n, out_dims[0], out_dims[1], out_dims[2]]);
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                for c in 0..c_n {
                    let mut best = T::neg_infinity();
                    for dz in 0..window[2] {
                        for dy in 0..window[1] {
                            for dx in 0..window[0] {
                                let v = x.get(c, [ox * stride + dx, oy * stride + dy, oz * stride + dz]);
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                    }
                    out.set(c, [ox, oy, oz], best);
                }
            }
        }
    }
    out.debug_check("maxpool3d");
    Ok(out)
}

/// Routes each output gradient to the first maximal element of its window,
/// scanning in flat-layout order (x fastest, then y, then z).
pub fn maxpool3d_backward<T: Scalar>(
    x: &Tensor<T>,
    window: [usize; 3],
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_dims = pool_output_dims(x.spatial(), window, stride)?;
    let expected = [x.channels(), out_dims[0], out_dims[1], out_dims[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "maxpool3d_backward",
            format!("{expected:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad = Tensor::zeros(x.shape());
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                for c in 0..x.channels() {
                    let mut best = T::neg_infinity();
                    let mut best_at = [0usize; 3];
                    for dz in 0..window[2] {
                        for dy in 0..window[1] {
                            for dx in 0..window[0] {
                                let at = [ox * stride + dx, oy * stride + dy, oz * stride + dz];
                                let v = x.get(c, at);
                                if v > best {
                                    best = v;
                                    best_at = at;
                                }
                            }
                        }
                    }
                    let i = grad.index(c, best_at);
                    grad.data_mut()[i] += grad_out.get(c, [ox, oy, oz]);
                }
            }
        }
    }
    Ok(grad)
}

/// Softmax across the channel axis at every voxel, stabilized by
/// subtracting the per-voxel channel maximum before exponentiation.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c_n = x.channels();
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(c_n) {
        let mut max = chunk[0];
        for &v in chunk.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
    out.debug_check("softmax_channels");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: [usize; 4]) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _| {
            i += 1.0;
            i * 0.3 - 2.0
        })
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let x = Tensor::new([1, 2, 2, 1], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn relu_backward_masks_by_output_support() {
        let x = Tensor::new([1, 2, 2, 1], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        let g = Tensor::new([1, 2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&y, &g).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn add_requires_matching_shapes() {
        let a = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros([2, 2, 2, 2]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn elementwise_max_ties_route_gradient_to_first() {
        let a = Tensor::new([1, 1, 1, 3], vec![1.0, 5.0, 2.0]).unwrap();
        let b = Tensor::new([1, 1, 1, 3], vec![1.0, 3.0, 4.0]).unwrap();
        let m = elementwise_max(&a, &b).unwrap();
        assert_eq!(m.data(), &[1.0, 5.0, 4.0]);
        let g = Tensor::new([1, 1, 1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let (ga, gb) = elementwise_max_backward(&a, &b, &g).unwrap();
        assert_eq!(ga.data(), &[10.0, 20.0, 0.0]);
        assert_eq!(gb.data(), &[0.0, 0.0, 30.0]);
    }

    #[test]
    fn concat_stacks_channels_in_input_order() {
        let a = Tensor::<f64>::from_fn([2, 1, 1, 2], |c, [_, _, z]| (10 * c + z) as f64);
        let b = Tensor::<f64>::from_fn([1, 1, 1, 2], |_, [_, _, z]| 100.0 + z as f64);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [3, 1, 1, 2]);
        assert_eq!(cat.get(0, [0, 0, 1]), 1.0);
        assert_eq!(cat.get(1, [0, 0, 1]), 11.0);
        assert_eq!(cat.get(2, [0, 0, 1]), 101.0);
    }

    #[test]
    fn concat_backward_splits_by_channel_ranges() {
        let g = seq([5, 2, 1, 2]);
        let parts = concat_channels_backward(&g, &[2, 3]).unwrap();
        assert_eq!(parts[0].shape(), [2, 2, 1, 2]);
        assert_eq!(parts[1].shape(), [3, 2, 1, 2]);
        for v in [[0, 0, 0], [1, 0, 0], [0, 0, 1], [1, 0, 1]] {
            assert_eq!(parts[0].get(0, v), g.get(0, v));
            assert_eq!(parts[0].get(1, v), g.get(1, v));
            assert_eq!(parts[1].get(0, v), g.get(2, v));
            assert_eq!(parts[1].get(2, v), g.get(4, v));
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = seq([2, 2, 3, 2]);
        let b = seq([4, 2, 3, 2]);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = concat_channels_backward(&cat, &[2, 4]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        // 1 channel, 4x2x2 input, window 2 stride 2 -> 2x1x1.
        let x = Tensor::new(
            [1, 4, 2, 2],
            vec![
                1.0, 2.0, 3.0, 4.0, // z=0, y=0, x=0..3
                5.0, 6.0, 7.0, 8.0, // z=0, y=1
                -1.0, -2.0, -3.0, -4.0, // z=1, y=0
                -5.0, -6.0, -7.0, -8.0, // z=1, y=1
            ],
        )
        .unwrap();
        let y = maxpool3d(&x, [2, 2, 2], 2).unwrap();
        assert_eq!(y.shape(), [1, 2, 1, 1]);
        assert_eq!(y.data(), &[6.0, 8.0]);
    }

    #[test]
    fn maxpool_floor_division_drops_trailing_elements() {
        let x = seq([1, 5, 2, 2]);
        let y = maxpool3d(&x, [2, 2, 2], 2).unwrap();
        assert_eq!(y.spatial(), [2, 1, 1]);
    }

    #[test]
    fn maxpool_backward_routes_to_first_max_on_ties() {
        let x = Tensor::new([1, 2, 2, 1], vec![3.0, 3.0, 1.0, 3.0]).unwrap();
        let g = Tensor::new([1, 1, 1, 1], vec![7.0]).unwrap();
        let grad = maxpool3d_backward(&x, [2, 2, 1], 2, &g).unwrap();
        assert_eq!(grad.data(), &[7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_accumulates_overlapping_windows() {
        // Stride 1 windows overlap; the shared max receives both gradients.
        let x = Tensor::new([1, 3, 1, 1], vec![1.0, 9.0, 2.0]).unwrap();
        let g = Tensor::new([1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let grad = maxpool3d_backward(&x, [2, 1, 1], 1, &g).unwrap();
        assert_eq!(grad.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let x = Tensor::new([3, 1, 1, 2], vec![1.0, 2.0, 0.5, -1.0, -0.5, -2.0]).unwrap();
        let p = softmax_channels(&x);
        for v in [[0, 0, 0], [0, 0, 1]] {
            let sum: f64 = (0..3).map(|c| p.get(c, v)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(p.get(1, [0, 0, 0]) > p.get(0, [0, 0, 0]));
        assert!(p.get(1, [0, 0, 1]) > p.get(2, [0, 0, 1]));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f64>::new([2, 1, 1, 1], vec![1000.0, 998.0]).unwrap();
        let p = softmax_channels(&x);
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert!((p.get(0, [0, 0, 0]) + p.get(1, [0, 0, 0]) - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_uniform_for_equal_logits() {
        let x = Tensor::<f32>::zeros([4, 1, 2, 1]);
        let p = softmax_channels(&x);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
