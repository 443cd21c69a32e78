//! Finite-difference verification of every operator's backward pass.
//!
//! Each case builds a scalar objective `phi = <F(inputs), R>` for a fixed
//! random cotangent R, computes the analytic gradient through the operator's
//! backward companion, and compares against f64 central differences. Inputs
//! for kinked ops (relu, pooling, elementwise max) are constructed with a
//! guaranteed margin from the kink so the FD probe never crosses it.

use super::{
    add_backward, concat_channels, concat_channels_backward, conv3d_backward, conv3d_forward,
    conv3d_output_dims, elementwise_max, elementwise_max_backward, maxpool3d, maxpool3d_backward,
    relu, relu_backward, Conv3dParams, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maximum allowed relative error between analytic and FD gradients.
pub const GRADCHECK_REL_TOL: f64 = 1e-4;

/// Central-difference step; inputs are built so no kink lies within it.
pub(crate) const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for case in &self.cases {
            writeln!(
                f,
                "{}  {:width$}  max rel err {:.3e}",
                if case.passed { "PASS" } else { "FAIL" },
                case.name,
                case.max_rel_err,
            )?;
        }
        write!(
            f,
            "{}: {} cases, worst rel err {:.3e} (tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases.len(),
            self.max_rel_err(),
            GRADCHECK_REL_TOL,
        )
    }
}

pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub(crate) fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + FD_STEP;
            let hi = f(&probe);
            probe[k] = orig - FD_STEP;
            let lo = f(&probe);
            probe[k] = orig;
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

pub(crate) fn compare_case(name: &str, analytic: &[f64], fd: &[f64]) -> GradCheckCase {
    assert_eq!(analytic.len(), fd.len(), "{name}: gradient length mismatch");
    let max_rel_err = analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max);
    GradCheckCase { name: name.to_string(), max_rel_err, passed: max_rel_err <= GRADCHECK_REL_TOL }
}

/// Pairwise-distinct values with a guaranteed gap of `2/n` and distance
/// at least `0.62/n` from zero, randomly permuted. Keeps FD probes of
/// kinked ops on one side of every kink (requires `n <= 2000` or so for
/// the margin to stay above the FD step).
pub(crate) fn spread_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let step = 2.0 / n as f64;
    let mut values: Vec<f64> = (0..n).map(|k| -1.0 + (k as f64 + 0.31) * step).collect();
    values.shuffle(rng);
    values
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct ConvConfig {
    label: &'static str,
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
    stride: usize,
    dilation: usize,
    padding: [usize; 3],
    input: [usize; 3],
}

fn conv_cases(cfg: &ConvConfig, rng: &mut ChaCha8Rng, out: &mut Vec<GradCheckCase>) {
    let mut p = Conv3dParams::<f64>::new(
        cfg.in_channels,
        cfg.out_channels,
        cfg.kernel,
        cfg.stride,
        cfg.dilation,
        cfg.padding,
    )
    .unwrap();
    p.weights = uniform(p.weights.len(), rng);
    p.bias = uniform(p.bias.len(), rng);
    let shape = [cfg.in_channels, cfg.input[0], cfg.input[1], cfg.input[2]];
    let x = Tensor::new(shape, uniform(shape.iter().product(), rng)).unwrap();
    let od = conv3d_output_dims(cfg.input, &p).unwrap();
    let co_shape = [cfg.out_channels, od[0], od[1], od[2]];
    let cot = Tensor::new(co_shape, uniform(co_shape.iter().product(), rng)).unwrap();

    let grads = conv3d_backward(&x, &p, &cot).unwrap();

    let fd_x = fd_gradient(
        |v| {
            let probe = Tensor::new(shape, v.to_vec()).unwrap();
            dot(conv3d_forward(&probe, &p).unwrap().data(), cot.data())
        },
        x.data(),
    );
    out.push(compare_case(&format!("conv3d {} / input", cfg.label), grads.input.data(), &fd_x));

    let fd_w = fd_gradient(
        |v| {
            let mut probe = p.clone();
            probe.weights = v.to_vec();
            dot(conv3d_forward(&x, &probe).unwrap().data(), cot.data())
        },
        &p.weights,
    );
    out.push(compare_case(&format!("conv3d {} / weights", cfg.label), &grads.weights, &fd_w));

    let fd_b = fd_gradient(
        |v| {
            let mut probe = p.clone();
            probe.bias = v.to_vec();
            dot(conv3d_forward(&x, &probe).unwrap().data(), cot.data())
        },
        &p.bias,
    );
    out.push(compare_case(&format!("conv3d {} / bias", cfg.label), &grads.bias, &fd_b));
}

fn relu_case(shape: [usize; 4], rng: &mut ChaCha8Rng) -> GradCheckCase {
    let n = shape.iter().product();
    let x = Tensor::new(shape, spread_values(n, rng)).unwrap();
    let cot = Tensor::new(shape, uniform(n, rng)).unwrap();
    let analytic = relu_backward(&relu(&x), &cot).unwrap();
    let fd = fd_gradient(
        |v| dot(relu(&Tensor::new(shape, v.to_vec()).unwrap()).data(), cot.data()),
        x.data(),
    );
    compare_case(&format!("relu {shape:?}"), analytic.data(), &fd)
}

fn maxpool_case(
    shape: [usize; 4],
    window: [usize; 3],
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheckCase {
    let n = shape.iter().product();
    let x = Tensor::new(shape, spread_values(n, rng)).unwrap();
    let y = maxpool3d(&x, window, stride).unwrap();
    let cot = Tensor::new(y.shape(), uniform(y.len(), rng)).unwrap();
    let analytic = maxpool3d_backward(&x, window, stride, &cot).unwrap();
    let fd = fd_gradient(
        |v| {
            let probe = Tensor::new(shape, v.to_vec()).unwrap();
            dot(maxpool3d(&probe, window, stride).unwrap().data(), cot.data())
        },
        x.data(),
    );
    compare_case(&format!("maxpool {shape:?} w{window:?} s{stride}"), analytic.data(), &fd)
}

fn add_cases(shape: [usize; 4], rng: &mut ChaCha8Rng, out: &mut Vec<GradCheckCase>) {
    let n = shape.iter().product();
    let a = Tensor::new(shape, uniform(n, rng)).unwrap();
    let b = Tensor::new(shape, uniform(n, rng)).unwrap();
    let cot = Tensor::new(shape, uniform(n, rng)).unwrap();
    let (ga, gb) = add_backward(&cot);
    for (side, other, analytic) in [("lhs", &b, &ga), ("rhs", &a, &gb)] {
        let fd = fd_gradient(
            |v| {
                let probe = Tensor::new(shape, v.to_vec()).unwrap();
                dot(super::add(&probe, other).unwrap().data(), cot.data())
            },
            if side == "lhs" { a.data() } else { b.data() },
        );
        out.push(compare_case(&format!("add {shape:?} / {side}"), analytic.data(), &fd));
    }
}

fn concat_cases(channels: &[usize], spatial: [usize; 3], rng: &mut ChaCha8Rng, out: &mut Vec<GradCheckCase>) {
    let parts: Vec<Tensor<f64>> = channels
        .iter()
        .map(|&c| {
            let shape = [c, spatial[0], spatial[1], spatial[2]];
            Tensor::new(shape, uniform(shape.iter().product(), rng)).unwrap()
        })
        .collect();
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    let cat = concat_channels(&refs).unwrap();
    let cot = Tensor::new(cat.shape(), uniform(cat.len(), rng)).unwrap();
    let analytic = concat_channels_backward(&cot, channels).unwrap();
    for (k, part) in parts.iter().enumerate() {
        let fd = fd_gradient(
            |v| {
                let probe = Tensor::new(part.shape(), v.to_vec()).unwrap();
                let mut all: Vec<&Tensor<f64>> = parts.iter().collect();
                all[k] = &probe;
                dot(concat_channels(&all).unwrap().data(), cot.data())
            },
            part.data(),
        );
        out.push(compare_case(
            &format!("concat {channels:?} @ {spatial:?} / part {k}"),
            analytic[k].data(),
            &fd,
        ));
    }
}

fn max_cases(shape: [usize; 4], rng: &mut ChaCha8Rng, out: &mut Vec<GradCheckCase>) {
    // Draw both operands from one spread pool so |a - b| is bounded away
    // from zero elementwise.
    let n = shape.iter().product();
    let pool = spread_values(2 * n, rng);
    let a = Tensor::new(shape, pool[..n].to_vec()).unwrap();
    let b = Tensor::new(shape, pool[n..].to_vec()).unwrap();
    let cot = Tensor::new(shape, uniform(n, rng)).unwrap();
    let (ga, gb) = elementwise_max_backward(&a, &b, &cot).unwrap();
    for (side, analytic) in [("lhs", &ga), ("rhs", &gb)] {
        let fd = fd_gradient(
            |v| {
                let probe = Tensor::new(shape, v.to_vec()).unwrap();
                let y = if side == "lhs" {
                    elementwise_max(&probe, &b).unwrap()
                } else {
                    elementwise_max(&a, &probe).unwrap()
                };
                dot(y.data(), cot.data())
            },
            if side == "lhs" { a.data() } else { b.data() },
        );
        out.push(compare_case(&format!("elementwise_max {shape:?} / {side}"), analytic.data(), &fd));
    }
}

/// Runs the full FD suite over every operator with several shapes and
/// geometry variants each. Deterministic per seed.
pub fn run_gradcheck(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let conv_configs = [
        ConvConfig { label: "k3 s1 r1", in_channels: 2, out_channels: 3, kernel: [3, 3, 3], stride: 1, dilation: 1, padding: [1, 1, 1], input: [4, 3, 4] },
        ConvConfig { label: "k3 s2 r1", in_channels: 2, out_channels: 2, kernel: [3, 3, 3], stride: 2, dilation: 1, padding: [1, 1, 1], input: [5, 4, 5] },
        ConvConfig { label: "k3 s1 r2", in_channels: 1, out_channels: 2, kernel: [3, 3, 3], stride: 1, dilation: 2, padding: [2, 2, 2], input: [5, 5, 5] },
        ConvConfig { label: "k1 s1 r1", in_channels: 3, out_channels: 4, kernel: [1, 1, 1], stride: 1, dilation: 1, padding: [0, 0, 0], input: [3, 3, 3] },
        ConvConfig { label: "k7 s2 r1", in_channels: 1, out_channels: 2, kernel: [7, 1, 1], stride: 2, dilation: 1, padding: [3, 0, 0], input: [8, 2, 2] },
    ];
    for cfg in &conv_configs {
        conv_cases(cfg, &mut rng, &mut cases);
    }

    for shape in [[3, 4, 4, 2], [1, 6, 5, 4], [5, 2, 2, 2], [2, 1, 7, 3], [4, 3, 1, 5]] {
        cases.push(relu_case(shape, &mut rng));
    }

    cases.push(maxpool_case([2, 4, 4, 4], [2, 2, 2], 2, &mut rng));
    cases.push(maxpool_case([1, 5, 4, 3], [2, 2, 2], 2, &mut rng));
    cases.push(maxpool_case([2, 3, 3, 3], [2, 2, 2], 1, &mut rng));
    cases.push(maxpool_case([3, 6, 2, 4], [2, 1, 2], 2, &mut rng));
    cases.push(maxpool_case([1, 4, 4, 6], [3, 3, 3], 3, &mut rng));

    for shape in [[2, 3, 3, 3], [1, 5, 2, 4], [4, 2, 3, 2], [3, 1, 6, 2], [2, 4, 1, 3]] {
        add_cases(shape, &mut rng, &mut cases);
    }
    for (channels, spatial) in [
        (&[1usize, 2, 3][..], [2usize, 3, 2]),
        (&[2, 2], [3, 2, 4]),
        (&[1, 4], [4, 1, 3]),
        (&[3, 1], [2, 2, 5]),
        (&[2, 3], [1, 4, 2]),
    ] {
        concat_cases(channels, spatial, &mut rng, &mut cases);
    }
    for shape in [[2, 3, 2, 3], [1, 4, 4, 2], [3, 2, 5, 1], [2, 2, 2, 6], [4, 3, 3, 2]] {
        max_cases(shape, &mut rng, &mut cases);
    }

    GradCheckReport { cases }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_within_tolerance() {
        let report = run_gradcheck(7);
        assert!(report.cases.len() >= 25);
        for case in &report.cases {
            assert!(
                case.passed,
                "{} failed with max rel err {:.3e}",
                case.name, case.max_rel_err
            );
        }
    }

    #[test]
    fn suite_is_deterministic_per_seed() {
        let a = run_gradcheck(3);
        let b = run_gradcheck(3);
        for (x, y) in a.cases.iter().zip(&b.cases) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }

    #[test]
    fn spread_values_keep_margins_from_kinks_and_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let values = spread_values(n, &mut rng);
        let min_abs = values.iter().map(|v| v.abs()).fold(f64::MAX, f64::min);
        assert!(min_abs > 2.0 * FD_STEP, "closest value to zero: {min_abs}");
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        for pair in sorted.windows(2) {
            assert!(pair[1] - pair[0] > 2.0 * FD_STEP);
        }
    }

    #[test]
    fn rel_err_uses_the_absolute_floor_for_tiny_values() {
        assert!(rel_err(0.0, 5e-9) < 1e-4);
        assert!(rel_err(1.0, 1.1) > 0.09);
    }

    #[test]
    fn a_corrupted_backward_would_be_caught() {
        // Deliberately wrong analytic gradient fails the comparison.
        let analytic = [1.0, 2.0, 3.0];
        let fd = [1.0, 2.0, 3.5];
        let case = compare_case("corrupt", &analytic, &fd);
        assert!(!case.passed);
    }
}
