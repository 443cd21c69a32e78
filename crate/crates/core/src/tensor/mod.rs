//! Dense 4-D tensors (channels, x, y, z) and the deterministic operator set
//! used by the completion network.
//!
//! Layout matches the volume types: flat index `c + C*(x + X*(y + Y*z))`,
//! channel fastest. All operators are pure functions with explicit backward
//! companions; parallel paths are gather-formulated so results are
//! bit-identical regardless of thread count.

mod conv;
mod gradcheck;
mod ops;

pub use conv::{conv3d_backward, conv3d_forward, conv3d_output_dims, same_padding, Conv3dGrads, Conv3dParams};
pub use gradcheck::{run_gradcheck, GradCheckCase, GradCheckReport, GRADCHECK_REL_TOL};
pub(crate) use gradcheck::{compare_case, fd_gradient};
pub use ops::{
    add, add_backward, add_into, concat_channels, concat_channels_backward, elementwise_max,
    elementwise_max_backward, maxpool3d, maxpool3d_backward, relu, relu_backward,
    softmax_channels,
};

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense tensor shaped `(channels, x, y, z)`, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len == 0 {
            return Err(Error::empty("Tensor::new", format!("shape {shape:?} has a zero extent")));
        }
        if data.len() != len {
            return Err(Error::shape(
                "Tensor::new",
                format!("{len} elements for shape {shape:?}"),
                data.len().to_string(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        assert!(len > 0, "tensor shape {shape:?} has a zero extent");
        Self { shape, data: vec![T::zero(); len] }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, [usize; 3]) -> T) -> Self {
        let mut out = Self::zeros(shape);
        let [c_n, x_n, y_n, z_n] = shape;
        let mut i = 0;
        for z in 0..z_n {
            for y in 0..y_n {
                for x in 0..x_n {
                    for c in 0..c_n {
                        out.data[i] = f(c, [x, y, z]);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, [x, y, z]: [usize; 3]) -> usize {
        debug_assert!(c < self.shape[0] && x < self.shape[1] && y < self.shape[2] && z < self.shape[3]);
        c + self.shape[0] * (x + self.shape[1] * (y + self.shape[2] * z))
    }

    #[inline]
    pub fn get(&self, c: usize, v: [usize; 3]) -> T {
        self.data[self.index(c, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, v: [usize; 3], value: T) {
        let i = self.index(c, v);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::non_finite(
                context,
                format!("element {i} of shape {:?} is {}", self.shape, self.data[i]),
            )),
        }
    }

    /// Debug-build finiteness assertion, applied by every operator to its
    /// output so numeric corruption surfaces at the op that produced it.
    pub(crate) fn debug_check(&self, context: &str) {
        if cfg!(debug_assertions) {
            if let Err(e) = self.check_finite(context) {
                panic!("{e}");
            }
        }
    }

    /// Converts elements through `From`/`as`-style casts via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v.to_f64().expect("scalar fits f64")).expect("f64 fits scalar"))
                .collect(),
        }
    }
}

pub(crate) fn require_same_shape<T: Scalar>(context: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}
