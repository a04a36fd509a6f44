//! Trainable classifiers: architecture descriptors, parameter snapshots,
//! forward passes, SGD training and class-mean feature tracking.

mod bank;
mod checkpoint;
pub mod loss;
mod network;
pub(crate) mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub use bank::{build_feature_bank, FeatureBank};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{softmax, KlDirection};
pub use network::{Network, Trace};
pub use train::{
    batch_cross_entropy, run_sgd, train_supervised, EpochStats, Objective, SupervisedObjective,
    TrainConfig,
};

/// Floating-point width used by the generic forward/backward code. Training
/// runs in `f32`; gradient and loss oracles run the same code in `f64`.
pub trait Real:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of_f64(x: f64) -> Self;
    fn of_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;

    /// Raw strided GEMM, `C = A B + beta C`.
    ///
    /// # Safety
    /// Every strided index must be in bounds for the pointed-to buffers.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    );
}

macro_rules! gemm_impl {
    ($name:ident) => {
        unsafe fn raw_gemm(
            m: usize,
            k: usize,
            n: usize,
            a: *const Self,
            (rsa, csa): (isize, isize),
            b: *const Self,
            (rsb, csb): (isize, isize),
            beta: Self,
            c: *mut Self,
            (rsc, csc): (isize, isize),
        ) {
            unsafe { matrixmultiply::$name(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
        }
    };
}

fn strided_extent(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C (m x n) = A (m x k) B (k x n)`, plus the old `C` when `accumulate`.
/// Strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    c: &mut [T],
    c_strides: (usize, usize),
    accumulate: bool,
) {
    assert!(strided_extent(m, k, a_strides) <= a.len());
    assert!(strided_extent(k, n, b_strides) <= b.len());
    assert!(strided_extent(m, n, c_strides) <= c.len());
    // C must not alias itself under the strides
    assert!(c_strides.0 >= n * c_strides.1.max(1) || c_strides.1 >= m * c_strides.0.max(1));
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let s = |(r, c): (usize, usize)| (r as isize, c as isize);
    // SAFETY: extents checked above; the three slices are distinct borrows
    unsafe {
        T::raw_gemm(m, k, n, a.as_ptr(), s(a_strides), b.as_ptr(), s(b_strides), beta, c.as_mut_ptr(), s(c_strides));
    }
}

impl Real for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn of_f32(x: f32) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(sgemm);
}

impl Real for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    gemm_impl!(dgemm);
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer has wrong length");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero width; a zero-column matrix has no rows worth visiting
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Single affine map; the penultimate features are the raw input.
    Linear,
    /// Two ReLU hidden layers followed by the classifier layer.
    Mlp { hidden: [usize; 2] },
    /// Four 3x3 conv+ReLU blocks (2x2 max-pool after the first two), global
    /// average pooling, classifier layer. Input is `[channels, height, width]`.
    ConvNet { widths: [usize; 4] },
}

/// Architecture descriptor. Together with a seed it fully determines the
/// initial parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, num_classes: usize, input_shape: Vec<usize>) -> Result<Self> {
        let spec = ModelSpec {
            architecture,
            num_classes,
            input_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(num_classes: usize, input_len: usize) -> Result<Self> {
        Self::new(Architecture::Linear, num_classes, vec![input_len])
    }

    pub fn mlp(num_classes: usize, input_len: usize, hidden: [usize; 2]) -> Result<Self> {
        Self::new(Architecture::Mlp { hidden }, num_classes, vec![input_len])
    }

    pub fn conv_net(num_classes: usize, input_shape: [usize; 3], widths: [usize; 4]) -> Result<Self> {
        Self::new(Architecture::ConvNet { widths }, num_classes, input_shape.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} must be non-empty with positive extents",
                self.input_shape
            )));
        }
        match &self.architecture {
            Architecture::Linear => {}
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("MLP hidden widths must be positive".into()));
                }
            }
            Architecture::ConvNet { widths } => {
                if widths.contains(&0) {
                    return Err(Error::Config("conv widths must be positive".into()));
                }
                match self.input_shape.as_slice() {
                    [_, h, w] if h % 4 == 0 && w % 4 == 0 => {}
                    other => {
                        return Err(Error::Config(format!(
                            "conv net needs input [channels, height, width] with height and width divisible by 4, got {other:?}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of scalars in one input sample.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the penultimate layer, i.e. of the features entering the
    /// final linear layer.
    pub fn feature_dim(&self) -> usize {
        match &self.architecture {
            Architecture::Linear => self.input_len(),
            Architecture::Mlp { hidden } => hidden[1],
            Architecture::ConvNet { widths } => widths[3],
        }
    }

    pub fn parameter_count(&self) -> usize {
        network::Layout::new(self).parameter_count()
    }
}

/// Architecture plus a parameter snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub parameters: Vec<f32>,
    /// Number of training epochs this snapshot has seen.
    pub epoch: u64,
    /// Position of the data-shuffling stream when the snapshot was taken.
    pub rng_state: Vec<u8>,
}

impl ModelCheckpoint {
    /// Fresh model with seed-determined initial weights (He-normal for
    /// ReLU layers, LeCun-normal for the classifier layer, zero biases).
    pub fn initialize(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = network::Layout::new(spec);
        let mut params = vec![0.0f32; layout.parameter_count()];
        let mut init_rng = rng::stream(seed, "init");
        for block in layout.weight_blocks() {
            let std = (block.gain / block.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[block.range.clone()] {
                *p = normal.sample(&mut init_rng) as f32;
            }
        }
        Ok(ModelCheckpoint {
            spec: spec.clone(),
            parameters: params,
            epoch: 0,
            rng_state: Vec::new(),
        })
    }

    /// Model whose parameters are all zero.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ModelCheckpoint {
            spec: spec.clone(),
            parameters: vec![0.0; spec.parameter_count()],
            epoch: 0,
            rng_state: Vec::new(),
        })
    }

    pub fn from_parameters(spec: &ModelSpec, parameters: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if parameters.len() != spec.parameter_count() {
            return Err(Error::Input(format!(
                "spec needs {} parameters, got {}",
                spec.parameter_count(),
                parameters.len()
            )));
        }
        Ok(ModelCheckpoint {
            spec: spec.clone(),
            parameters,
            epoch: 0,
            rng_state: Vec::new(),
        })
    }

    pub fn network(&self) -> Network<'_, f32> {
        Network::new(&self.spec, &self.parameters)
    }

    /// Logits for a batch of flattened samples (batch x K).
    pub fn forward_logits(&self, batch: &[f32]) -> Result<Matrix<f32>> {
        self.network().logits(batch)
    }

    /// Penultimate activations for a batch (batch x p).
    pub fn forward_features(&self, batch: &[f32]) -> Result<Matrix<f32>> {
        self.network().features(batch)
    }

    /// Applies only the final linear layer to penultimate features.
    pub fn final_layer(&self, features: &Matrix<f32>) -> Result<Matrix<f32>> {
        self.network().head(features)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        let bytes = checkpoint::encode(self);
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
