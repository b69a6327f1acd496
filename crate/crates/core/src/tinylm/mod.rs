//! A small pre-norm decoder-only transformer written out by hand: forward
//! pass with an activation tap, additive steering injection, exact
//! reverse-mode gradients, Adam, nucleus sampling with a KV cache, and a
//! central-difference gradient checker.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! (fast mode, training and inference) and `f64` (check mode, gradient
//! verification).

mod adam;
mod checkpoint;
mod decode;
mod gradcheck;
mod model;
pub(crate) mod ops;
mod params;

pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, checkpoint_bytes, parse_checkpoint};
pub use decode::{nucleus, sample_next, sample_utterance, Decoder, SamplingConfig};
pub use gradcheck::{check_gradients, subsample_coords, GradCheckEntry, GradCheckReport};
pub use model::{
    backward, backward_from_tap, forward, forward_to_tap, nll_masked, resume_from_tap, Forward,
    TokenLoss, Wrt,
};
pub use params::{GradBundle, Layout, ModelParams};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point type the model runs in.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Byte width written to checkpoints.
    const WIDTH: u8;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Strided `c = alpha * a * b + beta * c` with `a: [m, k]`, `b: [k, n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_row_stride: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $width:expr, $gemm:path) => {
        impl Scalar for $t {
            const WIDTH: u8 = $width;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                rsc: isize,
            ) {
                let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= extent(m, k, rsa, csa));
                assert!(b.len() as isize >= extent(k, n, rsb, csb));
                assert!(c.len() as isize >= extent(m, n, rsc, 1));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(
                        m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), rsc, 1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, 4, matrixmultiply::sgemm);
impl_scalar!(f64, 8, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f32`.
    Fast,
    /// `f64`, for finite-difference checks.
    Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    /// Filled in from the tokenizer when left at 0.
    pub vocab_size: usize,
    /// 1-based block whose residual output is tapped and steered; 0 means
    /// the final block.
    pub tap_layer: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            context_len: 256,
            vocab_size: 0,
            tap_layer: 0,
            precision: Precision::Fast,
        }
    }
}

impl ModelConfig {
    /// Tap layer with the "final block" default resolved.
    pub fn tap(&self) -> usize {
        if self.tap_layer == 0 {
            self.n_layers
        } else {
            self.tap_layer
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("layer, width, head and ffn sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.tap() > self.n_layers {
            return err(format!(
                "tap layer {} outside 1..={}",
                self.tap(),
                self.n_layers
            ));
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return err("vocab_size and context_len must be positive".into());
        }
        Ok(())
    }
}

/// Additive intervention on the tapped residual stream: `strength * direction`
/// is added at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerInjection<F> {
    pub direction: Vec<F>,
    pub strength: F,
}

impl<F: Scalar> SteerInjection<F> {
    pub fn new(direction: Vec<F>, strength: F) -> Self {
        SteerInjection {
            direction,
            strength,
        }
    }

    pub(crate) fn check(&self, d_model: usize) -> Result<()> {
        if self.direction.len() != d_model {
            return Err(Error::Invalid(format!(
                "steering direction has length {}, model width is {d_model}",
                self.direction.len()
            )));
        }
        Ok(())
    }
}
