//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! The networks in this project are small enough to train on a CPU, but they
//! still need exact gradients: the test suite verifies every analytic
//! gradient against central finite differences at `f64` precision.  This
//! crate provides the tape ([`Graph`]), the operator set used by the models
//! (dense, convolution, attention primitives, the masked-fill attention
//! operator, and the loss heads), a named parameter store, the Adam
//! optimizer, and the finite-difference helpers themselves.
//!
//! Design constraints worth knowing:
//!
//! * Everything is `f64`.  Finite-difference checks with `h = 1e-5` drown in
//!   rounding noise at `f32`.
//! * All nonlinearities are smooth (GELU uses the tanh form, no hard ReLU in
//!   any shipped model) so the checks stay meaningful.
//! * Heavy compute routes through `ndarray::dot`; convolution is lowered to
//!   im2col plus a matrix product.

mod check;
mod graph;
mod optim;
mod param;

pub use check::{central_difference, relative_error};
pub use graph::{Arr, FillMode, Grads, Graph, Var};
pub use optim::{cosine_lr, Adam};
pub use param::ParamSet;
