//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors, with the convolution and spatial sampling kernels needed by
//! plane-sweep stereo networks and volumetric renderers.
//!
//! ```
//! use mvs_autograd::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
//! let y = x.square().sum();
//! let grads = g.backward(y);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod par;
mod params;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{numel, strides, Tensor};
