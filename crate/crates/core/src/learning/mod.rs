//! Differentiable building blocks shared by every learnable model.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::softmax_attention;
pub use gradcheck::{gradcheck, GradcheckReport};
pub use graph::{l1_loss, mse_loss, Gradients, Graph, Var};
pub use init::Initializer;
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Params};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `x·W + b`, with `b` broadcast over rows.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] || b.numel() != w.shape()[1]
    {
        return Err(Error::dim(format!(
            "dense: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (rows, din, dout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut out: Vec<f64> = b.data().repeat(rows);
    tensor::gemm_nn(x.data(), w.data(), &mut out, rows, din, dout);
    Tensor::new(&[rows, dout], out)
}

/// Sinusoidal encoding of position `pos`: even entries
/// `sin(pos / 10000^(2i/d))`, odd entries the matching cosine.
pub fn sinusoid_embedding(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
