//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] walks it once
//! in reverse. Operations without a built-in rule can be attached as
//! [`CustomOp`] nodes that supply their own vector-Jacobian product, which is
//! how ODE solves enter the graph.

mod implicit;
mod tape;

pub use implicit::{adjoint_implicit_solve, ImplicitAdjoint, ImplicitResidual};
pub use tape::{CustomOp, Gradients, Tape, Tensor, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("gradient requested of a non-scalar output ({rows}x{cols})")]
    NonScalar { rows: usize, cols: usize },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("singular linear system")]
    Singular,
    #[error("solver failure inside the graph: {0}")]
    Solver(String),
}

/// Value and gradient of a scalar function of `params`.
///
/// `build` receives the tape and the parameter leaf (a column vector) and
/// returns the scalar output. Entries flagged in `frozen` get a zero
/// gradient.
pub fn grad<'a, F>(
    params: &[f64],
    frozen: Option<&[bool]>,
    build: F,
) -> Result<(f64, Vec<f64>), AdError>
where
    F: FnOnce(&mut Tape<'a>, Var) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let p = tape.leaf_vector(params);
    let out = build(&mut tape, p)?;
    let shape = tape.value(out).shape();
    if shape != (1, 1) {
        return Err(AdError::NonScalar {
            rows: shape.0,
            cols: shape.1,
        });
    }
    let value = tape.scalar(out);
    let g = tape.backward(out)?;
    let mut grad: Vec<f64> = g.wrt(p).iter().copied().collect();
    if let Some(mask) = frozen {
        for (gv, &f) in grad.iter_mut().zip(mask) {
            if f {
                *gv = 0.0;
            }
        }
    }
    Ok((value, grad))
}
