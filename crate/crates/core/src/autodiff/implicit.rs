use nalgebra::{DMatrix, DVector};

use super::AdError;

/// A residual `F(z, p) = 0` that implicitly defines `z(p)`.
pub trait ImplicitResidual {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn residual(&self, z: &[f64], out: &mut [f64]);
    /// `∂F/∂z` at `z`.
    fn jacobian_z(&self, z: &[f64]) -> DMatrix<f64>;
    /// Accumulates `(∂F/∂p)ᵀ w` into `grad`.
    fn vjp_params(&self, z: &[f64], w: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitAdjoint {
    /// Solution of `(∂F/∂z)ᵀ w = z̄`.
    pub w: Vec<f64>,
    /// `p̄ = -(∂F/∂p)ᵀ w`.
    pub params_bar: Vec<f64>,
}

/// Pulls the cotangent of a converged root `z` back to the parameters using
/// the implicit function theorem. The forward iteration is not differentiated.
pub fn adjoint_implicit_solve<R: ImplicitResidual + ?Sized>(
    residual: &R,
    z: &[f64],
    cotangent: &[f64],
) -> Result<ImplicitAdjoint, AdError> {
    if z.len() != residual.dim() || cotangent.len() != residual.dim() {
        return Err(AdError::Unsupported(
            "implicit adjoint: dimension mismatch".into(),
        ));
    }
    let jz = residual.jacobian_z(z);
    let w = jz
        .transpose()
        .lu()
        .solve(&DVector::from_column_slice(cotangent))
        .ok_or(AdError::Singular)?;
    let w: Vec<f64> = w.iter().copied().collect();
    let mut g = vec![0.0; residual.n_params()];
    residual.vjp_params(z, &w, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);
    Ok(ImplicitAdjoint { w, params_bar: g })
}
