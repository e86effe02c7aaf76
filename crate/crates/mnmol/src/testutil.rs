//! Shared oracles for unit tests: finite differences and dense
//! materialization of linear operators.

use crate::tensor::Tensor;
use nalgebra::DMatrix;

/// Central finite differences of `f` with respect to its `arg`-th input.
/// `f` takes all inputs by reference and returns a scalar.
pub fn finite_diff(
    f: &dyn Fn(&[&Tensor]) -> f64,
    inputs: &[&Tensor],
    arg: usize,
    step: f64,
) -> Tensor {
    let base = inputs[arg].clone();
    let mut grad = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        let mut minus = base.clone();
        minus.data_mut()[i] -= step;

        let mut args_p: Vec<&Tensor> = inputs.to_vec();
        args_p[arg] = &plus;
        let fp = f(&args_p);
        let mut args_m: Vec<&Tensor> = inputs.to_vec();
        args_m[arg] = &minus;
        let fm = f(&args_m);

        grad.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Materialize a linear operator as a dense matrix by applying it to basis
/// vectors. Rows index the output, columns the input.
pub fn materialize(
    apply: &dyn Fn(&Tensor) -> Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
) -> DMatrix<f64> {
    let n: usize = in_shape.iter().product();
    let m: usize = out_shape.iter().product();
    let mut mat = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut e = Tensor::zeros(in_shape);
        e.data_mut()[j] = 1.0;
        let col = apply(&e);
        assert_eq!(col.len(), m, "operator output size changed");
        for (i, v) in col.data().iter().enumerate() {
            mat[(i, j)] = *v;
        }
    }
    mat
}
