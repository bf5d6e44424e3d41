//! Mean absolute error, the only training loss in this crate.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean of `|pred - target|` over every element.
pub fn l1_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            expected: target.dims(),
            got: pred.dims(),
        });
    }
    let n = T::from_f64(pred.len() as f64);
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(sum / n)
}

/// Gradient of [`l1_loss`] with respect to `pred`:
/// `sign(pred - target) / count`, with the subgradient at zero taken as 0.
pub fn l1_loss_backward<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<Tensor4<T>> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss_backward",
            expected: target.dims(),
            got: pred.dims(),
        });
    }
    let inv_n = T::one() / T::from_f64(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a - b;
            if d > T::zero() {
                inv_n
            } else if d < T::zero() {
                -inv_n
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor4::from_vec(pred.dims(), data)
}
