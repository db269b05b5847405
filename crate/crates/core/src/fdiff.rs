//! Central finite-difference oracle for gradient verification.

use crate::error::Result;
use crate::graph::{ComputeGraph, ParamKind};
use crate::tensor::{Label, Tensor};

/// A single scalar coordinate of the loss's argument: either an input
/// element or a parameter element of the model.
#[derive(Debug, Clone, Copy)]
pub enum Coordinate {
    Input(usize),
    Param { layer: usize, kind: ParamKind, index: usize },
}

/// Generic central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Central finite difference of the model loss along one coordinate.
///
/// Clones the model/input, bumps the coordinate by ±`step` and evaluates
/// the loss twice. Slow by design; this is the independent check the
/// analytic gradients are verified against.
pub fn finite_diff_oracle(
    model: &ComputeGraph,
    clip: &Tensor,
    y: Label,
    coordinate: Coordinate,
    step: f64,
) -> Result<f64> {
    assert!(step > 0.0, "finite difference step must be positive");
    let eval = |delta: f64| -> Result<f64> {
        let mut m = model.clone();
        match coordinate {
            Coordinate::Input(i) => {
                let mut x = clip.clone();
                x.data_mut()[i] += delta;
                m.loss_value(&x, y)
            }
            Coordinate::Param { layer, kind, index } => {
                m.param_mut(layer, kind).expect("parameterized layer").data_mut()[index] += delta;
                m.loss_value(clip, y)
            }
        }
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

/// Relative error with an absolute floor near zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let d = central_difference(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-8);
    }

    #[test]
    fn step_halving_reduces_error_on_cubic() {
        // x^3 has a second-order truncation term, so the error scales with h^2
        let exact = 27.0; // d/dx x^3 at x = 3
        let coarse = (central_difference(|x| x * x * x, 3.0, 1e-4) - exact).abs();
        let fine = (central_difference(|x| x * x * x, 3.0, 1e-5) - exact).abs();
        assert!(fine < coarse);
    }
}
