//! Forward and reverse differentiation on small functions.
//!
//! `cargo run --example autodiff_tour`

use std::error::Error;

use nashnet::autodiff::{derive1, derive2, jet2, param_gradient, Dual, Scalar, ScalarFn};

/// f(x) = x³ − 2x + sin x
struct Cubic;

impl ScalarFn for Cubic {
    fn eval<T: Scalar>(&self, x: T) -> T {
        x.powi(3) - x.scale(2.0) + x.sin()
    }
}

pub fn run() -> Result<(), Box<dyn Error>> {
    let x = 0.7;
    let d1 = derive1(&Cubic, x)?;
    let d2 = derive2(&Cubic, x)?;
    println!(
        "f'({x}) = {d1:.12}   exact {:.12}",
        3.0 * x * x - 2.0 + x.cos()
    );
    println!("f''({x}) = {d2:.12}   exact {:.12}", 6.0 * x - x.sin());

    let [v, g, h] = jet2(&Cubic, x)?;
    println!("one nested pass: value {v:.6}, slope {g:.6}, curvature {h:.6}");

    let y = Dual::variable(2.0f64).exp();
    println!("d/dx e^x at 2: {:.6} (value {:.6})", y.eps, y.re);

    // gradient of a tiny least-squares loss with respect to (a, b)
    let xs = [0.0, 1.0, 2.0];
    let ys = [1.0, 3.0, 5.0];
    let grad = param_gradient(
        |w| {
            xs.iter().zip(&ys).fold(w[0].scale(0.0), |acc, (&x, &y)| {
                let r = w[0].scale(x) + w[1] - Scalar::constant(y);
                acc + r * r
            })
        },
        &[1.5, 0.5],
    )?;
    println!("loss {:.3}, gradient {:?}", grad.loss_value, grad.gradient);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run()
}
