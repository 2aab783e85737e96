use crate::error::{Error, Result};

/// Pointwise functions the tape knows how to differentiate.
///
/// Every variant names its own derivative as another variant, so gradients
/// computed on the tape are themselves differentiable. Derivative chains that
/// the model never needs beyond second order end in `NotDifferentiable`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Square,
    /// `a * x`
    Linear(f64),
    Const(f64),
    /// Subgradient 0 at the origin.
    Abs,
    Sign,
    Elu,
    EluD1,
    EluD2,
    Swish,
    SwishD1,
    SwishD2,
    SwishD3,
    /// `sin(x) / x` with value 1 at the origin.
    Sinc,
    SincD1,
    SincD2,
    /// `coef * x^exp` for `x > 0`, zero otherwise. The zero branch makes
    /// `sqrt` of a squared distance differentiate to zero at coincident points.
    Pow { coef: f64, exp: f64 },
}

const SINC_SERIES: f64 = 1e-3;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Linear(_) => "linear",
            Unary::Const(_) => "const",
            Unary::Abs => "abs",
            Unary::Sign => "sign",
            Unary::Elu => "elu",
            Unary::EluD1 => "elu'",
            Unary::EluD2 => "elu''",
            Unary::Swish => "swish",
            Unary::SwishD1 => "swish'",
            Unary::SwishD2 => "swish''",
            Unary::SwishD3 => "swish'''",
            Unary::Sinc => "sinc",
            Unary::SincD1 => "sinc'",
            Unary::SincD2 => "sinc''",
            Unary::Pow { .. } => "pow",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Linear(a) => a * x,
            Unary::Const(c) => c,
            Unary::Abs => x.abs(),
            Unary::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::EluD1 => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Unary::EluD2 => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
            Unary::Swish => x * sigmoid(x),
            Unary::SwishD1 => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::SwishD2 => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
            Unary::SwishD3 => {
                let s = sigmoid(x);
                let p = s * (1.0 - s);
                let t = 1.0 - 2.0 * s;
                p * (t * (3.0 + x * t) - 2.0 * x * p)
            }
            Unary::Sinc => {
                if x.abs() < SINC_SERIES {
                    let x2 = x * x;
                    1.0 - x2 / 6.0 + x2 * x2 / 120.0
                } else {
                    x.sin() / x
                }
            }
            Unary::SincD1 => {
                if x.abs() < SINC_SERIES {
                    -x / 3.0 + x * x * x / 30.0
                } else {
                    (x * x.cos() - x.sin()) / (x * x)
                }
            }
            Unary::SincD2 => {
                if x.abs() < SINC_SERIES {
                    -1.0 / 3.0 + x * x / 10.0
                } else {
                    ((2.0 - x * x) * x.sin() - 2.0 * x * x.cos()) / (x * x * x)
                }
            }
            Unary::Pow { coef, exp } => {
                if x > 0.0 {
                    coef * x.powf(exp)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn derivative(self) -> Result<Unary> {
        Ok(match self {
            Unary::Exp => Unary::Exp,
            Unary::Square => Unary::Linear(2.0),
            Unary::Linear(a) => Unary::Const(a),
            Unary::Const(_) | Unary::Sign => Unary::Const(0.0),
            Unary::Abs => Unary::Sign,
            Unary::Elu => Unary::EluD1,
            Unary::EluD1 | Unary::EluD2 => Unary::EluD2,
            Unary::Swish => Unary::SwishD1,
            Unary::SwishD1 => Unary::SwishD2,
            Unary::SwishD2 => Unary::SwishD3,
            Unary::Sinc => Unary::SincD1,
            Unary::SincD1 => Unary::SincD2,
            Unary::SwishD3 | Unary::SincD2 => return Err(Error::NotDifferentiable(self.name())),
            Unary::Pow { coef, exp } => {
                if coef * exp == 0.0 {
                    Unary::Const(0.0)
                } else {
                    Unary::Pow {
                        coef: coef * exp,
                        exp: exp - 1.0,
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: Unary, x: f64) -> f64 {
        let h = 1e-5;
        (f.eval(x + h) - f.eval(x - h)) / (2.0 * h)
    }

    #[test]
    fn derivative_chains_match_finite_differences() {
        let chains = [
            Unary::Exp,
            Unary::Square,
            Unary::Elu,
            Unary::EluD1,
            Unary::Swish,
            Unary::SwishD1,
            Unary::SwishD2,
            Unary::Sinc,
            Unary::SincD1,
            Unary::Pow { coef: 1.0, exp: 0.5 },
            Unary::Pow { coef: -0.5, exp: -1.5 },
        ];
        for f in chains {
            let d = f.derivative().unwrap();
            for &x in &[-1.7f64, -0.3, 0.2, 0.9, 1.8, 3.7] {
                if matches!(f, Unary::Pow { .. }) && x <= 0.0 {
                    continue;
                }
                if matches!(f, Unary::Elu | Unary::EluD1) && x.abs() < 1e-4 {
                    continue;
                }
                let fd = central(f, x);
                let an = d.eval(x);
                assert!(
                    (fd - an).abs() <= 1e-7 * (1.0 + an.abs()),
                    "{f:?} at {x}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn sinc_series_branch_is_continuous() {
        for f in [Unary::Sinc, Unary::SincD1, Unary::SincD2] {
            let below = f.eval(SINC_SERIES * (1.0 - 1e-9));
            let above = f.eval(SINC_SERIES * (1.0 + 1e-9));
            assert!((below - above).abs() < 1e-9, "{f:?}: {below} vs {above}");
        }
        assert_eq!(Unary::Sinc.eval(0.0), 1.0);
        assert_eq!(Unary::SincD1.eval(0.0), 0.0);
    }

    #[test]
    fn scalar_values() {
        assert_eq!(Unary::Elu.eval(0.0), 0.0);
        assert_eq!(Unary::Swish.eval(0.0), 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Unary::Swish.eval(1.0) - expected).abs() < 1e-15);
        assert!((Unary::Swish.eval(1.0) - 0.73106).abs() < 1e-5);
        assert_eq!(Unary::Abs.eval(-3.0), 3.0);
        assert_eq!(Unary::Abs.derivative().unwrap().eval(-3.0), -1.0);
        assert_eq!(Unary::Abs.derivative().unwrap().eval(0.0), 0.0);
        assert_eq!(Unary::Exp.eval(0.0), 1.0);
    }

    #[test]
    fn terminal_derivatives_are_reported() {
        assert!(Unary::SwishD3.derivative().is_err());
        assert!(Unary::SincD2.derivative().is_err());
    }
}
