use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    None,
    Huber,
    Cauchy,
}

/// Robust loss `rho(s)` applied to the squared residual norm `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustKernel<T: Scalar = f64> {
    pub kind: KernelKind,
    pub scale: T,
}

impl<T: Scalar> RobustKernel<T> {
    pub fn none() -> Self {
        Self {
            kind: KernelKind::None,
            scale: T::one(),
        }
    }

    pub fn huber(scale: T) -> Self {
        assert!(scale > T::zero(), "kernel scale must be positive");
        Self {
            kind: KernelKind::Huber,
            scale,
        }
    }

    pub fn cauchy(scale: T) -> Self {
        assert!(scale > T::zero(), "kernel scale must be positive");
        Self {
            kind: KernelKind::Cauchy,
            scale,
        }
    }

    /// `rho(s)`; equals `s` for the trivial kernel.
    pub fn rho(&self, s: T) -> T {
        let d = self.scale;
        match self.kind {
            KernelKind::None => s,
            KernelKind::Huber => {
                if s <= d * d {
                    s
                } else {
                    T::lit(2.0) * d * s.sqrt() - d * d
                }
            }
            KernelKind::Cauchy => d * d * (T::one() + s / (d * d)).ln(),
        }
    }

    /// IRLS weight `rho'(s)`, in `(0, 1]`.
    pub fn weight(&self, s: T) -> T {
        let d = self.scale;
        match self.kind {
            KernelKind::None => T::one(),
            KernelKind::Huber => {
                if s <= d * d {
                    T::one()
                } else {
                    d / s.sqrt()
                }
            }
            KernelKind::Cauchy => T::one() / (T::one() + s / (d * d)),
        }
    }
}

/// IRLS weight of kernel `k` at squared residual norm `squared_norm`.
pub fn kernel_weight<T: Scalar>(k: &RobustKernel<T>, squared_norm: T) -> T {
    k.weight(squared_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn analytic_weights() {
        assert_eq!(kernel_weight(&RobustKernel::none(), 7.3), 1.0);
        assert_eq!(kernel_weight(&RobustKernel::huber(1.0), 4.0), 0.5);
        assert_eq!(kernel_weight(&RobustKernel::cauchy(1.0), 0.0), 1.0);
        assert_eq!(kernel_weight(&RobustKernel::<f32>::cauchy(1.0), 1.0), 0.5);
    }

    #[test]
    fn weight_is_derivative_of_rho() {
        for k in [RobustKernel::<f64>::huber(1.3), RobustKernel::cauchy(0.4), RobustKernel::none()] {
            for s in [0.01f64, 0.5, 1.0, 2.7, 40.0] {
                let h = 1e-6;
                let fd = (k.rho(s + h) - k.rho(s - h)) / (2.0 * h);
                assert!((fd - k.weight(s)).abs() < 1e-6, "{k:?} s={s}");
            }
        }
    }

    proptest! {
        #[test]
        fn weight_in_unit_interval_and_monotone(s in 0.0f64..1e6, ds in 0.0f64..1e3, scale in 1e-3f64..1e3) {
            for k in [RobustKernel::huber(scale), RobustKernel::cauchy(scale), RobustKernel::none()] {
                let w = k.weight(s);
                prop_assert!(w > 0.0 && w <= 1.0);
                prop_assert!(k.weight(s + ds) <= w);
            }
        }
    }
}
