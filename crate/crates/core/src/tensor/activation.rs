use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    /// Tanh-approximated GELU. `gelu'(0) = 1/2`, so it falls outside the
    /// small-init gradient-flow analysis and is never fed to the oracles.
    Gelu,
}

/// An activation plus the derivative bound it satisfies.
///
/// The oracle comparisons need `s(0) = 0`, `s'(0) = 1` and `|s'|, |s''|`
/// bounded by `derivative_bound`. Tanh meets these with bound
/// `4 / (3 sqrt 3) < 1`, so 1 works for both derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub derivative_bound: f64,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::tanh()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl ActivationSpec {
    pub fn tanh() -> Self {
        Self {
            kind: ActivationKind::Tanh,
            derivative_bound: 1.0,
        }
    }

    pub fn gelu() -> Self {
        Self {
            kind: ActivationKind::Gelu,
            derivative_bound: 1.2,
        }
    }

    /// Whether the small-initialization oracles apply (`s(0)=0, s'(0)=1`).
    pub fn satisfies_small_init_assumption(&self) -> bool {
        self.kind == ActivationKind::Tanh
    }
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// Derivative expressed through input `x` and output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - y * y,
            Self::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Self::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Self::Gelu => {
                let h = 1e-5;
                (self.derivative(x + h, self.apply(x + h))
                    - self.derivative(x - h, self.apply(x - h)))
                    / (2.0 * h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_meets_small_init_assumption() {
        let spec = ActivationSpec::tanh();
        let k = spec.kind;
        assert_eq!(k.apply(0.0), 0.0);
        assert_eq!(k.derivative(0.0, 0.0), 1.0);
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            assert!(k.derivative(x, k.apply(x)).abs() <= spec.derivative_bound);
            assert!(k.second_derivative(x).abs() <= spec.derivative_bound);
        }
        assert!(spec.satisfies_small_init_assumption());
    }

    #[test]
    fn gelu_flagged_out() {
        let k = ActivationKind::Gelu;
        assert_eq!(k.apply(0.0), 0.0);
        assert!((k.derivative(0.0, 0.0) - 0.5).abs() < 1e-12);
        assert!(!ActivationSpec::gelu().satisfies_small_init_assumption());
    }

    #[test]
    fn derivatives_match_central_differences() {
        for k in [ActivationKind::Tanh, ActivationKind::Gelu] {
            for i in -20..=20 {
                let x = i as f64 * 0.3;
                let h = 1e-6;
                let fd = (k.apply(x + h) - k.apply(x - h)) / (2.0 * h);
                assert!(
                    (fd - k.derivative(x, k.apply(x))).abs() < 1e-8,
                    "{k:?} at {x}"
                );
            }
        }
    }
}
