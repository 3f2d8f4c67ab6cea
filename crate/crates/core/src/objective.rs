//! Objective specification: which uncertainty set or penalty defines the
//! robust loss.

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};

/// The four robust objectives.
///
/// | kind      | constraint on `r = dQ/dP0` | penalty            |
/// |-----------|----------------------------|--------------------|
/// | `Cvar`    | `r <= 1/alpha`             | none               |
/// | `KlCvar`  | `r <= 1/alpha`             | `lambda * KL(Q‖P0)` |
/// | `Chi2Pen` | none                       | `lambda * χ²(Q‖P0)` |
/// | `Chi2Con` | `χ²(Q‖P0) <= rho`           | none               |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustSpec {
    Cvar { alpha: f64 },
    KlCvar { alpha: f64, lambda: f64 },
    Chi2Pen { lambda: f64 },
    Chi2Con { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Cvar,
    KlCvar,
    Chi2Pen,
    Chi2Con,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(DroError::param("alpha", format!("must lie in (0, 1], got {alpha}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(DroError::param("lambda", format!("must be positive and finite, got {lambda}")))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 0.0 {
        Ok(())
    } else {
        Err(DroError::param("rho", format!("must be nonnegative and finite, got {rho}")))
    }
}

impl RobustSpec {
    pub fn cvar(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self::Cvar { alpha })
    }

    pub fn kl_cvar(alpha: f64, lambda: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_lambda(lambda)?;
        Ok(Self::KlCvar { alpha, lambda })
    }

    pub fn chi2_pen(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self::Chi2Pen { lambda })
    }

    pub fn chi2_con(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self::Chi2Con { rho })
    }

    /// Re-checks the invariants; useful after deserialization.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Cvar { alpha } => check_alpha(alpha),
            Self::KlCvar { alpha, lambda } => check_alpha(alpha).and(check_lambda(lambda)),
            Self::Chi2Pen { lambda } => check_lambda(lambda),
            Self::Chi2Con { rho } => check_rho(rho),
        }
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Self::Cvar { .. } => ObjectiveKind::Cvar,
            Self::KlCvar { .. } => ObjectiveKind::KlCvar,
            Self::Chi2Pen { .. } => ObjectiveKind::Chi2Pen,
            Self::Chi2Con { .. } => ObjectiveKind::Chi2Con,
        }
    }

    /// Penalty-only objectives (no divergence constraint besides the CVaR box).
    pub fn is_penalty(&self) -> bool {
        matches!(self, Self::KlCvar { .. } | Self::Chi2Pen { .. })
    }

    /// Upper bound on `χ²(q*‖P0)` for any maximizer, given the loss range `b`.
    pub fn chi2_bound(&self, b: f64) -> f64 {
        match *self {
            Self::Cvar { alpha } | Self::KlCvar { alpha, .. } => 1.0 / alpha - 1.0,
            Self::Chi2Pen { lambda } => b / lambda,
            Self::Chi2Con { rho } => rho,
        }
    }
}

impl std::fmt::Display for RobustSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Cvar { alpha } => write!(f, "cvar(alpha={alpha})"),
            Self::KlCvar { alpha, lambda } => write!(f, "kl_cvar(alpha={alpha}, lambda={lambda})"),
            Self::Chi2Pen { lambda } => write!(f, "chi2_pen(lambda={lambda})"),
            Self::Chi2Con { rho } => write!(f, "chi2_con(rho={rho})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_reject_out_of_range() {
        assert!(RobustSpec::cvar(0.0).is_err());
        assert!(RobustSpec::cvar(1.5).is_err());
        assert!(RobustSpec::cvar(1.0).is_ok());
        assert!(RobustSpec::kl_cvar(0.5, 0.0).is_err());
        assert!(RobustSpec::chi2_pen(-1.0).is_err());
        assert!(RobustSpec::chi2_con(-0.1).is_err());
        assert!(RobustSpec::chi2_con(0.0).is_ok());
    }

    #[test]
    fn serde_tagged_form() {
        let s: RobustSpec = serde_json::from_str(r#"{"kind":"kl_cvar","alpha":0.1,"lambda":0.5}"#).unwrap();
        assert_eq!(s, RobustSpec::KlCvar { alpha: 0.1, lambda: 0.5 });
        assert!(serde_json::from_str::<RobustSpec>(r#"{"kind":"wasserstein"}"#).is_err());
    }
}
