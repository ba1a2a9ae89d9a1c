use serde::{Deserialize, Serialize};

use crate::deeponet::{DeepOnetLoss, DeepOnetRole};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeRole {
    None,
    /// PDE forecast enters as a conditional channel.
    Condition,
    /// PDE residual regularises the noise-matching loss.
    DiffLoss,
}

/// Where the training-time PDE parameters come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeFit {
    /// The scenario's true parameters.
    Known,
    /// Fitted on the training split.
    FitTrain,
    /// Fitted on a different dataset.
    FitExternal,
    /// Fitted on white noise.
    Random,
}

/// Roles the PDE and the DeepONet play in one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationMode {
    pub pde_role: PdeRole,
    pub deeponet_role: DeepOnetRole,
    pub pde_fit: PdeFit,
    pub deeponet_loss: DeepOnetLoss,
}

/// Mode ids accepted by [`IntegrationMode::from_id`], in table order.
pub const MODE_IDS: [&str; 11] = ["diff", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10"];

impl IntegrationMode {
    pub const fn new(pde_role: PdeRole, deeponet_role: DeepOnetRole, pde_fit: PdeFit) -> Self {
        IntegrationMode { pde_role, deeponet_role, pde_fit, deeponet_loss: DeepOnetLoss::Mse }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        use DeepOnetRole as D;
        use PdeFit as F;
        use PdeRole as P;
        let id = id.trim().trim_start_matches("mode").trim_start_matches(['-', '_']);
        let m = match id {
            "diff" | "0" => Self::new(P::None, D::None, F::Known),
            "1" => Self::new(P::None, D::FrozenCondition, F::Known),
            "2" => Self::new(P::None, D::TrainableCondition, F::Known),
            "3" => Self::new(P::Condition, D::None, F::FitTrain),
            "4" => Self::new(P::Condition, D::None, F::FitExternal),
            "5" => Self::new(P::DiffLoss, D::None, F::Known),
            "6" => Self::new(P::Condition, D::FrozenCondition, F::FitTrain),
            "7" => Self::new(P::Condition, D::FrozenCondition, F::FitExternal),
            "8" => Self::new(P::Condition, D::FrozenCondition, F::Random),
            "9" => IntegrationMode { deeponet_loss: DeepOnetLoss::MsePlusPde, ..Self::new(P::None, D::FrozenCondition, F::Known) },
            "10" => Self::new(P::DiffLoss, D::FrozenCondition, F::Known),
            other => {
                return Err(Error::config(format!(
                    "unknown mode `{other}`; expected one of {}",
                    MODE_IDS.join(", ")
                )))
            }
        };
        Ok(m)
    }

    /// The id this mode is listed under, if it is one of the table modes.
    pub fn id(&self) -> Option<&'static str> {
        MODE_IDS.iter().copied().find(|id| Self::from_id(id).ok().as_ref() == Some(self))
    }

    pub fn uses_deeponet(&self) -> bool {
        self.deeponet_role != DeepOnetRole::None
    }

    /// Weight actually applied to `L_PDE`.
    pub fn effective_omega(&self, omega: f64) -> f64 {
        if self.pde_role == PdeRole::DiffLoss {
            omega
        } else {
            0.0
        }
    }
}

impl Default for IntegrationMode {
    fn default() -> Self {
        Self::from_id("10").expect("table mode")
    }
}
