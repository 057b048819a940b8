use serde::{Deserialize, Serialize};

/// When to widen the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    /// Loss threshold; `None` resolves to `0.6 · ln K`.
    pub tau: Option<f64>,
    /// Consecutive epochs the loss must stay above `tau`.
    pub patience: usize,
    pub max_expansions: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            tau: None,
            patience: 5,
            max_expansions: 2,
        }
    }
}

impl TriggerConfig {
    pub fn resolved_tau(&self, n_classes: usize) -> f64 {
        self.tau.unwrap_or(0.6 * (n_classes as f64).ln())
    }
}

/// True iff the last `patience` epoch-mean losses are all above `tau` and
/// the expansion budget is not spent.
pub fn should_expand(
    loss_history: &[f64],
    tau: f64,
    patience: usize,
    max_expansions: usize,
    expansions_so_far: usize,
) -> bool {
    if expansions_so_far >= max_expansions || patience == 0 || loss_history.len() < patience {
        return false;
    }
    loss_history[loss_history.len() - patience..]
        .iter()
        .all(|&l| l > tau)
}
