use serde::{Deserialize, Serialize};

use super::{Real, Tape, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy on sigmoid probabilities.
    BceOnSigmoid,
    /// Cross-entropy on raw logits through a softmax.
    SoftmaxCe,
}

/// Mean loss over the batch.
pub fn loss<T: Real>(tape: &mut Tape<T>, input: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::BceOnSigmoid => tape.bce(input, labels),
        LossKind::SoftmaxCe => tape.softmax_ce(input, labels),
    }
}
