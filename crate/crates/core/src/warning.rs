use serde::{Deserialize, Serialize};

/// Non-fatal conditions surfaced alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// A prompt token outside the vocabulary was mapped to the closest concept.
    NearestConcept { token: String, concept: String },
    /// More channels were requested than the target layer has.
    TopKClipped { requested: usize, available: usize },
    /// A box prompt produced an empty mask.
    EmptyBoxMask { index: usize },
    /// No records survived caption cleaning.
    EmptyDataset,
    /// AUC was computed from a binary prediction (tied ranks only).
    BinaryScoreAuc { id: String },
    /// Both prediction and ground truth were empty; scored as a perfect match.
    BothMasksEmpty { id: String },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::NearestConcept { token, concept } => {
                write!(f, "token `{token}` is not in the vocabulary, using `{concept}`")
            }
            Warning::TopKClipped { requested, available } => {
                write!(f, "top_k = {requested} exceeds the {available} available channels")
            }
            Warning::EmptyBoxMask { index } => write!(f, "box {index} produced an empty mask"),
            Warning::EmptyDataset => write!(f, "no records left after cleaning"),
            Warning::BinaryScoreAuc { id } => write!(f, "{id}: AUC from a binary prediction"),
            Warning::BothMasksEmpty { id } => write!(f, "{id}: prediction and ground truth both empty"),
        }
    }
}
