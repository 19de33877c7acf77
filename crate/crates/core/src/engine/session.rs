use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::EngineError;

pub const DEFAULT_SEMANTIC_WEIGHT: f64 = 0.7;
pub const DEFAULT_EXACT_WEIGHT: f64 = 0.3;
pub const DEFAULT_SCALE: usize = 3;

/// Per-episode retrieval configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub w_s: f64,
    pub w_e: f64,
    pub scale_n: usize,
    /// Insertion-ordered, no duplicates.
    pub included: Vec<String>,
    pub excluded: BTreeSet<String>,
}

impl Default for SessionState {
    fn default() -> Self {
        Self {
            w_s: DEFAULT_SEMANTIC_WEIGHT,
            w_e: DEFAULT_EXACT_WEIGHT,
            scale_n: DEFAULT_SCALE,
            included: Vec::new(),
            excluded: BTreeSet::new(),
        }
    }
}

impl SessionState {
    pub fn new(w_s: f64, w_e: f64, scale_n: usize) -> Result<Self, EngineError> {
        let mut s = Self::default();
        s.set_weights(w_s, w_e)?;
        s.set_scale(scale_n as u64)?;
        Ok(s)
    }

    pub fn set_weights(&mut self, w_s: f64, w_e: f64) -> Result<(), EngineError> {
        if !(w_s.is_finite() && w_e.is_finite()) || w_s < 0.0 || w_e < 0.0 {
            return Err(EngineError::InvalidParameter(format!(
                "fusion weights must be finite and non-negative, got ({w_s}, {w_e})"
            )));
        }
        if w_s + w_e <= 0.0 {
            return Err(EngineError::InvalidParameter("fusion weights must not both be zero".into()));
        }
        self.w_s = w_s;
        self.w_e = w_e;
        Ok(())
    }

    pub fn set_scale(&mut self, n: u64) -> Result<(), EngineError> {
        if n < 1 {
            return Err(EngineError::InvalidParameter("scale must be at least 1".into()));
        }
        self.scale_n =
            usize::try_from(n).map_err(|_| EngineError::InvalidParameter(format!("scale {n} is too large")))?;
        Ok(())
    }

    /// The latest include/exclude wins.
    pub fn include(&mut self, doc_id: &str) {
        self.excluded.remove(doc_id);
        if !self.included.iter().any(|d| d == doc_id) {
            self.included.push(doc_id.to_string());
        }
    }

    pub fn exclude(&mut self, doc_id: &str) {
        self.included.retain(|d| d != doc_id);
        self.excluded.insert(doc_id.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_action_wins() {
        let mut s = SessionState::default();
        s.include("d1");
        s.exclude("d1");
        assert!(s.included.is_empty());
        assert!(s.excluded.contains("d1"));
        s.include("d1");
        assert_eq!(s.included, vec!["d1".to_string()]);
        assert!(s.excluded.is_empty());
    }

    #[test]
    fn invalid_parameters() {
        let mut s = SessionState::default();
        assert!(s.set_weights(0.0, 0.0).is_err());
        assert!(s.set_weights(-1.0, 2.0).is_err());
        assert!(s.set_scale(0).is_err());
        assert_eq!(s, SessionState::default());
        s.set_weights(0.0, 1.0).unwrap();
        assert_eq!((s.w_s, s.w_e), (0.0, 1.0));
    }
}
