use std::collections::BTreeSet;

use super::{augment, AugmentConfig, DatasetError, WindowSample};
use crate::numerics::SeedStream;

/// Which subject a fold holds out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
}

/// Windows of one fold. Augmented copies only ever appear in `train_windows`.
#[derive(Clone, Debug)]
pub struct LosoFold {
    pub test_subject: String,
    pub train_windows: Vec<WindowSample>,
    pub test_windows: Vec<WindowSample>,
}

/// One fold per distinct subject, in sorted subject order.
pub fn loso_splits(windows: &[WindowSample]) -> Result<Vec<FoldPlan>, DatasetError> {
    let subjects: BTreeSet<&str> = windows.iter().map(|w| w.subject_id.as_str()).collect();
    if subjects.len() < 2 {
        return Err(DatasetError::Contract(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.is_augmented) {
        return Err(DatasetError::Contract(format!("window {} is augmented before splitting", w.window_id)));
    }
    Ok(subjects
        .iter()
        .map(|&s| FoldPlan {
            test_subject: s.to_string(),
            train_subjects: subjects.iter().filter(|&&o| o != s).map(|o| o.to_string()).collect(),
        })
        .collect())
}

impl FoldPlan {
    /// Splits `windows` by subject and augments the training side if asked.
    pub fn materialize(&self, windows: &[WindowSample], aug: Option<(&AugmentConfig, SeedStream)>) -> LosoFold {
        let (test, train): (Vec<_>, Vec<_>) =
            windows.iter().cloned().partition(|w| w.subject_id == self.test_subject);
        let train_windows = match aug {
            Some((cfg, seed)) => augment(&train, cfg, seed),
            None => train,
        };
        LosoFold { test_subject: self.test_subject.clone(), train_windows, test_windows: test }
    }

    /// Training subjects other than `held_out`.
    pub fn without(&self, held_out: &str) -> Vec<String> {
        self.train_subjects.iter().filter(|s| *s != held_out).cloned().collect()
    }
}
