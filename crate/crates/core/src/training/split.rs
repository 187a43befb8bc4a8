use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One train/validation/test assignment of query groups (years).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: String,
}

impl Fold {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for g in self.train.iter().chain(&self.validation).chain(std::iter::once(&self.test)) {
            if !seen.insert(g) {
                return Err(Error::Config(format!(
                    "fold {}: group {g} appears in more than one role",
                    self.name
                )));
            }
        }
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::Config(format!(
                "fold {} needs training and validation groups",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn new(folds: Vec<Fold>) -> Result<Self> {
        for f in &folds {
            f.validate()?;
        }
        Ok(Self { folds })
    }

    /// Every group takes a turn as test set; for each, every remaining group
    /// takes a turn as validation and the rest train.
    pub fn round_robin(groups: &[String]) -> Result<Self> {
        if groups.len() < 3 {
            return Err(Error::Config("round-robin splitting needs at least 3 groups".into()));
        }
        let mut folds = Vec::new();
        for test in groups {
            for validation in groups.iter().filter(|g| *g != test) {
                folds.push(Fold {
                    name: format!("test={test},valid={validation}"),
                    train: groups
                        .iter()
                        .filter(|g| *g != test && *g != validation)
                        .cloned()
                        .collect(),
                    validation: vec![validation.clone()],
                    test: test.clone(),
                });
            }
        }
        Self::new(folds)
    }

    pub fn for_test<'a>(&'a self, test: &'a str) -> impl Iterator<Item = &'a Fold> {
        self.folds.iter().filter(move |f| f.test == test)
    }
}
