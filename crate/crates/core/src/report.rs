//! Structured pass/fail reporting for validation runs.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Outcome of a single named check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, passed: bool, details: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            details: details.into(),
        }
    }

    pub fn pass(name: impl Into<String>, details: impl Into<String>) -> Self {
        Self::new(name, true, details)
    }

    pub fn fail(name: impl Into<String>, details: impl Into<String>) -> Self {
        Self::new(name, false, details)
    }
}

/// An ordered collection of check results under a named section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub section: String,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn new(section: impl Into<String>) -> Self {
        Self {
            section: section.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, details: impl fmt::Display) {
        self.checks
            .push(CheckResult::new(name, passed, details.to_string()));
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn extend(&mut self, other: ValidationReport) {
        for mut check in other.checks {
            check.name = format!("{}.{}", other.section, check.name);
            self.checks.push(check);
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.section)?;
        for c in &self.checks {
            writeln!(
                f,
                "  {}  {} -- {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.details
            )?;
        }
        Ok(())
    }
}
