use serde::Serialize;
use serde_json::Value;

/// Result of a sampled property check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub command: String,
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    /// Trial with the largest relative deviation.
    pub argmax_trial: usize,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

impl AuditReport {
    /// Reduce per-trial `(absolute, relative)` deviations. A non-finite
    /// deviation counts as infinite, so it can never pass.
    pub fn from_deviations(command: impl Into<String>, seed: u64, tolerance: f64, devs: &[(f64, f64)]) -> Self {
        let clean = |x: f64| if x.is_nan() { f64::INFINITY } else { x };
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut argmax = 0;
        for (i, &(a, r)) in devs.iter().enumerate() {
            let (a, r) = (clean(a), clean(r));
            max_abs = max_abs.max(a);
            if r > max_rel {
                max_rel = r;
                argmax = i;
            }
        }
        Self {
            command: command.into(),
            seed,
            trials: devs.len(),
            tolerance,
            max_abs_dev: max_abs,
            max_rel_dev: max_rel,
            argmax_trial: argmax,
            pass: max_rel <= tolerance,
            details: None,
            elapsed_ms: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}
