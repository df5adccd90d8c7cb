//! Predicted-versus-actual anomaly rules.

use serde::{Deserialize, Serialize};

use crate::model::{ModelKind, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    /// Duration z-score threshold in log space.
    pub duration_sigmas: f64,
    /// Lower bound on the duration spread, in log-seconds.
    pub min_log_sigma: f64,
    /// Duration observations a scope needs before it can flag anomalies.
    pub min_observations: u64,
    /// Probability below which an observed 1 is anomalous (and 1 − this above which a 0 is).
    pub probability_margin: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            duration_sigmas: 3.0,
            min_log_sigma: 0.05,
            min_observations: 20,
            probability_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub anomaly: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("prediction {0} has no actual value")]
pub struct MissingActual(pub u64);

/// Log of a duration, floored so zero-length jobs stay finite.
pub fn log_duration(seconds: f64) -> f64 {
    seconds.max(1e-3).ln()
}

/// Applies the rule for the record's model kind. `observations` is the
/// number of updates behind the prediction's scope.
pub fn detect(
    record: &PredictionRecord,
    observations: u64,
    cfg: &AnomalyConfig,
) -> Result<Verdict, MissingActual> {
    let actual = record
        .actual_value
        .ok_or(MissingActual(record.prediction_id))?;
    Ok(match record.model_kind {
        ModelKind::Duration => {
            let mu = log_duration(record.predicted_value);
            let sigma = record.log_sigma.unwrap_or(0.0).max(cfg.min_log_sigma);
            let score = (log_duration(actual) - mu) / sigma;
            Verdict {
                anomaly: observations >= cfg.min_observations && score.abs() > cfg.duration_sigmas,
                score,
            }
        }
        ModelKind::Failure | ModelKind::Flaky => {
            let p = record.predicted_value.clamp(1e-9, 1.0 - 1e-9);
            let score = (actual - p) / (p * (1.0 - p)).sqrt();
            let anomaly = (actual >= 0.5 && p < cfg.probability_margin)
                || (actual < 0.5 && p > 1.0 - cfg.probability_margin);
            Verdict { anomaly, score }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(
        kind: ModelKind,
        predicted: f64,
        sigma: Option<f64>,
        actual: Option<f64>,
    ) -> PredictionRecord {
        PredictionRecord {
            prediction_id: 1,
            job_id: 1,
            model_kind: kind,
            predicted_value: predicted,
            log_sigma: sigma,
            model_snapshot_id: "x".into(),
            predicted_at: chrono::DateTime::from_timestamp_millis(0).unwrap(),
            actual_value: actual,
            anomaly: None,
            anomaly_score: None,
        }
    }

    #[test]
    fn duration_doubling_at_tight_spread() {
        let v = detect(
            &record(ModelKind::Duration, 100.0, Some(0.1), Some(200.0)),
            100,
            &AnomalyConfig::default(),
        )
        .unwrap();
        assert!(v.anomaly);
        assert!((v.score - 2f64.ln() / 0.1).abs() < 1e-9);
    }

    #[test]
    fn coin_flip_failure_is_normal() {
        let v = detect(
            &record(ModelKind::Failure, 0.5, None, Some(1.0)),
            100,
            &AnomalyConfig::default(),
        )
        .unwrap();
        assert!(!v.anomaly);
        assert!((v.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_misses() {
        let cfg = AnomalyConfig::default();
        assert!(
            detect(&record(ModelKind::Failure, 0.01, None, Some(1.0)), 1, &cfg)
                .unwrap()
                .anomaly
        );
        assert!(
            detect(&record(ModelKind::Flaky, 0.99, None, Some(0.0)), 1, &cfg)
                .unwrap()
                .anomaly
        );
        assert!(
            !detect(&record(ModelKind::Flaky, 0.99, None, Some(1.0)), 1, &cfg)
                .unwrap()
                .anomaly
        );
    }

    #[test]
    fn warm_up_suppresses_duration_flags() {
        let v = detect(
            &record(ModelKind::Duration, 100.0, Some(0.1), Some(1000.0)),
            3,
            &AnomalyConfig::default(),
        )
        .unwrap();
        assert!(!v.anomaly);
    }

    #[test]
    fn missing_actual() {
        assert_eq!(
            detect(
                &record(ModelKind::Failure, 0.5, None, None),
                0,
                &AnomalyConfig::default()
            ),
            Err(MissingActual(1))
        );
    }
}
