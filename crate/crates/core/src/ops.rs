//! Operator workflows shared by the `cbdt` binary and the examples: picking
//! the actual twin from config, replaying dumps, driving a simulation.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::adapters::{
    dump, ActualTwinReader, ActualTwinWriter, AdapterError, GitLabClient, SimConfig, SimProject,
    Simulator, WebhookDelivery,
};
use crate::clock::{ManualClock, SharedClock};
use crate::config::{AdapterKind, Config, ConfigError};
use crate::metrics::align_floor;
use crate::model::{BuildJob, Interval, Timestamp};
use crate::twin::{Twin, TwinError, TwinParts};

#[derive(Debug, thiserror::Error)]
pub enum OpsError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Reader and (optional) writer of the configured actual twin.
pub struct Upstream {
    pub reader: Arc<dyn ActualTwinReader>,
    pub writer: Option<Arc<dyn ActualTwinWriter>>,
    /// Set when the upstream is the built-in simulator.
    pub simulator: Option<Arc<Simulator>>,
}

/// Two projects with the simulator's default parameters.
pub fn default_simulation() -> SimConfig {
    SimConfig {
        seed: 42,
        start: crate::ingest::parse_timestamp("2024-01-01T00:00:00Z").expect("literal"),
        webhook_token: "sim-token".into(),
        projects: vec![SimProject::new(1, 6.0), SimProject::new(2, 3.0)],
        regime_changes: Vec::new(),
    }
}

pub fn simulator(config: &Config, clock: SharedClock) -> Result<Arc<Simulator>, OpsError> {
    let sim = config
        .adapter
        .simulator
        .clone()
        .unwrap_or_else(default_simulation);
    Ok(match config.adapter.history_jobs {
        Some(n) => Simulator::with_jobs(sim, n, clock)?,
        None => Simulator::new(sim, config.horizon(), clock)?,
    })
}

pub fn upstream(config: &Config, clock: SharedClock) -> Result<Upstream, OpsError> {
    match config.adapter.kind {
        AdapterKind::Simulator => {
            let sim = simulator(config, clock)?;
            Ok(Upstream {
                reader: sim.clone(),
                writer: Some(sim.clone()),
                simulator: Some(sim),
            })
        }
        AdapterKind::Gitlab => {
            let (Some(url), Some(token)) = (&config.adapter.base_url, &config.adapter.token) else {
                return Err(
                    ConfigError::Invalid("gitlab adapter needs base_url and token".into()).into(),
                );
            };
            let client = Arc::new(
                GitLabClient::new(
                    url,
                    token,
                    Duration::from_secs(config.adapter.timeout_seconds),
                )
                .with_branch(&config.adapter.branch),
            );
            Ok(Upstream {
                reader: client.clone(),
                writer: Some(client),
                simulator: None,
            })
        }
    }
}

/// A twin on `clock` reading from the configured upstream.
pub fn twin_from_config(config: Config, clock: SharedClock) -> Result<(Twin, Upstream), OpsError> {
    config.validate()?;
    let up = upstream(&config, clock.clone())?;
    let mut parts = TwinParts::new(config, clock, up.reader.clone());
    if let Some(w) = &up.writer {
        parts = parts.writer(w.clone());
    }
    Ok((Twin::new(parts)?, up))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub rejected: usize,
    pub jobs_stored: usize,
}

/// Sends one job event per job, in `updated_at` order, through the
/// webhook path of `twin`. With `speed`, gaps between events are replayed
/// that many times faster than recorded; without it events go back to back.
pub fn replay(twin: &Twin, jobs: &[BuildJob], speed: Option<f64>) -> ReplaySummary {
    let mut order: Vec<&BuildJob> = jobs.iter().collect();
    order.sort_by_key(|j| (j.updated_at(), j.job_id));
    let token = twin.config.ingest.webhook_token.clone().unwrap_or_default();
    let mut summary = ReplaySummary::default();
    let started = Instant::now();
    let origin = order.first().map(|j| j.updated_at());
    for job in order {
        if let (Some(speed), Some(origin)) = (speed, origin) {
            pace(started, origin, job.updated_at(), speed);
        }
        let body = dump::webhook_body(job).to_string();
        match twin
            .ingest
            .handle_webhook(Some(token.as_bytes()), body.as_bytes())
        {
            Ok(_) => summary.events += 1,
            Err(e) => {
                tracing::warn!(job_id = job.job_id, error = %e, "replay event rejected");
                summary.rejected += 1;
            }
        }
        twin.pump();
    }
    summary.jobs_stored = twin.store.snapshot().job_count();
    summary
}

fn pace(started: Instant, origin: Timestamp, at: Timestamp, speed: f64) {
    let offset = (at - origin).num_milliseconds().max(0) as f64 / 1000.0 / speed;
    let due = started + Duration::from_secs_f64(offset);
    if let Some(wait) = due.checked_duration_since(Instant::now()) {
        std::thread::sleep(wait);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub deliveries: usize,
    pub rejected: usize,
    pub jobs: usize,
    pub predictions: usize,
    pub anomalies: usize,
    pub actions: usize,
    pub alert_firings: usize,
    pub models_id: String,
    #[serde(with = "crate::model::ts")]
    pub finished_at: Timestamp,
}

/// Plays the simulator's webhook history into `twin` in virtual time.
/// `clock` must be the clock both were built on. Reruns triggered by
/// applied actions are delivered as they appear. Alert rules are evaluated
/// at every hour boundary.
pub fn run_simulation(
    twin: &Twin,
    sim: &Simulator,
    clock: &ManualClock,
    speed: Option<f64>,
) -> SimulationSummary {
    let mut queue: Vec<WebhookDelivery> = sim.deliveries();
    queue.reverse();
    let started = Instant::now();
    let origin = sim.start();
    let mut hour = align_floor(Interval::Hourly, origin);
    let (mut deliveries, mut rejected, mut firings) = (0, 0, 0);
    while let Some(d) = queue.pop() {
        if let Some(speed) = speed {
            pace(started, origin, d.at, speed);
        }
        if d.at > clock_now(clock) {
            clock.set(d.at);
        }
        if align_floor(Interval::Hourly, d.at) > hour {
            hour = align_floor(Interval::Hourly, d.at);
            firings += evaluate_alerts(twin);
        }
        match twin
            .ingest
            .handle_webhook(Some(d.token.as_bytes()), d.body.as_bytes())
        {
            Ok(_) => deliveries += 1,
            Err(_) => rejected += 1,
        }
        twin.pump();
        let extra = sim.take_extra_deliveries();
        if !extra.is_empty() {
            queue.extend(extra);
            queue.sort_by_key(|d| std::cmp::Reverse((d.at, d.job_id, d.status.precedence())));
        }
    }
    if sim.end() > clock_now(clock) {
        clock.set(sim.end());
    }
    firings += evaluate_alerts(twin);
    let snap = twin.store.snapshot();
    SimulationSummary {
        deliveries,
        rejected,
        jobs: snap.job_count(),
        predictions: snap.predictions().count(),
        anomalies: twin.models.anomalies(None, None).len(),
        actions: twin.improve.list(None).len(),
        alert_firings: firings,
        models_id: twin.models.current().id(),
        finished_at: clock_now(clock),
    }
}

fn clock_now(clock: &ManualClock) -> Timestamp {
    crate::clock::Clock::now(clock)
}

fn evaluate_alerts(twin: &Twin) -> usize {
    match twin.alerts.evaluate() {
        Ok(f) => f.len(),
        Err(e) => {
            tracing::warn!(error = %e, "alert evaluation failed");
            0
        }
    }
}

/// A twin wired to a fresh simulator on a manual clock at the simulation
/// start. The webhook token defaults to the simulator's.
pub fn simulation(
    mut config: Config,
) -> Result<(Twin, Arc<Simulator>, Arc<ManualClock>), OpsError> {
    config.adapter.kind = AdapterKind::Simulator;
    let sim_cfg = config
        .adapter
        .simulator
        .get_or_insert_with(default_simulation)
        .clone();
    if config.ingest.webhook_token.is_none() {
        config.ingest.webhook_token = Some(sim_cfg.webhook_token.clone());
    }
    let clock = Arc::new(ManualClock::new(sim_cfg.start));
    let (twin, up) = twin_from_config(config, clock.clone())?;
    let sim = up.simulator.expect("simulator upstream");
    Ok((twin, sim, clock))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_of_export_reproduces_jobs() {
        let mut config = Config::default();
        config.adapter.history_jobs = Some(60);
        let (source, _sim, clock) = simulation(config).unwrap();
        clock.advance(chrono::Duration::days(30));
        source.ingest.backfill(&Default::default()).unwrap();
        let mut buf = Vec::new();
        source.store.export_jobs(&mut buf).unwrap();
        let reader = crate::adapters::DumpReader::from_ndjson(&buf[..]).unwrap();
        let jobs: Vec<BuildJob> = reader.jobs().cloned().collect();

        let mut config = Config::default();
        config.ingest.webhook_token = Some("t".into());
        let target = Twin::new(TwinParts::new(config, clock, Arc::new(reader))).unwrap();
        let s = replay(&target, &jobs, None);
        assert_eq!(s.events, jobs.len());
        let mut again = Vec::new();
        target.store.export_jobs(&mut again).unwrap();
        assert_eq!(
            String::from_utf8(again).unwrap(),
            String::from_utf8(buf).unwrap()
        );
    }
}
