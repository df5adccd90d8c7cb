//! The assembled digital twin: every service wired to one store, bus and
//! clock.
//!
//! A twin can be driven in two ways. [`Twin::pump`] runs queued work on the
//! calling thread, which keeps tests and simulations deterministic.
//! [`Twin::spawn_workers`] starts the background loops used by `serve`.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::Sender;
use parking_lot::Mutex;

use crate::adapters::{ActualTwinReader, ActualTwinWriter};
use crate::bus::{Bus, BusError, Subscription, Topic};
use crate::clock::SharedClock;
use crate::config::Config;
use crate::improve::{ImproveService, Trigger};
use crate::ingest::{Backoff, DeadLetterLog, IngestOptions, Ingestor};
use crate::metrics::alerts::AlertEngine;
use crate::metrics::MetricsService;
use crate::model::Timestamp;
use crate::models::{ModelService, ModelsError};
use crate::store::{Store, StoreError};
use crate::whatif::WhatIfService;

const MODELS_SUBSCRIBER: &str = "models";

#[derive(Debug, thiserror::Error)]
pub enum TwinError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub struct Twin {
    pub config: Config,
    pub clock: SharedClock,
    pub store: Arc<Store>,
    pub bus: Arc<Bus>,
    pub ingest: Arc<Ingestor>,
    pub metrics: Arc<MetricsService>,
    pub alerts: Arc<AlertEngine>,
    pub models: Arc<ModelService>,
    pub whatif: Arc<WhatIfService>,
    pub improve: Arc<ImproveService>,
    model_sub: Mutex<Option<Subscription>>,
    started_at: Timestamp,
}

impl std::fmt::Debug for Twin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Twin")
            .field("started_at", &self.started_at)
            .finish_non_exhaustive()
    }
}

/// Everything a twin needs from outside.
pub struct TwinParts {
    pub config: Config,
    pub clock: SharedClock,
    pub reader: Arc<dyn ActualTwinReader>,
    pub writer: Option<Arc<dyn ActualTwinWriter>>,
    /// Opened from `config.store` when absent.
    pub store: Option<Arc<Store>>,
    pub backoff: Option<Backoff>,
}

impl TwinParts {
    pub fn new(config: Config, clock: SharedClock, reader: Arc<dyn ActualTwinReader>) -> Self {
        TwinParts {
            config,
            clock,
            reader,
            writer: None,
            store: None,
            backoff: None,
        }
    }

    pub fn writer(mut self, writer: Arc<dyn ActualTwinWriter>) -> Self {
        self.writer = Some(writer);
        self
    }

    pub fn store(mut self, store: Arc<Store>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = Some(backoff);
        self
    }
}

/// Handles of the background loops; dropping it stops them.
pub struct Workers {
    stop: Option<Sender<()>>,
    handles: Vec<JoinHandle<()>>,
}

impl Workers {
    /// Signals every loop and waits for it to finish.
    pub fn shutdown(mut self) {
        self.stop.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        self.stop.take();
    }
}

impl Twin {
    pub fn new(parts: TwinParts) -> Result<Twin, TwinError> {
        let TwinParts {
            config,
            clock,
            reader,
            writer,
            store,
            backoff,
        } = parts;
        let store = match store {
            Some(s) => s,
            None => {
                let s = match &config.store.path {
                    Some(dir) => Store::open(dir)?,
                    None => Store::in_memory(),
                };
                Arc::new(s.with_retention(config.store.max_history_jobs))
            }
        };
        let bus = Arc::new(Bus::new(
            store.clone(),
            clock.clone(),
            Duration::from_secs(config.bus.ttl_seconds),
        )?);
        let dead_letters = Arc::new(match &config.ingest.dead_letter_path {
            Some(p) => DeadLetterLog::open(p)?,
            None => DeadLetterLog::in_memory(),
        });
        let mut ingest = Ingestor::new(
            store.clone(),
            bus.clone(),
            clock.clone(),
            reader,
            dead_letters,
        )
        .with_webhook_token(config.ingest.webhook_token.as_deref())
        .with_options(IngestOptions {
            feature_window: config.models.feature_window,
        });
        if let Some(b) = backoff {
            ingest = ingest.with_backoff(b);
        }
        let models = Arc::new(ModelService::new(
            store.clone(),
            clock.clone(),
            config.models.clone(),
        )?);
        let improve = Arc::new(ImproveService::new(
            store.clone(),
            clock.clone(),
            config.improve.clone(),
            writer,
        ));
        let alerts = Arc::new(AlertEngine::new(store.clone(), clock.clone()));
        {
            let improve = improve.clone();
            models.on_prediction(Arc::new(move |ctx| {
                if let Err(e) = improve.propose(&Trigger::Prediction(ctx.clone())) {
                    tracing::warn!(error = %e, "proposal from prediction failed");
                }
            }));
        }
        {
            let improve = improve.clone();
            alerts.on_firing(Arc::new(move |firing| {
                if let Err(e) = improve.propose(&Trigger::Alert(firing.clone())) {
                    tracing::warn!(error = %e, "proposal from alert failed");
                }
            }));
        }
        let model_sub = bus.subscribe(&Topic::build_data_integrated(), MODELS_SUBSCRIBER)?;
        let started_at = clock.now();
        Ok(Twin {
            metrics: Arc::new(MetricsService::new(store.clone())),
            whatif: Arc::new(WhatIfService::new(store.clone(), models.clone())),
            ingest: Arc::new(ingest),
            config,
            clock,
            store,
            bus,
            alerts,
            models,
            improve,
            model_sub: Mutex::new(Some(model_sub)),
            started_at,
        })
    }

    pub fn started_at(&self) -> Timestamp {
        self.started_at
    }

    /// Delivers pending bus events to the model service on this thread.
    /// Returns the number processed; zero once workers own the subscription.
    pub fn pump_models(&self) -> usize {
        let mut guard = self.model_sub.lock();
        let Some(sub) = guard.as_mut() else { return 0 };
        let mut n = 0;
        while let Some(d) = sub.try_next() {
            match self.models.on_data_integrated(&d.event) {
                Ok(_) => {
                    if let Err(e) = sub.ack(d.seq) {
                        tracing::warn!(error = %e, "ack failed");
                    }
                }
                Err(e) => {
                    tracing::error!(error = %e, event = %d.event.event_id, "model update failed");
                    sub.rewind();
                    break;
                }
            }
            n += 1;
        }
        n
    }

    /// Runs queued webhooks and model updates until both are idle.
    pub fn pump(&self) -> usize {
        let mut total = 0;
        loop {
            let n = self.ingest.process_webhooks() + self.pump_models();
            if n == 0 {
                return total;
            }
            total += n;
        }
    }

    /// Starts the webhook worker, model loop, alert evaluation and (when
    /// enabled) scheduled refresh on background threads.
    pub fn spawn_workers(&self) -> Workers {
        let (stop, rx) = crossbeam_channel::bounded::<()>(0);
        let mut handles = Vec::new();
        let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| {
            std::thread::Builder::new()
                .name(name.to_string())
                .spawn(f)
                .expect("spawn worker thread")
        };
        {
            let (ingest, rx) = (self.ingest.clone(), rx.clone());
            handles.push(spawn(
                "cbdt-webhooks",
                Box::new(move || ingest.run_webhook_worker(rx)),
            ));
        }
        if let Some(sub) = self.model_sub.lock().take() {
            let (models, rx) = (self.models.clone(), rx.clone());
            handles.push(spawn("cbdt-models", Box::new(move || models.run(sub, rx))));
        }
        {
            let (alerts, rx) = (self.alerts.clone(), rx.clone());
            let every = Duration::from_secs(self.config.alerts.evaluation_interval_seconds);
            handles.push(spawn(
                "cbdt-alerts",
                Box::new(move || alerts.run(every, rx)),
            ));
        }
        if self.config.ingest.refresh.enabled {
            let (ingest, rx) = (self.ingest.clone(), rx.clone());
            let every = Duration::from_secs(self.config.ingest.refresh.interval_seconds);
            handles.push(spawn(
                "cbdt-refresh",
                Box::new(move || ingest.run_refresh_loop(every, rx)),
            ));
        }
        Workers {
            stop: Some(stop),
            handles,
        }
    }
}
