//! In-process publish/subscribe with at-least-once delivery.
//!
//! Every published event is spilled to the store before `publish` returns.
//! Each subscriber id owns a durable cursor: events are delivered in publish
//! order and stay pending until acked, so a consumer that disconnects
//! without acking sees them again on its next subscription. Events live
//! until every registered subscriber has acked them or their TTL expires.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::model::{ts, DataIntegratedEvent, Timestamp};
use crate::store::{Store, StoreError};

pub const BUILD_DATA_INTEGRATED: &str = "build-data.integrated";
pub const DEFAULT_TTL: Duration = Duration::from_secs(7 * 24 * 3600);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Topic(String);

impl Topic {
    pub fn new(name: &str) -> Result<Topic, BusError> {
        let valid = !name.is_empty()
            && name.split('.').all(|part| {
                !part.is_empty()
                    && part.chars().all(|c| {
                        c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_'
                    })
            });
        if valid {
            Ok(Topic(name.to_string()))
        } else {
            Err(BusError::InvalidTopic(name.to_string()))
        }
    }

    pub fn build_data_integrated() -> Topic {
        Topic(BUILD_DATA_INTEGRATED.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("bus unavailable: {0}")]
    Unavailable(String),
    #[error("subscriber {0} already has an active subscription")]
    DuplicateSubscriber(String),
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
}

impl From<StoreError> for BusError {
    fn from(e: StoreError) -> Self {
        BusError::Unavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope {
    seq: u64,
    #[serde(with = "ts")]
    enqueued_at: Timestamp,
    event: DataIntegratedEvent,
}

/// Acked sequence numbers: everything below `floor` plus a sparse set above.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AckState {
    floor: u64,
    above: BTreeSet<u64>,
}

impl AckState {
    fn contains(&self, seq: u64) -> bool {
        seq < self.floor || self.above.contains(&seq)
    }

    fn insert(&mut self, seq: u64) -> bool {
        if self.contains(seq) {
            return false;
        }
        self.above.insert(seq);
        while self.above.remove(&self.floor) {
            self.floor += 1;
        }
        true
    }
}

#[derive(Default)]
struct TopicState {
    log: BTreeMap<u64, Envelope>,
    acks: HashMap<String, AckState>,
    active: BTreeSet<String>,
    /// Incremented when a subscriber detaches, so its stale handle stops.
    generations: HashMap<String, u64>,
}

struct Inner {
    topics: Mutex<HashMap<Topic, TopicState>>,
    signal: Condvar,
    store: Arc<Store>,
    clock: SharedClock,
    ttl: chrono::Duration,
}

/// A cheap, cloneable handle to the broker.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bus").field("ttl", &self.inner.ttl).finish()
    }
}

fn log_collection(topic: &Topic) -> String {
    format!("bus.log/{}", topic.as_str())
}

fn ack_collection(topic: &Topic) -> String {
    format!("bus.ack/{}", topic.as_str())
}

fn seq_key(seq: u64) -> String {
    format!("{seq:020}")
}

impl Bus {
    /// Opens the broker, reloading any spilled events and cursors.
    pub fn new(store: Arc<Store>, clock: SharedClock, ttl: Duration) -> Result<Bus, BusError> {
        let snap = store.snapshot();
        let mut topics = HashMap::new();
        let topic = Topic::build_data_integrated();
        let mut state = TopicState::default();
        for (_, v) in snap.docs(&log_collection(&topic)) {
            let env: Envelope = serde_json::from_value(v.clone())
                .map_err(|e| BusError::Unavailable(format!("corrupt bus log: {e}")))?;
            state.log.insert(env.seq, env);
        }
        for (sub, v) in snap.docs(&ack_collection(&topic)) {
            let acks: AckState = serde_json::from_value(v.clone())
                .map_err(|e| BusError::Unavailable(format!("corrupt bus cursor: {e}")))?;
            state.acks.insert(sub.clone(), acks);
        }
        topics.insert(topic, state);
        Ok(Bus {
            inner: Arc::new(Inner {
                topics: Mutex::new(topics),
                signal: Condvar::new(),
                store,
                clock,
                ttl: chrono::Duration::from_std(ttl).unwrap_or(chrono::Duration::days(7)),
            }),
        })
    }

    /// Durably enqueues `event`; returns before delivery.
    pub fn publish(&self, topic: &Topic, event: DataIntegratedEvent) -> Result<u64, BusError> {
        if event.job_ids.is_empty() {
            return Err(BusError::InvalidEvent("job_ids must be non-empty".into()));
        }
        let mut topics = self.inner.topics.lock();
        let seq = self.inner.store.transact(|txn| {
            let seq = txn.next_id(&format!("bus.seq/{}", topic.as_str()));
            let env = Envelope {
                seq,
                enqueued_at: self.inner.clock.now(),
                event: event.clone(),
            };
            txn.put_doc(&log_collection(topic), &seq_key(seq), &env)?;
            Ok(seq)
        })?;
        let state = topics.entry(topic.clone()).or_default();
        state.log.insert(
            seq,
            Envelope {
                seq,
                enqueued_at: self.inner.clock.now(),
                event,
            },
        );
        drop(topics);
        self.inner.signal.notify_all();
        Ok(seq)
    }

    /// Attaches `subscriber_id` to `topic`. Un-acked events (including those
    /// published before the first subscription) are delivered first.
    pub fn subscribe(&self, topic: &Topic, subscriber_id: &str) -> Result<Subscription, BusError> {
        let mut topics = self.inner.topics.lock();
        let state = topics.entry(topic.clone()).or_default();
        if !state.active.insert(subscriber_id.to_string()) {
            return Err(BusError::DuplicateSubscriber(subscriber_id.to_string()));
        }
        state.acks.entry(subscriber_id.to_string()).or_default();
        let generation = *state
            .generations
            .entry(subscriber_id.to_string())
            .or_default();
        Ok(Subscription {
            bus: self.clone(),
            topic: topic.clone(),
            subscriber_id: subscriber_id.to_string(),
            next: 0,
            generation,
        })
    }

    /// Drops expired events and events acked by every known subscriber.
    pub fn collect_garbage(&self) -> Result<usize, BusError> {
        let now = self.inner.clock.now();
        let mut topics = self.inner.topics.lock();
        let mut removed = 0;
        for (topic, state) in topics.iter_mut() {
            let dead: Vec<u64> = state
                .log
                .values()
                .filter(|env| {
                    let expired = now - env.enqueued_at >= self.inner.ttl;
                    let consumed =
                        !state.acks.is_empty() && state.acks.values().all(|a| a.contains(env.seq));
                    expired || consumed
                })
                .map(|env| env.seq)
                .collect();
            if dead.is_empty() {
                continue;
            }
            self.inner.store.transact(|txn| {
                for seq in &dead {
                    txn.delete_doc(&log_collection(topic), &seq_key(*seq));
                }
                Ok(())
            })?;
            for seq in dead {
                state.log.remove(&seq);
                removed += 1;
            }
        }
        Ok(removed)
    }

    /// Number of retained events on `topic`.
    pub fn retained(&self, topic: &Topic) -> usize {
        self.inner
            .topics
            .lock()
            .get(topic)
            .map_or(0, |s| s.log.len())
    }

    /// Events not yet acked by `subscriber_id`.
    pub fn pending(&self, topic: &Topic, subscriber_id: &str) -> usize {
        let topics = self.inner.topics.lock();
        let Some(state) = topics.get(topic) else {
            return 0;
        };
        let acks = state.acks.get(subscriber_id);
        state
            .log
            .keys()
            .filter(|seq| !acks.is_some_and(|a| a.contains(**seq)))
            .count()
    }

    pub fn is_healthy(&self) -> bool {
        self.inner
            .topics
            .try_lock_for(Duration::from_millis(200))
            .is_some()
    }
}

/// A delivered event awaiting acknowledgement.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub seq: u64,
    pub event: DataIntegratedEvent,
}

/// A live subscription. Dropping it without acking leaves events pending.
pub struct Subscription {
    bus: Bus,
    topic: Topic,
    subscriber_id: String,
    next: u64,
    generation: u64,
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription")
            .field("topic", &self.topic)
            .field("subscriber_id", &self.subscriber_id)
            .field("next", &self.next)
            .finish()
    }
}

impl Subscription {
    pub fn subscriber_id(&self) -> &str {
        &self.subscriber_id
    }

    fn take_next(&mut self, state: &TopicState) -> Option<Delivery> {
        let acks = state.acks.get(&self.subscriber_id);
        let env = state
            .log
            .range(self.next..)
            .map(|(_, env)| env)
            .find(|env| !acks.is_some_and(|a| a.contains(env.seq)))?;
        self.next = env.seq + 1;
        Some(Delivery {
            seq: env.seq,
            event: env.event.clone(),
        })
    }

    /// Returns the next pending event without blocking.
    pub fn try_next(&mut self) -> Option<Delivery> {
        let inner = self.bus.inner.clone();
        let topics = inner.topics.lock();
        let state = topics.get(&self.topic)?;
        self.take_next(state)
    }

    /// Waits up to `timeout` for the next pending event.
    pub fn next_timeout(&mut self, timeout: Duration) -> Option<Delivery> {
        let deadline = std::time::Instant::now() + timeout;
        let inner = self.bus.inner.clone();
        let mut topics = inner.topics.lock();
        loop {
            if let Some(state) = topics.get(&self.topic) {
                if let Some(d) = self.take_next(state) {
                    return Some(d);
                }
            }
            if inner.signal.wait_until(&mut topics, deadline).timed_out() {
                return topics.get(&self.topic).and_then(|s| self.take_next(s));
            }
        }
    }

    /// Acknowledges `seq`; it will never be redelivered to this subscriber id.
    pub fn ack(&mut self, seq: u64) -> Result<(), BusError> {
        let mut topics = self.bus.inner.topics.lock();
        let state = topics.entry(self.topic.clone()).or_default();
        if state.generations.get(&self.subscriber_id).copied() != Some(self.generation) {
            return Err(BusError::Unavailable("subscription detached".into()));
        }
        let mut acks = state
            .acks
            .get(&self.subscriber_id)
            .cloned()
            .unwrap_or_default();
        if !acks.insert(seq) {
            return Ok(());
        }
        self.bus
            .inner
            .store
            .put_doc(&ack_collection(&self.topic), &self.subscriber_id, &acks)?;
        state.acks.insert(self.subscriber_id.clone(), acks);
        Ok(())
    }

    /// Rewinds to the oldest un-acked event, as a reconnect would.
    pub fn rewind(&mut self) {
        self.next = 0;
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        let mut topics = self.bus.inner.topics.lock();
        if let Some(state) = topics.get_mut(&self.topic) {
            state.active.remove(&self.subscriber_id);
            *state
                .generations
                .entry(self.subscriber_id.clone())
                .or_default() += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::EventSource;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn setup() -> (Bus, Arc<Store>, ManualClock) {
        let store = Arc::new(Store::in_memory());
        let clock = ManualClock::new(Utc.timestamp_opt(1_720_000_000, 0).unwrap());
        let bus = Bus::new(store.clone(), Arc::new(clock.clone()), DEFAULT_TTL).unwrap();
        (bus, store, clock)
    }

    fn event(id: &str, jobs: &[u64]) -> DataIntegratedEvent {
        DataIntegratedEvent {
            event_id: id.into(),
            emitted_at: Utc.timestamp_opt(1_720_000_000, 0).unwrap(),
            job_ids: jobs.to_vec(),
            source: EventSource::Webhook,
        }
    }

    #[test]
    fn topic_names() {
        assert!(Topic::new("build-data.integrated").is_ok());
        assert!(Topic::new("Build.Data").is_err());
        assert!(Topic::new("a..b").is_err());
    }

    #[test]
    fn fan_out_to_two_subscribers() {
        let (bus, _, _) = setup();
        let t = Topic::build_data_integrated();
        let mut a = bus.subscribe(&t, "a").unwrap();
        let mut b = bus.subscribe(&t, "b").unwrap();
        let ev = event("e1", &[1, 2]);
        bus.publish(&t, ev.clone()).unwrap();
        assert_eq!(a.try_next().unwrap().event, ev);
        assert_eq!(b.try_next().unwrap().event, ev);
    }

    #[test]
    fn retained_without_subscribers_until_ttl() {
        let (bus, _, clock) = setup();
        let t = Topic::build_data_integrated();
        bus.publish(&t, event("e1", &[1])).unwrap();
        bus.collect_garbage().unwrap();
        assert_eq!(bus.retained(&t), 1);
        let mut late = bus.subscribe(&t, "late").unwrap();
        assert_eq!(late.try_next().unwrap().event.event_id, "e1");
        drop(late);
        clock.advance(chrono::Duration::days(8));
        bus.collect_garbage().unwrap();
        assert_eq!(bus.retained(&t), 0);
    }

    #[test]
    fn unacked_is_redelivered_and_acked_is_not() {
        let (bus, _, _) = setup();
        let t = Topic::build_data_integrated();
        bus.publish(&t, event("e1", &[1])).unwrap();
        bus.publish(&t, event("e2", &[2])).unwrap();
        {
            let mut s = bus.subscribe(&t, "models").unwrap();
            let d = s.try_next().unwrap();
            s.ack(d.seq).unwrap();
            let _ = s.try_next().unwrap(); // e2 delivered, crash before ack
        }
        let mut s = bus.subscribe(&t, "models").unwrap();
        let d = s.try_next().unwrap();
        assert_eq!(d.event.event_id, "e2");
        s.ack(d.seq).unwrap();
        assert!(s.try_next().is_none());
        drop(s);
        let mut s = bus.subscribe(&t, "models").unwrap();
        assert!(s.try_next().is_none());
    }

    #[test]
    fn duplicate_subscriber_rejected() {
        let (bus, _, _) = setup();
        let t = Topic::build_data_integrated();
        let _a = bus.subscribe(&t, "a").unwrap();
        assert!(matches!(
            bus.subscribe(&t, "a"),
            Err(BusError::DuplicateSubscriber(_))
        ));
    }

    #[test]
    fn independent_cursors() {
        let (bus, _, _) = setup();
        let t = Topic::build_data_integrated();
        let mut a = bus.subscribe(&t, "a").unwrap();
        let mut b = bus.subscribe(&t, "b").unwrap();
        bus.publish(&t, event("e1", &[1])).unwrap();
        let d = a.try_next().unwrap();
        a.ack(d.seq).unwrap();
        assert!(a.try_next().is_none());
        assert_eq!(b.try_next().unwrap().event.event_id, "e1");
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let clock: SharedClock = Arc::new(ManualClock::new(
            Utc.timestamp_opt(1_720_000_000, 0).unwrap(),
        ));
        let t = Topic::build_data_integrated();
        {
            let store = Arc::new(Store::open(dir.path()).unwrap());
            let bus = Bus::new(store, clock.clone(), DEFAULT_TTL).unwrap();
            bus.publish(&t, event("e1", &[1])).unwrap();
            bus.publish(&t, event("e2", &[2])).unwrap();
            let mut s = bus.subscribe(&t, "m").unwrap();
            let d = s.try_next().unwrap();
            s.ack(d.seq).unwrap();
        }
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let bus = Bus::new(store, clock, DEFAULT_TTL).unwrap();
        let mut s = bus.subscribe(&t, "m").unwrap();
        assert_eq!(s.try_next().unwrap().event.event_id, "e2");
        assert!(s.try_next().is_none());
    }

    #[test]
    fn blocking_receive_wakes_on_publish() {
        let (bus, _, _) = setup();
        let t = Topic::build_data_integrated();
        let mut s = bus.subscribe(&t, "w").unwrap();
        let publisher = {
            let bus = bus.clone();
            let t = t.clone();
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_millis(20));
                bus.publish(&t, event("e1", &[1])).unwrap();
            })
        };
        let d = s.next_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(d.event.event_id, "e1");
        publisher.join().unwrap();
    }

    #[derive(Debug, Clone)]
    enum Step {
        Publish,
        Receive { ack: bool },
        Crash,
    }

    fn arb_step() -> impl Strategy<Value = Step> {
        prop_oneof![
            3 => Just(Step::Publish),
            4 => any::<bool>().prop_map(|ack| Step::Receive { ack }),
            1 => Just(Step::Crash),
        ]
    }

    proptest! {
        /// Whatever the interleaving of publishes, deliveries and crashes, a
        /// final reconnect-and-drain acks every published event exactly once,
        /// and delivery order is FIFO within each connection.
        #[test]
        fn at_least_once(steps in proptest::collection::vec(arb_step(), 1..60)) {
            let (bus, _, _) = setup();
            let t = Topic::build_data_integrated();
            let mut published = Vec::new();
            let mut acked: Vec<String> = Vec::new();
            let mut delivered = 0usize;
            let mut sub = Some(bus.subscribe(&t, "s").unwrap());
            let mut last_seq_in_conn: Option<u64> = None;
            for (i, step) in steps.into_iter().enumerate() {
                match step {
                    Step::Publish => {
                        let id = format!("e{i}");
                        bus.publish(&t, event(&id, &[i as u64])).unwrap();
                        published.push(id);
                    }
                    Step::Receive { ack } => {
                        let s = sub.as_mut().unwrap();
                        if let Some(d) = s.try_next() {
                            delivered += 1;
                            if let Some(prev) = last_seq_in_conn {
                                prop_assert!(d.seq > prev);
                            }
                            last_seq_in_conn = Some(d.seq);
                            if ack {
                                s.ack(d.seq).unwrap();
                                acked.push(d.event.event_id);
                            }
                        }
                    }
                    Step::Crash => {
                        drop(sub.take());
                        sub = Some(bus.subscribe(&t, "s").unwrap());
                        last_seq_in_conn = None;
                    }
                }
            }
            drop(sub.take());
            let mut s = bus.subscribe(&t, "s").unwrap();
            while let Some(d) = s.try_next() {
                delivered += 1;
                s.ack(d.seq).unwrap();
                acked.push(d.event.event_id);
            }
            let mut a = acked.clone();
            a.sort();
            let mut p = published.clone();
            p.sort();
            prop_assert_eq!(a, p);
            prop_assert!(delivered >= published.len());
        }
    }
}
