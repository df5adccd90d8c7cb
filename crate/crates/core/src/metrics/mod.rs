//! Build performance metrics over boundary-aligned UTC windows.
//!
//! A job counts toward executions_frequency in the window containing its
//! created_at, and toward the outcome metrics (mean duration, failure and
//! flaky ratios) in the window containing its finished_at.

pub mod alerts;

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate, TimeZone, Timelike, Utc};
use parking_lot::Mutex;

use crate::model::{BuildJob, Interval, JobStatus, MetricSnapshot, Scope, Timestamp};
use crate::store::{Snapshot, Store};

/// Upper bound on windows per series request.
pub const MAX_WINDOWS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{0} is not aligned to a {1:?} boundary")]
    UnalignedWindow(String, Interval),
    #[error("range start is after its end")]
    InvertedRange,
    #[error("range spans more than {MAX_WINDOWS} windows")]
    TooManyWindows,
}

fn midnight(d: NaiveDate) -> Timestamp {
    Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight exists"))
}

/// Start of the window of `interval` containing `t`.
pub fn align_floor(interval: Interval, t: Timestamp) -> Timestamp {
    let d = t.date_naive();
    match interval {
        Interval::Hourly => Utc
            .with_ymd_and_hms(t.year(), t.month(), t.day(), t.hour(), 0, 0)
            .single()
            .expect("valid hour"),
        Interval::Daily => midnight(d),
        Interval::Weekly => midnight(d - Duration::days(d.weekday().num_days_from_monday() as i64)),
        Interval::Monthly => midnight(d.with_day(1).expect("day 1 exists")),
        Interval::Yearly => {
            midnight(NaiveDate::from_ymd_opt(t.year(), 1, 1).expect("Jan 1 exists"))
        }
    }
}

pub fn is_aligned(interval: Interval, t: Timestamp) -> bool {
    align_floor(interval, t) == t
}

/// The boundary following the aligned `start`.
pub fn next_boundary(interval: Interval, start: Timestamp) -> Timestamp {
    match interval {
        Interval::Hourly => start + Duration::hours(1),
        Interval::Daily => start + Duration::days(1),
        Interval::Weekly => start + Duration::weeks(1),
        Interval::Monthly => {
            let (y, m) = if start.month() == 12 {
                (start.year() + 1, 1)
            } else {
                (start.year(), start.month() + 1)
            };
            midnight(NaiveDate::from_ymd_opt(y, m, 1).expect("valid month"))
        }
        Interval::Yearly => {
            midnight(NaiveDate::from_ymd_opt(start.year() + 1, 1, 1).expect("valid year"))
        }
    }
}

/// The boundary preceding the aligned `start`.
pub fn previous_boundary(interval: Interval, start: Timestamp) -> Timestamp {
    align_floor(interval, start - Duration::milliseconds(1))
}

fn check_aligned(interval: Interval, t: Timestamp) -> Result<(), MetricsError> {
    if is_aligned(interval, t) {
        Ok(())
    } else {
        Err(MetricsError::UnalignedWindow(
            crate::model::ts::format(&t),
            interval,
        ))
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    created: u64,
    completed: u64,
    failed: u64,
    flaky: u64,
    duration_sum: f64,
    duration_n: u64,
}

impl Tally {
    fn into_snapshot(
        self,
        scope: &Scope,
        interval: Interval,
        start: Timestamp,
        end: Timestamp,
    ) -> MetricSnapshot {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        MetricSnapshot {
            scope: scope.clone(),
            window_start: start,
            window_end: end,
            interval,
            executions_frequency: self.created,
            mean_duration: (self.duration_n > 0)
                .then(|| self.duration_sum / self.duration_n as f64),
            failure_ratio: ratio(self.failed, self.completed),
            flaky_failure_ratio: ratio(self.flaky, self.failed),
        }
    }
}

fn scoped_jobs<'a>(
    snap: &'a Snapshot,
    scope: &'a Scope,
) -> Box<dyn Iterator<Item = &'a BuildJob> + 'a> {
    match scope {
        Scope::All => Box::new(snap.jobs()),
        Scope::Projects(ids) => Box::new(ids.iter().flat_map(move |p| snap.project_jobs(*p))),
    }
}

fn window_index(bounds: &[Timestamp], t: Timestamp) -> Option<usize> {
    let i = bounds.partition_point(|b| *b <= t);
    (i > 0 && i < bounds.len()).then(|| i - 1)
}

/// One snapshot per window in `[from, to)`, including empty windows. Jobs
/// of every project in `scope` are pooled before any ratio is taken.
pub fn series(
    snap: &Snapshot,
    scope: &Scope,
    interval: Interval,
    from: Timestamp,
    to: Timestamp,
) -> Result<Vec<MetricSnapshot>, MetricsError> {
    check_aligned(interval, from)?;
    check_aligned(interval, to)?;
    if from > to {
        return Err(MetricsError::InvertedRange);
    }
    let mut bounds = vec![from];
    while *bounds.last().expect("non-empty") < to {
        if bounds.len() > MAX_WINDOWS {
            return Err(MetricsError::TooManyWindows);
        }
        bounds.push(next_boundary(interval, *bounds.last().expect("non-empty")));
    }
    let mut tallies = vec![Tally::default(); bounds.len() - 1];
    if tallies.is_empty() {
        return Ok(Vec::new());
    }
    for job in scoped_jobs(snap, scope) {
        if let Some(i) = window_index(&bounds, job.created_at) {
            tallies[i].created += 1;
        }
        if !job.status.is_completed() {
            continue;
        }
        let Some(i) = job.finished_at.and_then(|f| window_index(&bounds, f)) else {
            continue;
        };
        let t = &mut tallies[i];
        t.completed += 1;
        if job.status == JobStatus::Failed {
            t.failed += 1;
            if job.flaky == Some(true) {
                t.flaky += 1;
            }
        }
        if let Some(d) = job.duration {
            t.duration_sum += d;
            t.duration_n += 1;
        }
    }
    Ok(tallies
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.into_snapshot(scope, interval, bounds[i], bounds[i + 1]))
        .collect())
}

/// The snapshot of the single window starting at `window_start`.
pub fn compute_snapshot(
    snap: &Snapshot,
    scope: &Scope,
    interval: Interval,
    window_start: Timestamp,
) -> Result<MetricSnapshot, MetricsError> {
    check_aligned(interval, window_start)?;
    let end = next_boundary(interval, window_start);
    Ok(series(snap, scope, interval, window_start, end)?
        .pop()
        .expect("one window"))
}

type CacheKey = (Scope, Interval, Timestamp, Timestamp);

/// Series computed on read, cached per store version.
#[derive(Debug)]
pub struct MetricsService {
    store: Arc<Store>,
    cache: Mutex<(u64, HashMap<CacheKey, Arc<Vec<MetricSnapshot>>>)>,
    capacity: usize,
}

impl MetricsService {
    pub fn new(store: Arc<Store>) -> Self {
        MetricsService {
            store,
            cache: Mutex::new((0, HashMap::new())),
            capacity: 256,
        }
    }

    pub fn series(
        &self,
        scope: &Scope,
        interval: Interval,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Arc<Vec<MetricSnapshot>>, MetricsError> {
        let snap = self.store.snapshot();
        let key = (scope.clone(), interval, from, to);
        {
            let mut cache = self.cache.lock();
            if cache.0 != snap.version() {
                *cache = (snap.version(), HashMap::new());
            }
            if let Some(hit) = cache.1.get(&key) {
                return Ok(hit.clone());
            }
        }
        let computed = Arc::new(series(&snap, scope, interval, from, to)?);
        let mut cache = self.cache.lock();
        if cache.0 == snap.version() {
            if cache.1.len() >= self.capacity {
                cache.1.clear();
            }
            cache.1.insert(key, computed.clone());
        }
        Ok(computed)
    }

    pub fn compute_snapshot(
        &self,
        scope: &Scope,
        interval: Interval,
        window_start: Timestamp,
    ) -> Result<MetricSnapshot, MetricsError> {
        compute_snapshot(&self.store.snapshot(), scope, interval, window_start)
    }

    /// Drops every cached series; called when new data is integrated.
    pub fn invalidate(&self) {
        self.cache.lock().1.clear();
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().1.len()
    }
}
