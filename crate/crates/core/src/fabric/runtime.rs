use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::FabricConfig;
use super::directory::Directory;
use super::stream::{stream_for, unit_draw};
use super::{job_duration, ResourceId};
use crate::plan::JobId;
use crate::scheduler::ResourceStatus;
use crate::time::{SimDuration, SimTime, MS_PER_HOUR};

/// Identifies one attempt at running a job on the fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttemptHandle(pub u64);

impl fmt::Display for AttemptHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSpec {
    pub handle: AttemptHandle,
    pub job: JobId,
    pub attempt: u32,
    pub resource: ResourceId,
    pub expected_job_hours: f64,
    pub payload_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("resource `{resource}` unavailable: {reason}")]
pub struct Unavailable {
    pub resource: ResourceId,
    pub reason: String,
}

/// A job taking its slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StartReport {
    pub finish_at: SimTime,
    pub cpu_hours: f64,
}

/// A job leaving its slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishReport {
    pub spec: AttemptSpec,
    pub cpu_hours: f64,
    /// Wall time from getting a slot to finishing, including any wait for
    /// foreign work ahead.
    pub exec_hours: f64,
    /// Background load the attempt ran under.
    pub load: f64,
    pub failed: bool,
    /// Queued attempts that now get a slot, with their start instants.
    pub started: Vec<(SimTime, AttemptHandle)>,
}

#[derive(Debug, Clone)]
struct Live {
    spec: AttemptSpec,
    slotted: Option<SimTime>,
    started: Option<SimTime>,
    cpu_hours: f64,
    load: f64,
}

#[derive(Debug, Clone)]
struct Machine {
    load_rng: ChaCha8Rng,
    /// Attempts holding a slot, started or about to start.
    occupying: BTreeSet<AttemptHandle>,
    fifo: VecDeque<AttemptHandle>,
    /// When the foreign work queued at simulation start drains.
    available_at: SimTime,
}

/// Runtime state of the simulated grid.
#[derive(Debug, Clone)]
pub struct Fabric {
    config: FabricConfig,
    seed: u64,
    directory: Directory,
    machines: BTreeMap<ResourceId, Machine>,
    live: BTreeMap<AttemptHandle, Live>,
    load_steps: u64,
}

impl Fabric {
    pub fn new(config: FabricConfig, seed: u64) -> Self {
        let mut directory = Directory::new();
        let mut machines = BTreeMap::new();
        for r in &config.resources {
            directory.register(r.clone());
            let drain = r.background_queue as f64 * r.mean_service_hours / r.slots as f64;
            machines.insert(
                r.id.clone(),
                Machine {
                    load_rng: stream_for(seed, r.id.as_str(), "load"),
                    occupying: BTreeSet::new(),
                    fifo: VecDeque::new(),
                    available_at: SimTime::from_millis((drain * MS_PER_HOUR as f64) as i64),
                },
            );
        }
        Fabric { config, seed, directory, machines, live: BTreeMap::new(), load_steps: 0 }
    }

    /// A fresh fabric with its load walk and outage status advanced to `now`,
    /// holding no attempts.
    pub fn fast_forward(config: FabricConfig, seed: u64, now: SimTime) -> Self {
        let mut f = Fabric::new(config, seed);
        while f.next_load_step() <= now {
            f.load_step();
        }
        for (at, id, down) in f.outage_events() {
            if at <= now {
                f.set_status(&id, if down { ResourceStatus::Down } else { ResourceStatus::Up });
            }
        }
        f
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn directory_mut(&mut self) -> &mut Directory {
        &mut self.directory
    }

    /// Instant of the next load random-walk step.
    pub fn next_load_step(&self) -> SimTime {
        SimTime::from_millis((self.load_steps as i64 + 1) * self.config.options.load_step.millis().max(1))
    }

    /// Advances every resource's background load one step of a reflected
    /// Gaussian random walk.
    pub fn load_step(&mut self) {
        self.load_steps += 1;
        if !self.config.options.load_variation {
            return;
        }
        let max = self.config.options.load_max;
        for (id, m) in self.machines.iter_mut() {
            let Some(entry) = self.directory.get_mut(id) else { continue };
            let sigma = entry.resource.load_sigma;
            if sigma <= 0.0 {
                continue;
            }
            let step = Normal::new(0.0, sigma).expect("finite sigma").sample(&mut m.load_rng);
            entry.load = reflect(entry.load + step, max);
        }
    }

    /// Scripted outages as `(instant, resource, goes_down)`, in time order.
    pub fn outage_events(&self) -> Vec<(SimTime, ResourceId, bool)> {
        if !self.config.options.outages {
            return Vec::new();
        }
        let mut out = Vec::new();
        for r in &self.config.resources {
            for o in &r.outages {
                out.push((SimTime::ZERO + o.down_at, r.id.clone(), true));
                if let Some(up) = o.up_at {
                    out.push((SimTime::ZERO + up, r.id.clone(), false));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        out
    }

    pub fn status(&self, id: &ResourceId) -> Option<ResourceStatus> {
        self.directory.get(id).map(|e| e.status)
    }

    pub fn set_status(&mut self, id: &ResourceId, status: ResourceStatus) {
        if let Some(e) = self.directory.get_mut(id) {
            e.status = status;
        }
    }

    /// Takes a resource down, killing every attempt on it. Returns the killed
    /// attempts in handle order.
    pub fn resource_down(&mut self, id: &ResourceId) -> Vec<AttemptSpec> {
        self.set_status(id, ResourceStatus::Down);
        let Some(m) = self.machines.get_mut(id) else { return Vec::new() };
        let mut handles: Vec<AttemptHandle> = m.occupying.iter().copied().chain(m.fifo.iter().copied()).collect();
        handles.sort();
        m.occupying.clear();
        m.fifo.clear();
        self.refresh_queue(id);
        handles.into_iter().filter_map(|h| self.live.remove(&h)).map(|l| l.spec).collect()
    }

    pub fn resource_up(&mut self, id: &ResourceId) {
        self.set_status(id, ResourceStatus::Up);
    }

    /// Queues an attempt. Returns the attempts that start as a result.
    pub fn submit(&mut self, now: SimTime, spec: AttemptSpec) -> Result<Vec<(SimTime, AttemptHandle)>, Unavailable> {
        let unavailable = |reason: &str| Unavailable { resource: spec.resource.clone(), reason: reason.to_string() };
        match self.status(&spec.resource) {
            None => return Err(unavailable("not registered")),
            Some(ResourceStatus::Down) => return Err(unavailable("resource is down")),
            Some(ResourceStatus::Up) => {}
        }
        let id = spec.resource.clone();
        let m = self.machines.get_mut(&id).expect("registered resource has a machine");
        m.fifo.push_back(spec.handle);
        self.live.insert(spec.handle, Live { spec, slotted: None, started: None, cpu_hours: 0.0, load: 0.0 });
        Ok(self.pump(now, &id))
    }

    /// Moves queued attempts into free slots.
    fn pump(&mut self, now: SimTime, id: &ResourceId) -> Vec<(SimTime, AttemptHandle)> {
        let slots = self.directory.get(id).map_or(0, |e| e.resource.slots) as usize;
        let m = self.machines.get_mut(id).expect("known machine");
        let mut out = Vec::new();
        while m.occupying.len() < slots {
            let Some(h) = m.fifo.pop_front() else { break };
            m.occupying.insert(h);
            if let Some(l) = self.live.get_mut(&h) {
                l.slotted = Some(now);
            }
            out.push((now.max(m.available_at), h));
        }
        self.refresh_queue(id);
        out
    }

    fn refresh_queue(&mut self, id: &ResourceId) {
        let queued = self.machines.get(id).map_or(0, |m| m.fifo.len() as u32);
        if let Some(e) = self.directory.get_mut(id) {
            e.queue_length = queued;
        }
    }

    /// Whether `handle` refers to a live attempt.
    pub fn is_live(&self, handle: AttemptHandle) -> bool {
        self.live.contains_key(&handle)
    }

    pub fn spec(&self, handle: AttemptHandle) -> Option<&AttemptSpec> {
        self.live.get(&handle).map(|l| &l.spec)
    }

    /// Starts a slotted attempt under the current load. `None` when the
    /// attempt is gone (killed by an outage).
    pub fn start(&mut self, now: SimTime, handle: AttemptHandle) -> Option<StartReport> {
        let live = self.live.get_mut(&handle)?;
        if live.started.is_some() {
            return None;
        }
        let entry = self.directory.get(&live.spec.resource)?;
        let d = job_duration(&entry.resource, live.spec.expected_job_hours, entry.load, 0, live.spec.payload_mb);
        live.started = Some(now);
        live.cpu_hours = d.cpu_hours;
        live.load = entry.load;
        let wall = SimDuration::from_hours_f64(d.wall_hours).max(SimDuration::from_millis(1));
        Some(StartReport { finish_at: now + wall, cpu_hours: d.cpu_hours })
    }

    /// Completes a running attempt, freeing its slot.
    pub fn finish(&mut self, now: SimTime, handle: AttemptHandle) -> Option<FinishReport> {
        let live = self.live.get(&handle)?;
        live.started?;
        let slotted = live.slotted.or(live.started).expect("started attempts hold a slot");
        let live = self.live.remove(&handle)?;
        let id = live.spec.resource.clone();
        if let Some(m) = self.machines.get_mut(&id) {
            m.occupying.remove(&handle);
        }
        let failure_rate = self.directory.get(&id).map_or(0.0, |e| e.resource.failure_rate);
        let failed = self.config.options.failures
            && failure_rate > 0.0
            && unit_draw(
                self.seed,
                &[id.as_str(), "failure", &live.spec.job.to_string(), &live.spec.attempt.to_string()],
            ) < failure_rate;
        let started_next = self.pump(now, &id);
        Some(FinishReport {
            exec_hours: now.duration_since(slotted).hours(),
            cpu_hours: live.cpu_hours,
            load: live.load,
            spec: live.spec,
            failed,
            started: started_next,
        })
    }

    /// Withdraws an attempt (abort). Returns attempts that start in its place.
    pub fn cancel(&mut self, now: SimTime, handle: AttemptHandle) -> Vec<(SimTime, AttemptHandle)> {
        let Some(live) = self.live.remove(&handle) else { return Vec::new() };
        let id = live.spec.resource;
        if let Some(m) = self.machines.get_mut(&id) {
            m.occupying.remove(&handle);
            m.fifo.retain(|h| *h != handle);
        }
        self.pump(now, &id)
    }

    /// Attempts on `id`, slotted first, then queued.
    pub fn attempts_on(&self, id: &ResourceId) -> Vec<AttemptHandle> {
        self.machines.get(id).map_or_else(Vec::new, |m| m.occupying.iter().chain(m.fifo.iter()).copied().collect())
    }

    /// Start instant of a running attempt.
    pub fn started_at(&self, handle: AttemptHandle) -> Option<SimTime> {
        self.live.get(&handle).and_then(|l| l.started)
    }
}

fn reflect(x: f64, max: f64) -> f64 {
    let mut x = x;
    for _ in 0..4 {
        if x < 0.0 {
            x = -x;
        } else if x > max {
            x = 2.0 * max - x;
        } else {
            return x;
        }
    }
    x.clamp(0.0, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{FabricOptions, SimResource};

    fn spec(h: u64, res: &str) -> AttemptSpec {
        AttemptSpec {
            handle: AttemptHandle(h),
            job: JobId(h as u32),
            attempt: 1,
            resource: ResourceId::from(res),
            expected_job_hours: 1.0,
            payload_mb: 0.0,
        }
    }

    fn fabric(options: FabricOptions) -> Fabric {
        Fabric::new(FabricConfig::new(vec![SimResource::new("A", 2.0), SimResource::new("B", 1.0)], options), 1)
    }

    #[test]
    fn slots_are_fifo() {
        let mut f = fabric(FabricOptions::frozen());
        let t0 = SimTime::ZERO;
        assert_eq!(f.submit(t0, spec(1, "A")).unwrap(), vec![(t0, AttemptHandle(1))]);
        assert!(f.submit(t0, spec(2, "A")).unwrap().is_empty());
        assert_eq!(f.directory().get(&ResourceId::from("A")).unwrap().queue_length, 1);
        let s = f.start(t0, AttemptHandle(1)).unwrap();
        assert_eq!(s.finish_at, SimTime::from_millis(MS_PER_HOUR / 2));
        let done = f.finish(s.finish_at, AttemptHandle(1)).unwrap();
        assert_eq!(done.cpu_hours, 0.5);
        assert_eq!(done.exec_hours, 0.5);
        assert!(!done.failed);
        assert_eq!(done.started, vec![(s.finish_at, AttemptHandle(2))]);
    }

    #[test]
    fn outage_kills_attempts() {
        let mut f = fabric(FabricOptions::frozen());
        f.submit(SimTime::ZERO, spec(1, "B")).unwrap();
        f.submit(SimTime::ZERO, spec(2, "B")).unwrap();
        let killed = f.resource_down(&ResourceId::from("B"));
        assert_eq!(killed.len(), 2);
        assert!(f.submit(SimTime::ZERO, spec(3, "B")).is_err());
        assert!(f.start(SimTime::ZERO, AttemptHandle(1)).is_none());
        f.resource_up(&ResourceId::from("B"));
        assert!(f.submit(SimTime::ZERO, spec(3, "B")).is_ok());
    }

    #[test]
    fn load_walk_stays_in_bounds_and_replays() {
        let mut a = fabric(FabricOptions::default());
        for _ in 0..500 {
            a.load_step();
            assert!(a.directory().entries().all(|e| (0.0..=0.9).contains(&e.load)));
        }
        let t = SimTime::from_millis(500 * 5 * 60_000);
        let b = Fabric::fast_forward(a.config().clone(), 1, t);
        let loads = |f: &Fabric| f.directory().entries().map(|e| e.load).collect::<Vec<_>>();
        assert_eq!(loads(&a), loads(&b));
    }

    #[test]
    fn batch_backlog_delays_start() {
        let mut r = SimResource::new("Q", 1.0);
        r.queue_type = crate::scheduler::QueueType::BatchQueue;
        r.background_queue = 3;
        r.mean_service_hours = 1.0;
        let mut f = Fabric::new(FabricConfig::new(vec![r], FabricOptions::frozen()), 0);
        let starts = f.submit(SimTime::ZERO, spec(1, "Q")).unwrap();
        assert_eq!(starts, vec![(SimTime::from_millis(3 * MS_PER_HOUR), AttemptHandle(1))]);
    }
}
