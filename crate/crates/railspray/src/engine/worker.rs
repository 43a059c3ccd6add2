//! Worker loop.
//!
//! A worker owns a fixed set of rails. Each step it takes new slices from its
//! ring, moves slices off rails that left the healthy state, posts pending
//! slices in per-backend groups, polls completions and drives feedback,
//! health, retries, timeouts and probes for its rails.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use railspray_core::batch::FailureReason;
use railspray_core::capability::{BackendId, Direction, MediaPair};
use railspray_core::reachability::RailPair;
use railspray_core::resilience::{HealthState, Signal, Transition};
use railspray_core::scheduler::{feedback, periodic_reset, CostModel, Observation};
use railspray_core::segment::Medium;
use railspray_core::slice::{BatchId, CompletionEvent, CompletionStatus, SliceId, SliceWorkRequest, WorkId};
use railspray_core::topology::{RailId, RailKind};

use super::dispatch::Dispatch;
use super::state::{BatchEntry, SchedState, Shared, SliceTask};
use crate::backend::PostError;
use crate::ring::SubmissionRing;

const WHEEL_NS: u64 = 10_000_000;
/// Probe work ids live above every slice id.
const PROBE_BASE: u64 = 1 << 55;
const PROBE_BATCH: BatchId = BatchId(u64::MAX);

#[derive(Debug, Clone, Copy)]
struct Probe {
    rail: RailId,
    deadline: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct StepResult {
    pub progress: bool,
    pub wakeup: Option<u64>,
}

#[derive(Debug)]
pub(crate) struct Worker {
    index: usize,
    rails: Vec<RailId>,
    pending: Vec<VecDeque<SliceTask>>,
    /// Position in `rails` for each engine rail, if owned.
    slot: Vec<Option<usize>>,
    inflight: HashMap<WorkId, SliceTask>,
    wheel: BTreeMap<u64, Vec<WorkId>>,
    probes: BTreeMap<WorkId, Probe>,
    next_probe_id: u64,
    parked: Vec<(SliceTask, u64)>,
    parked_epoch: u64,
    events: Vec<CompletionEvent>,
    /// Tasks to hand to their owning worker once the scheduler lock is released.
    routed: Vec<SliceTask>,
}

fn min_opt(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

impl Worker {
    pub fn new(index: usize, rails: Vec<RailId>, total_rails: usize) -> Self {
        let mut slot = vec![None; total_rails];
        for (i, r) in rails.iter().enumerate() {
            slot[r.index()] = Some(i);
        }
        Worker {
            index,
            pending: rails.iter().map(|_| VecDeque::new()).collect(),
            rails,
            slot,
            inflight: HashMap::new(),
            wheel: BTreeMap::new(),
            probes: BTreeMap::new(),
            next_probe_id: 0,
            parked: Vec::new(),
            parked_epoch: 0,
            events: Vec::new(),
            routed: Vec::new(),
        }
    }

    pub fn outstanding(&self) -> usize {
        self.inflight.len() + self.parked.len() + self.pending.iter().map(|q| q.len()).sum::<usize>()
    }

    fn accept(&mut self, task: SliceTask) {
        match self.slot[task.pair.local.index()] {
            Some(i) => self.pending[i].push_back(task),
            None => unreachable!("task routed to a worker that does not own its rail"),
        }
    }

    pub fn drain_ring(&mut self, ring: &SubmissionRing<SliceTask>) -> bool {
        let mut any = false;
        while let Some(t) = ring.pop() {
            self.accept(t);
            any = true;
        }
        any
    }

    /// Drops all local state after a panic and returns the batches that had
    /// work here.
    pub fn abandon(&mut self) -> Vec<Arc<BatchEntry>> {
        let mut out: Vec<Arc<BatchEntry>> = Vec::new();
        let tasks = self
            .pending
            .iter()
            .flatten()
            .chain(self.inflight.values())
            .chain(self.parked.iter().map(|p| &p.0));
        for t in tasks {
            if !out.iter().any(|b| Arc::ptr_eq(b, &t.transfer.batch)) {
                out.push(t.transfer.batch.clone());
            }
        }
        self.clear();
        out
    }

    fn clear(&mut self) {
        for q in &mut self.pending {
            q.clear();
        }
        self.inflight.clear();
        self.wheel.clear();
        self.probes.clear();
        self.parked.clear();
        self.routed.clear();
    }

    fn flush_routed(&mut self, sh: &Shared) {
        for t in std::mem::take(&mut self.routed) {
            if self.slot[t.pair.local.index()].is_some() {
                self.accept(t);
            } else {
                sh.handoff(t);
            }
        }
    }

    pub fn step(&mut self, sh: &Shared) -> StepResult {
        let now = sh.now();
        let mut progress = self.drain_ring(&sh.rings[self.index]);
        while let Some(t) = sh.handoff[self.index].pop() {
            self.accept(t);
            progress = true;
        }
        if self.index == 0 {
            while let Some(t) = sh.parked_inbox.pop() {
                let deadline = now + sh.cfg.retry.max_stall_ms * 1_000_000;
                self.parked.push((t, deadline));
            }
        }
        {
            let mut st = sh.sched.lock();
            progress |= self.reroute_unhealthy(sh, &mut st, now);
            progress |= self.unpark(sh, &mut st, now);
            if self.index == 0 {
                self.housekeeping(sh, &mut st, now);
            }
        }
        self.flush_routed(sh);
        if self.index == 0 {
            progress |= self.start_waiting_staged(sh, now);
        }
        progress |= self.post(sh, now);
        progress |= self.poll(sh, now);
        progress |= self.expire(sh, now);
        progress |= self.probe(sh, now);
        self.flush_routed(sh);
        StepResult {
            progress,
            wakeup: self.wakeup(sh),
        }
    }

    fn wakeup(&self, sh: &Shared) -> Option<u64> {
        let mut w = self.wheel.keys().next().map(|b| b * WHEEL_NS);
        w = min_opt(w, self.probes.values().map(|p| p.deadline).min());
        w = min_opt(w, self.parked.iter().map(|p| p.1).min());
        let st = sh.sched.lock();
        for r in &self.rails {
            let h = &st.health[r.index()];
            if !self.probes.values().any(|p| p.rail == *r) {
                w = min_opt(w, h.next_probe_ns());
            }
        }
        if self.index == 0 {
            w = min_opt(w, Some(st.next_reset_ns));
            if sh.board.lock().is_some() {
                w = min_opt(w, Some(st.next_publish_ns));
            }
        }
        w
    }

    fn note(&self, sh: &Shared, st: &mut SchedState, rail: RailId, tr: Option<Transition>, now: u64) {
        let Some(t) = tr else { return };
        let state = t.state_after();
        st.cost[rail.index()].health = state;
        st.epoch += 1;
        if t == Transition::Reintegrated {
            st.cost[rail.index()].model = CostModel::initial(&sh.cfg.scheduler);
        }
        log::debug!("rail {} -> {} at {now} ns", sh.graph.rail(rail).name, state.as_str());
        sh.telemetry.record_health(rail, now, state);
    }

    /// Dispatches `task` and routes it; failures end the batch.
    fn redispatch(&mut self, sh: &Shared, st: &mut SchedState, mut task: SliceTask, now: u64) {
        if task.transfer.failed() {
            self.discard(sh, st, task);
            return;
        }
        match sh.dispatch(st, &mut task, now) {
            Dispatch::Assigned => self.routed.push(task),
            Dispatch::Park => {
                let deadline = now + sh.cfg.retry.max_stall_ms * 1_000_000;
                self.parked.push((task, deadline));
            }
            Dispatch::Fail(reason) => {
                task.transfer.batch.fail(reason);
                self.discard(sh, st, task);
            }
        }
    }

    /// Drops a task whose batch failed, returning its staging space.
    fn discard(&self, sh: &Shared, st: &mut SchedState, mut task: SliceTask) {
        sh.release(st, &mut task);
        if let Some(s) = &task.transfer.staged {
            sh.release_staging(&mut s.lock());
        }
    }

    fn reroute_unhealthy(&mut self, sh: &Shared, st: &mut SchedState, now: u64) -> bool {
        let mut moved = false;
        for i in 0..self.rails.len() {
            if self.pending[i].is_empty() || st.healthy(self.rails[i]) {
                continue;
            }
            for mut t in std::mem::take(&mut self.pending[i]) {
                sh.release(st, &mut t);
                self.redispatch(sh, st, t, now);
                moved = true;
            }
        }
        moved
    }

    fn unpark(&mut self, sh: &Shared, st: &mut SchedState, now: u64) -> bool {
        if self.parked.is_empty() {
            return false;
        }
        let expired = self.parked.iter().any(|p| p.1 <= now);
        if st.epoch == self.parked_epoch && !expired {
            return false;
        }
        self.parked_epoch = st.epoch;
        let before = self.parked.len();
        for (mut task, deadline) in std::mem::take(&mut self.parked) {
            if task.transfer.failed() {
                self.discard(sh, st, task);
                continue;
            }
            match sh.dispatch(st, &mut task, now) {
                Dispatch::Assigned => self.routed.push(task),
                Dispatch::Park if deadline > now => self.parked.push((task, deadline)),
                Dispatch::Park => {
                    task.transfer.batch.fail(FailureReason::NoHealthyRail);
                    self.discard(sh, st, task);
                }
                Dispatch::Fail(r) => {
                    task.transfer.batch.fail(r);
                    self.discard(sh, st, task);
                }
            }
        }
        self.parked.len() != before
    }

    fn housekeeping(&mut self, sh: &Shared, st: &mut SchedState, now: u64) {
        if now >= st.next_reset_ns {
            periodic_reset(&mut st.cost, now, &sh.cfg.scheduler);
            for h in &mut st.health {
                h.clear_counters();
            }
            st.next_reset_ns = now + sh.cfg.scheduler.reset_interval_ns();
        }
        if now >= st.next_publish_ns {
            if let Some(link) = sh.board.lock().as_ref() {
                let mut board = link.board.lock();
                let queued: Vec<u64> = st.cost.iter().map(|c| c.queued_bytes).collect();
                board.publish(link.publisher, now, &queued);
                for c in &mut st.cost {
                    c.global_queued = Some(board.global_queue(c.rail, now));
                }
                st.next_publish_ns = now + board.publish_period_ns();
            }
        }
    }

    fn start_waiting_staged(&mut self, sh: &Shared, now: u64) -> bool {
        let mut started = false;
        loop {
            let Some(tr) = sh.staging_waiters.lock().pop_front() else { break };
            if tr.failed() {
                continue;
            }
            match sh.start_staged(&tr) {
                Some(tasks) => {
                    let mut st = sh.sched.lock();
                    for t in tasks {
                        self.redispatch(sh, &mut st, t, now);
                    }
                    started = true;
                }
                None => {
                    sh.staging_waiters.lock().push_front(tr);
                    break;
                }
            }
        }
        if started {
            self.flush_routed(sh);
        }
        started
    }

    fn post(&mut self, sh: &Shared, now: u64) -> bool {
        let burst = sh.cfg.burst;
        let mut progress = false;
        let mut reqs = Vec::with_capacity(burst);
        for i in 0..self.rails.len() {
            let mut budget = burst;
            while budget > 0 && !self.pending[i].is_empty() {
                // drop slices of failed batches up front
                if self.pending[i].front().is_some_and(|t| t.transfer.failed()) {
                    let t = self.pending[i].pop_front().expect("front");
                    self.discard(sh, &mut sh.sched.lock(), t);
                    progress = true;
                    continue;
                }
                let backend = self.pending[i][0].backend;
                let mut group: Vec<SliceTask> = Vec::new();
                while group.len() < budget
                    && self.pending[i]
                        .front()
                        .is_some_and(|t| t.backend == backend && !t.transfer.failed())
                {
                    let mut t = self.pending[i].pop_front().expect("front");
                    t.posts += 1;
                    group.push(t);
                }
                budget -= group.len();
                reqs.clear();
                reqs.extend(group.iter().map(|t| SliceWorkRequest {
                    work: WorkId::new(t.slice, (t.posts & 0xff) as u8),
                    batch: t.transfer.batch.cb.id(),
                    backend,
                    pair: t.pair,
                    direction: t.direction,
                    src: t.src,
                    src_offset: t.src_offset,
                    dst: t.dst,
                    dst_offset: t.dst_offset,
                    len: t.len,
                }));
                match sh.backends[backend.0 as usize].post_slices(&reqs) {
                    Ok(n) => {
                        let deadline = now + sh.attempt_timeout_ns;
                        let bucket = deadline.div_ceil(WHEEL_NS);
                        let mut rest = group.split_off(n);
                        for (t, r) in group.into_iter().zip(&reqs) {
                            sh.telemetry.record_post(t.pair.local, t.len);
                            let mut t = t;
                            t.attempts.record_attempt();
                            self.wheel.entry(bucket).or_default().push(r.work);
                            self.inflight.insert(r.work, t);
                        }
                        progress |= n > 0;
                        if !rest.is_empty() {
                            for t in rest.iter_mut() {
                                t.posts -= 1;
                            }
                            for t in rest.into_iter().rev() {
                                self.pending[i].push_front(t);
                            }
                            break;
                        }
                    }
                    Err(PostError::Fatal(e)) => {
                        log::warn!("{e}; substituting");
                        let mut st = sh.sched.lock();
                        // parked slices may now have a substitute route
                        st.epoch += 1;
                        for t in group {
                            self.after_fatal(sh, &mut st, t, backend, now);
                        }
                        progress = true;
                    }
                    Err(PostError::CapabilityMismatch(k)) => {
                        log::error!("backend {} refused slice {k} of a group", sh.backends[backend.0 as usize].name());
                        let mut st = sh.sched.lock();
                        for t in group {
                            t.transfer.batch.fail(FailureReason::NoRoute);
                            self.discard(sh, &mut st, t);
                        }
                        progress = true;
                    }
                }
            }
        }
        progress
    }

    fn after_fatal(&mut self, sh: &Shared, st: &mut SchedState, mut task: SliceTask, backend: BackendId, now: u64) {
        sh.release(st, &mut task);
        match sh.substitute(&mut task, backend) {
            Ok(()) => self.redispatch(sh, st, task, now),
            Err(r) => {
                task.transfer.batch.fail(r);
                self.discard(sh, st, task);
            }
        }
    }

    fn poll(&mut self, sh: &Shared, now: u64) -> bool {
        let burst = sh.cfg.burst;
        let mut events = std::mem::take(&mut self.events);
        events.clear();
        for &rail in &self.rails {
            let kind = sh.graph.rail(rail).kind;
            for b in &sh.backends {
                if b.capabilities().rail_kind == kind {
                    while b.poll(rail, burst, &mut events) == burst {}
                }
            }
        }
        let progress = !events.is_empty();
        if progress {
            let mut st = sh.sched.lock();
            for ev in &events {
                self.on_event(sh, &mut st, ev, now);
            }
        }
        self.events = events;
        progress
    }

    fn on_event(&mut self, sh: &Shared, st: &mut SchedState, ev: &CompletionEvent, now: u64) {
        if let Some(p) = self.probes.remove(&ev.work) {
            let tr = st.health[p.rail.index()].probe_result(ev.status == CompletionStatus::Ok, now, &sh.cfg.health);
            self.note(sh, st, p.rail, tr, now);
            return;
        }
        let Some(task) = self.inflight.remove(&ev.work) else {
            return; // completion of an attempt that already timed out
        };
        let at = ev.completed_at_ns.max(task.dispatched_at);
        self.finish(sh, st, task, ev.status, at, now);
    }

    fn finish(&mut self, sh: &Shared, st: &mut SchedState, mut task: SliceTask, status: CompletionStatus, at: u64, now: u64) {
        let local = task.pair.local;
        let ok = status == CompletionStatus::Ok;
        let observed = (at - task.dispatched_at) as f64 / 1e9;
        let obs = Observation {
            len: task.len,
            queued_at_dispatch: task.queued_at_dispatch,
            observed,
        };
        let fatal = sh.backends[task.backend.0 as usize].is_fatal();
        feedback(&mut st.cost[local.index()], &obs, ok, &sh.cfg.scheduler);
        task.charged = false;
        sh.telemetry.record_completion(
            local,
            task.len,
            ok,
            at - task.dispatched_at,
            now,
            st.cost[local.index()].queued_bytes as f64,
        );
        if ok {
            let tr = st.health[local.index()].observe(
                Signal::Ok {
                    observed,
                    predicted: task.predicted,
                },
                now,
                &sh.cfg.health,
            );
            self.note(sh, st, local, tr, now);
            self.complete(sh, st, task, now);
            return;
        }
        if fatal {
            let b = task.backend;
            self.after_fatal(sh, st, task, b, now);
            return;
        }
        let signal = if status == CompletionStatus::Timeout {
            Signal::Timeout
        } else {
            Signal::Failed
        };
        let RailPair { local, remote } = task.pair;
        let blamed: &[RailId] = if local == remote { &[local] } else { &[local, remote] };
        for &rail in blamed {
            let tr = st.health[rail.index()].observe(signal, now, &sh.cfg.health);
            self.note(sh, st, rail, tr, now);
        }
        task.attempts.record_failure(task.pair);
        task.retrying = true;
        if task.attempts.exhausted(&sh.cfg.retry) {
            let b = task.backend;
            self.after_fatal(sh, st, task, b, now);
            return;
        }
        self.redispatch(sh, st, task, now);
    }

    fn complete(&mut self, sh: &Shared, st: &mut SchedState, task: SliceTask, now: u64) {
        if task.transfer.failed() {
            self.discard(sh, st, task);
            return;
        }
        match task.stage {
            None => task.transfer.complete_unit(),
            Some(at) => {
                for t in sh.staged_slice_done(&task.transfer, at) {
                    self.redispatch(sh, st, t, now);
                }
            }
        }
    }

    fn expire(&mut self, sh: &Shared, now: u64) -> bool {
        let mut expired = Vec::new();
        while let Some(entry) = self.wheel.first_entry() {
            if *entry.key() * WHEEL_NS > now {
                break;
            }
            for w in entry.remove() {
                if self.inflight.contains_key(&w) {
                    expired.push(w);
                }
            }
        }
        let dead_probes: Vec<WorkId> = self
            .probes
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(w, _)| *w)
            .collect();
        if expired.is_empty() && dead_probes.is_empty() {
            return false;
        }
        let mut st = sh.sched.lock();
        for w in expired {
            let task = self.inflight.remove(&w).expect("checked");
            log::debug!("slice {:?} timed out on {}", task.slice, sh.graph.rail(task.pair.local).name);
            self.finish(sh, &mut st, task, CompletionStatus::Timeout, now, now);
        }
        for w in dead_probes {
            let p = self.probes.remove(&w).expect("listed");
            let tr = st.health[p.rail.index()].probe_result(false, now, &sh.cfg.health);
            self.note(sh, &mut st, p.rail, tr, now);
        }
        true
    }

    fn probe_partner(sh: &Shared, rail: RailId) -> RailId {
        let g = &sh.graph;
        let info = g.rail(rail);
        if info.kind != RailKind::Nic {
            return rail;
        }
        let others = g.nodes().iter().filter(|n| n.id != info.node);
        for n in others.clone() {
            if let Some(p) = g.affinity_partner(rail, n.id) {
                return p;
            }
        }
        for n in others {
            if let Some(p) = n.nic_rails.iter().find(|r| g.connected(rail, **r)) {
                return *p;
            }
        }
        rail
    }

    fn probe(&mut self, sh: &Shared, now: u64) -> bool {
        let mut issued = false;
        let mut st = sh.sched.lock();
        for i in 0..self.rails.len() {
            let rail = self.rails[i];
            let h = &st.health[rail.index()];
            if !(h.probe_due(now) || h.wants_followup_probe()) {
                continue;
            }
            let partner = Self::probe_partner(sh, rail);
            let kind = sh.graph.rail(rail).kind;
            let same_node = sh.graph.rail(partner).node == sh.graph.rail(rail).node;
            let host = MediaPair::new(Medium::Host, Medium::Host);
            let Some(b) = sh.backends.iter().find(|b| {
                let c = b.capabilities();
                c.rail_kind == kind && !b.is_fatal() && c.covers(host, Direction::Write, same_node)
            }) else {
                let tr = st.health[rail.index()].probe_unavailable(now, &sh.cfg.health);
                self.note(sh, &mut st, rail, tr, now);
                continue;
            };
            let was_probing = st.health[rail.index()].state() == HealthState::Probing;
            let t = st.health[rail.index()].start_probe();
            if !was_probing {
                self.note(sh, &mut st, rail, Some(t), now);
            }
            let work = WorkId::new(SliceId(PROBE_BASE + self.index as u64 * (1 << 40) + self.next_probe_id), 0);
            self.next_probe_id += 1;
            let src = sh.probe_segments[sh.graph.rail(rail).node.index()];
            let dst = sh.probe_segments[sh.graph.rail(partner).node.index()];
            let req = SliceWorkRequest {
                work,
                batch: PROBE_BATCH,
                backend: b.id(),
                pair: RailPair {
                    local: rail,
                    remote: partner,
                },
                direction: Direction::Write,
                src,
                src_offset: 0,
                dst,
                dst_offset: 0,
                len: sh.cfg.health.probe_bytes,
            };
            issued = true;
            match b.post_slices(&[req]) {
                Ok(1) => {
                    sh.telemetry.record_probe(rail, req.len);
                    self.probes.insert(
                        work,
                        Probe {
                            rail,
                            deadline: now + sh.attempt_timeout_ns,
                        },
                    );
                }
                _ => {
                    let tr = st.health[rail.index()].probe_result(false, now, &sh.cfg.health);
                    self.note(sh, &mut st, rail, tr, now);
                }
            }
        }
        issued
    }
}
