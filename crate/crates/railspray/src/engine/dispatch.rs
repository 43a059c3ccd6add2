//! Rail selection for one slice.
//!
//! First attempts go through the cost model (or a baseline policy); retries
//! use the failure-aware ranking. Either way the chosen local rail is charged
//! with the slice's bytes until it completes.

use railspray_core::batch::FailureReason;
use railspray_core::capability::BackendId;
use railspray_core::plan::{PairChoice, Route};
use railspray_core::reachability::RailPair;
use railspray_core::resilience::RetryCandidate;
use railspray_core::scheduler::{choose_with_policy, map_remote, predict_completion, RailCostState};
use railspray_core::topology::{Penalty, RailId, Tier};

use super::state::{SchedState, Shared, SliceTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dispatch {
    Assigned,
    /// No healthy pair right now; try again after a health change.
    Park,
    Fail(FailureReason),
}

impl Shared {
    /// Backend and rail pairs the task may use on its transfer's active route.
    fn route_for(&self, task: &SliceTask) -> Option<(BackendId, Vec<PairChoice>)> {
        match task.stage {
            None => match task.transfer.plan.lock().active() {
                Route::Direct(d) => Some((d.backend, d.pairs.clone())),
                Route::Staged(_) => None,
            },
            Some(s) => {
                let run = task.transfer.staged.as_ref()?.lock();
                let hop = run.hops.get(s.stage as usize)?;
                Some((hop.backend, hop.pairs.clone()))
            }
        }
    }

    /// Moves the task's transfer off `failed`. Staged hops are bound to
    /// their backend, so a staged slice cannot be moved.
    pub(crate) fn substitute(&self, task: &mut SliceTask, failed: BackendId) -> Result<(), FailureReason> {
        if task.stage.is_some() {
            return Err(FailureReason::RoutesExhausted);
        }
        let mut plan = task.transfer.plan.lock();
        plan.substitute(failed).map_err(|_| FailureReason::RoutesExhausted)?;
        if plan.active().is_staged() {
            return Err(FailureReason::RoutesExhausted);
        }
        task.attempts.reset();
        task.retrying = false;
        Ok(())
    }

    pub(crate) fn release(&self, st: &mut SchedState, task: &mut SliceTask) {
        if task.charged {
            let c = &mut st.cost[task.pair.local.index()];
            c.queued_bytes = c.queued_bytes.saturating_sub(task.len);
            task.charged = false;
        }
    }

    fn charge(&self, st: &mut SchedState, task: &mut SliceTask, backend: BackendId, choice: PairChoice, predicted: f64, now: u64) {
        let c = &mut st.cost[choice.pair.local.index()];
        task.queued_at_dispatch = c.queued_bytes;
        c.queued_bytes += task.len;
        task.charged = true;
        task.backend = backend;
        task.pair = choice.pair;
        task.tier = choice.tier;
        task.predicted = predicted;
        task.dispatched_at = now;
    }

    /// Assigns backend and rail pair to `task`. Any previous charge must have
    /// been released.
    pub(crate) fn dispatch(&self, st: &mut SchedState, task: &mut SliceTask, now: u64) -> Dispatch {
        debug_assert!(!task.charged);
        let mut substitutions = 0;
        let (backend, pairs) = loop {
            let Some((backend, pairs)) = self.route_for(task) else {
                return Dispatch::Fail(FailureReason::NoRoute);
            };
            if !self.backends[backend.0 as usize].is_fatal() {
                break (backend, pairs);
            }
            substitutions += 1;
            if substitutions > self.backends.len() {
                return Dispatch::Fail(FailureReason::RoutesExhausted);
            }
            if let Err(r) = self.substitute(task, backend) {
                return Dispatch::Fail(r);
            }
        };
        let choice = if task.retrying {
            self.pick_retry(st, task, &pairs)
        } else {
            self.pick_model(st, task, &pairs)
        };
        match choice {
            Some((choice, predicted)) => {
                self.charge(st, task, backend, choice, predicted, now);
                Dispatch::Assigned
            }
            None => {
                let gap = (self.cfg.retry.max_stall_ms * 1_000_000 / 4).min(self.cfg.health.probe_interval_ns());
                for pc in pairs.iter() {
                    st.health[pc.pair.local.index()].expedite_probe(now, gap);
                    st.health[pc.pair.remote.index()].expedite_probe(now, gap);
                }
                Dispatch::Park
            }
        }
    }

    fn pick_model(&self, st: &mut SchedState, task: &SliceTask, pairs: &[PairChoice]) -> Option<(PairChoice, f64)> {
        // best pair tier per healthy local rail
        let mut locals: Vec<(RailId, Tier)> = Vec::new();
        for pc in pairs {
            if !(st.healthy(pc.pair.local) && st.healthy(pc.pair.remote)) {
                continue;
            }
            match locals.iter_mut().find(|(l, _)| *l == pc.pair.local) {
                Some(x) => x.1 = x.1.min(pc.tier),
                None => locals.push((pc.pair.local, pc.tier)),
            }
        }
        if locals.is_empty() {
            return None;
        }
        let mut states: Vec<RailCostState> = locals
            .iter()
            .map(|(l, t)| {
                let mut s = st.cost[l.index()].clone();
                s.tier = *t;
                s
            })
            .collect();
        let sel = choose_with_policy(
            self.cfg.policy,
            &mut states,
            task.len,
            task.offset,
            &self.cfg.scheduler,
            &mut st.cursor,
        )
        .ok()?;
        let local = locals[sel.index].0;
        let remotes: Vec<(RailId, Tier)> = pairs
            .iter()
            .filter(|p| p.pair.local == local)
            .map(|p| (p.pair.remote, p.tier))
            .collect();
        let remote_node = self.graph.rail(remotes[0].0).node;
        let remote = map_remote(&self.graph, local, remote_node, &remotes, |r| st.healthy(r)).ok()?;
        let tier = remotes.iter().find(|(r, _)| *r == remote).map_or(Tier::Three, |x| x.1);
        Some((
            PairChoice {
                pair: RailPair { local, remote },
                tier,
            },
            sel.predicted,
        ))
    }

    fn pick_retry(&self, st: &SchedState, task: &SliceTask, pairs: &[PairChoice]) -> Option<(PairChoice, f64)> {
        let max_tier = if self.cfg.scheduler.penalties.get(Tier::Three) == Penalty::Unschedulable {
            Tier::Two
        } else {
            Tier::Three
        };
        let candidates = pairs.iter().map(|p| RetryCandidate {
            pair: p.pair,
            tier: p.tier,
            healthy: st.healthy(p.pair.local) && st.healthy(p.pair.remote),
            failures: st.health[p.pair.local.index()].consecutive_failures(),
            queued_bytes: st.cost[p.pair.local.index()].queued_bytes,
        });
        let pair = task.attempts.pick_retry(candidates, max_tier).or_else(|| {
            // every healthy pair already failed once: reuse the least loaded
            pairs
                .iter()
                .filter(|p| p.tier <= max_tier && st.healthy(p.pair.local) && st.healthy(p.pair.remote))
                .min_by_key(|p| (p.tier, st.cost[p.pair.local.index()].queued_bytes, p.pair))
                .map(|p| p.pair)
        })?;
        let choice = *pairs.iter().find(|p| p.pair == pair)?;
        let mut s = st.cost[pair.local.index()].clone();
        s.tier = choice.tier;
        let predicted = predict_completion(&s, task.len, self.cfg.scheduler.diffusion_weight);
        Some((choice, predicted))
    }
}
