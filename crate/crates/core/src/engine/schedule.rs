use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::arch::ResourceId;
use crate::error::{Error, Result};
use crate::workload::OpClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

/// Dispatch priority: lexicographic `(layer, round, head, node)`. Tasks of
/// no particular head sort before the heads of their round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Priority {
    pub layer: u32,
    pub round: u32,
    pub head: Option<u32>,
    pub node: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    /// Operator graph node this task implements.
    pub node: u32,
    /// `None` for zero-cost join points.
    pub resource: Option<ResourceId>,
    pub duration: u64,
    pub op_class: OpClass,
    pub priority: Priority,
}

/// Tasks with dependency lists stored contiguously.
#[derive(Debug, Clone)]
pub struct TaskSet {
    tasks: Vec<Task>,
    dep_start: Vec<u32>,
    deps: Vec<u32>,
}

impl Default for TaskSet {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskSet {
    pub fn new() -> Self {
        Self {
            tasks: Vec::new(),
            dep_start: vec![0],
            deps: Vec::new(),
        }
    }

    pub fn with_capacity(tasks: usize, deps: usize) -> Self {
        let mut dep_start = Vec::with_capacity(tasks + 1);
        dep_start.push(0);
        Self {
            tasks: Vec::with_capacity(tasks),
            dep_start,
            deps: Vec::with_capacity(deps),
        }
    }

    pub fn push(&mut self, task: Task, deps: &[TaskId]) -> TaskId {
        let id = TaskId(self.tasks.len() as u32);
        self.tasks.push(task);
        self.deps.extend(deps.iter().map(|d| d.0));
        self.dep_start.push(self.deps.len() as u32);
        id
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id.0 as usize]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn deps(&self, id: TaskId) -> impl ExactSizeIterator<Item = TaskId> + '_ {
        let i = id.0 as usize;
        self.deps[self.dep_start[i] as usize..self.dep_start[i + 1] as usize]
            .iter()
            .map(|&d| TaskId(d))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &Task)> {
        self.tasks.iter().enumerate().map(|(i, t)| (TaskId(i as u32), t))
    }

    pub fn total_duration(&self) -> u64 {
        self.tasks.iter().map(|t| t.duration).sum()
    }
}

/// Start and end cycle of every task, plus each resource's execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub start: Vec<u64>,
    pub end: Vec<u64>,
    /// Task ids per resource in start order.
    pub per_resource: Vec<Vec<u32>>,
    pub end_cycle: u64,
}

impl Timeline {
    pub fn interval(&self, id: TaskId) -> (u64, u64) {
        (self.start[id.0 as usize], self.end[id.0 as usize])
    }

    /// Busy cycles per resource.
    pub fn busy(&self, tasks: &TaskSet) -> Vec<u64> {
        self.per_resource
            .iter()
            .map(|ids| ids.iter().map(|&i| tasks.tasks[i as usize].duration).sum())
            .collect()
    }
}

/// Event-driven list scheduling. Whenever a resource is free it starts its
/// highest-priority ready task (ties broken by task id); all completions at
/// an instant are applied before any dispatch at that instant.
pub fn schedule(tasks: &TaskSet, n_resources: usize) -> Result<Timeline> {
    let n = tasks.len();
    let mut indegree = vec![0u32; n];
    let mut succ_count = vec![0u32; n + 1];
    for (i, t) in tasks.tasks.iter().enumerate() {
        if let Some(r) = t.resource {
            if r.0 as usize >= n_resources {
                return Err(Error::UnknownResource {
                    task: i as u32,
                    resource: r.0,
                });
            }
        }
        for d in tasks.deps(TaskId(i as u32)) {
            if d.0 as usize >= n {
                return Err(Error::UnknownDependency {
                    task: i as u32,
                    dep: d.0,
                });
            }
            indegree[i] += 1;
            succ_count[d.0 as usize + 1] += 1;
        }
    }
    for i in 0..n {
        succ_count[i + 1] += succ_count[i];
    }
    let succ_start = succ_count;
    let mut fill = succ_start.clone();
    let mut succ = vec![0u32; tasks.deps.len()];
    for i in 0..n {
        for d in tasks.deps(TaskId(i as u32)) {
            let slot = &mut fill[d.0 as usize];
            succ[*slot as usize] = i as u32;
            *slot += 1;
        }
    }

    let mut st = State {
        start: vec![0u64; n],
        end: vec![0u64; n],
        ready: vec![BinaryHeap::new(); n_resources],
        pending: Vec::new(),
        pending_mark: vec![false; n_resources],
        events: BinaryHeap::new(),
    };
    let mut per_resource: Vec<Vec<u32>> = vec![Vec::new(); n_resources];
    let mut busy = vec![false; n_resources];
    let mut done = 0usize;

    for i in 0..n as u32 {
        if indegree[i as usize] == 0 {
            st.make_ready(tasks, i, 0);
        }
    }

    let mut now = 0u64;
    loop {
        // Retire everything finishing now, cascading through joins, before
        // any resource picks its next task.
        while let Some(&Reverse((t, i))) = st.events.peek() {
            if t != now {
                break;
            }
            st.events.pop();
            done += 1;
            if let Some(r) = tasks.tasks[i as usize].resource {
                busy[r.0 as usize] = false;
                st.mark(r.0);
            }
            for &s in &succ[succ_start[i as usize] as usize..succ_start[i as usize + 1] as usize] {
                indegree[s as usize] -= 1;
                if indegree[s as usize] == 0 {
                    st.make_ready(tasks, s, now);
                }
            }
        }

        st.pending.sort_unstable();
        for k in 0..st.pending.len() {
            let r = st.pending[k] as usize;
            st.pending_mark[r] = false;
            if busy[r] {
                continue;
            }
            if let Some(Reverse((_, i))) = st.ready[r].pop() {
                let d = tasks.tasks[i as usize].duration;
                st.start[i as usize] = now;
                st.end[i as usize] = now + d;
                busy[r] = true;
                per_resource[r].push(i);
                st.events.push(Reverse((now + d, i)));
            }
        }
        st.pending.clear();

        match st.events.peek() {
            Some(&Reverse((t, _))) => now = t,
            None => break,
        }
    }

    if done != n {
        return Err(Error::Cycle {
            unscheduled: n - done,
        });
    }
    let end_cycle = st.end.iter().copied().max().unwrap_or(0);
    Ok(Timeline {
        start: st.start,
        end: st.end,
        per_resource,
        end_cycle,
    })
}

type ReadyHeap = BinaryHeap<Reverse<(Priority, u32)>>;

struct State {
    start: Vec<u64>,
    end: Vec<u64>,
    ready: Vec<ReadyHeap>,
    pending: Vec<u32>,
    pending_mark: Vec<bool>,
    events: BinaryHeap<Reverse<(u64, u32)>>,
}

impl State {
    fn mark(&mut self, r: u32) {
        if !self.pending_mark[r as usize] {
            self.pending_mark[r as usize] = true;
            self.pending.push(r);
        }
    }

    fn make_ready(&mut self, tasks: &TaskSet, i: u32, now: u64) {
        let t = &tasks.tasks[i as usize];
        match t.resource {
            Some(r) => {
                self.ready[r.0 as usize].push(Reverse((t.priority, i)));
                self.mark(r.0);
            }
            None => {
                self.start[i as usize] = now;
                self.end[i as usize] = now;
                self.events.push(Reverse((now, i)));
            }
        }
    }
}

/// Slow time-stepped reference for [`schedule`], returning start cycles. At
/// every cycle finished work is retired (joins complete instantly, to a
/// fixpoint), then each free resource starts its best ready task by
/// `(priority, id)`. Zero-length tasks on a resource are outside its scope.
pub fn reference_schedule(tasks: &TaskSet, n_resources: usize) -> Vec<u64> {
    let n = tasks.len();
    let mut start: Vec<Option<u64>> = vec![None; n];
    let mut end: Vec<Option<u64>> = vec![None; n];
    let deps_done = |end: &[Option<u64>], i: usize, t: u64| {
        tasks.deps(TaskId(i as u32)).all(|d| end[d.0 as usize].is_some_and(|e| e <= t))
    };
    let mut t = 0u64;
    while end.iter().any(|e| e.is_none()) {
        loop {
            let mut changed = false;
            for i in 0..n {
                if start[i].is_none() && tasks.tasks[i].resource.is_none() && deps_done(&end, i, t) {
                    start[i] = Some(t);
                    end[i] = Some(t);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for r in 0..n_resources as u32 {
            let on_r = |i: &usize| tasks.tasks[*i].resource == Some(ResourceId(r));
            let busy = (0..n)
                .filter(on_r)
                .any(|i| start[i].is_some_and(|s| s <= t) && end[i].is_some_and(|e| e > t));
            if busy {
                continue;
            }
            let best = (0..n)
                .filter(on_r)
                .filter(|&i| start[i].is_none() && deps_done(&end, i, t))
                .min_by_key(|&i| (tasks.tasks[i].priority, i));
            if let Some(i) = best {
                start[i] = Some(t);
                end[i] = Some(t + tasks.tasks[i].duration);
            }
        }
        let next = (0..n).filter_map(|i| end[i]).filter(|&e| e > t).min();
        let blocked = next.is_none() && start.iter().any(|s| s.is_none());
        assert!(!blocked, "reference schedule stalled: cycle or unknown resource");
        t += 1;
    }
    start.into_iter().map(|s| s.unwrap_or(0)).collect()
}

/// Checks the two timeline invariants: no overlap on a resource and no task
/// starting before a dependency ends. Returns the first violation found.
pub fn verify_timeline(tasks: &TaskSet, tl: &Timeline) -> std::result::Result<(), String> {
    for (i, t) in tasks.iter() {
        let (s, e) = tl.interval(i);
        if e != s + t.duration {
            return Err(format!("task {} runs {} cycles, expected {}", i.0, e - s, t.duration));
        }
        for d in tasks.deps(i) {
            if tl.end[d.0 as usize] > s {
                return Err(format!("task {} starts at {s} before dependency {} ends", i.0, d.0));
            }
        }
    }
    for (r, ids) in tl.per_resource.iter().enumerate() {
        for w in ids.windows(2) {
            let (a, b) = (w[0] as usize, w[1] as usize);
            if tl.end[a] > tl.start[b] {
                return Err(format!("resource {r}: tasks {a} and {b} overlap"));
            }
        }
    }
    Ok(())
}

/// Tasks on the critical path, from the first to the final one. Each step
/// back prefers the dependency ending exactly at the task's start, else the
/// task that occupied the same resource until then.
pub fn critical_path(tasks: &TaskSet, tl: &Timeline) -> Vec<TaskId> {
    if tasks.is_empty() {
        return Vec::new();
    }
    let mut resource_pred = vec![u32::MAX; tasks.len()];
    for ids in &tl.per_resource {
        for w in ids.windows(2) {
            resource_pred[w[1] as usize] = w[0];
        }
    }
    let key = |i: usize| (tasks.tasks[i].priority, i);
    let mut cur = (0..tasks.len())
        .filter(|&i| tl.end[i] == tl.end_cycle)
        .min_by_key(|&i| key(i))
        .unwrap();
    let mut path = vec![TaskId(cur as u32)];
    loop {
        let s = tl.start[cur];
        let via_dep = tasks
            .deps(TaskId(cur as u32))
            .map(|d| d.0 as usize)
            .filter(|&d| tl.end[d] == s)
            .min_by_key(|&d| key(d));
        let next = via_dep.or_else(|| {
            let p = resource_pred[cur];
            (p != u32::MAX && tl.end[p as usize] == s).then_some(p as usize)
        });
        match next {
            Some(p) => {
                path.push(TaskId(p as u32));
                cur = p;
            }
            None => break,
        }
    }
    path.reverse();
    path
}

/// Critical-path cycles per op class, indexed by [`OpClass::index`]. Idle
/// gaps (a path that does not reach cycle 0) are charged to no class.
pub fn critical_by_class(tasks: &TaskSet, tl: &Timeline) -> [u64; 6] {
    let mut out = [0u64; 6];
    for id in critical_path(tasks, tl) {
        let t = tasks.task(id);
        out[t.op_class.index()] += t.duration;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(resource: Option<u32>, duration: u64, node: u32) -> Task {
        Task {
            node,
            resource: resource.map(ResourceId),
            duration,
            op_class: OpClass::NonLinear,
            priority: Priority {
                node,
                ..Priority::default()
            },
        }
    }

    #[test]
    fn chain_end_and_attribution() {
        let mut ts = TaskSet::new();
        let a = ts.push(task(Some(0), 5, 0), &[]);
        let b = ts.push(task(Some(1), 7, 1), &[a]);
        ts.push(task(Some(0), 3, 2), &[b]);
        let tl = schedule(&ts, 2).unwrap();
        assert_eq!(tl.end_cycle, 15);
        assert_eq!(critical_path(&ts, &tl).len(), 3);
        assert_eq!(critical_by_class(&ts, &tl).iter().sum::<u64>(), 15);
    }

    #[test]
    fn shared_resource_serializes_by_priority() {
        let mut ts = TaskSet::new();
        ts.push(task(Some(0), 4, 9), &[]);
        ts.push(task(Some(0), 4, 2), &[]);
        let tl = schedule(&ts, 1).unwrap();
        assert_eq!(tl.start, vec![4, 0]);
        assert_eq!(tl.per_resource[0], vec![1, 0]);
    }

    #[test]
    fn cycle_detected() {
        let mut ts = TaskSet::new();
        ts.push(task(Some(0), 1, 0), &[TaskId(1)]);
        ts.push(task(Some(0), 1, 1), &[TaskId(0)]);
        assert!(matches!(schedule(&ts, 1), Err(Error::Cycle { unscheduled: 2 })));
    }

    #[test]
    fn unknown_resource() {
        let mut ts = TaskSet::new();
        ts.push(task(Some(3), 1, 0), &[]);
        assert!(matches!(
            schedule(&ts, 2),
            Err(Error::UnknownResource { task: 0, resource: 3 })
        ));
    }

    #[test]
    fn joins_and_zero_durations() {
        let mut ts = TaskSet::new();
        let a = ts.push(task(Some(0), 3, 0), &[]);
        let b = ts.push(task(Some(1), 0, 1), &[]);
        let j = ts.push(task(None, 0, 2), &[a, b]);
        let c = ts.push(task(Some(1), 2, 3), &[j]);
        let tl = schedule(&ts, 2).unwrap();
        assert_eq!(tl.interval(j), (3, 3));
        assert_eq!(tl.interval(c), (3, 5));
        verify_timeline(&ts, &tl).unwrap();
    }

    #[test]
    fn empty_set() {
        let tl = schedule(&TaskSet::new(), 4).unwrap();
        assert_eq!(tl.end_cycle, 0);
        assert!(critical_path(&TaskSet::new(), &tl).is_empty());
    }
}
