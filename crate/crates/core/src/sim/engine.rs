use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::slots::IdSet;
use super::{
    gate_decision, revenue_accrue, route_decision, weighted_class_choice, ClassMetrics, MetricsRecord, Pool,
    RouteTarget, SimConfig, SimError,
};
use crate::model::{derive_rates, Instance};
use crate::planner::{derive_policy_params, FluidPlan};
use crate::policy::{Admission, PolicyKind, Routing};

const STREAM_ARRIVALS: u64 = 1;
const STREAM_SERVICES: u64 = 2;
const STREAM_PATIENCE: u64 = 3;
const STREAM_ROUTING: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn exp_draw<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Aggregate decode completion clock of one GPU.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeClock {
    /// Bumped on every redraw; events carrying an older value are stale.
    pub generation: u64,
    /// Summed completion rate of the residents.
    pub rate: f64,
}

/// Invalidates the pending completion of `clock` and redraws it at `rate`.
/// Returns the new firing time, or `None` when nothing is resident.
pub fn mode_switch_resample<R: Rng>(clock: &mut DecodeClock, now: f64, rate: f64, rng: &mut R) -> Option<f64> {
    clock.generation += 1;
    clock.rate = rate;
    (rate > 0.0).then(|| now + exp_draw(rng, rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Mixed,
    Solo,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Free,
    PrefillQueue,
    Prefill,
    DecodeQueue,
    Decode,
}

#[derive(Debug, Clone)]
struct Job {
    uid: u64,
    class: usize,
    phase: Phase,
    pool: usize,
}

#[derive(Debug, Clone)]
struct Gpu {
    group: Group,
    prefill: Option<u32>,
    residents: Vec<u32>,
    clock: DecodeClock,
    dirty: bool,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Arrival(usize),
    PrefillDone { gpu: u32, uid: u64 },
    DecodeDone { gpu: u32, generation: u64 },
    Abandon { job: u32, uid: u64 },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    job: u32,
    uid: u64,
    seq: u64,
}

#[derive(Debug, Clone, Default)]
struct Counts {
    arrivals: Vec<u64>,
    admitted: Vec<u64>,
    prefill_done: Vec<u64>,
    prefill_abandoned: Vec<u64>,
    decode_started: Vec<u64>,
    decode_done: Vec<u64>,
    decode_abandoned: Vec<u64>,
}

impl Counts {
    fn new(ni: usize) -> Self {
        let z = vec![0u64; ni];
        Self {
            arrivals: z.clone(),
            admitted: z.clone(),
            prefill_done: z.clone(),
            prefill_abandoned: z.clone(),
            decode_started: z.clone(),
            decode_done: z.clone(),
            decode_abandoned: z,
        }
    }
}

pub(super) struct Engine<'a> {
    inst: &'a Instance<f64>,
    cfg: &'a SimConfig,
    policy: PolicyKind,
    admission: Admission,
    routing: Routing,
    ni: usize,
    n: usize,
    b: usize,
    mixed_gpus: usize,
    lambda: Vec<f64>,
    theta: Vec<f64>,
    mu_p: Vec<f64>,
    mu_m: Vec<f64>,
    mu_s: Vec<f64>,
    x_target: Vec<f64>,
    queue_targets: Vec<i64>,
    solo_probs: Vec<f64>,
    weights: [Vec<f64>; 2],
    priority_order: Vec<usize>,

    rng_arrivals: ChaCha8Rng,
    rng_services: ChaCha8Rng,
    rng_patience: ChaCha8Rng,
    rng_routing: ChaCha8Rng,

    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    last: f64,
    t0: f64,

    jobs: Vec<Job>,
    free_jobs: Vec<u32>,
    next_uid: u64,
    prefill_q: Vec<VecDeque<Entry>>,
    decode_q: [Vec<VecDeque<Entry>>; 2],
    qp: Vec<usize>,
    qd_pool: [Vec<usize>; 2],
    qd: Vec<usize>,

    gpus: Vec<Gpu>,
    dirty: Vec<u32>,
    free_decode: [IdSet; 2],
    idle_prefill: IdSet,
    x: Vec<usize>,
    ym: Vec<usize>,
    ys: Vec<usize>,

    total: Counts,
    window: Counts,
    ix: Vec<f64>,
    iym: Vec<f64>,
    iys: Vec<f64>,
    iqp: Vec<f64>,
    iqd: Vec<f64>,

    last_admitted: Vec<u64>,
    audit_error: Option<String>,
    events: u64,
}

impl<'a> Engine<'a> {
    pub fn new(inst: &'a Instance<f64>, plan: Option<&FluidPlan<f64>>, policy: PolicyKind, cfg: &'a SimConfig) -> Self {
        let ni = inst.num_classes();
        let n = cfg.n;
        let b = inst.hardware.batch_cap;
        let rates = derive_rates(inst);
        let params = plan.map(|p| derive_policy_params(p, n, inst));
        let mixed_gpus = match (&params, policy.static_planning()) {
            (Some(p), true) => p.mixed_gpus,
            _ => 0,
        };
        let groups: Vec<Group> = (0..n)
            .map(|g| {
                if !policy.static_planning() {
                    Group::Dynamic
                } else if g < mixed_gpus {
                    Group::Mixed
                } else {
                    Group::Solo
                }
            })
            .collect();
        let (x_target, queue_targets, solo_probs, weights, priority) = match (plan, &params) {
            (Some(p), Some(pp)) => (
                p.x.clone(),
                pp.prefill_queue_targets.clone(),
                pp.solo_probs.clone(),
                [pp.pool_weights_mixed.clone(), pp.pool_weights_solo.clone()],
                pp.priority_index.clone(),
            ),
            _ => (
                vec![0.0; ni],
                vec![0; ni],
                vec![1.0; ni],
                [vec![0.0; ni], vec![0.0; ni]],
                inst.classes.iter().map(|c| c.decode_len / c.prompt_len).collect(),
            ),
        };
        let mut priority_order: Vec<usize> = (0..ni).collect();
        priority_order.sort_by(|&a, &c| priority[c].total_cmp(&priority[a]).then(a.cmp(&c)));

        let mut engine = Self {
            inst,
            cfg,
            policy,
            admission: policy.admission(),
            routing: policy.routing(),
            ni,
            n,
            b,
            mixed_gpus,
            lambda: inst.classes.iter().map(|c| c.arrival_rate).collect(),
            theta: inst.classes.iter().map(|c| c.patience_rate).collect(),
            mu_p: rates.prefill,
            mu_m: rates.mixed,
            mu_s: rates.solo,
            x_target,
            queue_targets,
            solo_probs,
            weights,
            priority_order,
            rng_arrivals: stream(cfg.seed, STREAM_ARRIVALS),
            rng_services: stream(cfg.seed, STREAM_SERVICES),
            rng_patience: stream(cfg.seed, STREAM_PATIENCE),
            rng_routing: stream(cfg.seed, STREAM_ROUTING),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            last: 0.0,
            t0: cfg.horizon * cfg.warmup,
            jobs: Vec::new(),
            free_jobs: Vec::new(),
            next_uid: 0,
            prefill_q: vec![VecDeque::new(); ni],
            decode_q: [vec![VecDeque::new(); ni], vec![VecDeque::new(); ni]],
            qp: vec![0; ni],
            qd_pool: [vec![0; ni], vec![0; ni]],
            qd: vec![0; ni],
            gpus: groups
                .into_iter()
                .map(|group| Gpu {
                    group,
                    prefill: None,
                    residents: Vec::with_capacity(b),
                    clock: DecodeClock::default(),
                    dirty: false,
                })
                .collect(),
            dirty: Vec::new(),
            free_decode: [IdSet::new(n), IdSet::new(n)],
            idle_prefill: IdSet::new(n),
            x: vec![0; ni],
            ym: vec![0; ni],
            ys: vec![0; ni],
            total: Counts::new(ni),
            window: Counts::new(ni),
            ix: vec![0.0; ni],
            iym: vec![0.0; ni],
            iys: vec![0.0; ni],
            iqp: vec![0.0; ni],
            iqd: vec![0.0; ni],
            last_admitted: vec![0; ni],
            audit_error: None,
            events: 0,
        };
        for g in 0..n as u32 {
            engine.refresh(g);
        }
        engine
    }

    pub fn run(mut self) -> Result<MetricsRecord, SimError> {
        for i in 0..self.ni {
            self.schedule_arrival(i);
        }
        while let Some(ev) = self.heap.pop() {
            if ev.time > self.cfg.horizon {
                break;
            }
            self.advance(ev.time);
            self.handle(ev.kind);
            self.flush_clocks();
            self.events += 1;
            if self.cfg.audit {
                self.audit()?;
            }
        }
        self.advance(self.cfg.horizon);
        Ok(self.record())
    }

    fn push(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn advance(&mut self, t: f64) {
        let from = self.last.max(self.t0);
        if t > from {
            let dt = t - from;
            for i in 0..self.ni {
                self.ix[i] += self.x[i] as f64 * dt;
                self.iym[i] += self.ym[i] as f64 * dt;
                self.iys[i] += self.ys[i] as f64 * dt;
                self.iqp[i] += self.qp[i] as f64 * dt;
                self.iqd[i] += self.qd[i] as f64 * dt;
            }
        }
        self.last = t;
        self.now = t;
    }

    fn in_window(&self) -> bool {
        self.now >= self.t0
    }

    fn schedule_arrival(&mut self, class: usize) {
        let rate = self.lambda[class] * self.n as f64;
        if rate > 0.0 {
            let t = self.now + exp_draw(&mut self.rng_arrivals, rate);
            self.push(t, Kind::Arrival(class));
        }
    }

    fn handle(&mut self, kind: Kind) {
        match kind {
            Kind::Arrival(c) => self.on_arrival(c),
            Kind::PrefillDone { gpu, uid } => self.on_prefill_done(gpu, uid),
            Kind::DecodeDone { gpu, generation } => {
                if self.gpus[gpu as usize].clock.generation == generation {
                    self.on_decode_done(gpu);
                }
            }
            Kind::Abandon { job, uid } => self.on_abandon(job, uid),
        }
    }

    fn on_arrival(&mut self, c: usize) {
        self.schedule_arrival(c);
        let j = self.new_job(c);
        self.total.arrivals[c] += 1;
        if self.in_window() {
            self.window.arrivals[c] += 1;
        }
        let entry = self.entry(j);
        self.prefill_q[c].push_back(entry);
        self.qp[c] += 1;
        self.jobs[j as usize].phase = Phase::PrefillQueue;
        self.start_patience(j);
        self.admit_anywhere();
    }

    fn on_prefill_done(&mut self, g: u32, uid: u64) {
        let Some(j) = self.gpus[g as usize].prefill else { return };
        if self.jobs[j as usize].uid != uid {
            return;
        }
        self.end_prefill(g);
        let c = self.jobs[j as usize].class;
        self.total.prefill_done[c] += 1;
        if self.in_window() {
            self.window.prefill_done[c] += 1;
        }
        match self.routing {
            Routing::Coupled => {
                self.add_resident(g, j);
                self.try_admit_on(g);
            }
            Routing::Decoupled => {
                self.try_admit_on(g);
                self.pull_decode(g);
                self.route(j);
            }
            _ => {
                self.route(j);
                self.try_admit_on(g);
            }
        }
    }

    fn on_decode_done(&mut self, g: u32) {
        let gpu = &self.gpus[g as usize];
        let mixed_mode = gpu.prefill.is_some();
        let rates = if mixed_mode { &self.mu_m } else { &self.mu_s };
        let mut u = self.rng_services.random::<f64>() * gpu.clock.rate;
        let mut pick = gpu.residents.len() - 1;
        for (k, &j) in gpu.residents.iter().enumerate() {
            u -= rates[self.jobs[j as usize].class];
            if u < 0.0 {
                pick = k;
                break;
            }
        }
        let j = self.remove_resident(g, pick);
        let c = self.jobs[j as usize].class;
        self.total.decode_done[c] += 1;
        if self.in_window() {
            self.window.decode_done[c] += 1;
        }
        self.free_job(j);
        match self.routing {
            Routing::Coupled => self.try_admit_on(g),
            Routing::Decoupled => {
                self.try_admit_on(g);
                self.pull_decode(g);
            }
            _ => self.pull_decode(g),
        }
    }

    fn on_abandon(&mut self, j: u32, uid: u64) {
        let job = self.jobs[j as usize].clone();
        if job.uid != uid {
            return;
        }
        let c = job.class;
        let win = self.in_window();
        match job.phase {
            Phase::PrefillQueue => {
                self.qp[c] -= 1;
                self.total.prefill_abandoned[c] += 1;
                if win {
                    self.window.prefill_abandoned[c] += 1;
                }
            }
            Phase::DecodeQueue => {
                self.qd_pool[job.pool][c] -= 1;
                self.qd[c] -= 1;
                self.total.decode_abandoned[c] += 1;
                if win {
                    self.window.decode_abandoned[c] += 1;
                }
            }
            _ => return,
        }
        self.free_job(j);
    }

    fn new_job(&mut self, class: usize) -> u32 {
        self.next_uid += 1;
        let job = Job {
            uid: self.next_uid,
            class,
            phase: Phase::Free,
            pool: 0,
        };
        match self.free_jobs.pop() {
            Some(j) => {
                self.jobs[j as usize] = job;
                j
            }
            None => {
                self.jobs.push(job);
                (self.jobs.len() - 1) as u32
            }
        }
    }

    fn free_job(&mut self, j: u32) {
        self.jobs[j as usize].phase = Phase::Free;
        self.free_jobs.push(j);
    }

    fn entry(&mut self, j: u32) -> Entry {
        self.seq += 1;
        Entry {
            job: j,
            uid: self.jobs[j as usize].uid,
            seq: self.seq,
        }
    }

    fn start_patience(&mut self, j: u32) {
        let c = self.jobs[j as usize].class;
        if self.theta[c] > 0.0 {
            let t = self.now + exp_draw(&mut self.rng_patience, self.theta[c]);
            let uid = self.jobs[j as usize].uid;
            self.push(t, Kind::Abandon { job: j, uid });
        }
    }

    fn valid(&self, e: &Entry, phase: Phase) -> bool {
        let job = &self.jobs[e.job as usize];
        job.uid == e.uid && job.phase == phase
    }

    fn prefill_head(&mut self, c: usize) -> Option<Entry> {
        while let Some(e) = self.prefill_q[c].front().copied() {
            if self.valid(&e, Phase::PrefillQueue) {
                return Some(e);
            }
            self.prefill_q[c].pop_front();
        }
        None
    }

    fn decode_head(&mut self, pool: usize, c: usize) -> Option<Entry> {
        while let Some(e) = self.decode_q[pool][c].front().copied() {
            if self.valid(&e, Phase::DecodeQueue) {
                return Some(e);
            }
            self.decode_q[pool][c].pop_front();
        }
        None
    }

    fn choose_prefill_class(&mut self) -> Option<usize> {
        match self.admission {
            Admission::Gate => gate_decision(&self.qp, &self.x, self.n, &self.x_target, &self.queue_targets),
            Admission::Priority => self.priority_order.iter().copied().find(|&i| self.qp[i] > 0),
            Admission::Fcfs => {
                let mut best: Option<(u64, usize)> = None;
                for c in 0..self.ni {
                    if self.qp[c] == 0 {
                        continue;
                    }
                    if let Some(e) = self.prefill_head(c) {
                        if best.is_none_or(|(s, _)| e.seq < s) {
                            best = Some((e.seq, c));
                        }
                    }
                }
                best.map(|(_, c)| c)
            }
        }
    }

    fn pop_prefill(&mut self, c: usize) -> u32 {
        let e = self.prefill_head(c).expect("class chosen with empty prefill queue");
        self.prefill_q[c].pop_front();
        self.qp[c] -= 1;
        e.job
    }

    fn can_start_prefill(&self, g: u32) -> bool {
        let gpu = &self.gpus[g as usize];
        match gpu.group {
            Group::Mixed => gpu.prefill.is_none(),
            Group::Solo => false,
            Group::Dynamic => gpu.prefill.is_none() && gpu.residents.len() < self.b,
        }
    }

    fn decode_room(&self, g: u32) -> usize {
        let gpu = &self.gpus[g as usize];
        let cap = match gpu.group {
            Group::Mixed => self.b - 1,
            Group::Solo => self.b,
            Group::Dynamic => self.b - usize::from(gpu.prefill.is_some()),
        };
        cap.saturating_sub(gpu.residents.len())
    }

    fn pool_of(&self, g: u32) -> usize {
        match self.gpus[g as usize].group {
            Group::Solo => Pool::Solo.index(),
            _ => Pool::Mixed.index(),
        }
    }

    fn refresh(&mut self, g: u32) {
        let idle = self.can_start_prefill(g);
        self.idle_prefill.set(g, idle);
        let pool = self.pool_of(g);
        let room = self.decode_room(g) > 0;
        self.free_decode[pool].set(g, room);
    }

    fn mark_dirty(&mut self, g: u32) {
        let gpu = &mut self.gpus[g as usize];
        if !gpu.dirty {
            gpu.dirty = true;
            self.dirty.push(g);
        }
    }

    fn flush_clocks(&mut self) {
        while let Some(g) = self.dirty.pop() {
            let gpu = &self.gpus[g as usize];
            let rates = if gpu.prefill.is_some() { &self.mu_m } else { &self.mu_s };
            let rate: f64 = gpu.residents.iter().map(|&j| rates[self.jobs[j as usize].class]).sum();
            let gpu = &mut self.gpus[g as usize];
            gpu.dirty = false;
            if let Some(t) = mode_switch_resample(&mut gpu.clock, self.now, rate, &mut self.rng_services) {
                let generation = gpu.clock.generation;
                self.push(t, Kind::DecodeDone { gpu: g, generation });
            }
        }
    }

    fn admit_anywhere(&mut self) {
        while !self.idle_prefill.is_empty() {
            let Some(c) = self.choose_prefill_class() else { break };
            let g = self.idle_prefill.choose(&mut self.rng_routing).expect("nonempty");
            let j = self.pop_prefill(c);
            self.start_prefill(g, j);
        }
    }

    fn try_admit_on(&mut self, g: u32) {
        if self.can_start_prefill(g) {
            if let Some(c) = self.choose_prefill_class() {
                let j = self.pop_prefill(c);
                self.start_prefill(g, j);
            }
        }
    }

    fn start_prefill(&mut self, g: u32, j: u32) {
        let (c, uid) = {
            let job = &mut self.jobs[j as usize];
            job.phase = Phase::Prefill;
            (job.class, job.uid)
        };
        if self.cfg.audit && uid <= self.last_admitted[c] && self.audit_error.is_none() {
            self.audit_error = Some(format!("class {c} admitted out of arrival order"));
        }
        self.last_admitted[c] = uid;
        self.total.admitted[c] += 1;
        let gpu = &mut self.gpus[g as usize];
        gpu.prefill = Some(j);
        for &r in &gpu.residents {
            let rc = self.jobs[r as usize].class;
            self.ys[rc] -= 1;
            self.ym[rc] += 1;
        }
        let switched = !gpu.residents.is_empty();
        self.x[c] += 1;
        let t = self.now + exp_draw(&mut self.rng_services, self.mu_p[c]);
        self.push(t, Kind::PrefillDone { gpu: g, uid });
        self.refresh(g);
        if switched {
            self.mark_dirty(g);
        }
    }

    fn end_prefill(&mut self, g: u32) {
        let gpu = &mut self.gpus[g as usize];
        let j = gpu.prefill.take().expect("active prefill");
        for &r in &gpu.residents {
            let rc = self.jobs[r as usize].class;
            self.ym[rc] -= 1;
            self.ys[rc] += 1;
        }
        let switched = !gpu.residents.is_empty();
        self.x[self.jobs[j as usize].class] -= 1;
        self.refresh(g);
        if switched {
            self.mark_dirty(g);
        }
    }

    fn add_resident(&mut self, g: u32, j: u32) {
        let c = self.jobs[j as usize].class;
        self.jobs[j as usize].phase = Phase::Decode;
        let gpu = &mut self.gpus[g as usize];
        gpu.residents.push(j);
        if gpu.prefill.is_some() {
            self.ym[c] += 1;
        } else {
            self.ys[c] += 1;
        }
        self.total.decode_started[c] += 1;
        self.refresh(g);
        self.mark_dirty(g);
    }

    fn remove_resident(&mut self, g: u32, k: usize) -> u32 {
        let gpu = &mut self.gpus[g as usize];
        let j = gpu.residents.swap_remove(k);
        let c = self.jobs[j as usize].class;
        if gpu.prefill.is_some() {
            self.ym[c] -= 1;
        } else {
            self.ys[c] -= 1;
        }
        self.refresh(g);
        self.mark_dirty(g);
        j
    }

    fn route(&mut self, j: u32) {
        let c = self.jobs[j as usize].class;
        let u = if matches!(self.routing, Routing::Pool | Routing::PoolWeighted) {
            self.rng_routing.random::<f64>()
        } else {
            0.0
        };
        let free_solo = !self.free_decode[Pool::Solo.index()].is_empty();
        let free_mixed = !self.free_decode[Pool::Mixed.index()].is_empty();
        match route_decision(self.routing, self.solo_probs[c], u, free_solo, free_mixed) {
            Some(RouteTarget::Gpu(pool)) => {
                let g = self.free_decode[pool.index()]
                    .choose(&mut self.rng_routing)
                    .expect("free slot");
                self.add_resident(g, j);
            }
            Some(RouteTarget::Buffer(pool)) => {
                let p = pool.index();
                let entry = self.entry(j);
                self.decode_q[p][c].push_back(entry);
                self.qd_pool[p][c] += 1;
                self.qd[c] += 1;
                let job = &mut self.jobs[j as usize];
                job.phase = Phase::DecodeQueue;
                job.pool = p;
                self.start_patience(j);
            }
            None => unreachable!("coupled routing keeps the prefill slot"),
        }
    }

    fn pull_decode(&mut self, g: u32) {
        let pool = match self.routing {
            Routing::Pool | Routing::PoolWeighted => self.pool_of(g),
            _ => Pool::Mixed.index(),
        };
        while self.decode_room(g) > 0 {
            let mut class = None;
            if self.routing == Routing::PoolWeighted {
                let nonempty: Vec<bool> = (0..self.ni).map(|c| self.qd_pool[pool][c] > 0).collect();
                if nonempty.iter().any(|&b| b) {
                    let u = self.rng_routing.random::<f64>();
                    class = weighted_class_choice(&self.weights[pool], &nonempty, u);
                }
            }
            if class.is_none() {
                let mut best: Option<(u64, usize)> = None;
                for c in 0..self.ni {
                    if self.qd_pool[pool][c] == 0 {
                        continue;
                    }
                    if let Some(e) = self.decode_head(pool, c) {
                        if best.is_none_or(|(s, _)| e.seq < s) {
                            best = Some((e.seq, c));
                        }
                    }
                }
                class = best.map(|(_, c)| c);
            }
            let Some(c) = class else { break };
            let e = self.decode_head(pool, c).expect("nonempty decode buffer");
            self.decode_q[pool][c].pop_front();
            self.qd_pool[pool][c] -= 1;
            self.qd[c] -= 1;
            self.add_resident(g, e.job);
        }
    }

    fn audit(&mut self) -> Result<(), SimError> {
        let fail = |t: f64, what: String| Err(SimError::Audit { t, what });
        if let Some(what) = self.audit_error.take() {
            return fail(self.now, what);
        }
        let t = &self.total;
        for c in 0..self.ni {
            let qp = t.arrivals[c] - t.admitted[c] - t.prefill_abandoned[c];
            let x = t.admitted[c] - t.prefill_done[c];
            let qd = t.prefill_done[c] - t.decode_started[c] - t.decode_abandoned[c];
            let y = t.decode_started[c] - t.decode_done[c];
            if qp != self.qp[c] as u64
                || x != self.x[c] as u64
                || qd != self.qd[c] as u64
                || y != (self.ym[c] + self.ys[c]) as u64
            {
                return fail(self.now, format!("flow balance broken for class {c}"));
            }
        }
        let mut x = vec![0usize; self.ni];
        let mut ym = vec![0usize; self.ni];
        let mut ys = vec![0usize; self.ni];
        for g in 0..self.n as u32 {
            let gpu = &self.gpus[g as usize];
            let cap = match gpu.group {
                Group::Mixed => self.b - 1,
                Group::Solo => self.b,
                Group::Dynamic => self.b - usize::from(gpu.prefill.is_some()),
            };
            if gpu.residents.len() > cap || (gpu.group == Group::Solo && gpu.prefill.is_some()) {
                return fail(self.now, format!("GPU {g} exceeds its slot limit"));
            }
            if let Some(j) = gpu.prefill {
                x[self.jobs[j as usize].class] += 1;
            }
            for &j in &gpu.residents {
                let c = self.jobs[j as usize].class;
                if gpu.prefill.is_some() {
                    ym[c] += 1;
                } else {
                    ys[c] += 1;
                }
            }
            if self.idle_prefill.contains(g) != self.can_start_prefill(g)
                || self.free_decode[self.pool_of(g)].contains(g) != (self.decode_room(g) > 0)
            {
                return fail(self.now, format!("GPU {g} free-slot index stale"));
            }
        }
        if x != self.x || ym != self.ym || ys != self.ys {
            return fail(self.now, "occupancy counters disagree with GPU scan".into());
        }
        for c in 0..self.ni {
            let live = self.prefill_q[c].iter().filter(|e| self.valid(e, Phase::PrefillQueue)).count();
            if live != self.qp[c] {
                return fail(self.now, format!("prefill queue {c} holds {live}, counter {}", self.qp[c]));
            }
            for p in 0..2 {
                let live = self.decode_q[p][c].iter().filter(|e| self.valid(e, Phase::DecodeQueue)).count();
                if live != self.qd_pool[p][c] {
                    return fail(self.now, format!("decode buffer ({p}, {c}) holds {live}"));
                }
            }
        }
        Ok(())
    }

    fn record(&self) -> MetricsRecord {
        let window = self.cfg.horizon - self.t0;
        let scale = window * self.n as f64;
        let ni = self.ni;
        let classes = (0..ni)
            .map(|c| ClassMetrics {
                x_occ: self.ix[c] / scale,
                ym_occ: self.iym[c] / scale,
                ys_occ: self.iys[c] / scale,
                qp_scaled: self.iqp[c] / scale,
                qd_scaled: self.iqd[c] / scale,
                arrivals: self.window.arrivals[c],
                prefill_done: self.window.prefill_done[c],
                decode_done: self.window.decode_done[c],
                prefill_abandoned: self.window.prefill_abandoned[c],
                decode_abandoned: self.window.decode_abandoned[c],
            })
            .collect();
        let hw = &self.inst.hardware;
        let ym: f64 = self.iym.iter().sum();
        let ys: f64 = self.iys.iter().sum();
        let tpot = if ym + ys > 0.0 {
            (hw.tau() * ym + hw.tau_solo() * ys) / (ym + ys)
        } else {
            0.0
        };
        MetricsRecord {
            policy: self.policy,
            n: self.n,
            seed: self.cfg.seed,
            horizon: self.cfg.horizon,
            window,
            scheme: self.inst.pricing.scheme,
            rev_per_gpu: revenue_accrue(self.inst, &self.window.prefill_done, &self.window.decode_done) / scale,
            tpot_avg: tpot,
            classes,
            mixed_gpus: self.mixed_gpus,
            events: self.events,
        }
    }
}
