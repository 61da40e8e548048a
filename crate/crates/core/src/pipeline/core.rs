use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use smallvec::SmallVec;

use super::{CoreOptions, EventKind, RunResult, Terminal, TraceEvent};
use crate::isa::{DecodedProgram, MicroOp, Reg, UopKind, NUM_GPRS, NUM_REGS};
use crate::memory::{
    access, AccessOutcome, CacheState, FaultKind, LoadBuffer, LoadRequest, Memory, MemoryMap, MissBuffer, Noise,
    Privilege,
};
use crate::uarch::{Direction, MicroArchProfile, PredictorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Tag {
    seq: u64,
    uid: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Waiting,
    Executing,
    Done,
    /// A faulting load that will never complete.
    Stalled,
}

/// Results due within this many cycles count as known to fetch.
const IMMINENT_HORIZON: u64 = 4;

type RenameTable = [Option<Tag>; NUM_REGS];

struct Entry {
    tag: Tag,
    idx: usize,
    status: Status,
    vals: [u64; 4],
    pending: u8,
    result: u64,
    zf: bool,
    fault: Option<FaultKind>,
    holds_lb: bool,
    addr: u64,
    store_value: u64,
    /// Predicted direction of an unresolved conditional branch.
    predicted: Option<bool>,
    taken: bool,
    snapshot: Option<Box<RenameTable>>,
    waiters: SmallVec<[(Tag, u8); 2]>,
    /// Completion cycle once executing.
    done_at: u64,
    /// Producers this entry was still waiting on when it was fetched.
    deps: [Option<Tag>; 4],
}

/// Per-kind latency and port masks, precomputed from the profile.
struct Timing {
    latency: [u64; 13],
    ports: [u32; 13],
    all_ports: u32,
}

impl Timing {
    fn new(p: &MicroArchProfile) -> Timing {
        let mut t = Timing { latency: [1; 13], ports: [1; 13], all_ports: 0 };
        for kind in UopKind::ALL {
            let i = kind.index();
            t.latency[i] = p.latency(kind) as u64;
            t.ports[i] = p.port_map.get(kind.name()).map_or(1, |ps| ps.iter().fold(0, |m, &p| m | 1 << p));
            t.all_ports |= t.ports[i];
        }
        t
    }
}

/// One simulated core. Cache, predictor, committed memory and the cycle
/// counter persist across [`Core::run`] calls; everything else is reset.
pub struct Core {
    profile: Arc<MicroArchProfile>,
    timing: Timing,
    options: CoreOptions,
    memory: Memory,
    cache: CacheState,
    predictor: PredictorState,
    lb: LoadBuffer,
    mb: MissBuffer,
    noise: Option<Noise>,
    cycle: u64,

    uops: Arc<[MicroOp]>,
    code_base: u64,
    rob: VecDeque<Entry>,
    head_seq: u64,
    next_seq: u64,
    next_uid: u64,
    rename: RenameTable,
    arch: [u64; NUM_REGS],
    completions: BinaryHeap<Reverse<(u64, Tag)>>,
    ready: BinaryHeap<Reverse<Tag>>,
    parked: Vec<Tag>,
    unpark: bool,
    stores: VecDeque<u64>,
    pc: usize,
    fetch_resume: u64,
    serializing: bool,
    quiesced: bool,
    unresolved: usize,
    max_depth: usize,
    committed: u64,
    flushed: u64,
    events: Vec<TraceEvent>,
    terminal: Option<Terminal>,
}

impl Core {
    pub fn new(profile: &MicroArchProfile, map: Arc<MemoryMap>, options: CoreOptions) -> Core {
        let noise = options.noise.map(|n| Noise::new(n, options.seed));
        Core {
            timing: Timing::new(profile),
            memory: Memory::new(map),
            cache: CacheState::new(),
            predictor: PredictorState::new(profile.static_forward),
            lb: LoadBuffer::new(profile.load_buffer_entries),
            mb: MissBuffer::new(profile.parallel_miss_slots),
            noise,
            cycle: 0,
            uops: Arc::from(Vec::new()),
            code_base: 0,
            rob: VecDeque::with_capacity(profile.rob_entries),
            head_seq: 0,
            next_seq: 0,
            next_uid: 0,
            rename: [None; NUM_REGS],
            arch: [0; NUM_REGS],
            completions: BinaryHeap::new(),
            ready: BinaryHeap::new(),
            parked: Vec::new(),
            unpark: false,
            stores: VecDeque::new(),
            pc: 0,
            fetch_resume: 0,
            serializing: false,
            quiesced: false,
            unresolved: 0,
            max_depth: 0,
            committed: 0,
            flushed: 0,
            events: Vec::new(),
            terminal: None,
            profile: Arc::new(profile.clone()),
            options,
        }
    }

    pub fn profile(&self) -> &MicroArchProfile {
        &self.profile
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut CacheState {
        &mut self.cache
    }

    pub fn predictor(&self) -> &PredictorState {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut PredictorState {
        &mut self.predictor
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    /// Runs `prog` to completion from the current cycle.
    pub fn run(&mut self, prog: &DecodedProgram) -> RunResult {
        self.reset(prog);
        let start = self.cycle;
        let deadline = start.saturating_add(self.options.cycle_budget);
        loop {
            self.step();
            if self.terminal.is_some() {
                break;
            }
            match self.next_cycle() {
                Some(next) if next <= deadline => self.cycle = next,
                _ => {
                    self.cycle = deadline.max(self.cycle);
                    self.terminal = Some(Terminal::CycleBudgetExceeded);
                    break;
                }
            }
        }
        self.finish(start)
    }

    fn reset(&mut self, prog: &DecodedProgram) {
        self.uops = prog.uops.clone();
        self.code_base = prog.code_base;
        self.rob.clear();
        self.head_seq = 0;
        self.next_seq = 0;
        self.rename = [None; NUM_REGS];
        self.arch = [0; NUM_REGS];
        for &(r, v) in &prog.init_regs {
            self.arch[r.index()] = v;
        }
        self.completions.clear();
        self.ready.clear();
        self.parked.clear();
        self.unpark = false;
        self.stores.clear();
        self.lb.reset();
        self.mb.reset();
        self.pc = prog.entry;
        self.fetch_resume = self.cycle;
        self.serializing = false;
        self.quiesced = false;
        self.unresolved = 0;
        self.max_depth = 0;
        self.committed = 0;
        self.flushed = 0;
        self.events.clear();
        self.terminal = None;
    }

    fn finish(&mut self, start: u64) -> RunResult {
        // whatever is still in flight never commits
        self.flushed += self.rob.len() as u64;
        self.rob.clear();
        self.lb.reset();
        self.mb.reset();
        let mut registers = [0; NUM_GPRS];
        registers.copy_from_slice(&self.arch[..NUM_GPRS]);
        let capture = self.options.capture_state;
        RunResult {
            registers,
            start_cycle: start,
            end_cycle: self.cycle,
            committed: self.committed,
            flushed: self.flushed,
            max_speculation_depth: self.max_depth,
            cache: if capture { self.cache.snapshot() } else { Default::default() },
            memory_writes: if capture { self.memory.writes() } else { Default::default() },
            events: std::mem::take(&mut self.events),
            terminal: self.terminal.expect("run ended with a terminal state"),
        }
    }

    fn uop(&self, idx: usize) -> MicroOp {
        self.uops[idx]
    }

    fn branch_address(&self, idx: usize) -> u64 {
        self.code_base.wrapping_add(self.uops[idx].parent as u64 * 4)
    }

    fn trace(&mut self, kind: EventKind) {
        if self.options.trace {
            self.events.push(TraceEvent { cycle: self.cycle, kind });
        }
    }

    fn index_of(&self, tag: Tag) -> Option<usize> {
        let i = tag.seq.wrapping_sub(self.head_seq) as usize;
        match self.rob.get(i) {
            Some(e) if e.tag.uid == tag.uid => Some(i),
            _ => None,
        }
    }

    fn step(&mut self) {
        self.complete();
        if self.terminal.is_some() {
            return;
        }
        self.commit();
        if self.terminal.is_some() {
            return;
        }
        self.dispatch();
        self.fetch();
        let prog_len = self.uops.len();
        if self.rob.is_empty() && self.pc >= prog_len {
            self.terminal = Some(Terminal::Exited);
        }
    }

    fn next_cycle(&self) -> Option<u64> {
        let now = self.cycle;
        let mut next = u64::MAX;
        if !self.ready.is_empty() || self.unpark {
            next = now + 1;
        }
        if let Some(head) = self.rob.front() {
            if matches!(head.status, Status::Done | Status::Stalled) {
                next = now + 1;
            }
        }
        if self.can_fetch() {
            next = next.min(self.fetch_resume.max(now + 1));
        }
        if let Some(Reverse((c, _))) = self.completions.peek() {
            next = next.min((*c).max(now + 1));
        }
        if !self.parked.is_empty() {
            if let Some(r) = self.mb.next_release(now) {
                next = next.min(r);
            }
        }
        (next != u64::MAX).then_some(next)
    }

    fn can_fetch(&self) -> bool {
        let prog_len = self.uops.len();
        !self.serializing && !self.quiesced && self.pc < prog_len && self.rob.len() < self.profile.rob_entries
    }

    // ---- completion and branch resolution ----

    fn complete(&mut self) {
        let mut branches: SmallVec<[Tag; 4]> = SmallVec::new();
        while let Some(&Reverse((c, tag))) = self.completions.peek() {
            if c > self.cycle {
                break;
            }
            self.completions.pop();
            let Some(i) = self.index_of(tag) else { continue };
            if self.rob[i].status != Status::Executing {
                continue;
            }
            self.rob[i].status = Status::Done;
            self.trace(EventKind::Complete { seq: tag.seq });
            let kind = self.uop(self.rob[i].idx).kind;
            if kind == UopKind::Load {
                self.unpark = true;
            }
            if kind == UopKind::BranchCond && self.rob[i].predicted.is_some() {
                branches.push(tag);
            }
            self.wake(i);
        }
        branches.sort();
        for tag in branches {
            if let Some(i) = self.index_of(tag) {
                self.resolve(i);
            }
        }
    }

    fn wake(&mut self, i: usize) {
        let waiters = std::mem::take(&mut self.rob[i].waiters);
        let (result, zf) = (self.rob[i].result, self.rob[i].zf);
        for (tag, slot) in waiters {
            let Some(ci) = self.index_of(tag) else { continue };
            let reg = self.uop(self.rob[ci].idx).sources().nth(slot as usize).expect("waiter slot");
            let c = &mut self.rob[ci];
            c.vals[slot as usize] = if reg == Reg::FLAGS { zf as u64 } else { result };
            c.pending -= 1;
            if c.pending == 0 && c.status == Status::Waiting {
                self.ready.push(Reverse(tag));
            }
        }
    }

    fn resolve(&mut self, i: usize) {
        let e = &self.rob[i];
        let (tag, idx, taken, predicted) = (e.tag, e.idx, e.taken, e.predicted.expect("predicted branch"));
        self.rob[i].predicted = None;
        self.unresolved -= 1;
        let u = self.uop(idx);
        let target = u.target.expect("branch target");
        let address = self.branch_address(idx);
        self.predictor.train(address, Direction::of(idx, target), taken);
        let mispredicted = taken != predicted;
        self.trace(EventKind::Resolve { seq: tag.seq, taken, mispredicted });
        if mispredicted {
            let snapshot = self.rob[i].snapshot.take().expect("branch snapshot");
            self.flush_after(i, *snapshot);
            self.pc = if taken { target } else { idx + 1 };
        } else {
            self.rob[i].snapshot = None;
        }
    }

    /// Removes every entry younger than `i` and restores the rename table.
    fn flush_after(&mut self, i: usize, snapshot: RenameTable) {
        let branch = self.rob[i].tag;
        let quiesced = self.quiesced;
        let mut count = 0u64;
        while self.rob.len() > i + 1 {
            let e = self.rob.pop_back().expect("non-empty");
            if e.holds_lb {
                self.lb.release(1);
            }
            if e.predicted.is_some() {
                self.unresolved -= 1;
            }
            count += 1;
        }
        self.mb.release_from(branch.uid + 1);
        while matches!(self.stores.back(), Some(&s) if s > branch.seq) {
            self.stores.pop_back();
        }
        self.parked.retain(|t| t.seq <= branch.seq);
        self.rename = snapshot;
        self.next_seq = branch.seq + 1;
        self.serializing = false;
        self.quiesced = false;
        self.unpark = true;
        self.flushed += count;

        let p = &self.profile;
        let mut cost = p.flush_base_cost as i64 + p.flush_per_uop_cost as i64 * count as i64;
        if quiesced {
            cost += p.flush_quiesced_modifier as i64;
        }
        let cost = cost.max(0) as u64;
        self.fetch_resume = self.cycle + cost;
        self.trace(EventKind::Flush { branch_seq: branch.seq, flushed: count, cost, quiesced });
    }

    // ---- commit ----

    fn commit(&mut self) {
        for _ in 0..self.profile.commit_width {
            let Some(head) = self.rob.front() else { return };
            match head.status {
                Status::Done => {}
                Status::Stalled => {
                    let (addr, fault) = (head.addr, head.fault.unwrap_or(FaultKind::NotMapped));
                    self.terminal = Some(Terminal::SegFault { addr, fault });
                    return;
                }
                _ => return,
            }
            if let Some(fault) = head.fault {
                self.terminal = Some(Terminal::SegFault { addr: head.addr, fault });
                return;
            }
            let e = self.rob.pop_front().expect("non-empty");
            let u = self.uop(e.idx);
            match u.kind {
                UopKind::Load => {
                    if e.holds_lb {
                        self.lb.release(1);
                    }
                }
                UopKind::Store => {
                    self.stores.pop_front();
                    if let Err(f) = self.memory.write(e.addr, u.width, e.store_value) {
                        self.terminal = Some(Terminal::SegFault { addr: f.addr, fault: f.kind });
                        self.head_seq += 1;
                        self.flushed += 1;
                        return;
                    }
                    self.cache.insert(e.addr);
                }
                UopKind::FlushLine => self.cache.flush_line(e.addr),
                UopKind::Serialize => self.serializing = false,
                _ => {}
            }
            if let Some(d) = u.dst {
                self.arch[d.reg.index()] = e.result;
                if self.rename[d.reg.index()] == Some(e.tag) {
                    self.rename[d.reg.index()] = None;
                }
            }
            if u.writes_flags {
                let f = Reg::FLAGS.index();
                self.arch[f] = e.zf as u64;
                if self.rename[f] == Some(e.tag) {
                    self.rename[f] = None;
                }
            }
            self.head_seq += 1;
            self.committed += 1;
            self.unpark = true;
            self.trace(EventKind::Commit { seq: e.tag.seq, instr: u.parent });
            if u.kind == UopKind::Halt {
                self.terminal = Some(Terminal::Exited);
                return;
            }
        }
    }

    // ---- dispatch ----

    fn dispatch(&mut self) {
        if self.unpark {
            self.unpark = false;
            for t in self.parked.drain(..) {
                self.ready.push(Reverse(t));
            }
        }
        let mut used = 0u32;
        let mut deferred: SmallVec<[Tag; 8]> = SmallVec::new();
        while used != self.timing.all_ports {
            let Some(Reverse(tag)) = self.ready.pop() else { break };
            let Some(i) = self.index_of(tag) else { continue };
            if self.rob[i].status != Status::Waiting {
                continue;
            }
            let u = self.uop(self.rob[i].idx);
            let free = self.timing.ports[u.kind.index()] & !used;
            if free == 0 {
                deferred.push(tag);
                continue;
            }
            if self.execute(i, &u) {
                used |= free & free.wrapping_neg();
                self.trace(EventKind::Dispatch { seq: tag.seq });
            } else {
                self.parked.push(tag);
            }
        }
        for t in deferred {
            self.ready.push(Reverse(t));
        }
    }

    /// Starts executing entry `i`. Returns false if it must wait for a
    /// resource or an ordering constraint.
    fn execute(&mut self, i: usize, u: &MicroOp) -> bool {
        let now = self.cycle;
        let tag = self.rob[i].tag;
        let vals = self.rob[i].vals;
        let mut latency = self.timing.latency[u.kind.index()];
        match u.kind {
            UopKind::Serialize if tag.seq != self.head_seq => return false,
            UopKind::ReadTsc { serializing: true } => {
                let blocked = self
                    .rob
                    .iter()
                    .take(i)
                    .any(|e| e.status != Status::Done && self.uop(e.idx).kind == UopKind::Load);
                if blocked {
                    return false;
                }
                self.rob[i].result = now;
            }
            UopKind::ReadTsc { serializing: false } => self.rob[i].result = now,
            UopKind::Load => {
                if matches!(self.stores.front(), Some(&s) if s < tag.seq) {
                    return false;
                }
                let addr = u.address(&vals);
                let req = LoadRequest { addr, width: u.width, privilege: Privilege::User, now, owner: tag.uid };
                let outcome =
                    access(&self.memory, &mut self.cache, &self.lb, &mut self.mb, &self.profile, self.noise.as_mut(), req);
                let e = &mut self.rob[i];
                e.addr = addr;
                match outcome {
                    AccessOutcome::LoadBufferFull | AccessOutcome::MissBufferFull => return false,
                    AccessOutcome::Hit { value, latency: l } => {
                        e.result = u.load_result(&vals, value);
                        latency = l;
                    }
                    AccessOutcome::MissIssued { value, ready } => {
                        e.result = u.load_result(&vals, value);
                        latency = ready - now;
                    }
                    AccessOutcome::FaultZero { latency: l, kind } => {
                        e.result = u.load_result(&vals, 0);
                        e.fault = Some(kind);
                        latency = l;
                    }
                    AccessOutcome::Stall { kind } => {
                        e.fault = Some(kind);
                        e.status = Status::Stalled;
                    }
                }
                e.holds_lb = true;
                self.lb.allocate();
                if let Some(kind) = self.rob[i].fault {
                    let stalled = self.rob[i].status == Status::Stalled;
                    self.trace(EventKind::LoadFault { seq: tag.seq, addr, fault: kind, stalled });
                    if stalled {
                        return true;
                    }
                }
            }
            UopKind::Store => {
                let e = &mut self.rob[i];
                e.addr = u.address(&vals);
                e.store_value = u.store_value(&vals);
            }
            UopKind::FlushLine => self.rob[i].addr = u.address(&vals),
            UopKind::AluMul | UopKind::AluAddSub | UopKind::AluLogic => {
                let (v, zf) = u.compute(&vals);
                self.rob[i].result = v;
                self.rob[i].zf = zf;
            }
            UopKind::BranchCond => self.rob[i].taken = u.branch_taken(&vals),
            _ => {}
        }
        let done_at = now + latency.max(1);
        self.rob[i].status = Status::Executing;
        self.rob[i].done_at = done_at;
        self.completions.push(Reverse((done_at, tag)));
        true
    }

    // ---- fetch ----

    fn fetch(&mut self) {
        if self.cycle < self.fetch_resume {
            return;
        }
        for _ in 0..self.profile.fetch_width {
            if !self.can_fetch() {
                return;
            }
            let idx = self.pc;
            let u = self.uops[idx];
            let mut next_pc = idx + 1;
            let mut known_branch: Option<bool> = None;
            let mut predicted: Option<bool> = None;
            if u.kind == UopKind::BranchCond {
                match self.flags_state() {
                    FlagsState::Known(zf) => known_branch = Some(u.cond.expect("condition").holds(zf)),
                    FlagsState::Imminent => return,
                    FlagsState::Unknown => {
                        let target = u.target.expect("branch target");
                        let address = self.branch_address(idx);
                        let taken = self.predictor.predict(address, Direction::of(idx, target));
                        predicted = Some(taken);
                    }
                }
            }
            let tag = Tag { seq: self.next_seq, uid: self.next_uid };
            self.next_seq += 1;
            self.next_uid += 1;
            let speculative = self.unresolved > 0;
            let mut e = Entry {
                tag,
                idx,
                status: Status::Waiting,
                vals: [0; 4],
                pending: 0,
                result: 0,
                zf: false,
                fault: None,
                holds_lb: false,
                addr: 0,
                store_value: 0,
                predicted,
                taken: false,
                snapshot: None,
                waiters: SmallVec::new(),
                deps: [None; 4],
                done_at: 0,
            };
            for (slot, reg) in u.sources().enumerate() {
                match self.rename[reg.index()].and_then(|t| self.index_of(t).map(|pi| (t, pi))) {
                    Some((_, pi)) if self.rob[pi].status == Status::Done => {
                        let p = &self.rob[pi];
                        e.vals[slot] = if reg == Reg::FLAGS { p.zf as u64 } else { p.result };
                    }
                    Some((t, pi)) => {
                        e.deps[slot] = Some(t);
                        self.rob[pi].waiters.push((tag, slot as u8));
                        e.pending += 1;
                    }
                    None => e.vals[slot] = self.arch[reg.index()],
                }
            }
            self.trace(EventKind::Issue { seq: tag.seq, uop: idx, instr: u.parent, speculative });
            match u.kind {
                UopKind::BranchCond => {
                    let target = u.target.expect("branch target");
                    if let Some(taken) = known_branch {
                        let address = self.branch_address(idx);
                        self.predictor.train(address, Direction::of(idx, target), taken);
                        e.status = Status::Done;
                        e.pending = 0;
                        e.taken = taken;
                        if taken {
                            next_pc = target;
                        }
                    } else {
                        let taken = predicted.expect("prediction");
                        e.snapshot = Some(Box::new(self.rename));
                        self.unresolved += 1;
                        self.max_depth = self.max_depth.max(self.unresolved);
                        self.trace(EventKind::Predict { seq: tag.seq, address: self.branch_address(idx), taken });
                        if taken {
                            next_pc = target;
                        }
                    }
                }
                UopKind::BranchUncond => {
                    e.status = Status::Done;
                    next_pc = u.target.expect("branch target");
                }
                UopKind::Store => self.stores.push_back(tag.seq),
                UopKind::Serialize => self.serializing = true,
                UopKind::Halt => self.quiesced = true,
                _ => {}
            }
            if let Some(d) = u.dst {
                self.rename[d.reg.index()] = Some(tag);
            }
            if u.writes_flags {
                self.rename[Reg::FLAGS.index()] = Some(tag);
            }
            if e.status == Status::Waiting && e.pending == 0 {
                self.ready.push(Reverse(tag));
            }
            self.rob.push_back(e);
            self.pc = next_pc;
        }
    }

    /// Whether the flags a branch reads are known, about to be known, or
    /// depend on work still in flight.
    fn flags_state(&self) -> FlagsState {
        let known = FlagsState::Known(self.arch[Reg::FLAGS.index()] != 0);
        let Some(tag) = self.rename[Reg::FLAGS.index()] else { return known };
        let Some(i) = self.index_of(tag) else { return known };
        match self.rob[i].status {
            Status::Done => FlagsState::Known(self.rob[i].zf),
            _ if self.imminent(i, 2) => FlagsState::Imminent,
            _ => FlagsState::Unknown,
        }
    }

    /// Whether entry `i` will produce its result within a few cycles: it
    /// finishes executing soon, or it is a short ALU op whose inputs are themselves
    /// imminent, looking at most `depth` producers deep.
    fn imminent(&self, i: usize, depth: u32) -> bool {
        let e = &self.rob[i];
        match e.status {
            Status::Done => true,
            Status::Executing => e.done_at <= self.cycle + IMMINENT_HORIZON,
            Status::Stalled => false,
            Status::Waiting => {
                let kind = self.uop(e.idx).kind;
                if depth == 0 || !matches!(kind, UopKind::AluAddSub | UopKind::AluLogic) {
                    return false;
                }
                e.deps.iter().flatten().all(|&t| self.index_of(t).is_none_or(|pi| self.imminent(pi, depth - 1)))
            }
        }
    }
}

enum FlagsState {
    Known(bool),
    /// The producing micro-op has all of its inputs; fetch waits for it
    /// instead of predicting.
    Imminent,
    Unknown,
}
