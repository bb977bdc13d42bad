use std::collections::VecDeque;

use super::config::{CacheConfig, Forwarding, InstClass, UarchConfig};
use crate::isa::{
    alu, branch_taken, decode, load_extend, ArchState, DecodedInst, IsaError, MemAccess, Mnemonic,
    RetiredEvent, HALT_WORD,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedEvent {
    pub event: RetiredEvent,
    pub retire_cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UarchTrace {
    pub events: Vec<TimedEvent>,
    pub total_cycles: u64,
    pub truncated: bool,
    /// Fault that ended execution, if any.
    pub fault: Option<IsaError>,
}

impl UarchTrace {
    pub fn retired(&self) -> impl Iterator<Item = &RetiredEvent> {
        self.events.iter().map(|t| &t.event)
    }
}

/// What the attacker sees: the cycle of every retirement, in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct AttackerTrace(pub Vec<u64>);

pub fn attacker_trace(trace: &UarchTrace) -> AttackerTrace {
    AttackerTrace(trace.events.iter().map(|t| t.retire_cycle).collect())
}

/// A register value together with the cycles at which it becomes usable.
#[derive(Debug, Clone, Copy)]
struct Producer {
    value: u32,
    exec_done: u64,
    mem_done: u64,
    retire: u64,
    is_load: bool,
}

impl Producer {
    fn initial(value: u32) -> Self {
        Producer { value, exec_done: 0, mem_done: 0, retire: 0, is_load: false }
    }

    /// First cycle at which a consumer may read this value at its read stage.
    fn ready(&self, forwarding: Forwarding, from_register_file: bool) -> u64 {
        if from_register_file || forwarding == Forwarding::None {
            return self.retire + 1;
        }
        match (self.is_load, forwarding) {
            (true, Forwarding::Full) => self.mem_done,
            (true, _) => self.mem_done + 1,
            (false, _) => self.exec_done + 1,
        }
    }
}

/// Producers older than the pipeline depth have always retired, so a short
/// history per register suffices.
const HISTORY: usize = 8;

struct Cache {
    config: CacheConfig,
    tags: Vec<Option<u32>>,
}

impl Cache {
    fn access(&mut self, addr: u32) -> u32 {
        let line = addr / self.config.line_size;
        let index = (line % self.config.lines) as usize;
        let tag = line / self.config.lines;
        if self.tags[index] == Some(tag) {
            self.config.hit_cycles
        } else {
            self.tags[index] = Some(tag);
            self.config.miss_cycles
        }
    }
}

struct Stages {
    depth: usize,
    decode: usize,
    execute: usize,
    memory: usize,
}

impl Stages {
    fn new(depth: u8) -> Self {
        let depth = depth as usize;
        let execute = depth.saturating_sub(3).max(1);
        Stages { depth, decode: 1, execute, memory: (execute + 1).min(depth - 1) }
    }
}

/// Architectural outcome of one instruction, computed by the pipeline.
struct Outcome {
    next_pc: u32,
    result: Option<u32>,
    mem_read: Option<MemAccess>,
    mem_write: Option<MemAccess>,
    taken: Option<bool>,
}

fn execute(inst: &DecodedInst, pc: u32, a: u32, b: u32, mem: &mut ArchState) -> Result<Outcome, IsaError> {
    use Mnemonic::*;
    let m = inst.mnemonic;
    let imm = inst.imm.unwrap_or(0) as u32;
    let mut out =
        Outcome { next_pc: pc.wrapping_add(4), result: None, mem_read: None, mem_write: None, taken: None };
    match m {
        Lui => out.result = Some(imm),
        Auipc => out.result = Some(pc.wrapping_add(imm)),
        Jal => {
            out.result = Some(pc.wrapping_add(4));
            out.next_pc = pc.wrapping_add(imm);
        }
        Jalr => {
            out.result = Some(pc.wrapping_add(4));
            out.next_pc = a.wrapping_add(imm) & !1;
        }
        _ if m.is_branch() => {
            let taken = branch_taken(m, a, b);
            out.taken = Some(taken);
            if taken {
                out.next_pc = pc.wrapping_add(imm);
            }
        }
        _ if m.is_load() => {
            let width = m.mem_width().expect("load width");
            let addr = a.wrapping_add(imm);
            let data = mem.load(addr, width)?;
            out.mem_read = Some(MemAccess { addr, width, data });
            out.result = Some(load_extend(m, data));
        }
        _ if m.is_store() => {
            let width = m.mem_width().expect("store width");
            let addr = a.wrapping_add(imm);
            let data = mem.store(addr, width, b)?;
            out.mem_write = Some(MemAccess { addr, width, data });
        }
        _ => out.result = Some(alu(m, a, if m.has_rs2() { b } else { imm })),
    }
    Ok(out)
}

/// Simulates the pipeline from the architectural state `init` (empty
/// pipeline, cold cache) until the halt sentinel, a fault, or `max_cycles`.
pub fn simulate(init: &ArchState, config: &UarchConfig, max_cycles: u64) -> UarchTrace {
    debug_assert!(config.validate().is_ok());
    let stages = Stages::new(config.pipeline_depth);
    let depth = stages.depth;
    let mut mem = init.clone();
    let mut cache = config.data_cache.map(|c| Cache { config: c, tags: vec![None; c.lines as usize] });
    let mut producers: Vec<VecDeque<Producer>> =
        init.regs.iter().map(|&v| VecDeque::from([Producer::initial(v)])).collect();

    let mut events = Vec::new();
    let mut previous: Option<(Vec<u64>, u64)> = None;
    let mut earliest_fetch = 1u64;
    let mut pc = init.pc;
    let mut truncated = false;
    let mut fault = None;

    loop {
        let word = match mem.fetch_at(pc) {
            Ok(HALT_WORD) => break,
            Ok(w) => w,
            Err(e) => {
                fault = Some(e);
                break;
            }
        };
        let inst = match decode(word) {
            Ok(i) => i,
            Err(e) => {
                fault = Some(e);
                break;
            }
        };
        let class = InstClass::of(inst.mnemonic);
        let from_register_file = config.unforwarded.contains(&class);
        let read_stage = if from_register_file { stages.decode } else { stages.execute };

        let vacated = |s: usize| match &previous {
            None => 0,
            Some((enter, _)) if s + 1 < depth => enter[s + 1],
            Some((_, retire)) => retire + 1,
        };
        let operand = |reg: Option<u8>| reg.map(|r| &producers[r as usize]);
        let operands = [operand(inst.rs1), operand(inst.rs2)];
        let hazard = operands
            .iter()
            .flatten()
            .map(|h| h.back().expect("history").ready(config.forwarding, from_register_file))
            .max()
            .unwrap_or(0);

        let mut enter = vec![0u64; depth];
        let mut latency = vec![1u64; depth];
        let mut outcome = None;
        let mut values = [None, None];
        enter[0] = earliest_fetch.max(previous.as_ref().map_or(0, |(e, _)| e[0] + 1)).max(vacated(0));
        for s in 1..depth {
            let mut t = (enter[s - 1] + latency[s - 1]).max(vacated(s));
            if s == read_stage {
                t = t.max(hazard);
                for (slot, history) in operands.iter().enumerate() {
                    if let Some(history) = history {
                        // Newest value usable at cycle t.
                        let p = history
                            .iter()
                            .rev()
                            .find(|p| p.ready(config.forwarding, from_register_file) <= t)
                            .unwrap_or_else(|| history.front().expect("history"));
                        values[slot] = Some(p.value);
                    }
                }
                let (a, b) = (values[0].unwrap_or(0), values[1].unwrap_or(0));
                match execute(&inst, pc, a, b, &mut mem) {
                    Ok(o) => outcome = Some(o),
                    Err(e) => {
                        fault = Some(e);
                        break;
                    }
                }
                latency[stages.execute] = config.exec_latency(inst.mnemonic, a, b) as u64;
                let o = outcome.as_ref().expect("executed");
                if let Some(access) = o.mem_read.or(o.mem_write) {
                    latency[stages.memory] = memory_cycles(config, &mut cache, access, o.mem_read.is_some());
                }
            }
            enter[s] = t;
        }
        let Some(outcome) = outcome else { break };

        let last = depth - 1;
        let retire = enter[last] + latency[last] - 1;
        if retire > max_cycles {
            truncated = true;
            break;
        }
        let exec_done = enter[stages.execute] + latency[stages.execute] - 1;
        let mem_done = enter[stages.memory] + latency[stages.memory] - 1;

        let rd_value = inst.rd.map(|rd| if rd == 0 { 0 } else { outcome.result.unwrap_or(0) });
        if let Some(rd) = inst.written_reg() {
            let history = &mut producers[rd as usize];
            history.push_back(Producer {
                value: rd_value.expect("rd value"),
                exec_done,
                mem_done,
                retire,
                is_load: inst.mnemonic.is_load(),
            });
            if history.len() > HISTORY {
                history.pop_front();
            }
        }

        let redirected = outcome.taken == Some(true) || inst.mnemonic.is_jump();
        if redirected {
            earliest_fetch = exec_done + 1 + config.branch_taken_penalty as u64 - stages.execute as u64;
        }

        events.push(TimedEvent {
            event: RetiredEvent {
                order: events.len() as u64,
                inst,
                pc_before: pc,
                pc_after: outcome.next_pc,
                rs1_value: inst.rs1.and(values[0]),
                rs2_value: inst.rs2.and(values[1]),
                rd_value,
                mem_read: outcome.mem_read,
                mem_write: outcome.mem_write,
                branch_taken: outcome.taken,
            },
            retire_cycle: retire,
        });
        pc = outcome.next_pc;
        previous = Some((enter, retire));
    }

    let total_cycles = if truncated { max_cycles } else { events.last().map_or(0, |t| t.retire_cycle) };
    UarchTrace { events, total_cycles, truncated, fault }
}

/// Memory-stage cycles of one access. Loads straddling a word boundary take
/// two word transactions when alignment splitting is enabled.
fn memory_cycles(config: &UarchConfig, cache: &mut Option<Cache>, access: MemAccess, is_load: bool) -> u64 {
    let first = access.addr & !3;
    let last = access.addr.wrapping_add(access.width as u32 - 1) & !3;
    let words: &[u32] =
        if is_load && config.alignment_splitting && first != last { &[first, last] } else { &[first] };
    words
        .iter()
        .map(|&w| match cache {
            Some(c) => c.access(w) as u64,
            None => config.mem_latency as u64,
        })
        .sum()
}
