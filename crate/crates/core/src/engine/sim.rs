use std::collections::HashMap;

use thiserror::Error;

use super::report::{FaultRecord, FlowRecord, LatencyStats, SimCounters, SimReport};
use super::EngineConfig;
use crate::fix8::Fix8;
use crate::fpe::FpeSim;
use crate::hpe::HpeSim;
use crate::isa::ProgramImage;
use crate::pe::{argmax, trace_from_env, PeError, RunResult};
use crate::traffic::{
    parse_packet, query_charge_ns, read_pcap, Dispatch, Fifo, FlowTable, Path, PacketRecord, PcapError, QueryEntry,
    QueryTable, QUERY_CYCLES, RAW_INPUT_LEN,
};

/// The fast (FPE) and slow (HPE) inference programs.
#[derive(Clone, Debug)]
pub struct Programs {
    pub fast: ProgramImage,
    pub slow: ProgramImage,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("unreadable trace: {0}")]
    Pcap(#[from] PcapError),
    #[error("{path} program: {source}")]
    Load { path: &'static str, source: PeError },
    #[error("{path} program expects {len} input bytes, packets carry at most {RAW_INPUT_LEN}")]
    InputLen { path: &'static str, len: usize },
}

enum Exec {
    Fpe(Box<FpeSim>),
    Hpe(Box<HpeSim>),
}

#[derive(Clone, Copy, Debug)]
pub(super) struct Outcome {
    pub label: u32,
    pub cycles: u64,
    pub stalls: u64,
}

/// One simulator per path. Results depend only on the input bytes, so they are memoized.
/// A run's outcome, or the cycles burned before a fault and its message.
type PeResult = Result<Outcome, (u64, String)>;

pub(super) struct Runner {
    exec: Exec,
    input_len: usize,
    tracing: bool,
    memo: HashMap<Vec<u8>, PeResult>,
}

impl Runner {
    fn new(exec: Exec, path: &'static str) -> Result<Self, RunError> {
        let input_len = match &exec {
            Exec::Fpe(s) => s.input_len(),
            Exec::Hpe(s) => s.input_len(),
        };
        if input_len > RAW_INPUT_LEN {
            return Err(RunError::InputLen { path, len: input_len });
        }
        let mut r = Runner { exec, input_len, tracing: trace_from_env(), memo: HashMap::new() };
        match &mut r.exec {
            Exec::Fpe(s) => s.set_trace(r.tracing),
            Exec::Hpe(s) => s.set_trace(r.tracing),
        }
        Ok(r)
    }

    fn run(&mut self, raw: &[u8]) -> PeResult {
        let key = &raw[..self.input_len];
        if let Some(r) = self.memo.get(key) {
            return r.clone();
        }
        let input: Vec<Fix8> = key.iter().map(|&b| Fix8::from_bits(b)).collect();
        let (res, lines, tag): (Result<RunResult, PeError>, &[String], &str) = match &mut self.exec {
            Exec::Fpe(s) => {
                let r = s.run_inference(&input);
                (r, s.trace(), "fpe")
            }
            Exec::Hpe(s) => {
                let r = s.run_inference(&input);
                (r, s.trace(), "hpe")
            }
        };
        if self.tracing {
            for l in lines {
                eprintln!("[{tag}] {l}");
            }
        }
        let out = match res {
            Ok(r) => match argmax(&r.output) {
                Some(i) => Ok(Outcome { label: i as u32, cycles: r.cycles, stalls: r.stall_cycles }),
                None => Err((r.cycles.max(1), "program produced no output".to_string())),
            },
            Err(PeError::Fault(f)) => Err((f.cycle.max(1), f.to_string())),
            Err(e) => Err((1, e.to_string())),
        };
        self.memo.insert(key.to_vec(), out.clone());
        out
    }
}

pub(super) struct Runners {
    pub fast: Runner,
    pub slow: Runner,
}

impl Runners {
    pub fn new(cfg: &EngineConfig, progs: &Programs) -> Result<Self, RunError> {
        let fast = FpeSim::load(&progs.fast, &cfg.fpe).map_err(|source| RunError::Load { path: "fast", source })?;
        let slow = HpeSim::load(&progs.slow, &cfg.hpe).map_err(|source| RunError::Load { path: "slow", source })?;
        Ok(Runners { fast: Runner::new(Exec::Fpe(Box::new(fast)), "fast")?, slow: Runner::new(Exec::Hpe(Box::new(slow)), "slow")? })
    }
}

#[derive(Clone, Copy)]
struct Job {
    flow: usize,
    pkt: usize,
    enqueued: u64,
}

struct Pe {
    queue: Fifo<Job>,
    running: Option<(u64, Job, PeResult)>,
}

impl Pe {
    fn load(&self) -> usize {
        self.queue.len() + self.running.is_some() as usize
    }
}

/// Simulation state. PE index `fpe_count` is the HPE.
pub(super) struct Sim<'a> {
    cfg: &'a EngineConfig,
    packets: &'a [PacketRecord],
    pes: Vec<Pe>,
    flow_table: FlowTable,
    query: QueryTable,
    flow_index: HashMap<u32, usize>,
    pub flows: Vec<FlowRecord>,
    pub counters: SimCounters,
    pub faults: Vec<FaultRecord>,
    fast_lat: Vec<u64>,
    slow_lat: Vec<u64>,
    last_completion: u64,
}

impl<'a> Sim<'a> {
    pub fn new(cfg: &'a EngineConfig, packets: &'a [PacketRecord]) -> Self {
        let pes = (0..=cfg.fpe_count).map(|_| Pe { queue: Fifo::new(cfg.queue_depth), running: None }).collect();
        Sim {
            cfg,
            packets,
            pes,
            flow_table: FlowTable::new(cfg.threshold),
            query: QueryTable::default(),
            flow_index: HashMap::new(),
            flows: Vec::new(),
            counters: SimCounters { parsed: packets.len() as u64, ..Default::default() },
            faults: Vec::new(),
            fast_lat: Vec::new(),
            slow_lat: Vec::new(),
            last_completion: 0,
        }
    }

    /// Feeds packet `pkt` arriving at `cycle`. Arrivals must come in cycle order.
    pub fn arrive(&mut self, runners: &mut Runners, cycle: u64, pkt: usize) {
        self.advance(runners, Some(cycle));
        let p = &self.packets[pkt];
        let hash = p.tuple.flow_hash();
        self.counters.forwarded += 1;
        if self.query.query(&p.tuple).0.is_some() {
            self.counters.query_hits += 1;
        }
        let flow = *self.flow_index.entry(hash).or_insert_with(|| {
            self.flows.push(FlowRecord {
                flow_hash: hash,
                tuple: p.tuple,
                packets: 0,
                fast_label: None,
                fast_latency_cycles: None,
                fast_latency_ns: None,
                slow_label: None,
                slow_latency_cycles: None,
                slow_latency_ns: None,
                final_label: None,
                final_source: None,
            });
            self.flows.len() - 1
        });
        self.flows[flow].packets += 1;
        let pe = match self.flow_table.update(hash) {
            Dispatch::None => return,
            Dispatch::Fast => {
                self.counters.fast_dispatches += 1;
                // Shortest queue, counting the job in service; ties go to the lowest index.
                (0..self.cfg.fpe_count).min_by_key(|&i| self.pes[i].load()).unwrap()
            }
            Dispatch::Slow => {
                self.counters.slow_dispatches += 1;
                self.cfg.fpe_count
            }
        };
        if self.pes[pe].queue.push(Job { flow, pkt, enqueued: cycle }) && self.pes[pe].running.is_none() {
            self.start_next(runners, pe, cycle);
        }
    }

    /// Completes every job finishing at or before `until`, in (cycle, PE index) order.
    pub fn advance(&mut self, runners: &mut Runners, until: Option<u64>) {
        loop {
            let next = (0..self.pes.len())
                .filter_map(|i| self.pes[i].running.as_ref().map(|r| (r.0, i)))
                .min();
            match next {
                Some((end, pe)) if until.is_none_or(|u| end <= u) => {
                    self.complete(pe);
                    self.start_next(runners, pe, end);
                }
                _ => break,
            }
        }
    }

    fn start_next(&mut self, runners: &mut Runners, pe: usize, now: u64) {
        let Some(job) = self.pes[pe].queue.pop() else { return };
        let raw = &self.packets[job.pkt].raw_input;
        let out = if pe < self.cfg.fpe_count { runners.fast.run(raw) } else { runners.slow.run(raw) };
        let cycles = match &out {
            Ok(o) => o.cycles,
            Err((c, _)) => *c,
        };
        self.pes[pe].running = Some((now + cycles, job, out));
    }

    fn complete(&mut self, pe: usize) {
        let (end, job, out) = self.pes[pe].running.take().unwrap();
        self.last_completion = self.last_completion.max(end);
        let latency = end - job.enqueued;
        let slow = pe == self.cfg.fpe_count;
        let hash = self.flows[job.flow].flow_hash;
        match out {
            Ok(o) => {
                self.counters.stall_cycles += o.stalls;
                let source = if slow { Path::Slow } else { Path::Fast };
                let accepted = self.query.write(QueryEntry { key_hash: hash, label: o.label, source, result_cycle: end });
                let ns = self.cfg.cycles_to_ns(latency);
                let f = &mut self.flows[job.flow];
                if slow {
                    self.counters.slow_completed += 1;
                    self.slow_lat.push(latency);
                    (f.slow_label, f.slow_latency_cycles, f.slow_latency_ns) = (Some(o.label), Some(latency), Some(ns));
                } else {
                    self.counters.fast_completed += 1;
                    self.fast_lat.push(latency);
                    if !accepted {
                        self.counters.fast_writes_refused += 1;
                    }
                    (f.fast_label, f.fast_latency_cycles, f.fast_latency_ns) = (Some(o.label), Some(latency), Some(ns));
                }
            }
            Err((_, message)) => {
                self.counters.faults += 1;
                self.faults.push(FaultRecord { pe, flow_hash: hash, message });
            }
        }
    }

    pub fn drops(&self) -> u64 {
        self.pes.iter().map(|p| p.queue.dropped).sum()
    }

    pub fn into_report(mut self, progs: &Programs, duration_ns: f64) -> SimReport {
        let cfg = self.cfg;
        for f in &mut self.flows {
            if let (Some(e), _) = self.query.query(&f.tuple) {
                (f.final_label, f.final_source) = (Some(e.label), Some(e.source));
            }
        }
        let c = &mut self.counters;
        c.enqueued_per_queue = self.pes.iter().map(|p| p.queue.enqueued).collect();
        c.drops_per_queue = self.pes.iter().map(|p| p.queue.dropped).collect();
        c.drops_total = c.drops_per_queue.iter().sum();
        c.collisions = self.flow_table.collisions;
        let makespan_ns = cfg.cycles_to_ns(self.last_completion);
        let wire_bits: f64 = self.packets.iter().map(|p| p.wire_len as f64 * 8.0).sum();
        let per_s = |n: f64, ns: f64| if ns > 0.0 { n / ns * 1e9 } else { 0.0 };
        SimReport {
            config: cfg.clone(),
            fast_program_bundles: progs.fast.bundles.len(),
            slow_program_bundles: progs.slow.bundles.len(),
            trace_duration_ns: duration_ns,
            makespan_ns,
            offered_flows_fps: per_s(self.flows.len() as f64, duration_ns),
            offered_gbps: per_s(wire_bits, duration_ns) / 1e9,
            inference_fps: per_s((c.fast_completed + c.slow_completed) as f64, makespan_ns),
            fast_latency: LatencyStats::from_cycles(&self.fast_lat, cfg.freq_hz),
            slow_latency: LatencyStats::from_cycles(&self.slow_lat, cfg.freq_hz),
            dp_query_cycles_per_packet: QUERY_CYCLES,
            dp_query_ns_per_packet: query_charge_ns(),
            counters: self.counters,
            faults: self.faults,
            flows: self.flows,
        }
    }
}

/// Replays parsed packets. Arrival cycles come from timestamps relative to the first packet.
pub fn run_packets(cfg: &EngineConfig, progs: &Programs, packets: &[PacketRecord]) -> Result<SimReport, RunError> {
    let mut runners = Runners::new(cfg, progs)?;
    let mut order: Vec<usize> = (0..packets.len()).collect();
    order.sort_by_key(|&i| packets[i].ts_ns);
    let t0 = order.first().map_or(0, |&i| packets[i].ts_ns);
    let t1 = order.last().map_or(0, |&i| packets[i].ts_ns);
    let mut sim = Sim::new(cfg, packets);
    for i in order {
        let cycle = ((packets[i].ts_ns - t0) as f64 * cfg.freq_hz / 1e9).floor() as u64;
        sim.arrive(&mut runners, cycle, i);
    }
    sim.advance(&mut runners, None);
    Ok(sim.into_report(progs, (t1 - t0) as f64))
}

/// Parses a pcap capture and replays it.
pub fn run_trace(cfg: &EngineConfig, progs: &Programs, pcap: &[u8]) -> Result<SimReport, RunError> {
    let records = read_pcap(pcap)?;
    let mut skipped = 0;
    let packets: Vec<PacketRecord> = records
        .iter()
        .filter_map(|r| parse_packet(&r.data, r.ts_ns, r.orig_len).map_err(|_| skipped += 1).ok())
        .collect();
    let mut report = run_packets(cfg, progs, &packets)?;
    report.counters.skipped = skipped;
    Ok(report)
}
