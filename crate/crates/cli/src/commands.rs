use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use specsim::attacks::fixture::{fixture_map, KERNEL_MAPPED, KERNEL_UNMAPPED, USER_DATA};
use specsim::attacks::{
    derandomize, detect_static_predictor, flushing_channel_probe, guarded_conditional_demo, recover_buffer_params,
    AttackError, ConditionState, ProbeConfig, Prober, Reader, SimOptions, TimingSample,
};
use specsim::corpus;
use specsim::isa::{assemble, DecodedProgram};
use specsim::memory::{MemoryMap, NoiseConfig};
use specsim::oslayout::{ground_truth, randomize_linux, randomize_windows, DecoyConfig, KaslrLayout, Os, WINDOWS_DEFAULT_IMAGE_SLOTS};
use specsim::pipeline::{run, write_trace, CoreOptions, Terminal};
use specsim::uarch::{builtin_profile, builtin_profiles, profiles_from_toml, profiles_to_toml, MicroArchProfile};

use crate::args::*;
use crate::report::{address_groups, timing_groups, write_samples_csv, Report, Summary};

const REGISTER_NAMES: [&str; 16] =
    ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"];

/// What a command produced: its report, extra text for the terminal and
/// the process exit status.
pub struct Outcome {
    pub report: Option<Report>,
    pub text: String,
    pub exit: u8,
}

impl Outcome {
    fn ok(report: Report, text: String) -> Outcome {
        Outcome { report: Some(report), text, exit: 0 }
    }
}

pub fn execute(command: &Command) -> Result<Outcome> {
    match command {
        Command::RunListing(a) => run_listing(a),
        Command::DetectPredictor(a) => detect_predictor(a),
        Command::Probe(a) => probe(a),
        Command::Derandomize(a) => derandomize_cmd(a),
        Command::SweepProfiles(a) => sweep(a),
        Command::DemoGuard(a) => demo_guard(a),
        Command::ReadMemory(a) => read_memory(a),
        Command::ExportProfiles(a) => export_profiles(a),
    }
}

/// A built-in name, a profile file, or `file#name`.
pub fn resolve_profile(spec: &str) -> Result<MicroArchProfile> {
    if let Ok(p) = builtin_profile(spec) {
        return Ok(p);
    }
    let (path, name) = match spec.rsplit_once('#') {
        Some((path, name)) => (path, Some(name)),
        None => (spec, None),
    };
    if !Path::new(path).is_file() {
        let names: Vec<String> = builtin_profiles().into_iter().map(|p| p.key()).collect();
        bail!("unknown profile `{spec}`: not a built-in ({}) and not a file", names.join(", "));
    }
    let profiles = load_profiles(Path::new(path))?;
    match name {
        Some(name) => profiles
            .into_iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| anyhow!("{path} has no profile named `{name}`")),
        None if profiles.len() == 1 => Ok(profiles.into_iter().next().expect("one profile")),
        None => bail!("{path} holds {} profiles; pick one with {path}#<name>", profiles.len()),
    }
}

fn load_profiles(path: &Path) -> Result<Vec<MicroArchProfile>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(profiles_from_toml(&text)?)
}

pub fn parse_noise(spec: &str) -> Result<Option<NoiseConfig>> {
    match spec.trim() {
        "off" | "none" => Ok(None),
        s => s.parse().map(Some).map_err(|e| anyhow!("--noise: {e}")),
    }
}

fn sim_options(noise: &str, seed: u64, cycle_budget: Option<u64>) -> Result<SimOptions> {
    let default = SimOptions::default();
    Ok(SimOptions { noise: parse_noise(noise)?, seed, cycle_budget: cycle_budget.unwrap_or(default.cycle_budget) })
}

fn common_sim(c: &Common) -> Result<SimOptions> {
    sim_options(&c.noise, c.seed, c.cycle_budget)
}

fn probe_config(o: &ProbeOptions, sim: SimOptions) -> Result<ProbeConfig> {
    if o.trials == 0 {
        bail!("--trials must be at least 1");
    }
    Ok(ProbeConfig {
        technique: o.technique,
        imul_count: o.imul_count,
        trials: o.trials,
        exhaustion_loads: o.exhaustion_loads,
        sim,
        ..ProbeConfig::default()
    })
}

fn layout_for(os: Os, seed: u64, image_pages: u64, module_pages: u64, decoys: bool) -> Result<(KaslrLayout, MemoryMap)> {
    Ok(match os {
        Os::Linux => randomize_linux(seed, image_pages, module_pages)?,
        Os::Windows => randomize_windows(seed, WINDOWS_DEFAULT_IMAGE_SLOTS, decoys.then(DecoyConfig::default))?,
    })
}

fn hex(v: u64) -> String {
    format!("{v:#x}")
}

#[derive(Serialize)]
struct ListingConfig<'a> {
    listing: &'a str,
    profile: &'a str,
    seed: u64,
    noise: Option<NoiseConfig>,
    cycle_budget: u64,
}

#[derive(Serialize)]
struct ListingResult {
    terminal: Terminal,
    cycles: u64,
    committed: u64,
    flushed: u64,
    max_speculation_depth: usize,
    registers: Vec<(&'static str, String)>,
    cache_lines: Vec<String>,
    memory_writes: usize,
    trace_events: usize,
}

fn run_listing(a: &RunListingArgs) -> Result<Outcome> {
    let source = if Path::new(&a.listing).is_file() {
        std::fs::read_to_string(&a.listing).with_context(|| format!("reading {}", a.listing))?
    } else if let Some(src) = corpus::listing(&a.listing) {
        src.to_string()
    } else {
        bail!("`{}` is neither a file nor a corpus listing ({})", a.listing, corpus::names().collect::<Vec<_>>().join(", "));
    };
    let program = assemble(&source).with_context(|| format!("assembling {}", a.listing))?;
    let profile = resolve_profile(&a.common.profile)?;
    let sim = common_sim(&a.common)?;
    let options = CoreOptions {
        cycle_budget: a.common.cycle_budget.unwrap_or(CoreOptions::default().cycle_budget),
        seed: sim.seed,
        noise: sim.noise,
        trace: a.trace.is_some(),
        capture_state: true,
    };
    let config = ListingConfig {
        listing: &a.listing,
        profile: &profile.name,
        seed: options.seed,
        noise: options.noise,
        cycle_budget: options.cycle_budget,
    };
    let r = run(&DecodedProgram::new(&program), &profile, Arc::new(fixture_map()), options.clone());
    if let Some(path) = &a.trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace(&r.events, BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
    }
    let result = ListingResult {
        terminal: r.terminal,
        cycles: r.cycles(),
        committed: r.committed,
        flushed: r.flushed,
        max_speculation_depth: r.max_speculation_depth,
        registers: REGISTER_NAMES.iter().zip(r.registers).map(|(n, v)| (*n, hex(v))).collect(),
        cache_lines: r.cache.iter().map(|&l| hex(l)).collect(),
        memory_writes: r.memory_writes.len(),
        trace_events: r.events.len(),
    };
    let text = format!(
        "{}: {:?} after {} cycles, {} uops committed, {} flushed\n",
        a.listing,
        r.terminal,
        r.cycles(),
        r.committed,
        r.flushed
    );
    let report = Report::new("run-listing", config, result, Summary::cycles(r.cycles()))?;
    Ok(Outcome::ok(report, text))
}

#[derive(Serialize)]
struct ExperimentConfig<'a> {
    profile: &'a str,
    seed: u64,
    noise: Option<NoiseConfig>,
    cycle_budget: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    imul_count: Option<usize>,
}

fn experiment_config<'a>(profile: &'a MicroArchProfile, sim: &SimOptions, imul_count: Option<usize>) -> ExperimentConfig<'a> {
    ExperimentConfig { profile: &profile.name, seed: sim.seed, noise: sim.noise, cycle_budget: sim.cycle_budget, imul_count }
}

fn detect_predictor(a: &DetectArgs) -> Result<Outcome> {
    let profile = resolve_profile(&a.common.profile)?;
    let sim = common_sim(&a.common)?;
    let verdict = detect_static_predictor(&profile, a.imul_count, &sim)?;
    let result = serde_json::json!({ "profile": profile.name, "verdict": verdict, "letter": verdict.letter().to_string() });
    let text = format!("{}: {:?} ({})\n", profile.name, verdict, verdict.letter());
    let report = Report::new("detect-predictor", experiment_config(&profile, &sim, Some(a.imul_count)), result, Summary::cycles(0))?;
    Ok(Outcome::ok(report, text))
}

#[derive(Serialize)]
struct ProbeEntry {
    address: String,
    mapped: bool,
    ground_truth: bool,
    min_cycles: u64,
}

fn probe(a: &ProbeArgs) -> Result<Outcome> {
    let profile = resolve_profile(&a.common.profile)?;
    let sim = common_sim(&a.common)?;
    let config = probe_config(&a.probe, sim)?;
    let (map, defaults) = match a.os {
        Some(os) => {
            let (layout, map) = layout_for(os, a.common.seed, 11, 1316, true)?;
            let truth = ground_truth(&layout);
            let unmapped = layout.search.addresses().find(|p| !truth.contains(p)).unwrap_or(layout.search.start);
            (map, vec![layout.image_base, unmapped])
        }
        None => (fixture_map(), vec![KERNEL_MAPPED, KERNEL_UNMAPPED]),
    };
    let addresses = if a.addresses.is_empty() { defaults } else { a.addresses.clone() };
    let map = Arc::new(map);
    let prober = Prober::new(&profile, config.clone())?;
    let mut entries = Vec::new();
    let mut samples: Vec<TimingSample> = Vec::new();
    let (mut fp, mut fn_, mut cycles) = (0, 0, 0);
    let mut text = String::new();
    for &address in &addresses {
        let v = prober.probe(&map, address)?;
        let truth = map.lookup(address).is_some();
        fp += (v.mapped && !truth) as u64;
        fn_ += (!v.mapped && truth) as u64;
        cycles += v.simulated_cycles;
        let min_cycles = v.samples.iter().map(|s| s.cycles).min().unwrap_or(0);
        let _ = writeln!(text, "{address:#018x}: {} ({min_cycles} cycles)", if v.mapped { "mapped" } else { "unmapped" });
        entries.push(ProbeEntry { address: hex(address), mapped: v.mapped, ground_truth: truth, min_cycles });
        samples.extend(v.samples);
    }
    if let Some(path) = &a.probe.csv {
        write_samples_csv(path, &samples)?;
    }
    let summary = Summary {
        false_positives: Some(fp),
        false_negatives: Some(fn_),
        simulated_cycles: cycles,
        timing: address_groups(&samples),
    };
    let result = serde_json::json!({ "decision": prober.decision(), "addresses": entries });
    let cfg = serde_json::json!({ "profile": profile.name, "os": a.os, "probe": config });
    Ok(Outcome::ok(Report::new("probe", cfg, result, summary)?, text))
}

#[derive(Serialize)]
struct ScanRecord {
    os: Os,
    layout_seed: u64,
    probes: u64,
    image_base: Option<String>,
    true_image_base: String,
    image_base_correct: bool,
    detected_pages: usize,
    ground_truth_pages: usize,
    false_positives: Vec<String>,
    false_negatives: Vec<String>,
    simulated_cycles: u64,
}

fn derandomize_cmd(a: &DerandomizeArgs) -> Result<Outcome> {
    let profile = resolve_profile(&a.common.profile)?;
    let sim = common_sim(&a.common)?;
    let config = probe_config(&a.probe, sim)?;
    let layouts: Vec<(KaslrLayout, MemoryMap)> = match &a.layout {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let layout = KaslrLayout::from_json(&text).with_context(|| format!("loading layout {}", path.display()))?;
            let map = layout.memory_map()?;
            vec![(layout, map)]
        }
        None => (0..a.repeat.max(1))
            .map(|i| layout_for(a.os, a.common.seed + i, a.image_pages, a.module_pages, !a.no_decoys))
            .collect::<Result<_>>()?,
    };
    let mut records = Vec::new();
    let mut labelled = Vec::new();
    let mut samples = Vec::new();
    let (mut fp, mut fn_, mut cycles) = (0u64, 0u64, 0u64);
    let mut text = String::new();
    for (layout, map) in layouts {
        let seeded = ProbeConfig { sim: SimOptions { seed: layout.seed, ..config.sim }, ..config.clone() };
        let r = derandomize(&layout, Arc::new(map), &profile, &seeded)?;
        let truth: BTreeSet<u64> = r.ground_truth_pages.iter().copied().collect();
        for s in &r.samples {
            let range = if layout.search.contains(s.address) { "image" } else { "modules" };
            let state = if truth.contains(&s.address) { "mapped" } else { "unmapped" };
            labelled.push((format!("{range} {state}"), s.cycles));
        }
        fp += r.fp() as u64;
        fn_ += r.fn_count() as u64;
        cycles += r.simulated_cycles;
        let _ = writeln!(
            text,
            "seed {}: {} probes, {} pages detected, fp {}, fn {}, image base {}",
            layout.seed,
            r.probes,
            r.detected_pages.len(),
            r.fp(),
            r.fn_count(),
            match (r.image_base, r.image_base_correct) {
                (Some(b), true) => format!("{b:#x} (correct)"),
                (Some(b), false) => format!("{b:#x} (wrong)"),
                (None, _) => "not found".to_string(),
            }
        );
        records.push(ScanRecord {
            os: r.os,
            layout_seed: r.layout_seed,
            probes: r.probes,
            image_base: r.image_base.map(hex),
            true_image_base: hex(layout.image_base),
            image_base_correct: r.image_base_correct,
            detected_pages: r.detected_pages.len(),
            ground_truth_pages: r.ground_truth_pages.len(),
            false_positives: r.false_positives.iter().map(|&p| hex(p)).collect(),
            false_negatives: r.false_negatives.iter().map(|&p| hex(p)).collect(),
            simulated_cycles: r.simulated_cycles,
        });
        samples.extend(r.samples);
    }
    if let Some(path) = &a.probe.csv {
        write_samples_csv(path, &samples)?;
    }
    let summary =
        Summary { false_positives: Some(fp), false_negatives: Some(fn_), simulated_cycles: cycles, timing: timing_groups(labelled) };
    let cfg = serde_json::json!({
        "profile": profile.name,
        "os": a.os,
        "seed": a.common.seed,
        "repeat": a.repeat,
        "layout_file": a.layout.as_ref().map(|p| p.display().to_string()),
        "image_pages": a.image_pages,
        "module_pages": a.module_pages,
        "decoys": !a.no_decoys,
        "probe": config,
    });
    let report = Report::new("derandomize", cfg, serde_json::json!({ "scans": records }), summary)?;
    let exit = if a.assert_exact && (fp > 0 || fn_ > 0) { 3 } else { 0 };
    Ok(Outcome { report: Some(report), text, exit })
}

fn sweep(a: &SweepArgs) -> Result<Outcome> {
    let profiles = match &a.profiles {
        Some(path) => load_profiles(path)?,
        None => builtin_profiles(),
    };
    let sim = sim_options(&a.noise, a.seed, a.cycle_budget)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    let name = match a.experiment {
        SweepCommand::DetectPredictor => {
            let mut column = String::new();
            for p in &profiles {
                let v = detect_static_predictor(p, a.imul_count, &sim)?;
                column.push(v.letter());
                let _ = writeln!(text, "{:<12} {}", p.name, v.letter());
                rows.push(serde_json::json!({ "profile": p.name, "verdict": v, "letter": v.letter().to_string() }));
            }
            let _ = writeln!(text, "column: {column}");
            "detect-predictor"
        }
        SweepCommand::BufferParams => {
            let _ = writeln!(text, "{:<12} {:>4} {:>4} {:>10}", "profile", "PL", "LB", "stall");
            for p in &profiles {
                let b = recover_buffer_params(p, &sim)?;
                let cell = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
                let _ = writeln!(
                    text,
                    "{:<12} {:>4} {:>4} {:>10}",
                    p.name,
                    cell(b.parallel_miss_slots),
                    cell(b.load_buffer_entries),
                    cell(b.universal_stall)
                );
                rows.push(serde_json::to_value(&b)?);
            }
            "buffer-params"
        }
        SweepCommand::Flushing => {
            let _ = writeln!(text, "{:<12} {:>10} {:>10} {:>10} {:>10}", "profile", "mis+hlt", "mis", "ok+hlt", "ok");
            for p in &profiles {
                let m_h = flushing_channel_probe(ConditionState::Mispredicted, true, p, &sim)?;
                let m = flushing_channel_probe(ConditionState::Mispredicted, false, p, &sim)?;
                let c_h = flushing_channel_probe(ConditionState::CorrectlyPredicted, true, p, &sim)?;
                let c = flushing_channel_probe(ConditionState::CorrectlyPredicted, false, p, &sim)?;
                let _ = writeln!(text, "{:<12} {m_h:>10} {m:>10} {c_h:>10} {c:>10}", p.name);
                rows.push(serde_json::json!({
                    "profile": p.name,
                    "mispredicted_hlt": m_h,
                    "mispredicted": m,
                    "correct_hlt": c_h,
                    "correct": c,
                    "separation": m as i64 - m_h as i64,
                }));
            }
            "flushing"
        }
        SweepCommand::Guard => {
            for p in &profiles {
                let g = guarded_conditional_demo(p, &sim)?;
                let _ = writeln!(text, "{:<12} unguarded {} guarded {}", p.name, leak(g.unguarded_leak), leak(g.guarded_leak));
                rows.push(serde_json::json!({ "profile": p.name, "outcome": g }));
            }
            "guard"
        }
    };
    let cfg = serde_json::json!({
        "command": name,
        "profiles": profiles.iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
        "seed": sim.seed,
        "noise": sim.noise,
        "cycle_budget": sim.cycle_budget,
        "imul_count": a.imul_count,
    });
    let report = Report::new("sweep-profiles", cfg, serde_json::json!({ "rows": rows }), Summary::cycles(0))?;
    Ok(Outcome::ok(report, text))
}

fn leak(leaked: bool) -> &'static str {
    if leaked {
        "leaks"
    } else {
        "does not leak"
    }
}

fn demo_guard(a: &Common) -> Result<Outcome> {
    let profile = resolve_profile(&a.profile)?;
    let sim = common_sim(a)?;
    let g = guarded_conditional_demo(&profile, &sim)?;
    let text = format!("{}: unguarded {}, guarded {}\n", profile.name, leak(g.unguarded_leak), leak(g.guarded_leak));
    let report = Report::new("demo-guard", experiment_config(&profile, &sim, None), g, Summary::cycles(0))?;
    Ok(Outcome::ok(report, text))
}

fn read_memory(a: &ReadArgs) -> Result<Outcome> {
    let profile = resolve_profile(&a.common.profile)?;
    let sim = common_sim(&a.common)?;
    let (map, default) = match a.os {
        Some(os) => {
            let (layout, map) = layout_for(os, a.common.seed, 11, 1316, true)?;
            (map, layout.image_base)
        }
        None => (fixture_map(), USER_DATA),
    };
    let start = a.address.unwrap_or(default);
    let map = Arc::new(map);
    let reader = Reader::with_imul_count(&profile, &sim, a.imul_count)?;
    let mut bytes = Vec::new();
    for i in 0..a.len as u64 {
        let addr = start.wrapping_add(i);
        match reader.read_byte(&map, addr) {
            Ok(b) => bytes.push(Some(b)),
            Err(AttackError::ReadFailure { .. }) => bytes.push(None),
            Err(e) => return Err(e.into()),
        }
    }
    let backing: Vec<Option<u8>> = (0..a.len as u64).map(|i| map.byte(start.wrapping_add(i))).collect();
    let matches = bytes.iter().zip(&backing).filter(|(r, b)| r.is_some() && r == b).count();
    let dump = |v: &[Option<u8>]| v.iter().map(|b| b.map_or("--".to_string(), |b| format!("{b:02x}"))).collect::<Vec<_>>().join(" ");
    let text = format!("{start:#018x}: {}\nbacking:            {}\n", dump(&bytes), dump(&backing));
    let result = serde_json::json!({
        "address": hex(start),
        "bytes": bytes,
        "backing": backing,
        "matching": matches,
        "failed": bytes.iter().filter(|b| b.is_none()).count(),
    });
    let mut cfg = serde_json::to_value(experiment_config(&profile, &sim, Some(a.imul_count)))?;
    cfg["os"] = serde_json::to_value(a.os)?;
    cfg["len"] = a.len.into();
    Ok(Outcome::ok(Report::new("read-memory", cfg, result, Summary::cycles(0))?, text))
}

fn export_profiles(a: &ExportArgs) -> Result<Outcome> {
    let toml = profiles_to_toml(&builtin_profiles());
    let text = match &a.out {
        Some(path) => {
            std::fs::write(path, &toml).with_context(|| format!("writing {}", path.display()))?;
            format!("wrote {} profiles to {}\n", builtin_profiles().len(), path.display())
        }
        None => toml,
    };
    Ok(Outcome { report: None, text, exit: 0 })
}
