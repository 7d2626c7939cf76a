// SPDX-License-Identifier: Apache-2.0

//! `hpmp-sim`: command-line front end for the two-stage PMP simulator.
//!
//! Every subcommand writes JSON Lines to stdout (or `--out`). Exit status is
//! 0 when all expectations hold, 1 on an expectation mismatch and 2 on a
//! configuration, parse or I/O error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hpmp_core::oracle::{cross_check, seed_from_env};
use hpmp_core::scenarios::{
    dump_csrs, load_config, load_trace, load_update, parse_int, run_generic_images,
    run_partial_update, run_trace_steps, write_jsonl, AccessStep, DecisionKind, Expectation, Hex,
    Owner, Probe, ProbeVerdict, RunOptions, ScenarioConfig, Session, TraceStep,
};
use hpmp_core::{AccessKind, Mode, SchedulePolicy, SwitchMetrics, VmId};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "hpmp-sim",
    version,
    about = "Two-stage RISC-V PMP simulator with offset translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a single access.
    Check {
        config: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long, value_parser = parse_vm)]
        vm: Option<VmId>,
        #[arg(long)]
        kind: AccessKind,
        #[arg(long, default_value_t = 4)]
        size: u8,
        #[arg(long, value_parser = parse_addr)]
        addr: u64,
        /// Expected decision; a mismatch exits with status 1.
        #[arg(long, value_parser = parse_decision)]
        expect: Option<DecisionKind>,
    },
    /// Replay the config's trace, or a JSONL trace file.
    Run {
        config: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cross-check every access against the brute-force oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Apply CSR updates in one transaction and compare probe verdicts.
    Update {
        config: PathBuf,
        #[arg(long)]
        apply: PathBuf,
        /// JSONL probe list; defaults to every region's corners.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay one GPA trace under every VM and check physical disjointness.
    Generic {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run round-robin VM switches and report the metrics distribution.
    SwitchBench {
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the hPMP register file after loading the config.
    Dump {
        config: PathBuf,
        /// Switch to this VM before dumping.
        #[arg(long, value_parser = parse_vm)]
        vm: Option<VmId>,
    },
    /// Compare the pipeline with the oracle on random cases seeded by HPMP_SIM_SEED.
    Crosscheck {
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        max_regions: usize,
    },
}

fn parse_vm(s: &str) -> Result<VmId, String> {
    s.parse()
        .or_else(|_| s.parse::<u32>().map(VmId))
        .map_err(|_| format!("expected VM<n> or <n>, got `{s}`"))
}

fn parse_decision(s: &str) -> Result<DecisionKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "permit" => Ok(DecisionKind::Permit),
        "deny" => Ok(DecisionKind::Deny),
        _ => Err(format!("expected permit or deny, got `{s}`")),
    }
}

fn parse_addr(s: &str) -> Result<u64, String> {
    parse_int(s).ok_or_else(|| format!("not an integer: `{s}`"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn config(path: &Path) -> Result<ScenarioConfig> {
    load_config(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn line(w: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Runs a command; `Ok(false)` means an expectation was not met.
fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Check {
            config: path,
            mode,
            vm,
            kind,
            size,
            addr,
            expect,
        } => {
            let cfg = config(&path)?;
            let step = TraceStep::Access(AccessStep {
                step: 0,
                mode,
                vm,
                kind,
                size,
                gpa: Hex(addr),
                expect: expect.map(|decision| Expectation {
                    decision,
                    pa: None,
                    stage: None,
                    reason: None,
                }),
            });
            let out = run_trace_steps(&cfg, &[step], RunOptions::default())?;
            let mut w = sink(None)?;
            line(&mut w, &out.records[0])?;
            w.flush()?;
            Ok(out.summary.passed)
        }
        Command::Run {
            config: path,
            trace,
            out,
            oracle,
        } => {
            let cfg = config(&path)?;
            let steps = match &trace {
                Some(t) => {
                    load_trace(&read(t)?).with_context(|| format!("loading {}", t.display()))?
                }
                None => cfg.trace.clone(),
            };
            let outcome = run_trace_steps(&cfg, &steps, RunOptions { oracle })?;
            let mut w = sink(out.as_deref())?;
            write_jsonl(&outcome, &mut w)?;
            w.flush()?;
            Ok(outcome.summary.passed)
        }
        Command::Update {
            config: path,
            apply,
            probes,
            out,
        } => {
            let cfg = config(&path)?;
            let update = load_update(&read(&apply)?)
                .with_context(|| format!("loading {}", apply.display()))?;
            let probes = probes.map(|p| load_probes(&p)).transpose()?;
            let report = run_partial_update(&cfg, &update, probes.as_deref())?;
            let mut w = sink(out.as_deref())?;
            for p in &report.probes {
                line(&mut w, p)?;
            }
            let summary = json!({"summary": {
                "write_count": report.write_count,
                "probes": report.probes.len(),
                "changed": report.changed,
            }});
            line(&mut w, &summary)?;
            w.flush()?;
            Ok(true)
        }
        Command::Generic { config: path, out } => {
            let report = run_generic_images(&config(&path)?, None)?;
            let mut w = sink(out.as_deref())?;
            for t in &report.traces {
                for s in &t.steps {
                    let mut v = serde_json::to_value(s)?;
                    v["vm"] = json!(t.vm);
                    line(&mut w, &v)?;
                }
            }
            for i in &report.intervals {
                line(&mut w, &json!({ "interval": i }))?;
            }
            let summary = json!({"summary": {
                "disjoint": report.disjoint,
                "overlaps": report.overlaps,
                "all_permitted": report.all_permitted,
                "constant_offsets": report.constant_offsets,
                "passed": report.passed,
            }});
            line(&mut w, &summary)?;
            w.flush()?;
            Ok(report.passed)
        }
        Command::SwitchBench {
            config: path,
            iterations,
            out,
        } => switch_bench(&config(&path)?, iterations, out.as_deref()),
        Command::Dump { config: path, vm } => {
            let mut session = Session::new(&config(&path)?)?;
            if let Some(vm) = vm {
                session.switch_to(vm)?;
            }
            let mut w = sink(None)?;
            line(&mut w, &dump_csrs(&session.machine().hpmp))?;
            w.flush()?;
            Ok(true)
        }
        Command::Crosscheck { cases, max_regions } => {
            if max_regions == 0 || max_regions > 32 {
                bail!("--max-regions must be in 1..=32");
            }
            let report = cross_check(seed_from_env(), cases, max_regions);
            let mut w = sink(None)?;
            for m in &report.mismatches {
                let r = m.request;
                line(
                    &mut w,
                    &json!({"mismatch": {
                        "case": m.case,
                        "mode": r.ctx().mode(),
                        "vm": r.ctx().vm(),
                        "kind": r.kind(),
                        "size": r.size(),
                        "gpa": Hex(r.gpa()),
                        "pipeline": ProbeVerdict::from(m.pipeline),
                        "oracle": ProbeVerdict::from(m.oracle),
                    }}),
                )?;
            }
            line(
                &mut w,
                &json!({"summary": {
                    "seed": Hex(report.seed),
                    "cases": report.cases,
                    "permits": report.permits,
                    "denies": report.denies_by_reason,
                    "mismatches": report.mismatches.len(),
                }}),
            )?;
            w.flush()?;
            Ok(report.mismatches.is_empty())
        }
    }
}

fn load_probes(path: &Path) -> Result<Vec<Probe>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}: bad probe", path.display(), i + 1))
        })
        .collect()
}

fn switch_bench(cfg: &ScenarioConfig, iterations: usize, out: Option<&Path>) -> Result<bool> {
    let mut session = Session::new(cfg)?;
    let hv_mask = cfg.owner_mask(Owner::Hv);
    let Some(hv) = session.hypervisor_mut() else {
        bail!("switch-bench needs at least one VM");
    };
    let mut dist: Vec<(SwitchMetrics, usize)> = Vec::new();
    let mut hv_preserved = true;
    for _ in 0..iterations {
        let m = hv.switch_next(SchedulePolicy::RoundRobin)?;
        hv_preserved &= hv.machine().hpmp.enabled() & hv_mask == hv_mask;
        match dist.iter_mut().find(|(d, _)| *d == m) {
            Some((_, n)) => *n += 1,
            None => dist.push((m, 1)),
        }
    }
    let n = iterations.max(1) as f64;
    let mean = dist
        .iter()
        .map(|(m, c)| m.write_count as f64 * *c as f64)
        .sum::<f64>()
        / n;
    let variance = dist
        .iter()
        .map(|(m, c)| (m.write_count as f64 - mean).powi(2) * *c as f64)
        .sum::<f64>()
        / n;
    let mut w = sink(out)?;
    for (m, count) in &dist {
        let mut v = serde_json::to_value(m)?;
        v["count"] = json!(count);
        line(&mut w, &v)?;
    }
    let deterministic = dist.len() <= 1;
    line(
        &mut w,
        &json!({"summary": {
            "iterations": iterations,
            "distinct_metrics": dist.len(),
            "write_count_mean": mean,
            "write_count_variance": variance,
            "hv_mask": Hex(hv_mask),
            "hv_bits_preserved": hv_preserved,
            "passed": deterministic && hv_preserved,
        }}),
    )?;
    w.flush()?;
    Ok(deterministic && hv_preserved)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("hpmp-sim: {e:#}");
            ExitCode::from(2)
        }
    }
}
