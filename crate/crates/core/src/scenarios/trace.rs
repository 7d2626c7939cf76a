// SPDX-License-Identifier: Apache-2.0

//! Trace replay with one JSON Lines verdict record per access.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::config::{AccessStep, DecisionKind, Expectation, Hex, ScenarioConfig, TraceStep};
use super::{ScenarioError, Session};
use crate::match_engine::{AccessKind, DenyReason, Mode, VmId};
use crate::oracle::oracle_check;
use crate::pipeline::{AccessVerdict, Decision, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Cross-check every access against the brute-force oracle.
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm: Option<VmId>,
    pub mode: Mode,
    pub kind: AccessKind,
    pub gpa: Hex,
    pub decision: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DenyReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pa: Option<Hex>,
    /// Entry of the stage that decided the access.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_entry: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vspmp_entry: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_met: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_agrees: Option<bool>,
}

impl VerdictRecord {
    pub fn new(step: &AccessStep, verdict: &AccessVerdict) -> Self {
        let (decision, stage, reason) = match verdict.decision {
            Decision::Permit => (DecisionKind::Permit, None, None),
            Decision::Deny { stage, reason } => (DecisionKind::Deny, Some(stage), Some(reason)),
        };
        let matched_entry = match stage {
            Some(Stage::Vspmp) => verdict.vspmp_entry,
            _ => verdict.hpmp_entry,
        };
        VerdictRecord {
            step: step.step,
            vm: if step.mode.v() { step.vm } else { None },
            mode: step.mode,
            kind: step.kind,
            gpa: step.gpa,
            decision,
            stage,
            reason,
            pa: verdict.pa.map(|p| Hex(p.get())),
            matched_entry,
            vspmp_entry: verdict.vspmp_entry,
            expect_met: None,
            oracle_agrees: None,
        }
    }

    /// Whether the record satisfies every field the expectation names.
    pub fn meets(&self, e: &Expectation) -> bool {
        self.decision == e.decision
            && e.pa.is_none_or(|pa| self.pa == Some(pa))
            && e.stage.is_none_or(|s| self.stage == Some(s))
            && e.reason.is_none_or(|r| self.reason == Some(r))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub accesses: usize,
    pub permits: usize,
    pub denies: usize,
    pub switches: usize,
    pub expectations: usize,
    pub expectation_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_mismatches: Option<usize>,
    pub passed: bool,
}

/// One line of the output stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputRecord {
    Summary { summary: TraceSummary },
    Verdict(VerdictRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceOutcome {
    pub records: Vec<VerdictRecord>,
    pub summary: TraceSummary,
}

/// Replays the config's own trace.
pub fn run_trace(cfg: &ScenarioConfig, opts: RunOptions) -> Result<TraceOutcome, ScenarioError> {
    run_trace_steps(cfg, &cfg.trace, opts)
}

/// Replays `steps` in order on a fresh machine built from `cfg`.
///
/// Switch steps invoke the VM switch. A guest access from a VM that is not
/// running schedules that VM first. Expectation mismatches mark the run as
/// failed without stopping it.
pub fn run_trace_steps(
    cfg: &ScenarioConfig,
    steps: &[TraceStep],
    opts: RunOptions,
) -> Result<TraceOutcome, ScenarioError> {
    for step in steps {
        cfg.validate_step(step)?;
    }
    let mut session = Session::new(cfg)?;
    let mut out = TraceOutcome::default();
    let mut oracle_mismatches = 0;
    for step in steps {
        match step {
            TraceStep::Switch(s) => {
                session.switch_to(s.switch)?;
                out.summary.switches += 1;
            }
            TraceStep::Access(a) => {
                let req = a.request()?;
                if session.ensure_running(&req)? {
                    out.summary.switches += 1;
                }
                let verdict = session.check(&req)?;
                let mut rec = VerdictRecord::new(a, &verdict);
                if let Some(e) = &a.expect {
                    let met = rec.meets(e);
                    rec.expect_met = Some(met);
                    out.summary.expectations += 1;
                    if !met {
                        out.summary.expectation_failures += 1;
                    }
                }
                if opts.oracle {
                    let agrees = oracle_check(session.machine(), &req) == verdict;
                    rec.oracle_agrees = Some(agrees);
                    if !agrees {
                        oracle_mismatches += 1;
                    }
                }
                out.summary.accesses += 1;
                match rec.decision {
                    DecisionKind::Permit => out.summary.permits += 1,
                    DecisionKind::Deny => out.summary.denies += 1,
                }
                out.records.push(rec);
            }
        }
    }
    if opts.oracle {
        out.summary.oracle_mismatches = Some(oracle_mismatches);
    }
    out.summary.passed = out.summary.expectation_failures == 0 && oracle_mismatches == 0;
    Ok(out)
}

/// Writes the records followed by the terminating summary line.
pub fn write_jsonl<W: Write>(out: &TraceOutcome, mut w: W) -> io::Result<()> {
    for rec in &out.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut w,
        &OutputRecord::Summary {
            summary: out.summary.clone(),
        },
    )?;
    w.write_all(b"\n")
}
