// SPDX-License-Identifier: Apache-2.0

//! Generic VM images: every VM uses the same guest-physical windows and is
//! relocated only by its offsets.

use serde::{Deserialize, Serialize};

use super::config::{DecisionKind, Hex, Owner, ScenarioConfig, TraceStep};
use super::{ScenarioError, Session};
use crate::match_engine::{AccessKind, AccessRequest, Mode, PrivilegeContext, VmId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenericStep {
    pub gpa: Hex,
    pub kind: AccessKind,
    pub decision: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pa: Option<Hex>,
    /// `pa - gpa` for permitted steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Hex>,
    /// Whether `delta` equals the configured offset of the region hit.
    pub offset_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmTrace {
    pub vm: VmId,
    pub steps: Vec<GenericStep>,
}

/// Physical placement of one region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysInterval {
    pub owner: Owner,
    pub region: String,
    pub base: Hex,
    pub end_inclusive: Hex,
}

impl PhysInterval {
    pub fn overlaps(&self, other: &PhysInterval) -> bool {
        self.base <= other.end_inclusive && other.base <= self.end_inclusive
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenericReport {
    pub traces: Vec<VmTrace>,
    pub intervals: Vec<PhysInterval>,
    /// Pairs of region names whose physical intervals intersect.
    pub overlaps: Vec<(String, String)>,
    pub disjoint: bool,
    pub all_permitted: bool,
    pub constant_offsets: bool,
    pub passed: bool,
}

fn windows(cfg: &ScenarioConfig, vm: VmId) -> Vec<(u64, u64)> {
    let mut w: Vec<(u64, u64)> = cfg
        .regions
        .iter()
        .filter(|r| r.owner == Owner::Vm(vm))
        .map(|r| (r.base.0, r.end_inclusive.0))
        .collect();
    w.sort_unstable();
    w
}

/// GPA/kind pairs replayed for each VM: the config's access steps, or the
/// corners of the first VM's windows when the trace has none.
fn probe_trace(cfg: &ScenarioConfig) -> Vec<(u64, AccessKind)> {
    let from_trace: Vec<(u64, AccessKind)> = cfg
        .trace
        .iter()
        .filter_map(|s| match s {
            TraceStep::Access(a) => Some((a.gpa.0, a.kind)),
            TraceStep::Switch(_) => None,
        })
        .collect();
    if !from_trace.is_empty() {
        return from_trace;
    }
    let Some(first) = cfg.vms.first() else {
        return Vec::new();
    };
    cfg.regions
        .iter()
        .filter(|r| r.owner == Owner::Vm(first.vm_id))
        .flat_map(|r| {
            let kind = if r.perms.x {
                AccessKind::Execute
            } else {
                AccessKind::Read
            };
            let (base, end) = (r.base.0, r.end_inclusive.0);
            [base, (base + (end + 1 - base) / 2) & !3, end - 3].map(|a| (a, kind))
        })
        .collect()
}

/// Replays one GPA trace under every VM and checks that the translated
/// physical images do not intersect each other or the hypervisor's regions.
///
/// `trace` overrides the probe list; each entry is a GPA and access kind
/// issued from VS mode with 4-byte size.
pub fn run_generic_images(
    cfg: &ScenarioConfig,
    trace: Option<&[(u64, AccessKind)]>,
) -> Result<GenericReport, ScenarioError> {
    let Some(first) = cfg.vms.first() else {
        return Err(ScenarioError::Validation(
            "generic images need at least one VM".into(),
        ));
    };
    let reference = windows(cfg, first.vm_id);
    for vm in &cfg.vms[1..] {
        if windows(cfg, vm.vm_id) != reference {
            return Err(ScenarioError::Validation(format!(
                "{} does not share the guest-physical windows of {}",
                vm.vm_id, first.vm_id
            )));
        }
    }
    let defaults;
    let trace = match trace {
        Some(t) => t,
        None => {
            defaults = probe_trace(cfg);
            &defaults
        }
    };

    let mut session = Session::new(cfg)?;
    let mut traces = Vec::with_capacity(cfg.vms.len());
    for vm in &cfg.vms {
        if session.active_vm() != Some(vm.vm_id) {
            session.switch_to(vm.vm_id)?;
        }
        let ctx = PrivilegeContext::guest(Mode::VS, vm.vm_id)
            .map_err(|e| ScenarioError::Validation(e.to_string()))?;
        let mut steps = Vec::with_capacity(trace.len());
        for &(gpa, kind) in trace {
            let req = AccessRequest::new(gpa, 4, kind, ctx)
                .map_err(|e| ScenarioError::Validation(e.to_string()))?;
            let verdict = session.check(&req)?;
            let pa = verdict.pa.map(|p| p.get());
            let delta = pa.map(|p| p.wrapping_sub(gpa));
            let expected = cfg
                .regions
                .iter()
                .find(|r| {
                    r.owner == Owner::Vm(vm.vm_id) && r.base.0 <= gpa && gpa <= r.end_inclusive.0
                })
                .map(|r| cfg.offset_of(vm.vm_id, &r.name));
            steps.push(GenericStep {
                gpa: Hex(gpa),
                kind,
                decision: if verdict.is_permit() {
                    DecisionKind::Permit
                } else {
                    DecisionKind::Deny
                },
                pa: pa.map(Hex),
                delta: delta.map(Hex),
                offset_matches: delta.is_some() && delta == expected,
            });
        }
        traces.push(VmTrace {
            vm: vm.vm_id,
            steps,
        });
    }

    let intervals: Vec<PhysInterval> = cfg
        .regions
        .iter()
        .map(|r| {
            let off = match r.owner {
                Owner::Vm(vm) => cfg.offset_of(vm, &r.name),
                Owner::Hv => 0,
            };
            PhysInterval {
                owner: r.owner,
                region: r.name.clone(),
                base: Hex(r.base.0 + off),
                end_inclusive: Hex(r.end_inclusive.0 + off),
            }
        })
        .collect();
    let mut overlaps = Vec::new();
    for (i, a) in intervals.iter().enumerate() {
        for b in &intervals[i + 1..] {
            if a.owner != b.owner && a.overlaps(b) {
                overlaps.push((a.region.clone(), b.region.clone()));
            }
        }
    }

    let all_permitted = traces
        .iter()
        .all(|t| t.steps.iter().all(|s| s.decision == DecisionKind::Permit));
    let constant_offsets = traces
        .iter()
        .all(|t| t.steps.iter().all(|s| s.offset_matches));
    let disjoint = overlaps.is_empty();
    Ok(GenericReport {
        traces,
        intervals,
        overlaps,
        disjoint,
        all_permitted,
        constant_offsets,
        passed: disjoint && all_permitted && constant_offsets,
    })
}
