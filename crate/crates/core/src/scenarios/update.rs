// SPDX-License-Identifier: Apache-2.0

//! Live reconfiguration: apply CSR updates in one transaction and compare
//! probe verdicts before and after.

use serde::{Deserialize, Serialize};

use super::config::{DecisionKind, Hex, Owner, ScenarioConfig};
use super::{ScenarioError, Session};
use crate::csr::{ConfigError, CsrName};
use crate::hypervisor::CsrWrite;
use crate::match_engine::{AccessKind, AccessRequest, DenyReason, Mode, PrivilegeContext, VmId};
use crate::pipeline::{AccessVerdict, Decision, Stage};

/// One register update. With `byte: true` the value is a byte address or
/// byte offset: odd `hpmpaddr` entries take the inclusive end address,
/// even entries the base, `hpmpoffset` the byte offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateWrite {
    pub csr: CsrName,
    pub index: usize,
    pub value: Hex,
    #[serde(default)]
    pub byte: bool,
}

impl UpdateWrite {
    /// Register value to store.
    pub fn encoded(&self) -> Result<u32, ConfigError> {
        let v = self.value.0;
        let bad = |why: &str| {
            ConfigError::Invalid(format!(
                "{}{} := {}: {why}",
                self.csr, self.index, self.value
            ))
        };
        let raw = if !self.byte {
            v
        } else {
            match self.csr {
                CsrName::Hpmpaddr if self.index % 2 == 1 => {
                    if v % 4 != 3 {
                        return Err(bad("inclusive end must be the last byte of a granule"));
                    }
                    (v + 1) >> 2
                }
                CsrName::Hpmpaddr | CsrName::Hpmpoffset => {
                    if !v.is_multiple_of(4) {
                        return Err(bad("byte value must be 4-byte aligned"));
                    }
                    v >> 2
                }
                _ => return Err(bad("byte values apply to hpmpaddr and hpmpoffset only")),
            }
        };
        u32::try_from(raw).map_err(|_| bad("value does not fit a 32-bit register"))
    }
}

/// Parses an update file: a JSON array of [`UpdateWrite`].
pub fn load_update(text: &str) -> Result<Vec<UpdateWrite>, ScenarioError> {
    serde_json::from_str(text).map_err(ScenarioError::from_json)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm: Option<VmId>,
    pub kind: AccessKind,
    pub gpa: Hex,
    #[serde(default = "four")]
    pub size: u8,
}

fn four() -> u8 {
    4
}

impl Probe {
    pub fn request(&self) -> Result<AccessRequest, ScenarioError> {
        let ctx = PrivilegeContext::new(self.mode, self.vm)
            .map_err(|e| ScenarioError::Validation(e.to_string()))?;
        AccessRequest::new(self.gpa.0, self.size, self.kind, ctx)
            .map_err(|e| ScenarioError::Validation(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub decision: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DenyReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pa: Option<Hex>,
}

impl From<AccessVerdict> for ProbeVerdict {
    fn from(v: AccessVerdict) -> Self {
        let (decision, stage, reason) = match v.decision {
            Decision::Permit => (DecisionKind::Permit, None, None),
            Decision::Deny { stage, reason } => (DecisionKind::Deny, Some(stage), Some(reason)),
        };
        ProbeVerdict {
            decision,
            stage,
            reason,
            pa: v.pa.map(|p| Hex(p.get())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub probe: Probe,
    pub before: ProbeVerdict,
    pub after: ProbeVerdict,
}

impl ProbeOutcome {
    pub fn changed(&self) -> bool {
        self.before != self.after
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub write_count: usize,
    pub changed: usize,
    pub probes: Vec<ProbeOutcome>,
}

/// Corner addresses (base, middle, last word) of every region, probed
/// from HS and from each VM in VS mode with every access kind.
pub fn default_probes(cfg: &ScenarioConfig) -> Vec<Probe> {
    let mut contexts = vec![(Mode::HS, None)];
    contexts.extend(cfg.vms.iter().map(|v| (Mode::VS, Some(v.vm_id))));
    let mut probes = Vec::new();
    for r in &cfg.regions {
        let (base, end) = (r.base.0, r.end_inclusive.0);
        let mid = (base + (end + 1 - base) / 2) & !3;
        let mut corners = vec![base, mid, end - 3];
        corners.dedup();
        for gpa in corners {
            for &(mode, vm) in &contexts {
                for kind in AccessKind::ALL {
                    probes.push(Probe {
                        mode,
                        vm,
                        kind,
                        gpa: Hex(gpa),
                        size: 4,
                    });
                }
            }
        }
    }
    probes
}

fn evaluate(session: &mut Session, probes: &[Probe]) -> Result<Vec<ProbeVerdict>, ScenarioError> {
    probes
        .iter()
        .map(|p| {
            let req = p.request()?;
            session.ensure_running(&req)?;
            Ok(session.check(&req)?.into())
        })
        .collect()
}

/// Applies `update` inside one hypervisor transaction and reports the
/// probe verdicts before and after. Offset writes are also recorded in the
/// owning VM's context so later switches keep them.
pub fn run_partial_update(
    cfg: &ScenarioConfig,
    update: &[UpdateWrite],
    probes: Option<&[Probe]>,
) -> Result<UpdateReport, ScenarioError> {
    let defaults;
    let probes = match probes {
        Some(p) => p,
        None => {
            defaults = default_probes(cfg);
            &defaults
        }
    };
    let writes = update
        .iter()
        .map(|u| Ok(CsrWrite::hpmp(u.csr, u.index, u.encoded()?)))
        .collect::<Result<Vec<_>, ConfigError>>()?;

    let session = Session::new(cfg)?;
    let before = evaluate(&mut session.clone(), probes)?;

    let mut updated = session;
    let machine = updated.machine_mut();
    machine.begin(writes.clone()).map_err(|e| match e {
        crate::pipeline::TransactionError::Config(c) => ScenarioError::Config(c),
        crate::pipeline::TransactionError::Atomicity(a) => ScenarioError::Hypervisor(a.into()),
    })?;
    let write_count = machine.commit();
    for w in writes
        .iter()
        .filter(|w| w.name == CsrName::Hpmpoffset && w.index % 2 == 1)
    {
        let owner = cfg.regions.get(w.index / 2).map(|r| r.owner);
        if let (Some(Owner::Vm(vm)), Some(hv)) = (owner, updated.hypervisor_mut()) {
            if let Some(i) = hv.vm_index(vm) {
                hv.vms_mut()[i].set_offset(w.index, w.value)?;
            }
        }
    }
    let after = evaluate(&mut updated, probes)?;

    let probes: Vec<ProbeOutcome> = probes
        .iter()
        .zip(before.into_iter().zip(after))
        .map(|(p, (before, after))| ProbeOutcome {
            probe: p.clone(),
            before,
            after,
        })
        .collect();
    Ok(UpdateReport {
        write_count,
        changed: probes.iter().filter(|p| p.changed()).count(),
        probes,
    })
}
