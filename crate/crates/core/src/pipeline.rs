// SPDX-License-Identifier: Apache-2.0

//! Two-stage access check: the guest's vSPMP followed by the hypervisor's
//! hPMP, which also performs the offset translation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csr::{ByteRegion, ConfigError, CsrFile, RuleFile};
use crate::hypervisor::{CpuToken, CsrTarget, CsrWrite, SwitchTransaction};
use crate::match_engine::{
    check_permission, check_rule, match_access, AccessRequest, DenyReason, MatchResult, Mode, VmId,
};
use crate::translate::{translate_hit, PhysicalAddress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vspmp,
    Hpmp,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Vspmp => "vspmp",
            Stage::Hpmp => "hpmp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Permit,
    Deny { stage: Stage, reason: DenyReason },
}

/// Outcome of one access. `pa` is present exactly when the access is permitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessVerdict {
    pub decision: Decision,
    pub pa: Option<PhysicalAddress>,
    pub vspmp_entry: Option<usize>,
    pub hpmp_entry: Option<usize>,
}

impl AccessVerdict {
    fn permit(pa: PhysicalAddress, vspmp_entry: Option<usize>, hpmp_entry: Option<usize>) -> Self {
        AccessVerdict {
            decision: Decision::Permit,
            pa: Some(pa),
            vspmp_entry,
            hpmp_entry,
        }
    }

    fn deny(stage: Stage, reason: DenyReason) -> Self {
        AccessVerdict {
            decision: Decision::Deny { stage, reason },
            pa: None,
            vspmp_entry: None,
            hpmp_entry: None,
        }
    }

    pub fn is_permit(&self) -> bool {
        self.decision == Decision::Permit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error(
    "access evaluated while a switch transaction is open ({applied} of {total} writes applied)"
)]
pub struct AtomicityViolation {
    pub applied: usize,
    pub total: usize,
}

/// Protection state of one hart.
#[derive(Debug, Clone, Default)]
pub struct MachineState {
    pub hpmp: CsrFile,
    /// Guest-owned first stage of the running VM. Carries no offsets.
    pub vspmp: RuleFile,
    pub active_vm: Option<VmId>,
    pub cpu: CpuToken,
    txn: Option<SwitchTransaction>,
}

impl MachineState {
    pub fn new(hpmp: CsrFile) -> Self {
        MachineState {
            hpmp,
            ..Default::default()
        }
    }

    pub fn transaction_open(&self) -> bool {
        self.txn.is_some()
    }

    /// Opens a transaction. All writes are validated up front so that a
    /// rejected transaction leaves the machine untouched.
    pub fn begin(&mut self, writes: Vec<CsrWrite>) -> Result<(), TransactionError> {
        if let Some(txn) = &self.txn {
            return Err(TransactionError::Atomicity(txn.violation()));
        }
        let mut probe_h = CsrFile::new();
        let mut probe_v = RuleFile::new();
        for w in &writes {
            match w.target {
                CsrTarget::Hpmp => probe_h.write(w.name, w.index, w.value)?,
                CsrTarget::Vspmp => probe_v.write(w.name, w.index, w.value)?,
            }
        }
        self.txn = Some(SwitchTransaction::new(writes));
        Ok(())
    }

    /// Applies the next pending write. Returns `false` once all writes are applied.
    pub fn step(&mut self) -> bool {
        let Some(txn) = self.txn.as_mut() else {
            return false;
        };
        let Some(w) = txn.next_write() else {
            return false;
        };
        let res = match w.target {
            CsrTarget::Hpmp => self.hpmp.write(w.name, w.index, w.value),
            CsrTarget::Vspmp => self.vspmp.write(w.name, w.index, w.value),
        };
        debug_assert!(res.is_ok(), "writes are validated in begin");
        true
    }

    /// Applies the remaining writes in order and closes the transaction.
    /// Returns the number of writes the transaction carried.
    pub fn commit(&mut self) -> usize {
        while self.step() {}
        self.txn.take().map_or(0, |t| t.len())
    }

    pub fn check_access(&self, req: &AccessRequest) -> Result<AccessVerdict, AtomicityViolation> {
        if let Some(txn) = &self.txn {
            return Err(txn.violation());
        }
        Ok(match req.ctx().mode() {
            Mode::M => AccessVerdict::permit(
                PhysicalAddress::new(req.gpa()).expect("request addresses are 34-bit"),
                None,
                None,
            ),
            Mode::HS => self.hpmp_stage(req, None),
            Mode::VS | Mode::VU => {
                let regions = self.vspmp.decode_regions();
                match match_access(&regions, self.vspmp.enabled(), req) {
                    MatchResult::NoMatch => AccessVerdict::deny(Stage::Vspmp, DenyReason::NoMatch),
                    MatchResult::SpanViolation { entry } => AccessVerdict {
                        vspmp_entry: Some(entry),
                        ..AccessVerdict::deny(Stage::Vspmp, DenyReason::SpanViolation)
                    },
                    MatchResult::Hit { entry, .. } => {
                        let rule = find(&regions, entry);
                        // VS-mode uses S=1 rules, VU-mode S=0 rules.
                        match check_rule(rule, req.kind(), req.ctx().mode() == Mode::VS) {
                            Ok(()) => self.hpmp_stage(req, Some(entry)),
                            Err(reason) => AccessVerdict {
                                vspmp_entry: Some(entry),
                                ..AccessVerdict::deny(Stage::Vspmp, reason)
                            },
                        }
                    }
                }
            }
        })
    }

    fn hpmp_stage(&self, req: &AccessRequest, vspmp_entry: Option<usize>) -> AccessVerdict {
        let regions = self.hpmp.decode_regions();
        let denied = |reason, hpmp_entry| AccessVerdict {
            vspmp_entry,
            hpmp_entry,
            ..AccessVerdict::deny(Stage::Hpmp, reason)
        };
        match match_access(&regions, self.hpmp.enabled(), req) {
            MatchResult::NoMatch => denied(DenyReason::NoMatch, None),
            MatchResult::SpanViolation { entry } => denied(DenyReason::SpanViolation, Some(entry)),
            MatchResult::Hit { entry, .. } => {
                if let Err(reason) = check_permission(find(&regions, entry), req) {
                    return denied(reason, Some(entry));
                }
                match translate_hit(&self.hpmp, entry, req) {
                    Ok(pa) => AccessVerdict::permit(pa, vspmp_entry, Some(entry)),
                    Err(_) => denied(DenyReason::Overflow, Some(entry)),
                }
            }
        }
    }
}

fn find(regions: &[ByteRegion], entry: usize) -> &ByteRegion {
    regions
        .iter()
        .find(|r| r.entry_index == entry)
        .expect("hit entry comes from the same region list")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransactionError {
    #[error(transparent)]
    Atomicity(#[from] AtomicityViolation),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
