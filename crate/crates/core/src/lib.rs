// SPDX-License-Identifier: Apache-2.0

//! Functional model of a two-level RISC-V physical memory protection unit
//! whose second (hypervisor) stage translates guest-physical addresses by a
//! per-region offset.
//!
//! Accesses from a guest pass the guest-controlled vSPMP first and the
//! hypervisor-controlled hPMP second. A hit in hPMP region `k` relocates the
//! address by `hpmpoffset[2k+1]`. Hypervisor accesses are checked against
//! hPMP only and never translated; M-mode bypasses both stages.

pub mod csr;
pub mod hypervisor;
pub mod match_engine;
pub mod oracle;
pub mod pipeline;
pub mod scenarios;
pub mod translate;

pub use csr::{ByteRegion, ConfigError, CsrFile, CsrName, EntryCfg, MatchMode, Perms, RuleFile};
pub use hypervisor::{
    schedule_next, vm_switch, CpuToken, Hypervisor, HypervisorError, SchedulePolicy, SwitchMetrics,
    VmContext,
};
pub use match_engine::{
    check_permission, match_access, match_range, AccessKind, AccessRequest, DenyReason,
    MatchResult, Mode, PrivilegeContext, RequestError, VmId,
};
pub use oracle::oracle_check;
pub use pipeline::{AccessVerdict, AtomicityViolation, Decision, MachineState, Stage};
pub use translate::{translate_hit, PhysicalAddress, TranslationOverflow};
