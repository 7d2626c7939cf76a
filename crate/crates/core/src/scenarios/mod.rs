// SPDX-License-Identifier: Apache-2.0

//! Declarative scenarios: configuration loading, trace replay, the
//! partial-update and generic-image experiments, and CSR dumps.

mod config;
mod dump;
mod generic;
mod trace;
mod update;

pub use config::{
    load_config, load_trace, parse_int, AccessStep, DecisionKind, Expectation, Hex, OffsetSpec,
    Owner, RegionSpec, RuleSpec, ScenarioConfig, SwitchStep, TraceStep, VmSpec, MAX_REGIONS,
};
pub use dump::{dump_csrs, CsrDump, EntryDump, OffsetDump};
pub use generic::{run_generic_images, GenericReport, GenericStep, PhysInterval, VmTrace};
pub use trace::{
    run_trace, run_trace_steps, write_jsonl, OutputRecord, RunOptions, TraceOutcome, TraceSummary,
    VerdictRecord,
};
pub use update::{
    default_probes, load_update, run_partial_update, Probe, ProbeOutcome, ProbeVerdict,
    UpdateReport, UpdateWrite,
};

use thiserror::Error;

use crate::csr::{ConfigError, CsrFile};
use crate::hypervisor::{hypervisor_mask, Hypervisor, HypervisorError, SwitchMetrics};
use crate::match_engine::{AccessRequest, VmId};
use crate::pipeline::{AccessVerdict, MachineState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("unknown VM `{0}`")]
    UnknownVm(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Hypervisor(#[from] HypervisorError),
}

impl ScenarioError {
    pub(crate) fn from_json(e: serde_json::Error) -> Self {
        ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// A running machine built from a config. Configs without VMs have no
/// hypervisor contexts; only HS and M accesses can be evaluated then.
#[derive(Debug, Clone)]
pub struct Session {
    hv: Option<Hypervisor>,
    bare: MachineState,
}

impl Session {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let hpmp: CsrFile = cfg.hpmp_file()?;
        if cfg.vms.is_empty() {
            let mut bare = MachineState::new(hpmp);
            let hv = hypervisor_mask(&bare.hpmp);
            bare.hpmp.set_enabled(hv);
            return Ok(Session { hv: None, bare });
        }
        let vms = cfg
            .vms
            .iter()
            .map(|spec| cfg.vm_context(spec))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Session {
            hv: Some(Hypervisor::new(hpmp, vms, 0)?),
            bare: MachineState::default(),
        })
    }

    pub fn machine(&self) -> &MachineState {
        self.hv.as_ref().map_or(&self.bare, |h| h.machine())
    }

    pub fn machine_mut(&mut self) -> &mut MachineState {
        match &mut self.hv {
            Some(h) => h.machine_mut(),
            None => &mut self.bare,
        }
    }

    pub fn hypervisor(&self) -> Option<&Hypervisor> {
        self.hv.as_ref()
    }

    pub fn hypervisor_mut(&mut self) -> Option<&mut Hypervisor> {
        self.hv.as_mut()
    }

    pub fn active_vm(&self) -> Option<VmId> {
        self.hv.as_ref().map(|h| h.current_vm())
    }

    pub fn switch_to(&mut self, vm: VmId) -> Result<SwitchMetrics, ScenarioError> {
        let hv = self
            .hv
            .as_mut()
            .ok_or_else(|| ScenarioError::UnknownVm(vm.to_string()))?;
        let index = hv
            .vm_index(vm)
            .ok_or_else(|| ScenarioError::UnknownVm(vm.to_string()))?;
        Ok(hv.switch_to(index)?)
    }

    /// Schedules the request's VM if a guest access comes from a VM that is
    /// not running. Returns whether a switch happened. Without VM contexts
    /// guest accesses run against the empty vSPMP and are denied.
    pub fn ensure_running(&mut self, req: &AccessRequest) -> Result<bool, ScenarioError> {
        match req.ctx().vm() {
            Some(vm) if req.ctx().v() && self.hv.is_some() && self.active_vm() != Some(vm) => {
                self.switch_to(vm)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn check(&self, req: &AccessRequest) -> Result<AccessVerdict, ScenarioError> {
        self.machine()
            .check_access(req)
            .map_err(|e| ScenarioError::Hypervisor(e.into()))
    }
}
