// SPDX-License-Identifier: Apache-2.0

//! VM contexts and the switch procedure.
//!
//! A switch saves the running VM's guest state, then reprograms the hPMP
//! inside one [`SwitchTransaction`]: the outgoing VM's entries are disabled
//! in `hpmpswitch`, the incoming VM's offsets are written, its entries are
//! enabled and its vSPMP image is installed. Hypervisor (S=1) entries stay
//! enabled throughout. The transaction has a fixed shape, so the number of
//! CSR writes depends only on the two images involved.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csr::{
    ConfigError, CsrFile, CsrName, MatchMode, RuleFile, CFG_REGISTER_COUNT, ENTRY_COUNT,
    SWITCH_REGISTER_COUNT,
};
use crate::match_engine::{AccessRequest, VmId};
use crate::pipeline::{AccessVerdict, AtomicityViolation, MachineState, TransactionError};

/// Opaque stand-in for the architectural CPU state of a VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CpuToken(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CsrTarget {
    Hpmp,
    Vspmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CsrWrite {
    pub target: CsrTarget,
    pub name: CsrName,
    pub index: usize,
    pub value: u32,
}

impl CsrWrite {
    pub fn hpmp(name: CsrName, index: usize, value: u32) -> Self {
        CsrWrite {
            target: CsrTarget::Hpmp,
            name,
            index,
            value,
        }
    }

    pub fn vspmp(name: CsrName, index: usize, value: u32) -> Self {
        CsrWrite {
            target: CsrTarget::Vspmp,
            name,
            index,
            value,
        }
    }
}

/// Ordered CSR writes applied as one critical section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchTransaction {
    writes: Vec<CsrWrite>,
    applied: usize,
}

impl SwitchTransaction {
    pub(crate) fn new(writes: Vec<CsrWrite>) -> Self {
        SwitchTransaction { writes, applied: 0 }
    }

    pub(crate) fn next_write(&mut self) -> Option<CsrWrite> {
        let w = self.writes.get(self.applied).copied()?;
        self.applied += 1;
        Some(w)
    }

    pub(crate) fn violation(&self) -> AtomicityViolation {
        AtomicityViolation {
            applied: self.applied,
            total: self.writes.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.writes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.writes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HypervisorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Atomicity(#[from] AtomicityViolation),
    #[error("{vm} is not the running VM")]
    NotRunning { vm: VmId },
    #[error("entry {entry} of {vm} is a hypervisor (S=1) entry")]
    HypervisorEntryInMask { vm: VmId, entry: usize },
    #[error("no VMs to schedule")]
    NoVms,
    #[error("VM index {0} out of range")]
    UnknownVm(usize),
}

impl From<TransactionError> for HypervisorError {
    fn from(e: TransactionError) -> Self {
        match e {
            TransactionError::Atomicity(a) => HypervisorError::Atomicity(a),
            TransactionError::Config(c) => HypervisorError::Config(c),
        }
    }
}

/// Saved per-VM state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmContext {
    vm_id: VmId,
    pub vspmp_image: RuleFile,
    switch_mask: u64,
    offset_image: BTreeMap<usize, u32>,
    pub cpu_state: CpuToken,
}

impl VmContext {
    /// `offset_image` maps odd hPMP entries to encoded offset values.
    pub fn new(
        vm_id: VmId,
        vspmp_image: RuleFile,
        switch_mask: u64,
        offset_image: BTreeMap<usize, u32>,
    ) -> Result<Self, ConfigError> {
        for &entry in offset_image.keys() {
            if entry >= ENTRY_COUNT {
                return Err(ConfigError::IndexOutOfRange {
                    name: CsrName::Hpmpoffset,
                    index: entry,
                    limit: ENTRY_COUNT,
                });
            }
            if entry % 2 == 0 {
                return Err(ConfigError::EvenOffset(entry));
            }
        }
        Ok(VmContext {
            vm_id,
            vspmp_image,
            switch_mask,
            offset_image,
            cpu_state: CpuToken::default(),
        })
    }

    pub fn vm_id(&self) -> VmId {
        self.vm_id
    }

    pub fn switch_mask(&self) -> u64 {
        self.switch_mask
    }

    pub fn offset_image(&self) -> &BTreeMap<usize, u32> {
        &self.offset_image
    }

    /// Replaces one offset of the image, keeping it coherent with live CSR updates.
    pub fn set_offset(&mut self, entry: usize, value: u32) -> Result<(), ConfigError> {
        if entry.is_multiple_of(2) || entry >= ENTRY_COUNT {
            return Err(ConfigError::EvenOffset(entry));
        }
        self.offset_image.insert(entry, value);
        Ok(())
    }

    /// Fails if the mask covers an S=1 entry of `hpmp`.
    pub fn validate_against(&self, hpmp: &CsrFile) -> Result<(), HypervisorError> {
        for entry in (1..ENTRY_COUNT).step_by(2) {
            let cfg = hpmp.entry_cfg(entry);
            if self.switch_mask >> entry & 1 == 1 && cfg.mode == MatchMode::Tor && cfg.s {
                return Err(HypervisorError::HypervisorEntryInMask {
                    vm: self.vm_id,
                    entry,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SwitchMetrics {
    pub write_count: usize,
    pub entries_disabled: u32,
    pub entries_enabled: u32,
}

/// Enable bits of every hypervisor (S=1, TOR) couple.
pub fn hypervisor_mask(hpmp: &CsrFile) -> u64 {
    (1..ENTRY_COUNT)
        .step_by(2)
        .filter(|&e| {
            let cfg = hpmp.entry_cfg(e);
            cfg.mode == MatchMode::Tor && cfg.s
        })
        .fold(0, |m, e| m | 1 << e)
}

fn switch_words(bitmap: u64) -> [u32; SWITCH_REGISTER_COUNT] {
    [bitmap as u32, (bitmap >> 32) as u32]
}

fn vspmp_writes(image: &RuleFile) -> impl Iterator<Item = CsrWrite> + '_ {
    let reads = |name: CsrName, count: usize| {
        (0..count).map(move |i| {
            CsrWrite::vspmp(name, i, image.read(name, i).expect("index within group"))
        })
    };
    reads(CsrName::Hpmpaddr, ENTRY_COUNT)
        .chain(reads(CsrName::Hpmpcfg, CFG_REGISTER_COUNT))
        .chain(reads(CsrName::Hpmpswitch, SWITCH_REGISTER_COUNT))
}

/// The write sequence that reprograms the machine from `current` to `next`.
pub fn switch_writes(hpmp: &CsrFile, current: &VmContext, next: &VmContext) -> Vec<CsrWrite> {
    let cleared = hpmp.enabled() & !current.switch_mask;
    let enabled = cleared | next.switch_mask;
    let mut writes = Vec::new();
    for (i, w) in switch_words(cleared).into_iter().enumerate() {
        writes.push(CsrWrite::hpmp(CsrName::Hpmpswitch, i, w));
    }
    for (&entry, &value) in &next.offset_image {
        writes.push(CsrWrite::hpmp(CsrName::Hpmpoffset, entry, value));
    }
    for (i, w) in switch_words(enabled).into_iter().enumerate() {
        writes.push(CsrWrite::hpmp(CsrName::Hpmpswitch, i, w));
    }
    writes.extend(vspmp_writes(&next.vspmp_image));
    writes
}

/// Saves `current` and opens the reprogramming transaction for `next`.
/// The machine rejects accesses until [`complete_switch`] runs.
pub fn begin_switch(
    state: &mut MachineState,
    current: &mut VmContext,
    next: &VmContext,
) -> Result<SwitchMetrics, HypervisorError> {
    if state.active_vm != Some(current.vm_id) {
        return Err(HypervisorError::NotRunning { vm: current.vm_id });
    }
    let writes = switch_writes(&state.hpmp, current, next);
    let write_count = writes.len();
    state.begin(writes)?;
    current.vspmp_image = state.vspmp.clone();
    current.cpu_state = state.cpu;
    Ok(SwitchMetrics {
        write_count,
        entries_disabled: current.switch_mask.count_ones(),
        entries_enabled: next.switch_mask.count_ones(),
    })
}

/// Commits the open transaction and resumes `next`.
pub fn complete_switch(state: &mut MachineState, next: &VmContext) {
    state.commit();
    state.cpu = next.cpu_state;
    state.active_vm = Some(next.vm_id);
}

/// Switches the machine from `current` (the running VM) to `next`.
pub fn vm_switch(
    state: &mut MachineState,
    current: &mut VmContext,
    next: &VmContext,
) -> Result<SwitchMetrics, HypervisorError> {
    let metrics = begin_switch(state, current, next)?;
    complete_switch(state, next);
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SchedulePolicy {
    #[default]
    RoundRobin,
}

pub fn schedule_next(
    policy: SchedulePolicy,
    vm_count: usize,
    current: usize,
) -> Result<usize, HypervisorError> {
    if vm_count == 0 {
        return Err(HypervisorError::NoVms);
    }
    match policy {
        SchedulePolicy::RoundRobin => Ok((current + 1) % vm_count),
    }
}

/// A machine plus the contexts of every VM it hosts.
#[derive(Debug, Clone)]
pub struct Hypervisor {
    machine: MachineState,
    vms: Vec<VmContext>,
    current: usize,
}

impl Hypervisor {
    /// Installs `vms[initial]` directly: hypervisor entries and the initial
    /// VM's entries are enabled, its offsets and vSPMP image are loaded.
    pub fn new(
        hpmp: CsrFile,
        vms: Vec<VmContext>,
        initial: usize,
    ) -> Result<Self, HypervisorError> {
        if vms.is_empty() {
            return Err(HypervisorError::NoVms);
        }
        let first = vms
            .get(initial)
            .ok_or(HypervisorError::UnknownVm(initial))?;
        for vm in &vms {
            vm.validate_against(&hpmp)?;
        }
        let mut machine = MachineState::new(hpmp);
        let hv = hypervisor_mask(&machine.hpmp);
        machine.hpmp.set_enabled(hv | first.switch_mask);
        for (&entry, &value) in &first.offset_image {
            machine.hpmp.write(CsrName::Hpmpoffset, entry, value)?;
        }
        machine.vspmp = first.vspmp_image.clone();
        machine.cpu = first.cpu_state;
        machine.active_vm = Some(first.vm_id);
        Ok(Hypervisor {
            machine,
            vms,
            current: initial,
        })
    }

    pub fn machine(&self) -> &MachineState {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut MachineState {
        &mut self.machine
    }

    pub fn vms(&self) -> &[VmContext] {
        &self.vms
    }

    pub fn vms_mut(&mut self) -> &mut [VmContext] {
        &mut self.vms
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn current_vm(&self) -> VmId {
        self.vms[self.current].vm_id
    }

    pub fn vm_index(&self, vm: VmId) -> Option<usize> {
        self.vms.iter().position(|c| c.vm_id == vm)
    }

    /// Opens a switch to `vms[index]` without committing it.
    pub fn begin_switch_to(&mut self, index: usize) -> Result<SwitchMetrics, HypervisorError> {
        if index >= self.vms.len() {
            return Err(HypervisorError::UnknownVm(index));
        }
        if index == self.current && !self.machine.transaction_open() {
            // Self-switch: the incoming image is the state being saved.
            let cur = &mut self.vms[index];
            cur.vspmp_image = self.machine.vspmp.clone();
            cur.cpu_state = self.machine.cpu;
        }
        let next = self.vms[index].clone();
        begin_switch(&mut self.machine, &mut self.vms[self.current], &next)
    }

    pub fn complete_switch_to(&mut self, index: usize) {
        // The image saved by begin_switch is the authoritative one on a self-switch.
        let next = self.vms[index].clone();
        complete_switch(&mut self.machine, &next);
        self.current = index;
    }

    pub fn switch_to(&mut self, index: usize) -> Result<SwitchMetrics, HypervisorError> {
        let metrics = self.begin_switch_to(index)?;
        self.complete_switch_to(index);
        Ok(metrics)
    }

    pub fn switch_next(
        &mut self,
        policy: SchedulePolicy,
    ) -> Result<SwitchMetrics, HypervisorError> {
        let next = schedule_next(policy, self.vms.len(), self.current)?;
        self.switch_to(next)
    }

    pub fn check(&self, req: &AccessRequest) -> Result<AccessVerdict, AtomicityViolation> {
        self.machine.check_access(req)
    }
}
