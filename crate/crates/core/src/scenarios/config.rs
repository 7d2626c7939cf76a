// SPDX-License-Identifier: Apache-2.0

//! JSON scenario documents.
//!
//! Addresses are byte addresses. Region ends are inclusive, as in a memory
//! map table; the loader converts them to exclusive TOR tops. Integers may be
//! JSON numbers or `0x`-prefixed strings, with `_` separators allowed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::csr::{CsrFile, Perms, RuleFile, MAX_ENCODABLE_TOP, PHYS_ADDR_LIMIT};
use crate::hypervisor::VmContext;
use crate::match_engine::{AccessKind, AccessRequest, DenyReason, Mode, PrivilegeContext, VmId};
use crate::pipeline::Stage;

/// Maximum number of OFF-TOR couples in 64 entries.
pub const MAX_REGIONS: usize = 32;

/// An integer that reads from a number or a hex string and writes as hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hex(pub u64);

impl Hex {
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Hex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Parses `0x1234_5678`, `1234` or `0b1010`.
pub fn parse_int(s: &str) -> Option<u64> {
    let cleaned: String = s.trim().chars().filter(|&c| c != '_').collect();
    if let Some(hex) = cleaned
        .strip_prefix("0x")
        .or_else(|| cleaned.strip_prefix("0X"))
    {
        u64::from_str_radix(hex, 16).ok()
    } else if let Some(bin) = cleaned.strip_prefix("0b") {
        u64::from_str_radix(bin, 2).ok()
    } else {
        cleaned.parse().ok()
    }
}

impl Serialize for Hex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Hex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Hex(n)),
            Raw::Str(s) => parse_int(&s)
                .map(Hex)
                .ok_or_else(|| serde::de::Error::custom(format!("invalid integer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Hv,
    Vm(VmId),
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Hv => f.write_str("HV"),
            Owner::Vm(vm) => vm.fmt(f),
        }
    }
}

impl Serialize for Owner {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Owner {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("HV") {
            return Ok(Owner::Hv);
        }
        s.parse()
            .map(Owner::Vm)
            .map_err(|_| serde::de::Error::custom(format!("owner must be HV or VM<n>, got `{s}`")))
    }
}

/// One hPMP region, stored in entries `2i` (OFF, base) and `2i+1` (TOR, end + 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub owner: Owner,
    pub base: Hex,
    pub end_inclusive: Hex,
    pub perms: Perms,
    #[serde(default)]
    pub s: bool,
}

/// One vSPMP rule. `s` marks a VS-mode rule, otherwise it applies to VU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub base: Hex,
    pub end_inclusive: Hex,
    pub perms: Perms,
    #[serde(default)]
    pub s: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetSpec {
    pub region: String,
    /// Byte offset added to guest-physical addresses hitting the region.
    pub offset: Hex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmSpec {
    pub vm_id: VmId,
    #[serde(default)]
    pub vspmp: Vec<RuleSpec>,
    #[serde(default)]
    pub offsets: Vec<OffsetSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionKind {
    Permit,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub decision: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pa: Option<Hex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DenyReason>,
}

fn default_size() -> u8 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessStep {
    pub step: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm: Option<VmId>,
    pub kind: AccessKind,
    #[serde(default = "default_size")]
    pub size: u8,
    pub gpa: Hex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectation>,
}

impl AccessStep {
    pub fn request(&self) -> Result<AccessRequest, ScenarioError> {
        let ctx = PrivilegeContext::new(self.mode, self.vm)
            .map_err(|e| ScenarioError::Validation(format!("step {}: {e}", self.step)))?;
        AccessRequest::new(self.gpa.0, self.size, self.kind, ctx)
            .map_err(|e| ScenarioError::Validation(format!("step {}: {e}", self.step)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchStep {
    pub step: u64,
    pub switch: VmId,
}

/// A trace entry: an access, or a `switch` pseudo-step scheduling a VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceStep {
    Switch(SwitchStep),
    Access(AccessStep),
}

impl TraceStep {
    pub fn step(&self) -> u64 {
        match self {
            TraceStep::Switch(s) => s.step,
            TraceStep::Access(a) => a.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub vms: Vec<VmSpec>,
    #[serde(default)]
    pub trace: Vec<TraceStep>,
}

/// Parses and validates a scenario document.
pub fn load_config(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(ScenarioError::from_json)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a JSON Lines trace, one step per non-empty line.
pub fn load_trace(text: &str) -> Result<Vec<TraceStep>, ScenarioError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ScenarioError::Parse {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(msg.into())
}

fn check_bounds(what: &str, base: u64, end: u64) -> Result<(), ScenarioError> {
    if !base.is_multiple_of(4) {
        return Err(invalid(format!(
            "{what}: base {base:#x} is not 4-byte aligned"
        )));
    }
    if end % 4 != 3 {
        return Err(invalid(format!(
            "{what}: end_inclusive {end:#x} must be the last byte of a 4-byte granule"
        )));
    }
    if base > end {
        return Err(invalid(format!(
            "{what}: base {base:#x} exceeds end_inclusive {end:#x}"
        )));
    }
    if end + 1 > MAX_ENCODABLE_TOP {
        return Err(invalid(format!(
            "{what}: end_inclusive {end:#x} is beyond the highest encodable top {:#x}",
            MAX_ENCODABLE_TOP - 1
        )));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.regions.len() > MAX_REGIONS {
            return Err(invalid(format!(
                "{} regions exceed the {MAX_REGIONS} OFF-TOR couples of 64 entries",
                self.regions.len()
            )));
        }
        let vm_ids: BTreeSet<VmId> = self.vms.iter().map(|v| v.vm_id).collect();
        if vm_ids.len() != self.vms.len() {
            return Err(invalid("duplicate vm_id"));
        }
        let mut names = BTreeSet::new();
        for r in &self.regions {
            if !names.insert(r.name.as_str()) {
                return Err(invalid(format!("duplicate region name `{}`", r.name)));
            }
            check_bounds(&format!("region `{}`", r.name), r.base.0, r.end_inclusive.0)?;
            match r.owner {
                Owner::Hv if !r.s => {
                    return Err(invalid(format!(
                        "hypervisor region `{}` must have s = true",
                        r.name
                    )))
                }
                Owner::Vm(_) if r.s => {
                    return Err(invalid(format!(
                        "VM region `{}` must have s = false",
                        r.name
                    )))
                }
                Owner::Vm(vm) if !vm_ids.contains(&vm) => {
                    return Err(ScenarioError::UnknownVm(vm.to_string()))
                }
                _ => {}
            }
        }
        for vm in &self.vms {
            if vm.vspmp.len() > MAX_REGIONS {
                return Err(invalid(format!("{}: too many vSPMP rules", vm.vm_id)));
            }
            for (i, rule) in vm.vspmp.iter().enumerate() {
                check_bounds(
                    &format!("{} vSPMP rule {i}", vm.vm_id),
                    rule.base.0,
                    rule.end_inclusive.0,
                )?;
            }
            let mut seen = BTreeSet::new();
            for off in &vm.offsets {
                let region = self
                    .region(&off.region)
                    .ok_or_else(|| ScenarioError::UnknownRegion(off.region.clone()))?;
                if region.owner != Owner::Vm(vm.vm_id) {
                    return Err(invalid(format!(
                        "{} sets an offset for `{}` owned by {}",
                        vm.vm_id, off.region, region.owner
                    )));
                }
                if off.offset.0 % 4 != 0 || off.offset.0 >= PHYS_ADDR_LIMIT {
                    return Err(invalid(format!(
                        "offset {} for `{}` is not a 4-byte granule below 2^34",
                        off.offset, off.region
                    )));
                }
                if !seen.insert(off.region.as_str()) {
                    return Err(invalid(format!("{} sets `{}` twice", vm.vm_id, off.region)));
                }
            }
        }
        for step in &self.trace {
            self.validate_step(step)?;
        }
        Ok(())
    }

    pub fn validate_step(&self, step: &TraceStep) -> Result<(), ScenarioError> {
        match step {
            TraceStep::Switch(s) => {
                self.vm_index(s.switch)?;
            }
            TraceStep::Access(a) => {
                a.request()?;
                if let (true, Some(vm)) = (a.mode.v(), a.vm) {
                    self.vm_index(vm)?;
                }
            }
        }
        Ok(())
    }

    pub fn region(&self, name: &str) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// Couple number of a region, i.e. its position in the list.
    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }

    pub fn vm_index(&self, vm: VmId) -> Result<usize, ScenarioError> {
        self.vms
            .iter()
            .position(|v| v.vm_id == vm)
            .ok_or_else(|| ScenarioError::UnknownVm(vm.to_string()))
    }

    /// Enable bits of the regions owned by `owner`.
    pub fn owner_mask(&self, owner: Owner) -> u64 {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.owner == owner)
            .fold(0, |m, (k, _)| m | 1 << (2 * k + 1))
    }

    /// hPMP register file with every region programmed and nothing enabled.
    pub fn hpmp_file(&self) -> Result<CsrFile, ScenarioError> {
        let mut file = CsrFile::new();
        for (k, r) in self.regions.iter().enumerate() {
            file.set_region(k, r.base.0, r.end_inclusive.0 + 1, r.perms, r.s)?;
        }
        Ok(file)
    }

    pub fn vm_context(&self, spec: &VmSpec) -> Result<VmContext, ScenarioError> {
        let mut vspmp = RuleFile::new();
        let mut enabled = 0u64;
        for (k, rule) in spec.vspmp.iter().enumerate() {
            vspmp.set_region(k, rule.base.0, rule.end_inclusive.0 + 1, rule.perms, rule.s)?;
            enabled |= 1 << (2 * k + 1);
        }
        vspmp.set_enabled(enabled);
        let mut offsets = BTreeMap::new();
        for off in &spec.offsets {
            let k = self
                .region_index(&off.region)
                .ok_or_else(|| ScenarioError::UnknownRegion(off.region.clone()))?;
            offsets.insert(2 * k + 1, (off.offset.0 >> 2) as u32);
        }
        Ok(VmContext::new(
            spec.vm_id,
            vspmp,
            self.owner_mask(Owner::Vm(spec.vm_id)),
            offsets,
        )?)
    }

    /// Byte offset a VM applies to a region (zero when not configured).
    pub fn offset_of(&self, vm: VmId, region: &str) -> u64 {
        self.vms
            .iter()
            .find(|v| v.vm_id == vm)
            .and_then(|v| v.offsets.iter().find(|o| o.region == region))
            .map_or(0, |o| o.offset.0)
    }
}
