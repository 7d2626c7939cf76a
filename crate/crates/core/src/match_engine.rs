// SPDX-License-Identifier: Apache-2.0

//! Region matching and S-bit permission evaluation shared by both stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csr::{ByteRegion, PHYS_ADDR_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("access size {0} is not one of 1, 2 or 4 bytes")]
    BadSize(u8),
    #[error("address {addr:#x} is not aligned to the {size}-byte access size")]
    Misaligned { addr: u64, size: u8 },
    #[error("access at {0:#x} extends beyond the 34-bit address space")]
    OutOfRange(u64),
    #[error("{0}")]
    BadContext(String),
    #[error("cannot parse `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    #[serde(rename = "R", alias = "Read")]
    Read,
    #[serde(rename = "W", alias = "Write")]
    Write,
    #[serde(rename = "X", alias = "Execute")]
    Execute,
}

impl AccessKind {
    pub const ALL: [AccessKind; 3] = [AccessKind::Read, AccessKind::Write, AccessKind::Execute];
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "R",
            AccessKind::Write => "W",
            AccessKind::Execute => "X",
        })
    }
}

impl FromStr for AccessKind {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "R" | "READ" => Ok(AccessKind::Read),
            "W" | "WRITE" => Ok(AccessKind::Write),
            "X" | "EXECUTE" => Ok(AccessKind::Execute),
            _ => Err(RequestError::Parse(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    M,
    HS,
    VS,
    VU,
}

impl Mode {
    /// Virtualization bit implied by the mode.
    pub fn v(self) -> bool {
        matches!(self, Mode::VS | Mode::VU)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Mode {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "M" => Ok(Mode::M),
            "HS" => Ok(Mode::HS),
            "VS" => Ok(Mode::VS),
            "VU" => Ok(Mode::VU),
            _ => Err(RequestError::Parse(s.to_owned())),
        }
    }
}

/// Virtual machine identifier, rendered as `VM<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VmId(pub u32);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VM{}", self.0)
    }
}

impl FromStr for VmId {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("VM")
            .or_else(|| s.strip_prefix("vm"))
            .and_then(|n| n.parse().ok())
            .map(VmId)
            .ok_or_else(|| RequestError::Parse(s.to_owned()))
    }
}

impl Serialize for VmId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VmId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Privilege context of an access. Guest modes always carry a VM id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrivilegeContext {
    mode: Mode,
    vm: Option<VmId>,
}

impl PrivilegeContext {
    pub fn machine() -> Self {
        PrivilegeContext {
            mode: Mode::M,
            vm: None,
        }
    }

    pub fn hypervisor() -> Self {
        PrivilegeContext {
            mode: Mode::HS,
            vm: None,
        }
    }

    pub fn guest(mode: Mode, vm: VmId) -> Result<Self, RequestError> {
        if !mode.v() {
            return Err(RequestError::BadContext(format!(
                "{mode} is not a guest mode"
            )));
        }
        Ok(PrivilegeContext { mode, vm: Some(vm) })
    }

    /// Builds a context from a mode and an optional VM, rejecting
    /// combinations that violate the V-bit/VM pairing.
    pub fn new(mode: Mode, vm: Option<VmId>) -> Result<Self, RequestError> {
        match (mode.v(), vm) {
            (true, Some(vm)) => Self::guest(mode, vm),
            (true, None) => Err(RequestError::BadContext(format!(
                "{mode} access requires a VM id"
            ))),
            (false, _) => Ok(PrivilegeContext { mode, vm: None }),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn v(&self) -> bool {
        self.mode.v()
    }

    pub fn vm(&self) -> Option<VmId> {
        self.vm
    }
}

/// One naturally aligned memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessRequest {
    gpa: u64,
    size: u8,
    kind: AccessKind,
    ctx: PrivilegeContext,
}

impl AccessRequest {
    pub fn new(
        gpa: u64,
        size: u8,
        kind: AccessKind,
        ctx: PrivilegeContext,
    ) -> Result<Self, RequestError> {
        if !matches!(size, 1 | 2 | 4) {
            return Err(RequestError::BadSize(size));
        }
        if !gpa.is_multiple_of(u64::from(size)) {
            return Err(RequestError::Misaligned { addr: gpa, size });
        }
        if gpa + u64::from(size) > PHYS_ADDR_LIMIT {
            return Err(RequestError::OutOfRange(gpa));
        }
        Ok(AccessRequest {
            gpa,
            size,
            kind,
            ctx,
        })
    }

    pub fn gpa(&self) -> u64 {
        self.gpa
    }

    pub fn size(&self) -> u8 {
        self.size
    }

    pub fn kind(&self) -> AccessKind {
        self.kind
    }

    pub fn ctx(&self) -> PrivilegeContext {
        self.ctx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchResult {
    Hit { region: usize, entry: usize },
    NoMatch,
    SpanViolation { entry: usize },
}

fn is_active(enabled: u64, region: &ByteRegion) -> bool {
    enabled >> region.entry_index & 1 == 1
}

/// Matches the byte range `[start, start + len)` against the active regions.
///
/// Regions are scanned in ascending entry order. The first active region
/// holding any byte of the range decides: it is a hit when it holds every
/// byte, a span violation otherwise. This is the base PMP priority rule.
pub fn match_range(regions: &[ByteRegion], enabled: u64, start: u64, len: u64) -> MatchResult {
    debug_assert!(len > 0);
    let last = start + len - 1;
    let mut active: Vec<&ByteRegion> = regions.iter().filter(|r| is_active(enabled, r)).collect();
    active.sort_by_key(|r| r.entry_index);
    for r in active {
        let overlaps = !r.is_empty() && r.base <= last && start < r.top;
        if !overlaps {
            continue;
        }
        return if r.contains(start) && r.contains(last) {
            MatchResult::Hit {
                region: r.region_index(),
                entry: r.entry_index,
            }
        } else {
            MatchResult::SpanViolation {
                entry: r.entry_index,
            }
        };
    }
    MatchResult::NoMatch
}

pub fn match_access(regions: &[ByteRegion], enabled: u64, req: &AccessRequest) -> MatchResult {
    match_range(regions, enabled, req.gpa, u64::from(req.size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyReason {
    NoMatch,
    SpanViolation,
    /// The rule's S bit does not belong to the requesting context.
    SMismatch,
    PermsMiss,
    Overflow,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenyReason::NoMatch => "no-match",
            DenyReason::SpanViolation => "span-violation",
            DenyReason::SMismatch => "s-mismatch",
            DenyReason::PermsMiss => "perms-miss",
            DenyReason::Overflow => "overflow",
        })
    }
}

/// Evaluates a hit rule for a context that needs rules with S == `required_s`.
pub fn check_rule(
    region: &ByteRegion,
    kind: AccessKind,
    required_s: bool,
) -> Result<(), DenyReason> {
    if region.s != required_s {
        return Err(DenyReason::SMismatch);
    }
    let allowed = match kind {
        AccessKind::Read => region.perms.r,
        AccessKind::Write => region.perms.w,
        AccessKind::Execute => region.perms.x,
    };
    if allowed {
        Ok(())
    } else {
        Err(DenyReason::PermsMiss)
    }
}

/// hPMP permission check: guests (V=1) need S=0 rules, HS needs S=1 rules.
/// M-mode never reaches this check.
pub fn check_permission(region: &ByteRegion, req: &AccessRequest) -> Result<(), DenyReason> {
    debug_assert!(req.ctx.mode != Mode::M, "M-mode bypasses protection");
    check_rule(region, req.kind, !req.ctx.v())
}
