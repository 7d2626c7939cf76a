// SPDX-License-Identifier: Apache-2.0

//! hPMP control and status registers.
//!
//! The register file holds 64 address entries, 16 packed configuration
//! registers (four 8-bit entry configs each), the two-word `hpmpswitch`
//! enable bitmap and 64 `hpmpoffset` registers. Address and offset
//! registers store bits `[33:2]` of a 34-bit physical address, so every
//! decoded boundary is a multiple of four bytes.
//!
//! Only the OFF-TOR couple layout is supported: even entries are always
//! `OFF` and supply a region base, odd entries may be `TOR` and supply the
//! exclusive top together with the permissions. The vSPMP stage reuses the
//! same layout without the offset registers, see [`RuleFile`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of implemented entries.
pub const ENTRY_COUNT: usize = 64;
/// Number of packed `hpmpcfg` registers.
pub const CFG_REGISTER_COUNT: usize = ENTRY_COUNT / 4;
/// Number of 32-bit `hpmpswitch` words.
pub const SWITCH_REGISTER_COUNT: usize = 2;
/// Width of the modeled physical address space.
pub const PHYS_ADDR_BITS: u32 = 34;
/// One past the highest byte address of the physical address space.
pub const PHYS_ADDR_LIMIT: u64 = 1 << PHYS_ADDR_BITS;
/// Largest exclusive top an address register can encode.
pub const MAX_ENCODABLE_TOP: u64 = (u32::MAX as u64) << 2;

const CFG_R: u8 = 1 << 0;
const CFG_W: u8 = 1 << 1;
const CFG_X: u8 = 1 << 2;
const CFG_A_SHIFT: u8 = 3;
const CFG_A_MASK: u8 = 0b11;
const CFG_S: u8 = 1 << 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{name} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        name: CsrName,
        index: usize,
        limit: usize,
    },
    #[error("{0} is not implemented by this register file")]
    UnsupportedRegister(CsrName),
    #[error("unknown CSR name `{0}`")]
    UnknownName(String),
    #[error("offset for even entry {0} is hardwired to zero")]
    EvenOffset(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Register group names accepted by [`CsrFile::write`] and [`CsrFile::read`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsrName {
    Hpmpaddr,
    Hpmpcfg,
    Hpmpswitch,
    Hpmpoffset,
}

impl CsrName {
    pub const ALL: [CsrName; 4] = [
        CsrName::Hpmpaddr,
        CsrName::Hpmpcfg,
        CsrName::Hpmpswitch,
        CsrName::Hpmpoffset,
    ];

    /// Number of registers in this group.
    pub fn count(self) -> usize {
        match self {
            CsrName::Hpmpaddr | CsrName::Hpmpoffset => ENTRY_COUNT,
            CsrName::Hpmpcfg => CFG_REGISTER_COUNT,
            CsrName::Hpmpswitch => SWITCH_REGISTER_COUNT,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CsrName::Hpmpaddr => "hpmpaddr",
            CsrName::Hpmpcfg => "hpmpcfg",
            CsrName::Hpmpswitch => "hpmpswitch",
            CsrName::Hpmpoffset => "hpmpoffset",
        }
    }
}

impl fmt::Display for CsrName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CsrName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CsrName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::UnknownName(s.to_owned()))
    }
}

/// Address-matching mode. NA4 and NAPOT encodings are reserved here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MatchMode {
    #[default]
    Off,
    Tor,
}

/// Read/write/execute permission bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Perms {
    pub const NONE: Perms = Perms::new(false, false, false);
    pub const R: Perms = Perms::new(true, false, false);
    pub const RW: Perms = Perms::new(true, true, false);
    pub const RX: Perms = Perms::new(true, false, true);
    pub const RWX: Perms = Perms::new(true, true, true);

    pub const fn new(r: bool, w: bool, x: bool) -> Self {
        Perms { r, w, x }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (set, c) in [(self.r, 'R'), (self.w, 'W'), (self.x, 'X')] {
            if set {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Perms {
    type Err = ConfigError;

    /// Accepts the permission sets used by region tables: `R`, `RW`, `RX`, `RWX`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "R" => Ok(Perms::R),
            "RW" => Ok(Perms::RW),
            "RX" => Ok(Perms::RX),
            "RWX" => Ok(Perms::RWX),
            other => Err(ConfigError::Invalid(format!(
                "unsupported permission string `{other}` (expected R, RW, RX or RWX)"
            ))),
        }
    }
}

impl Serialize for Perms {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One decoded 8-bit entry configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EntryCfg {
    pub perms: Perms,
    pub mode: MatchMode,
    /// Supervisor rule bit. In hPMP, `S=1` marks hypervisor regions.
    pub s: bool,
}

impl EntryCfg {
    pub const fn tor(perms: Perms, s: bool) -> Self {
        EntryCfg {
            perms,
            mode: MatchMode::Tor,
            s,
        }
    }

    pub fn to_byte(self) -> u8 {
        let mut b = 0;
        if self.perms.r {
            b |= CFG_R;
        }
        if self.perms.w {
            b |= CFG_W;
        }
        if self.perms.x {
            b |= CFG_X;
        }
        if self.mode == MatchMode::Tor {
            b |= 1 << CFG_A_SHIFT;
        }
        if self.s {
            b |= CFG_S;
        }
        b
    }

    /// Decodes a config byte. Returns `None` for A encodings that are
    /// reserved at this entry position (NA4/NAPOT anywhere, TOR on an even
    /// entry). Bits 5 and 6 are ignored.
    pub fn from_byte(byte: u8, entry: usize) -> Option<Self> {
        let mode = match (byte >> CFG_A_SHIFT) & CFG_A_MASK {
            0b00 => MatchMode::Off,
            0b01 if entry % 2 == 1 => MatchMode::Tor,
            _ => return None,
        };
        Some(EntryCfg {
            perms: Perms::new(byte & CFG_R != 0, byte & CFG_W != 0, byte & CFG_X != 0),
            mode,
            s: byte & CFG_S != 0,
        })
    }
}

/// A decoded OFF-TOR couple: bytes `[base, top)` guarded by the odd entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ByteRegion {
    pub base: u64,
    pub top: u64,
    pub perms: Perms,
    pub s: bool,
    /// Odd entry `2k + 1` carrying the TOR config.
    pub entry_index: usize,
}

impl ByteRegion {
    /// Couple number `k`.
    pub fn region_index(&self) -> usize {
        self.entry_index / 2
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.base <= addr && addr < self.top
    }

    pub fn is_empty(&self) -> bool {
        self.base >= self.top
    }
}

fn check_index(name: CsrName, index: usize) -> Result<(), ConfigError> {
    if index < name.count() {
        Ok(())
    } else {
        Err(ConfigError::IndexOutOfRange {
            name,
            index,
            limit: name.count(),
        })
    }
}

/// Address, config and enable registers shared by both protection stages.
///
/// Used directly as the guest-owned vSPMP file, which has no offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleFile {
    addr: [u32; ENTRY_COUNT],
    cfg: [u32; CFG_REGISTER_COUNT],
    switch: [u32; SWITCH_REGISTER_COUNT],
}

impl Default for RuleFile {
    fn default() -> Self {
        RuleFile {
            addr: [0; ENTRY_COUNT],
            cfg: [0; CFG_REGISTER_COUNT],
            switch: [0; SWITCH_REGISTER_COUNT],
        }
    }
}

impl RuleFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, name: CsrName, index: usize, value: u32) -> Result<(), ConfigError> {
        check_index(name, index)?;
        match name {
            CsrName::Hpmpaddr => self.addr[index] = value,
            CsrName::Hpmpcfg => self.write_cfg(index, value),
            CsrName::Hpmpswitch => self.switch[index] = value,
            CsrName::Hpmpoffset => return Err(ConfigError::UnsupportedRegister(name)),
        }
        Ok(())
    }

    pub fn read(&self, name: CsrName, index: usize) -> Result<u32, ConfigError> {
        check_index(name, index)?;
        match name {
            CsrName::Hpmpaddr => Ok(self.addr[index]),
            CsrName::Hpmpcfg => Ok(self.cfg[index]),
            CsrName::Hpmpswitch => Ok(self.switch[index]),
            CsrName::Hpmpoffset => Err(ConfigError::UnsupportedRegister(name)),
        }
    }

    // WARL: each byte is checked on its own, reserved bytes keep the old value.
    fn write_cfg(&mut self, reg: usize, value: u32) {
        let old = self.cfg[reg].to_le_bytes();
        let mut new = value.to_le_bytes();
        for (lane, byte) in new.iter_mut().enumerate() {
            match EntryCfg::from_byte(*byte, reg * 4 + lane) {
                Some(cfg) => *byte = cfg.to_byte(),
                None => *byte = old[lane],
            }
        }
        self.cfg[reg] = u32::from_le_bytes(new);
    }

    pub fn entry_cfg(&self, entry: usize) -> EntryCfg {
        let byte = self.cfg[entry / 4].to_le_bytes()[entry % 4];
        // Stored bytes were validated on write.
        EntryCfg::from_byte(byte, entry).unwrap_or_default()
    }

    /// Sets a single entry config through the regular WARL write path.
    pub fn set_entry_cfg(&mut self, entry: usize, cfg: EntryCfg) -> Result<(), ConfigError> {
        check_index(CsrName::Hpmpaddr, entry)?;
        let reg = entry / 4;
        let mut bytes = self.cfg[reg].to_le_bytes();
        bytes[entry % 4] = cfg.to_byte();
        self.write(CsrName::Hpmpcfg, reg, u32::from_le_bytes(bytes))
    }

    pub fn addr(&self, entry: usize) -> u32 {
        self.addr[entry]
    }

    /// The 64-bit enable bitmap formed by both `hpmpswitch` words.
    pub fn enabled(&self) -> u64 {
        u64::from(self.switch[0]) | (u64::from(self.switch[1]) << 32)
    }

    pub fn set_enabled(&mut self, bitmap: u64) {
        self.switch = [bitmap as u32, (bitmap >> 32) as u32];
    }

    /// Programs couple `k` (entries `2k`, `2k+1`) as `[base, top)` with
    /// the given permissions. Boundaries must be 4-byte aligned and encodable.
    pub fn set_region(
        &mut self,
        k: usize,
        base: u64,
        top: u64,
        perms: Perms,
        s: bool,
    ) -> Result<(), ConfigError> {
        if k >= ENTRY_COUNT / 2 {
            return Err(ConfigError::IndexOutOfRange {
                name: CsrName::Hpmpaddr,
                index: 2 * k + 1,
                limit: ENTRY_COUNT,
            });
        }
        for v in [base, top] {
            if v % 4 != 0 || v > MAX_ENCODABLE_TOP {
                return Err(ConfigError::Invalid(format!(
                    "region boundary {v:#x} is not an encodable 4-byte granule"
                )));
            }
        }
        self.addr[2 * k] = (base >> 2) as u32;
        self.addr[2 * k + 1] = (top >> 2) as u32;
        self.set_entry_cfg(2 * k, EntryCfg::default())?;
        self.set_entry_cfg(2 * k + 1, EntryCfg::tor(perms, s))
    }

    /// Decodes every odd entry in TOR mode into a byte region, ascending by entry.
    pub fn decode_regions(&self) -> Vec<ByteRegion> {
        (1..ENTRY_COUNT)
            .step_by(2)
            .filter_map(|entry| {
                let cfg = self.entry_cfg(entry);
                (cfg.mode == MatchMode::Tor).then(|| ByteRegion {
                    base: u64::from(self.addr[entry - 1]) << 2,
                    top: u64::from(self.addr[entry]) << 2,
                    perms: cfg.perms,
                    s: cfg.s,
                    entry_index: entry,
                })
            })
            .collect()
    }
}

/// The hypervisor-owned hPMP register file: rules plus per-entry offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CsrFile {
    rules: RuleFile,
    offset: [u32; ENTRY_COUNT],
}

impl Default for CsrFile {
    fn default() -> Self {
        CsrFile {
            rules: RuleFile::default(),
            offset: [0; ENTRY_COUNT],
        }
    }
}

impl CsrFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes one register. Even `hpmpoffset` writes are dropped and
    /// reserved config bytes keep their previous value.
    pub fn write(&mut self, name: CsrName, index: usize, value: u32) -> Result<(), ConfigError> {
        match name {
            CsrName::Hpmpoffset => {
                check_index(name, index)?;
                if index % 2 == 1 {
                    self.offset[index] = value;
                }
                Ok(())
            }
            _ => self.rules.write(name, index, value),
        }
    }

    pub fn read(&self, name: CsrName, index: usize) -> Result<u32, ConfigError> {
        match name {
            CsrName::Hpmpoffset => {
                check_index(name, index)?;
                Ok(self.offset[index])
            }
            _ => self.rules.read(name, index),
        }
    }

    pub fn rules(&self) -> &RuleFile {
        &self.rules
    }

    pub fn rules_mut(&mut self) -> &mut RuleFile {
        &mut self.rules
    }

    /// Offset applied on hits of `entry`, in bytes.
    pub fn offset_bytes(&self, entry: usize) -> u64 {
        u64::from(self.offset[entry]) << 2
    }

    pub fn entry_cfg(&self, entry: usize) -> EntryCfg {
        self.rules.entry_cfg(entry)
    }

    pub fn enabled(&self) -> u64 {
        self.rules.enabled()
    }

    pub fn set_enabled(&mut self, bitmap: u64) {
        self.rules.set_enabled(bitmap)
    }

    pub fn set_region(
        &mut self,
        k: usize,
        base: u64,
        top: u64,
        perms: Perms,
        s: bool,
    ) -> Result<(), ConfigError> {
        self.rules.set_region(k, base, top, perms, s)
    }

    pub fn decode_regions(&self) -> Vec<ByteRegion> {
        self.rules.decode_regions()
    }
}
