// SPDX-License-Identifier: Apache-2.0

//! Human-readable dump of an hPMP register file.

use serde::{Deserialize, Serialize};

use super::config::Hex;
use crate::csr::{CsrFile, CsrName, EntryCfg, MatchMode, ENTRY_COUNT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryDump {
    pub entry: usize,
    /// Raw `hpmpaddr` register value (address bits 33..2).
    pub register: Hex,
    /// `byte_base` for OFF entries, `byte_end_inclusive` for TOR entries.
    pub label: String,
    pub byte_address: Hex,
    /// Config byte in table notation, e.g. `S TOR RW` or `OFF`.
    pub cfg: String,
    pub cfg_byte: Hex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetDump {
    pub entry: usize,
    pub register: Hex,
    pub byte_offset: Hex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrDump {
    pub entries: Vec<EntryDump>,
    pub hpmpswitch: [Hex; 2],
    pub offsets: Vec<OffsetDump>,
}

fn cfg_notation(cfg: EntryCfg) -> String {
    match cfg.mode {
        MatchMode::Off => "OFF".to_owned(),
        MatchMode::Tor => format!("{} TOR {}", if cfg.s { "S" } else { "-" }, cfg.perms),
    }
}

/// Dumps every couple that is programmed (nonzero address or TOR config)
/// and every nonzero offset.
pub fn dump_csrs(file: &CsrFile) -> CsrDump {
    let mut entries = Vec::new();
    for k in 0..ENTRY_COUNT / 2 {
        let (lo, hi) = (2 * k, 2 * k + 1);
        let addr = |e| file.read(CsrName::Hpmpaddr, e).expect("entry in range");
        let programmed =
            addr(lo) != 0 || addr(hi) != 0 || file.entry_cfg(hi).mode == MatchMode::Tor;
        if !programmed {
            continue;
        }
        for e in [lo, hi] {
            let cfg = file.entry_cfg(e);
            let reg = u64::from(addr(e));
            let (label, byte) = match cfg.mode {
                MatchMode::Tor => ("byte_end_inclusive", (reg << 2).wrapping_sub(1)),
                MatchMode::Off => ("byte_base", reg << 2),
            };
            entries.push(EntryDump {
                entry: e,
                register: Hex(reg),
                label: label.to_owned(),
                byte_address: Hex(byte),
                cfg: cfg_notation(cfg),
                cfg_byte: Hex(u64::from(cfg.to_byte())),
            });
        }
    }
    let offsets = (1..ENTRY_COUNT)
        .step_by(2)
        .filter(|&e| file.offset_bytes(e) != 0)
        .map(|e| OffsetDump {
            entry: e,
            register: Hex(file.offset_bytes(e) >> 2),
            byte_offset: Hex(file.offset_bytes(e)),
        })
        .collect();
    let sw = |i| {
        Hex(u64::from(
            file.read(CsrName::Hpmpswitch, i).expect("switch word"),
        ))
    };
    CsrDump {
        entries,
        hpmpswitch: [sw(0), sw(1)],
        offsets,
    }
}
