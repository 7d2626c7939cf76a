// SPDX-License-Identifier: Apache-2.0

//! Offset translation of guest-physical addresses on hPMP hits.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csr::{CsrFile, PHYS_ADDR_LIMIT};
use crate::match_engine::AccessRequest;

/// A 34-bit host physical byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysicalAddress(u64);

impl PhysicalAddress {
    pub fn new(pa: u64) -> Option<Self> {
        (pa < PHYS_ADDR_LIMIT).then_some(PhysicalAddress(pa))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for PhysicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("gpa {gpa:#x} + offset {offset:#x} + {size} exceeds the 34-bit address space")]
pub struct TranslationOverflow {
    pub gpa: u64,
    pub offset: u64,
    pub size: u8,
}

/// Physical address of a request that hit `entry_index`.
///
/// Guests (V=1) get `gpa + (hpmpoffset[entry] << 2)`; V=0 accesses are
/// never translated.
pub fn translate_hit(
    file: &CsrFile,
    entry_index: usize,
    req: &AccessRequest,
) -> Result<PhysicalAddress, TranslationOverflow> {
    if !req.ctx().v() {
        return Ok(PhysicalAddress(req.gpa()));
    }
    let offset = file.offset_bytes(entry_index);
    let pa = req.gpa() + offset;
    if pa + u64::from(req.size()) > PHYS_ADDR_LIMIT {
        return Err(TranslationOverflow {
            gpa: req.gpa(),
            offset,
            size: req.size(),
        });
    }
    Ok(PhysicalAddress(pa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::CsrName;
    use crate::match_engine::{AccessKind, Mode, PrivilegeContext, VmId};
    use proptest::prelude::*;

    fn guest(gpa: u64, size: u8) -> AccessRequest {
        let ctx = PrivilegeContext::guest(Mode::VS, VmId(2)).unwrap();
        AccessRequest::new(gpa, size, AccessKind::Execute, ctx).unwrap()
    }

    fn with_offset(entry: usize, byte_offset: u64) -> CsrFile {
        let mut f = CsrFile::new();
        f.write(CsrName::Hpmpoffset, entry, (byte_offset >> 2) as u32)
            .unwrap();
        f
    }

    #[test]
    fn table2_offset_shifts_vm2_code() {
        let f = with_offset(11, 0x8_0000);
        // 0x800C_0000 + 0x0008_0000 computed by hand.
        assert_eq!(
            translate_hit(&f, 11, &guest(0x800C_0000, 4)).unwrap().get(),
            0x8014_0000
        );
    }

    #[test]
    fn zero_offset_is_identity() {
        let f = CsrFile::new();
        assert_eq!(
            translate_hit(&f, 13, &guest(0x9000_0000, 4)).unwrap().get(),
            0x9000_0000
        );
    }

    #[test]
    fn hypervisor_accesses_ignore_offsets() {
        let f = with_offset(17, 0x10_0000);
        let req = AccessRequest::new(
            0x9080_0000,
            4,
            AccessKind::Read,
            PrivilegeContext::hypervisor(),
        )
        .unwrap();
        assert_eq!(translate_hit(&f, 17, &req).unwrap().get(), 0x9080_0000);
    }

    #[test]
    fn overflow_faults() {
        let f = with_offset(1, 0x3_FFFF_FFFC);
        assert_eq!(f.read(CsrName::Hpmpoffset, 1).unwrap(), 0xFFFF_FFFF);
        assert_eq!(
            translate_hit(&f, 1, &guest(0x8, 4)),
            Err(TranslationOverflow {
                gpa: 8,
                offset: 0x3_FFFF_FFFC,
                size: 4
            })
        );
        // The last word of the address space is still reachable.
        let f = with_offset(1, 0x3_FFFF_FFF8);
        assert_eq!(
            translate_hit(&f, 1, &guest(0x4, 4)).unwrap().get(),
            0x3_FFFF_FFFC
        );
    }

    proptest! {
        #[test]
        fn translation_preserves_distances(off in 0u32..0x1000_0000, a in 0u64..0x10_0000, b in 0u64..0x10_0000) {
            let f = with_offset(5, u64::from(off) << 2);
            let (a, b) = (a * 4, b * 4);
            let pa = translate_hit(&f, 5, &guest(a, 4)).unwrap().get();
            let pb = translate_hit(&f, 5, &guest(b, 4)).unwrap().get();
            prop_assert_eq!(pa.wrapping_sub(pb), a.wrapping_sub(b));
        }
    }
}
