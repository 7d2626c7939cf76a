// SPDX-License-Identifier: Apache-2.0

//! Brute-force reference model.
//!
//! Works from raw register reads only and scans every byte of an access
//! against every entry. Nothing here calls into the region decoder, the
//! matcher, the permission check or the translation code it is meant to
//! cross-check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csr::{CsrFile, CsrName, RuleFile};
use crate::match_engine::{AccessKind, AccessRequest, DenyReason, Mode, PrivilegeContext, VmId};
use crate::pipeline::{AccessVerdict, Decision, MachineState, Stage};
use crate::translate::PhysicalAddress;

/// The oracle reports verdicts in the same shape as the pipeline.
pub type OracleVerdict = AccessVerdict;

/// Environment variable holding the seed of the randomized cross-check.
pub const SEED_ENV: &str = "HPMP_SIM_SEED";
pub const DEFAULT_SEED: u64 = 0x5EED_0001;

fn word(read: &dyn Fn(CsrName, usize) -> u32, name: CsrName, index: usize) -> u64 {
    u64::from(read(name, index))
}

/// Lowest enabled TOR entry whose `[addr[e-1] * 4, addr[e] * 4)` holds `byte`.
fn owner(read: &dyn Fn(CsrName, usize) -> u32, byte: u64) -> Option<usize> {
    let bitmap = word(read, CsrName::Hpmpswitch, 0) | word(read, CsrName::Hpmpswitch, 1) << 32;
    for entry in 0..64usize {
        let cfg = (word(read, CsrName::Hpmpcfg, entry / 4) >> (8 * (entry % 4))) & 0xFF;
        let tor = (cfg >> 3) & 0b11 == 0b01;
        if !tor || entry == 0 || (bitmap >> entry) & 1 == 0 {
            continue;
        }
        let lo = word(read, CsrName::Hpmpaddr, entry - 1) * 4;
        let hi = word(read, CsrName::Hpmpaddr, entry) * 4;
        if lo <= byte && byte < hi {
            return Some(entry);
        }
    }
    None
}

/// One protection stage: returns the owning entry or the deny reason.
fn stage(
    read: &dyn Fn(CsrName, usize) -> u32,
    gpa: u64,
    size: u64,
    kind: AccessKind,
    needs_s: bool,
) -> Result<usize, (DenyReason, Option<usize>)> {
    let owners: Vec<Option<usize>> = (gpa..gpa + size).map(|b| owner(read, b)).collect();
    let first = owners[0];
    if owners.iter().all(|o| o.is_none()) {
        return Err((DenyReason::NoMatch, None));
    }
    if first.is_none() || owners.iter().any(|o| *o != first) {
        let lowest = owners.iter().flatten().min().copied();
        return Err((DenyReason::SpanViolation, lowest));
    }
    let entry = first.unwrap();
    let cfg = (word(read, CsrName::Hpmpcfg, entry / 4) >> (8 * (entry % 4))) & 0xFF;
    let s = cfg & 0x80 != 0;
    if s != needs_s {
        return Err((DenyReason::SMismatch, Some(entry)));
    }
    let bit = match kind {
        AccessKind::Read => 0x1,
        AccessKind::Write => 0x2,
        AccessKind::Execute => 0x4,
    };
    if cfg & bit == 0 {
        return Err((DenyReason::PermsMiss, Some(entry)));
    }
    Ok(entry)
}

pub fn oracle_check(state: &MachineState, req: &AccessRequest) -> OracleVerdict {
    let (gpa, size, kind, mode) = (
        req.gpa(),
        u64::from(req.size()),
        req.kind(),
        req.ctx().mode(),
    );
    let deny = |stage, reason, vspmp_entry, hpmp_entry| AccessVerdict {
        decision: Decision::Deny { stage, reason },
        pa: None,
        vspmp_entry,
        hpmp_entry,
    };
    if mode == Mode::M {
        return AccessVerdict {
            decision: Decision::Permit,
            pa: PhysicalAddress::new(gpa),
            vspmp_entry: None,
            hpmp_entry: None,
        };
    }
    let guest = mode == Mode::VS || mode == Mode::VU;
    let hpmp_read = |n, i| state.hpmp.read(n, i).unwrap();
    let vspmp_read = |n, i| state.vspmp.read(n, i).unwrap();

    let mut vspmp_entry = None;
    if guest {
        match stage(&vspmp_read, gpa, size, kind, mode == Mode::VS) {
            Ok(e) => vspmp_entry = Some(e),
            Err((reason, e)) => return deny(Stage::Vspmp, reason, e, None),
        }
    }
    // Guests need S=0 hPMP rules, the hypervisor S=1 rules.
    let entry = match stage(&hpmp_read, gpa, size, kind, !guest) {
        Ok(e) => e,
        Err((reason, e)) => return deny(Stage::Hpmp, reason, vspmp_entry, e),
    };
    let pa = if guest {
        gpa + word(&hpmp_read, CsrName::Hpmpoffset, entry) * 4
    } else {
        gpa
    };
    if pa + size > 1 << 34 {
        return deny(Stage::Hpmp, DenyReason::Overflow, vspmp_entry, Some(entry));
    }
    AccessVerdict {
        decision: Decision::Permit,
        pa: PhysicalAddress::new(pa),
        vspmp_entry,
        hpmp_entry: Some(entry),
    }
}

/// Seed for randomized checks: `HPMP_SIM_SEED` (decimal or `0x` hex) or a fixed default.
pub fn seed_from_env() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| {
            let s = s.trim();
            match s.strip_prefix("0x") {
                Some(hex) => u64::from_str_radix(hex, 16).ok(),
                None => s.parse().ok(),
            }
        })
        .unwrap_or(DEFAULT_SEED)
}

// Random configurations concentrate on a small window so regions overlap
// and accesses hit; some cases live at the top of the address space to
// reach the overflow path.
const LOW_WINDOW: u64 = 0x400;
const HIGH_WINDOW: u64 = 0x3_FFFF_FC00;

fn random_rules(
    rng: &mut ChaCha8Rng,
    file: &mut RuleFile,
    window: u64,
    max_regions: usize,
) -> Vec<usize> {
    let n = rng.gen_range(0..=max_regions);
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..32usize);
        let base = window + 4 * rng.gen_range(0..200u64);
        let top = if rng.gen_bool(0.1) {
            base.saturating_sub(4 * rng.gen_range(0..4u64))
        } else {
            base + 4 * rng.gen_range(1..80u64)
        };
        let top = top.min(crate::csr::MAX_ENCODABLE_TOP);
        file.write(CsrName::Hpmpaddr, 2 * k, (base >> 2) as u32)
            .unwrap();
        file.write(CsrName::Hpmpaddr, 2 * k + 1, (top >> 2) as u32)
            .unwrap();
        let cfg_reg = (2 * k + 1) / 4;
        let lane = (2 * k + 1) % 4;
        let mut bytes = file.read(CsrName::Hpmpcfg, cfg_reg).unwrap().to_le_bytes();
        // Random R/W/X/S bits, TOR most of the time, occasionally a reserved A value.
        let a: u8 = if rng.gen_bool(0.9) {
            1
        } else {
            rng.gen_range(0..4)
        };
        bytes[lane] = rng.gen_range(0..8u8) | a << 3 | if rng.gen_bool(0.5) { 0x80 } else { 0 };
        file.write(CsrName::Hpmpcfg, cfg_reg, u32::from_le_bytes(bytes))
            .unwrap();
        entries.push(2 * k + 1);
    }
    let mut bitmap = 0u64;
    for &e in &entries {
        if rng.gen_bool(0.85) {
            bitmap |= 1 << e;
        }
    }
    if rng.gen_bool(0.1) {
        bitmap |= rng.gen::<u64>();
    }
    file.set_enabled(bitmap);
    entries
}

/// One random machine state and request with at most `max_regions` regions per stage.
pub fn random_case(rng: &mut ChaCha8Rng, max_regions: usize) -> (MachineState, AccessRequest) {
    let window = if rng.gen_bool(0.1) {
        HIGH_WINDOW
    } else {
        LOW_WINDOW
    };
    let mut hpmp = CsrFile::new();
    let entries = random_rules(rng, hpmp.rules_mut(), window, max_regions);
    for e in entries {
        let offset: u32 = match rng.gen_range(0..10) {
            0..=4 => 0,
            5..=8 => rng.gen_range(0..0x1000),
            _ => rng.gen(),
        };
        hpmp.write(CsrName::Hpmpoffset, e, offset).unwrap();
    }
    if rng.gen_bool(0.05) {
        let idx = rng.gen_range(0..64);
        hpmp.write(CsrName::Hpmpoffset, idx, rng.gen()).unwrap();
    }
    let mut state = MachineState::new(hpmp);
    if rng.gen_bool(0.4) {
        state
            .vspmp
            .set_region(
                0,
                0,
                crate::csr::MAX_ENCODABLE_TOP,
                crate::csr::Perms::RWX,
                rng.gen(),
            )
            .unwrap();
        state.vspmp.set_enabled(1 << 1);
    } else {
        random_rules(rng, &mut state.vspmp, window, max_regions);
    }

    let mode = [Mode::M, Mode::HS, Mode::VS, Mode::VU][rng.gen_range(0..4)];
    let ctx = PrivilegeContext::new(mode, Some(VmId(1))).unwrap();
    let size = [1u8, 2, 4][rng.gen_range(0..3)];
    let span = if window == HIGH_WINDOW {
        0x3FC
    } else {
        4 * 260
    };
    let gpa = (window + rng.gen_range(0..span)) & !(u64::from(size) - 1);
    let kind = AccessKind::ALL[rng.gen_range(0..3)];
    let req = AccessRequest::new(gpa, size, kind, ctx).expect("generated request is well-formed");
    (state, req)
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub case: usize,
    pub request: AccessRequest,
    pub pipeline: AccessVerdict,
    pub oracle: OracleVerdict,
}

#[derive(Debug, Clone, Default)]
pub struct CrossCheckReport {
    pub seed: u64,
    pub cases: usize,
    pub permits: usize,
    pub denies_by_reason: std::collections::BTreeMap<String, usize>,
    pub mismatches: Vec<Mismatch>,
}

/// Compares the pipeline with the oracle over `cases` seeded random pairs.
pub fn cross_check(seed: u64, cases: usize, max_regions: usize) -> CrossCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CrossCheckReport {
        seed,
        cases,
        ..Default::default()
    };
    for case in 0..cases {
        let (state, req) = random_case(&mut rng, max_regions);
        let pipeline = state.check_access(&req).expect("no transaction is open");
        let oracle = oracle_check(&state, &req);
        match pipeline.decision {
            Decision::Permit => report.permits += 1,
            Decision::Deny { stage, reason } => {
                *report
                    .denies_by_reason
                    .entry(format!("{stage}:{reason}"))
                    .or_default() += 1;
            }
        }
        if pipeline != oracle {
            report.mismatches.push(Mismatch {
                case,
                request: req,
                pipeline,
                oracle,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::Perms;

    fn vs(gpa: u64) -> AccessRequest {
        AccessRequest::new(
            gpa,
            4,
            AccessKind::Read,
            PrivilegeContext::guest(Mode::VS, VmId(1)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn all_zero_state_denies_guests() {
        let v = oracle_check(&MachineState::default(), &vs(0x1000));
        assert_eq!(
            v.decision,
            Decision::Deny {
                stage: Stage::Vspmp,
                reason: DenyReason::NoMatch
            }
        );
    }

    #[test]
    fn full_range_identity_configuration() {
        let mut hpmp = CsrFile::new();
        hpmp.set_region(0, 0, crate::csr::MAX_ENCODABLE_TOP, Perms::RWX, false)
            .unwrap();
        hpmp.set_enabled(1 << 1);
        let mut m = MachineState::new(hpmp);
        m.vspmp
            .set_region(0, 0, crate::csr::MAX_ENCODABLE_TOP, Perms::RWX, true)
            .unwrap();
        m.vspmp.set_enabled(1 << 1);
        for gpa in [0u64, 0x8000_0000, 0x3_FFFF_FFF8] {
            let v = oracle_check(&m, &vs(gpa));
            assert_eq!(v.pa.unwrap().get(), gpa);
            assert_eq!(v, m.check_access(&vs(gpa)).unwrap());
        }
    }

    #[test]
    fn random_cases_agree() {
        let report = cross_check(7, 2_000, 8);
        assert!(
            report.mismatches.is_empty(),
            "{:?}",
            report.mismatches.first()
        );
        assert!(report.permits > 0);
        assert!(
            report.denies_by_reason.len() >= 6,
            "{:?}",
            report.denies_by_reason
        );
    }
}
