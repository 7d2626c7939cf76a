// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;

use hpmp_core::oracle::random_case;
use hpmp_core::scenarios::{load_config, Owner, ScenarioConfig, Session};
use hpmp_core::{
    check_permission, match_access, oracle_check, translate_hit, AccessKind, AccessRequest,
    Decision, DenyReason, MachineState, MatchResult, Mode, Perms, PrivilegeContext, Stage, VmId,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TABLE1: &str = include_str!("../fixtures/table1.json");

fn table1() -> ScenarioConfig {
    load_config(TABLE1).unwrap()
}

fn guest(vm: u32, gpa: u64, kind: AccessKind) -> AccessRequest {
    AccessRequest::new(
        gpa,
        4,
        kind,
        PrivilegeContext::guest(Mode::VS, VmId(vm)).unwrap(),
    )
    .unwrap()
}

/// With VM `i` running, no guest access of VM `i` may land in a byte of a
/// region owned by the hypervisor or another VM.
#[test]
fn isolation_over_every_granule_of_foreign_regions() {
    let cfg = table1();
    for vm in [1u32, 2] {
        let mut session = Session::new(&cfg).unwrap();
        session.switch_to(VmId(vm)).unwrap();
        let foreign = cfg
            .regions
            .iter()
            .filter(|r| r.owner != Owner::Vm(VmId(vm)));
        let mut checked = 0usize;
        for r in foreign {
            for gpa in (r.base.get()..=r.end_inclusive.get()).step_by(4) {
                for kind in AccessKind::ALL {
                    let v = session.check(&guest(vm, gpa, kind)).unwrap();
                    assert!(
                        !v.is_permit(),
                        "{}: {kind} at {gpa:#x} in `{}` permitted",
                        VmId(vm),
                        r.name
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 900_000);
    }
}

#[test]
fn switch_round_trip_restores_machine() {
    let cfg = table1();
    let mut session = Session::new(&cfg).unwrap();
    let before = session.machine().clone();
    session.switch_to(VmId(2)).unwrap();
    session.switch_to(VmId(1)).unwrap();
    let after = session.machine();
    assert_eq!(after.hpmp, before.hpmp);
    assert_eq!(after.vspmp, before.vspmp);
    assert_eq!(after.cpu, before.cpu);
    // And extensionally, over the whole map at 4-byte granule (strided over kinds).
    let lo = cfg.regions.iter().map(|r| r.base.get()).min().unwrap() - 4;
    let hi = cfg
        .regions
        .iter()
        .map(|r| r.end_inclusive.get())
        .max()
        .unwrap()
        + 4;
    let mut gpa = lo;
    let mut i = 0usize;
    while gpa <= hi {
        let kind = AccessKind::ALL[i % 3];
        for req in [
            guest(1, gpa, kind),
            AccessRequest::new(gpa, 4, kind, PrivilegeContext::hypervisor()).unwrap(),
        ] {
            assert_eq!(before.check_access(&req), after.check_access(&req));
        }
        // Dense near region boundaries, coarse inside the gaps.
        let near = cfg
            .regions
            .iter()
            .any(|r| gpa + 0x100 >= r.base.get() && gpa <= r.end_inclusive.get() + 0x100);
        gpa += if near { 4 } else { 0x1_0000 };
        i += 1;
    }
}

#[test]
fn hypervisor_bits_survive_every_switch() {
    let cfg = table1();
    let mut session = Session::new(&cfg).unwrap();
    let hv = cfg.owner_mask(Owner::Hv);
    for i in 0..50 {
        session.switch_to(VmId(1 + (i % 2))).unwrap();
        assert_eq!(session.machine().hpmp.enabled() & hv, hv);
    }
}

/// The hPMP-only path composed by hand from the matcher, permission check
/// and translation.
fn hpmp_only(state: &MachineState, req: &AccessRequest) -> (Decision, Option<u64>) {
    let regions = state.hpmp.decode_regions();
    match match_access(&regions, state.hpmp.enabled(), req) {
        MatchResult::NoMatch => (
            Decision::Deny {
                stage: Stage::Hpmp,
                reason: DenyReason::NoMatch,
            },
            None,
        ),
        MatchResult::SpanViolation { .. } => (
            Decision::Deny {
                stage: Stage::Hpmp,
                reason: DenyReason::SpanViolation,
            },
            None,
        ),
        MatchResult::Hit { entry, .. } => {
            let region = regions.iter().find(|r| r.entry_index == entry).unwrap();
            if let Err(reason) = check_permission(region, req) {
                return (
                    Decision::Deny {
                        stage: Stage::Hpmp,
                        reason,
                    },
                    None,
                );
            }
            match translate_hit(&state.hpmp, entry, req) {
                Ok(pa) => (Decision::Permit, Some(pa.get())),
                Err(_) => (
                    Decision::Deny {
                        stage: Stage::Hpmp,
                        reason: DenyReason::Overflow,
                    },
                    None,
                ),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn permissive_vspmp_is_transparent(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut state, req) = random_case(&mut rng, 8);
        state.vspmp = hpmp_core::RuleFile::new();
        state.vspmp.set_region(0, 0, hpmp_core::csr::MAX_ENCODABLE_TOP, Perms::RWX, true).unwrap();
        state.vspmp.set_enabled(1 << 1);
        let ctx = PrivilegeContext::guest(Mode::VS, VmId(1)).unwrap();
        let req = AccessRequest::new(req.gpa(), req.size(), req.kind(), ctx).unwrap();
        let v = state.check_access(&req).unwrap();
        prop_assert_eq!((v.decision, v.pa.map(|p| p.get())), hpmp_only(&state, &req));
    }

    #[test]
    fn vspmp_denials_never_reach_hpmp(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, req) = random_case(&mut rng, 8);
        let v = state.check_access(&req).unwrap();
        if let Decision::Deny { stage: Stage::Vspmp, .. } = v.decision {
            prop_assert_eq!(v.hpmp_entry, None);
        }
        prop_assert_eq!(v.is_permit(), v.pa.is_some());
    }

    #[test]
    fn whitelist_default_and_machine_bypass(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, req) = random_case(&mut rng, 8);
        let regions = state.hpmp.decode_regions();
        let v = state.check_access(&req).unwrap();
        if req.ctx().mode() == Mode::M {
            prop_assert_eq!(v.pa.map(|p| p.get()), Some(req.gpa()));
        } else if match_access(&regions, state.hpmp.enabled(), &req) == MatchResult::NoMatch {
            prop_assert!(!v.is_permit());
        }
        prop_assert_eq!(v, oracle_check(&state, &req));
    }

    #[test]
    fn translation_preserves_distances_within_a_region(seed: u64, a in 0u64..0x8000, b in 0u64..0x8000) {
        let cfg = table1();
        let mut session = Session::new(&cfg).unwrap();
        session.switch_to(VmId(2)).unwrap();
        let mut m = session.machine().clone();
        let off = (seed % 0x4000_0000) as u32;
        m.hpmp.write(hpmp_core::CsrName::Hpmpoffset, 11, off).unwrap();
        let (ga, gb) = (0x800C_0000 + 4 * a, 0x800C_0000 + 4 * b);
        let pa = m.check_access(&guest(2, ga, AccessKind::Execute)).unwrap().pa.unwrap().get();
        let pb = m.check_access(&guest(2, gb, AccessKind::Execute)).unwrap().pa.unwrap().get();
        prop_assert_eq!(pa.wrapping_sub(pb), ga.wrapping_sub(gb));
    }
}
