// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hpmp_core::oracle::{cross_check, seed_from_env};
use hpmp_core::scenarios::{
    dump_csrs, load_config, load_update, run_generic_images, run_partial_update, DecisionKind, Hex,
    Owner, Probe, ScenarioConfig, Session,
};
use hpmp_core::{
    AccessKind, AccessRequest, CsrFile, CsrName, Decision, DenyReason, Mode, PrivilegeContext,
    SchedulePolicy, Stage, VmId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE1: &str = include_str!("../fixtures/table1.json");
const TABLE2: &str = include_str!("../fixtures/table2_update.json");
const GENERIC: &str = include_str!("../fixtures/generic.json");

/// Reference address map: (owner, start address A, end address B, cfg B).
/// Owner 0 is the hypervisor.
const TABLE: [(u32, u64, u64, &str); 11] = [
    (0, 0x2000_0000, 0x2000_07FF, "S TOR RW"),
    (1, 0x2000_0800, 0x2000_17FF, "- TOR RW"),
    (2, 0x2000_1800, 0x2000_27FF, "- TOR RW"),
    (0, 0x8000_0000, 0x8003_FFFF, "S TOR RX"),
    (1, 0x8004_0000, 0x800B_FFFF, "- TOR RX"),
    (2, 0x800C_0000, 0x8013_FFFF, "- TOR RX"),
    (1, 0x9000_0000, 0x9001_FFFF, "- TOR RW"),
    (2, 0x9002_0000, 0x9003_FFFF, "- TOR RW"),
    (0, 0x9080_0000, 0x9081_7FFF, "S TOR RW"),
    (1, 0x9081_8000, 0x9085_7FFF, "- TOR RW"),
    (2, 0x9085_8000, 0x9089_7FFF, "- TOR RW"),
];

/// Encodes a table cfg notation by hand: S=0x80, TOR=0x08, R=1, W=2, X=4.
fn cfg_byte(notation: &str) -> u64 {
    notation.split(' ').fold(0, |acc, tok| {
        acc | match tok {
            "S" => 0x80,
            "TOR" => 0x08,
            "-" | "OFF" => 0,
            perms => perms.chars().fold(0, |p, c| {
                p | match c {
                    'R' => 1,
                    'W' => 2,
                    'X' => 4,
                    _ => panic!("bad perm {c}"),
                }
            }),
        }
    })
}

fn kind_allowed(notation: &str, kind: AccessKind) -> bool {
    let perms = notation.rsplit(' ').next().unwrap();
    let c = match kind {
        AccessKind::Read => 'R',
        AccessKind::Write => 'W',
        AccessKind::Execute => 'X',
    };
    perms.contains(c)
}

fn table1() -> ScenarioConfig {
    load_config(TABLE1).expect("table1 fixture")
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

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_table1_fidelity() -> Outcome {
    let start = Instant::now();
    let dump = dump_csrs(&table1().hpmp_file().map_err(|e| e.to_string())?);
    ensure(dump.entries.len() == 22, || {
        format!("{} dumped entries", dump.entries.len())
    })?;
    for (k, &(_, a, b, cfg_b)) in TABLE.iter().enumerate() {
        let (lo, hi) = (&dump.entries[2 * k], &dump.entries[2 * k + 1]);
        let want_lo = (2 * k, Hex(a >> 2), Hex(a), "OFF", Hex(0));
        let got_lo = (
            lo.entry,
            lo.register,
            lo.byte_address,
            lo.cfg.as_str(),
            lo.cfg_byte,
        );
        ensure(got_lo == want_lo, || {
            format!("hpmpaddr{}: {got_lo:?} != {want_lo:?}", 2 * k)
        })?;
        let want_hi = (
            2 * k + 1,
            Hex((b + 1) >> 2),
            Hex(b),
            cfg_b,
            Hex(cfg_byte(cfg_b)),
        );
        let got_hi = (
            hi.entry,
            hi.register,
            hi.byte_address,
            hi.cfg.as_str(),
            hi.cfg_byte,
        );
        ensure(got_hi == want_hi, || {
            format!("hpmpaddr{}: {got_hi:?} != {want_hi:?}", 2 * k + 1)
        })?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), || format!("took {took:?}"))?;
    Ok(format!("22 addresses, 11 cfg bytes exact in {took:?}"))
}

fn c2_permission_matrix() -> Outcome {
    let cfg = table1();
    let mut cells = 0;
    for (k, &(owner, base, _, notation)) in TABLE.iter().enumerate() {
        for ctx in [1u32, 2, 0] {
            // Guest contexts run their own VM; HS runs with the owner's mask.
            let running = if ctx == 0 { owner.max(1) } else { ctx };
            let mut session = Session::new(&cfg).map_err(|e| e.to_string())?;
            session
                .switch_to(VmId(running))
                .map_err(|e| e.to_string())?;
            for kind in AccessKind::ALL {
                let req = if ctx == 0 {
                    AccessRequest::new(base, 4, kind, PrivilegeContext::hypervisor()).unwrap()
                } else {
                    guest(ctx, base, kind)
                };
                let hv_region = owner == 0;
                let allowed = kind_allowed(notation, kind);
                let expected = match (ctx, hv_region) {
                    (0, true) if allowed => Decision::Permit,
                    (0, true) => deny(DenyReason::PermsMiss),
                    (0, false) => deny(DenyReason::SMismatch),
                    (_, true) => deny(DenyReason::SMismatch),
                    (c, false) if c != owner => deny(DenyReason::NoMatch),
                    _ if allowed => Decision::Permit,
                    _ => deny(DenyReason::PermsMiss),
                };
                let v = session.check(&req).map_err(|e| e.to_string())?;
                ensure(v.decision == expected, || {
                    format!(
                        "region {k} ctx {ctx} {kind}: {:?} != {expected:?}",
                        v.decision
                    )
                })?;
                let want_pa = (expected == Decision::Permit).then_some(base);
                ensure(v.pa.map(|p| p.get()) == want_pa, || {
                    format!("region {k} ctx {ctx} {kind}: pa {:?}", v.pa)
                })?;
                cells += 1;
            }
        }
    }
    Ok(format!("{cells}/99 cells agree"))
}

fn deny(reason: DenyReason) -> Decision {
    Decision::Deny {
        stage: Stage::Hpmp,
        reason,
    }
}

fn c3_partial_update() -> Outcome {
    let cfg = table1();
    let update = load_update(TABLE2).map_err(|e| e.to_string())?;
    let x = |vm: u32, gpa: u64| Probe {
        mode: Mode::VS,
        vm: Some(VmId(vm)),
        kind: AccessKind::Execute,
        gpa: Hex(gpa),
        size: 4,
    };
    let (vm1_lo, vm1_hi) = (0x8004_0000u64, 0x800F_FFFFu64);
    let mut probes: Vec<Probe> = (vm1_lo..=vm1_hi).step_by(4).map(|a| x(1, a)).collect();
    let words = probes.len();
    // VM2's code region after the update: its first and last word.
    probes.push(x(2, 0x800C_0000));
    probes.push(x(2, 0x8013_FFFC));
    let report = run_partial_update(&cfg, &update, Some(&probes)).map_err(|e| e.to_string())?;
    ensure(report.write_count == 2, || {
        format!("{} writes", report.write_count)
    })?;

    let vm1 = &report.probes[..words];
    let bad = vm1
        .iter()
        .find(|p| p.after.decision != DecisionKind::Permit || p.after.pa != Some(p.probe.gpa));
    ensure(bad.is_none(), || format!("(a) {bad:?}"))?;

    let (first, last) = (&report.probes[words], &report.probes[words + 1]);
    ensure(first.after.pa == Some(Hex(0x8014_0000)), || {
        format!("(b) {:?}", first.after)
    })?;
    let (Some(lo), Some(hi)) = (first.after.pa, last.after.pa) else {
        return Err(format!("(c) VM2 code not permitted: {last:?}"));
    };
    let vm2 = (lo.0, hi.0 + 3);
    ensure(vm2.1 < vm1_lo || vm1_hi < vm2.0, || {
        format!("(c) {vm2:x?} meets VM1 code")
    })?;
    Ok(format!(
        "{words} VM1 words permit; VM2 0x800C_0000 -> {lo}; VM2 code [{lo}, {:#x}] disjoint",
        vm2.1
    ))
}

fn c4_generic_images() -> Outcome {
    let cfg = load_config(GENERIC).map_err(|e| e.to_string())?;
    let seed = seed_from_env();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows: Vec<_> = cfg
        .regions
        .iter()
        .filter(|r| r.owner == Owner::Vm(cfg.vms[0].vm_id))
        .collect();
    let trace: Vec<(u64, AccessKind)> = (0..100)
        .map(|_| {
            let r = windows[rng.gen_range(0..windows.len())];
            let words = (r.end_inclusive.0 + 1 - r.base.0) / 4;
            let gpa = r.base.0 + 4 * rng.gen_range(0..words);
            let kinds: Vec<_> = AccessKind::ALL
                .into_iter()
                .filter(|&k| match k {
                    AccessKind::Read => r.perms.r,
                    AccessKind::Write => r.perms.w,
                    AccessKind::Execute => r.perms.x,
                })
                .collect();
            (gpa, kinds[rng.gen_range(0..kinds.len())])
        })
        .collect();
    let report = run_generic_images(&cfg, Some(&trace)).map_err(|e| e.to_string())?;
    ensure(report.traces.len() == 2, || {
        format!("{} VM traces", report.traces.len())
    })?;
    ensure(report.disjoint, || {
        format!("overlaps {:?}", report.overlaps)
    })?;
    ensure(report.all_permitted, || "denied steps in trace".into())?;
    ensure(report.constant_offsets, || {
        "PA - GPA differs from the region offset".into()
    })?;
    ensure(report.traces.iter().all(|t| t.steps.len() == 100), || {
        "short trace".into()
    })?;
    Ok(format!(
        "seed {seed:#x}: 2 x 100 steps, intervals disjoint, offsets exact"
    ))
}

fn c5_oracle_equivalence() -> Outcome {
    let seed = seed_from_env();
    let start = Instant::now();
    let report = cross_check(seed, 10_000, 8);
    let took = start.elapsed();
    ensure(report.mismatches.is_empty(), || {
        format!(
            "{} mismatches, first {:?}",
            report.mismatches.len(),
            report.mismatches.first()
        )
    })?;
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "seed {seed:#x}: {} cases, {} permits, denies {:?}, 0 mismatches in {took:?}",
        report.cases, report.permits, report.denies_by_reason
    ))
}

fn c6_switch_determinism() -> Outcome {
    let mut session = Session::new(&table1()).map_err(|e| e.to_string())?;
    let hv = session.hypervisor_mut().ok_or("no hypervisor")?;
    let hv_bits = [1u32, 7, 17].iter().fold(0u64, |m, b| m | 1 << b);
    let mut counts = BTreeSet::new();
    for i in 0..1000 {
        let m = hv
            .switch_next(SchedulePolicy::RoundRobin)
            .map_err(|e| e.to_string())?;
        counts.insert(m.write_count);
        let enabled = hv.machine().hpmp.enabled();
        ensure(enabled & hv_bits == hv_bits, || {
            format!("switch {i}: hpmpswitch {enabled:#x}")
        })?;
    }
    ensure(counts.len() == 1, || format!("write counts {counts:?}"))?;
    Ok(format!(
        "1000 switches, write_count {counts:?}, HV bits 1/7/17 always set"
    ))
}

fn c7_atomicity() -> Outcome {
    let mut session = Session::new(&table1()).map_err(|e| e.to_string())?;
    let hv = session.hypervisor_mut().ok_or("no hypervisor")?;
    let probe = AccessRequest::new(
        0x8000_0000,
        4,
        AccessKind::Execute,
        PrivilegeContext::hypervisor(),
    )
    .unwrap();
    let mut points = 0;
    for target in [1usize, 0] {
        let m = hv.begin_switch_to(target).map_err(|e| e.to_string())?;
        loop {
            let err = hv.check(&probe);
            ensure(matches!(err, Err(v) if v.total == m.write_count), || {
                format!("switch to {target}, point {points}: {err:?}")
            })?;
            points += 1;
            if !hv.machine_mut().step() {
                break;
            }
        }
        hv.complete_switch_to(target);
        ensure(hv.check(&probe).is_ok(), || {
            "access still blocked after commit".into()
        })?;
    }
    Ok(format!(
        "{points}/{points} injection points raised AtomicityViolation"
    ))
}

fn c8_hardwired_zeros() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_env());
    let mut file = CsrFile::new();
    let mut last = [0u32; 64];
    for _ in 0..1000 {
        let (i, v) = (rng.gen_range(0..64usize), rng.gen::<u32>());
        file.write(CsrName::Hpmpoffset, i, v)
            .map_err(|e| e.to_string())?;
        if i % 2 == 1 {
            last[i] = v;
        }
    }
    for (i, &want) in last.iter().enumerate() {
        let got = file
            .read(CsrName::Hpmpoffset, i)
            .map_err(|e| e.to_string())?;
        ensure(got == want, || {
            format!("hpmpoffset{i} reads {got:#x}, expected {want:#x}")
        })?;
    }
    Ok("1000 writes; all 32 even offsets read 0".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("table1 fidelity", c1_table1_fidelity),
        ("permission matrix", c2_permission_matrix),
        ("partial update", c3_partial_update),
        ("generic images", c4_generic_images),
        ("oracle equivalence", c5_oracle_equivalence),
        ("switch determinism", c6_switch_determinism),
        ("atomicity", c7_atomicity),
        ("hardwired zeros", c8_hardwired_zeros),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", n + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
