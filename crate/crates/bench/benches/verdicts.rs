// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hpmp_core::scenarios::{load_config, Session};
use hpmp_core::{
    oracle_check, AccessKind, AccessRequest, Mode, PrivilegeContext, SchedulePolicy, VmId,
};

const TABLE1: &str = include_str!("../../core/fixtures/table1.json");

fn session() -> Session {
    Session::new(&load_config(TABLE1).expect("fixture loads")).expect("fixture builds")
}

fn requests() -> Vec<AccessRequest> {
    let vs = PrivilegeContext::guest(Mode::VS, VmId(1)).unwrap();
    let hs = PrivilegeContext::hypervisor();
    [
        (0x2000_0800, AccessKind::Read, vs),
        (0x8004_0000, AccessKind::Write, vs),
        (0x9085_7FFC, AccessKind::Write, vs),
        (0x9089_7FFC, AccessKind::Read, vs),
        (0x8000_0000, AccessKind::Execute, hs),
        (0x4000_0000, AccessKind::Read, hs),
    ]
    .into_iter()
    .map(|(gpa, kind, ctx)| AccessRequest::new(gpa, 4, kind, ctx).unwrap())
    .collect()
}

fn verdicts(c: &mut Criterion) {
    let s = session();
    let reqs = requests();
    c.bench_function("check_access/table1", |b| {
        b.iter(|| {
            for r in &reqs {
                black_box(s.machine().check_access(black_box(r)).unwrap());
            }
        })
    });
    c.bench_function("oracle_check/table1", |b| {
        b.iter(|| {
            for r in &reqs {
                black_box(oracle_check(s.machine(), black_box(r)));
            }
        })
    });
}

fn switches(c: &mut Criterion) {
    let mut s = session();
    let hv = s.hypervisor_mut().expect("two VMs");
    c.bench_function("vm_switch/table1", |b| {
        b.iter(|| black_box(hv.switch_next(SchedulePolicy::RoundRobin).unwrap()))
    });
}

criterion_group!(benches, verdicts, switches);
criterion_main!(benches);
