//! Transition-path cost accounting: trap vs linked entries, check bypass,
//! the two return protocols, and interrupt injection atomicity.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::future::Future;
use std::rc::Rc;

use boundary_sim_core::{
    entry, BoundaryConfig, CostEvent, FlagSet, InterruptId, NodeId, PathKind, ReturnStep,
    RunOutcome, Sim, SimError, TaskCtx, TraceEvent, VmaKind,
};

fn counts(pairs: &[(CostEvent, u64)]) -> BTreeMap<CostEvent, u64> {
    pairs.iter().copied().collect()
}

fn run_linked<F, Fut>(config: BoundaryConfig, body: F) -> Sim
where
    F: FnOnce(TaskCtx) -> Fut + 'static,
    Fut: Future<Output = ()> + 'static,
{
    let sim = Sim::builder().config(config).record_trace(true).build();
    sim.launch_linked_app(NodeId(0), "sim -- run", entry(body))
        .unwrap();
    assert_eq!(sim.run(), RunOutcome::Completed);
    sim
}

#[test]
fn base_model_getppid_events() {
    let sim = run_linked(BoundaryConfig::base(), |ctx| async move {
        ctx.sys_getppid().await.unwrap();
    });
    assert_eq!(
        sim.ledger_counts(),
        counts(&[
            (CostEvent::EntryChecks, 1),
            (CostEvent::ExitChecks, 1),
            (CostEvent::StackSwitch, 2),
        ])
    );
}

#[test]
fn trap_getppid_adds_mode_switches() {
    let sim = run_linked(BoundaryConfig::trap(), |ctx| async move {
        ctx.sys_getppid().await.unwrap();
    });
    assert_eq!(
        sim.ledger_counts(),
        counts(&[
            (CostEvent::ModeSwitchEnter, 1),
            (CostEvent::ModeSwitchExit, 1),
            (CostEvent::EntryChecks, 1),
            (CostEvent::ExitChecks, 1),
            (CostEvent::StackSwitch, 2),
        ])
    );
}

/// Event-count algebra: base equals trap minus the two mode switches.
#[test]
fn base_is_trap_minus_mode_switches() {
    let body = |ctx: TaskCtx| async move {
        for _ in 0..7 {
            ctx.sys_getppid().await.unwrap();
        }
    };
    let trap = run_linked(BoundaryConfig::trap(), body);
    let base = run_linked(BoundaryConfig::base(), body);
    let mut expected = trap.ledger_counts();
    expected.remove(&CostEvent::ModeSwitchEnter);
    expected.remove(&CostEvent::ModeSwitchExit);
    assert_eq!(base.ledger_counts(), expected);
}

/// Bypass skips the check bundles but not the stack switches; the budget
/// decrements once per bypassed transition and never underflows.
#[test]
fn bypass_budget_and_events() {
    let byp = BoundaryConfig::linked(FlagSet {
        byp: true,
        ..FlagSet::default()
    })
    .unwrap();
    let sim = run_linked(byp, |ctx| async move {
        ctx.set_bypass(5).unwrap();
        for _ in 0..7 {
            ctx.sys_getppid().await.unwrap();
        }
    });
    // 5 bypassed calls: stack switches only. 2 full calls: checks as well.
    assert_eq!(
        sim.ledger_counts(),
        counts(&[
            (CostEvent::EntryChecks, 2),
            (CostEvent::ExitChecks, 2),
            (CostEvent::StackSwitch, 14),
        ])
    );
    let view = sim.task_view(boundary_sim_core::TaskId(1)).unwrap();
    assert_eq!(view.byp_remaining, 0);
}

/// With nss on top of byp, bypassed transitions record nothing at all: byp
/// removes the checks and nss removes the stack switches.
#[test]
fn bypass_plus_nss_is_event_free() {
    let cfg = BoundaryConfig::linked(FlagSet {
        byp: true,
        nss: true,
        pf_df: true,
        ..FlagSet::default()
    })
    .unwrap();
    let sim = run_linked(cfg, |ctx| async move {
        ctx.set_bypass(3).unwrap();
        for _ in 0..3 {
            ctx.sys_getppid().await.unwrap();
        }
    });
    assert!(sim.ledger_counts().is_empty());
    assert_eq!(sim.ledger_cycles(), 0);
}

#[test]
fn bypass_on_trap_process_rejected() {
    let sim = Sim::builder().config(BoundaryConfig::trap()).build();
    let err = Rc::new(RefCell::new(None));
    let err2 = Rc::clone(&err);
    sim.spawn_process(
        NodeId(0),
        &[],
        entry(move |ctx| async move {
            *err2.borrow_mut() = Some(ctx.set_bypass(4).unwrap_err());
        }),
    )
    .unwrap();
    assert_eq!(sim.run(), RunOutcome::Completed);
    assert_eq!(err.borrow().clone(), Some(SimError::BypassOnTrapProcess));
}

/// Results never depend on the configuration, only costs do.
#[test]
fn getppid_value_is_config_independent() {
    let mut values = Vec::new();
    for cfg in BoundaryConfig::enumerate_valid() {
        let out = Rc::new(RefCell::new(None));
        let out2 = Rc::clone(&out);
        let sim = Sim::builder().config(cfg).build();
        sim.launch_linked_app(
            NodeId(0),
            "k -- x",
            entry(move |ctx| async move {
                if cfg.byp() {
                    ctx.set_bypass(u64::MAX).unwrap();
                }
                *out2.borrow_mut() = Some(ctx.sys_getppid().await.unwrap());
            }),
        )
        .unwrap();
        assert_eq!(sim.run(), RunOutcome::Completed);
        values.push(out.borrow().unwrap());
    }
    assert!(values.windows(2).all(|w| w[0] == w[1]));
}

/// Independent replay oracle: summing weight(event) over the trace's charge
/// records reproduces the ledger total exactly.
#[test]
fn trace_replay_matches_ledger_cycles() {
    let sim = run_linked(BoundaryConfig::trap(), |ctx| async move {
        for _ in 0..10 {
            ctx.sys_getppid().await.unwrap();
        }
    });
    let weights = sim.weights();
    let replayed: u64 = sim
        .trace()
        .iter()
        .map(|e| match e {
            TraceEvent::Charge { event, n, .. } => weights.weight(*event) * n,
            _ => 0,
        })
        .sum();
    assert_eq!(replayed, sim.ledger_cycles());
}

fn fault_config(ret: bool) -> BoundaryConfig {
    BoundaryConfig::linked(FlagSet {
        ret,
        pf_df: true,
        ..FlagSet::default()
    })
    .unwrap()
}

fn touch_fresh_pages(n: u64) -> impl FnOnce(TaskCtx) -> std::pin::Pin<Box<dyn Future<Output = ()>>> {
    move |ctx: TaskCtx| {
        Box::pin(async move {
            let addr = ctx.sys_mmap(n * 4096, VmaKind::Mmap).await.unwrap();
            for i in 0..n {
                ctx.touch(addr + i * 4096).await.unwrap();
            }
        })
    }
}

/// iret path: one atomic return event per fault.
#[test]
fn iret_path_events() {
    let sim = run_linked(fault_config(false), touch_fresh_pages(3));
    assert_eq!(sim.ledger_counts()[&CostEvent::IretReturn], 3);
    assert!(!sim.ledger_counts().contains_key(&CostEvent::RetReturn));
}

/// ret path: staged return records RetReturn + StackSwitch and leaves the
/// task in a state identical to the iret path.
#[test]
fn ret_and_iret_paths_agree_on_final_state() {
    let iret = run_linked(fault_config(false), touch_fresh_pages(3));
    let ret = run_linked(fault_config(true), touch_fresh_pages(3));
    assert_eq!(ret.ledger_counts()[&CostEvent::RetReturn], 3);
    assert!(!ret.ledger_counts().contains_key(&CostEvent::IretReturn));
    let tid = boundary_sim_core::TaskId(1);
    let (a, b) = (iret.task_view(tid).unwrap(), ret.task_view(tid).unwrap());
    assert_eq!(a.mode, b.mode);
    assert_eq!(a.user_stack, b.user_stack);
    assert_eq!(a.sched_state, b.sched_state);
    assert_eq!(iret.state_digest(), ret.state_digest());
    // Same per-fault cost ordering as the weights: ret+switch cheaper than iret.
    let w = ret.weights();
    assert!(
        w.weight(CostEvent::RetReturn) + w.weight(CostEvent::StackSwitch)
            < w.weight(CostEvent::IretReturn)
    );
}

/// Exhaustive injection sweep: for every protocol step index, an interrupt
/// injected there is delivered only once the protocol permits it (never on a
/// half-switched stack) and the final state matches the uninjected run.
#[test]
fn injection_at_every_step_preserves_state() {
    let baseline = run_linked(fault_config(true), touch_fresh_pages(1));
    let clean_digest = baseline.state_digest();
    for step in ReturnStep::ALL {
        let sim = Sim::builder()
            .config(fault_config(true))
            .record_trace(true)
            .build();
        sim.launch_linked_app(NodeId(0), "sim -- run", entry(touch_fresh_pages(1)))
            .unwrap();
        sim.arm_interrupt_injection(0, step, InterruptId(7));
        assert_eq!(sim.run(), RunOutcome::Completed);
        assert_eq!(sim.state_digest(), clean_digest, "injected at {step:?}");
        let trace = sim.trace();
        let delivered_at = trace
            .iter()
            .find_map(|e| match e {
                TraceEvent::InterruptDelivered { step, .. } => Some(*step),
                _ => None,
            })
            .expect("armed interrupt was delivered");
        assert!(delivered_at.permits_interrupts());
        assert!(delivered_at >= ReturnStep::SwitchToUserStack);
        assert!(delivered_at >= step);
    }
}

#[test]
fn inject_without_return_in_flight_errors() {
    let sim = Sim::builder().config(fault_config(true)).build();
    assert_eq!(
        sim.inject_interrupt_at(ReturnStep::PopFlags, InterruptId(1))
            .unwrap_err(),
        SimError::NoReturnInFlight
    );
}

/// A signal queued during a bypassed window is observed only at the next
/// non-bypassed exit. Oracle: replay the trace and check the delivery point.
#[test]
fn bypassed_exits_defer_signals() {
    let byp = BoundaryConfig::linked(FlagSet {
        byp: true,
        ..FlagSet::default()
    })
    .unwrap();
    let sim = run_linked(byp, |ctx| async move {
        ctx.set_bypass(2).unwrap();
        let me = ctx.task_id();
        // The kill itself is bypassed, so its exit skips the checks.
        ctx.sys_kill(me, 9).await.unwrap();
        ctx.sys_getppid().await.unwrap(); // still bypassed
        ctx.sys_getppid().await.unwrap(); // full path: delivery point
    });
    assert_eq!(sim.delivered_signals(), vec![(boundary_sim_core::TaskId(1), 9)]);
    let trace = sim.trace();
    let queued = trace
        .iter()
        .position(|e| matches!(e, TraceEvent::SignalQueued { .. }))
        .unwrap();
    let delivered = trace
        .iter()
        .position(|e| matches!(e, TraceEvent::SignalDelivered { .. }))
        .unwrap();
    let bypassed_exits_between = trace[queued..delivered]
        .iter()
        .filter(|e| matches!(e, TraceEvent::Exit { bypassed: true, .. }))
        .count();
    let full_exits_between = trace[queued..delivered]
        .iter()
        .filter(|e| matches!(e, TraceEvent::Exit { bypassed: false, .. }))
        .count();
    assert_eq!(bypassed_exits_between, 2);
    assert_eq!(full_exits_between, 0);
}

/// Bypassed transitions change event counts, never service results.
#[test]
fn bypass_soundness_same_bytes() {
    let run = |byp: bool| -> (Vec<u8>, BTreeMap<CostEvent, u64>) {
        let cfg = if byp {
            BoundaryConfig::linked(FlagSet {
                byp: true,
                ..FlagSet::default()
            })
            .unwrap()
        } else {
            BoundaryConfig::base()
        };
        let out = Rc::new(RefCell::new(Vec::new()));
        let out2 = Rc::clone(&out);
        let sim = Sim::builder().config(cfg).build();
        let app = sim
            .launch_linked_app(
                NodeId(0),
                "k -- app",
                entry(move |ctx: TaskCtx| async move {
                    if byp {
                        ctx.set_bypass(u64::MAX).unwrap();
                    }
                    let fd = boundary_sim_core::Fd(3);
                    ctx.yield_now().await; // let the peer prime the stream
                    let bytes = ctx
                        .sys_recv(fd, boundary_sim_core::IoDirection::Read, 16)
                        .await
                        .unwrap();
                    out2.borrow_mut().extend(bytes);
                }),
            )
            .unwrap();
        let peer = sim
            .spawn_process(
                NodeId(0),
                &[],
                entry(move |ctx: TaskCtx| async move {
                    let fd = boundary_sim_core::Fd(3);
                    ctx.sys_send(fd, boundary_sim_core::IoDirection::Write, b"0123456789abcdef")
                        .await
                        .unwrap();
                }),
            )
            .unwrap();
        sim.socket_pair_over_loopback(app, peer).unwrap();
        assert_eq!(sim.run(), RunOutcome::Completed);
        let bytes = out.borrow().clone();
        (bytes, sim.ledger_counts())
    };
    let (bytes_full, counts_full) = run(false);
    let (bytes_byp, counts_byp) = run(true);
    assert_eq!(bytes_full, bytes_byp);
    assert_ne!(counts_full, counts_byp);
    assert_eq!(
        counts_full[&CostEvent::CopyByte],
        counts_byp[&CostEvent::CopyByte]
    );
}

/// Launch and cmdline mechanics.
#[test]
fn launch_parses_cmdline_and_is_free() {
    let sim = Sim::builder().config(BoundaryConfig::base()).build();
    let app = sim
        .launch_linked_app(NodeId(0), "sim.opts -- port=7000", entry(|_| async {}))
        .unwrap();
    assert_eq!(sim.ledger_cycles(), 0);
    let view = sim.task_view(app).unwrap();
    assert_eq!(view.cmdline, vec!["port=7000".to_string()]);
    assert_eq!(view.path_kind, PathKind::LinkedApp);
    assert!(view.saved_stack_vma.is_some());
    assert_eq!(view.byp_remaining, 0);

    let err = sim
        .launch_linked_app(NodeId(0), "x -- y", entry(|_| async {}))
        .unwrap_err();
    assert_eq!(err, SimError::SecondLinkedApp);

    let err = Sim::builder()
        .config(BoundaryConfig::base())
        .build()
        .launch_linked_app(NodeId(0), "x -- \"unterminated", entry(|_| async {}))
        .unwrap_err();
    assert_eq!(err, SimError::BadCmdline);
}
