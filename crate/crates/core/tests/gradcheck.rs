mod common;

use common::grad::*;
use common::*;
use moerl_core::autodiff::{Conv2d, Linear, Mlp, Tape};
use moerl_core::moe::{load_balance_loss_tape, MoeLayer};
use moerl_core::rlcore::TrunkKind;

fn assert_ok(name: &str, err: Option<f64>) {
    let e = err.unwrap_or_else(|| panic!("{name}: probe point too close to a relu kink"));
    assert!(e < FD_TOL, "{name}: relative error {e:.3e}");
}

#[test]
fn primitive_ops() {
    for (name, err) in primitive_op_errors() {
        assert_ok(&name, err);
    }
}

#[test]
fn layers() {
    for seed in 0..20 {
        let x = t(&[4, 5], 100 + seed);
        let lin = Linear::new(5, 3, &mut rng(seed));
        let Some(e) = check_module(&lin, seed, |m, tp| {
            let xv = tp.constant(&x);
            m.forward(tp, xv)
        }) else {
            continue;
        };
        assert!(e < FD_TOL, "linear {e:.3e}");
        let mlp = Mlp::new(&[5, 6, 6, 2], &mut rng(seed));
        if let Some(e) = check_module(&mlp, seed, |m, tp| {
            let xv = tp.constant(&x);
            m.forward(tp, xv)
        }) {
            assert!(e < FD_TOL, "mlp {e:.3e}");
            return;
        }
    }
    panic!("no kink-free probe point found");
}

#[test]
fn conv_layer() {
    let x = t(&[2, 3, 9, 9], 200);
    let conv = Conv2d::new(3, 4, 3, 2, &mut rng(201));
    assert_ok(
        "conv layer",
        check_module(&conv, 202, |m, tp| {
            let xv = tp.constant(&x);
            m.forward(tp, xv)
        }),
    );
}

#[test]
fn moe_layer_and_load_balance() {
    let mut checked = 0;
    for seed in 0..40 {
        let layer = MoeLayer::new(5, 6, 3, 4, 2, &mut rng(seed)).unwrap();
        let x = t(&[6, 5], 300 + seed);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let fw = layer.forward_tape(&mut tape, xv).unwrap();
        if routing_margin(&fw.gates, 2) < KINK_MARGIN {
            continue;
        }
        let out = check_module(&layer, seed, |m, tp| {
            let xv = tp.constant(&x);
            Ok(m.forward_tape(tp, xv)?.output)
        });
        let lb = check_module(&layer, seed + 1, |m, tp| {
            let xv = tp.constant(&x);
            let f = m.forward_tape(tp, xv)?;
            load_balance_loss_tape(tp, f.full_probs)
        });
        let (Some(out), Some(lb)) = (out, lb) else { continue };
        assert!(out < FD_TOL, "moe output {out:.3e}");
        assert!(lb < FD_TOL, "load balance {lb:.3e}");
        checked += 1;
        if checked == 5 {
            return;
        }
    }
    panic!("only {checked} probe points were away from kinks and ties");
}

#[test]
fn full_actor_loss() {
    for trunk in [TrunkKind::Moe, TrunkKind::Mlp] {
        let e = (0..40).find_map(|s| actor_loss_error(trunk, s)).expect("no kink-free probe point");
        assert!(e < FD_TOL, "{trunk:?} actor loss {e:.3e}");
    }
}
