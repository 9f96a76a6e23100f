mod common;

use mpdl_core::data::Side;
use mpdl_core::dual::{exchange_keys, run_dual_round, train_duals, DualConfig};
use mpdl_core::nn::{loss_eval, LossKind};
use mpdl_core::transport::{in_process, Actor, MessageKind};

use common::dual_parties;

fn max_param_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn round_emits_eight_messages_in_protocol_order() {
    let cfg = DualConfig::default();
    let (mut a, mut b, ids) = dual_parties(40, 3, 4, 2.0, &cfg, 1);
    let mut net = in_process();
    exchange_keys(&mut a, &mut b, &mut net.a, &mut net.b).unwrap();
    let before = net.transcript().len();
    run_dual_round(&mut a, &mut b, &ids[..8], 0, &mut net.a, &mut net.b).unwrap();
    let t = net.transcript();
    let got: Vec<_> = t.messages()[before..]
        .iter()
        .map(|m| (m.sender, m.receiver, m.kind))
        .collect();
    use MessageKind::*;
    let want = vec![
        (Actor::A, Actor::B, InferredBatch),
        (Actor::B, Actor::A, InferredBatch),
        (Actor::B, Actor::A, GradTerm),
        (Actor::B, Actor::A, CipherBlock),
        (Actor::A, Actor::B, GradTerm),
        (Actor::A, Actor::B, CipherBlock),
        (Actor::A, Actor::B, CipherBlock),
        (Actor::B, Actor::A, CipherBlock),
    ];
    assert_eq!(got, want);
    assert!(t.messages()[before..].iter().all(|m| m.batch_tag == Some(0)));
}

#[test]
fn zero_lambda_reduces_to_independent_regressions() {
    let cfg = DualConfig {
        lambda_a: 0.0,
        lambda_b: 0.0,
        ..DualConfig::default()
    };
    let (mut a, mut b, ids) = dual_parties(48, 3, 4, 2.0, &cfg, 5);
    let mut f = a.model().clone();
    let mut g = b.model().clone();
    let xa = a.data().released_rows(&ids).unwrap().into_tensor();
    let xb = b.data().released_rows(&ids).unwrap().into_tensor();
    let mut net = in_process();
    exchange_keys(&mut a, &mut b, &mut net.a, &mut net.b).unwrap();
    let mut opt_f = cfg.optimizer();
    let mut opt_g = cfg.optimizer();
    for (tag, chunk) in (0..48).collect::<Vec<usize>>().chunks(16).enumerate() {
        let batch: Vec<u64> = chunk.iter().map(|&i| ids[i]).collect();
        run_dual_round(&mut a, &mut b, &batch, tag as u64, &mut net.a, &mut net.b).unwrap();
        let (xa_b, xb_b) = (xa.select_rows(chunk), xb.select_rows(chunk));
        for (model, opt, x, y) in [(&mut f, &mut opt_f, &xa_b, &xb_b), (&mut g, &mut opt_g, &xb_b, &xa_b)] {
            let (out, cache) = model.forward(x).unwrap();
            let (_, grad) = loss_eval(LossKind::Mse, &out, y).unwrap();
            let grads = model.backprop(&cache, &grad).unwrap();
            opt.step(model, &grads).unwrap();
        }
    }
    assert_eq!(a.model().flat_parameters(), f.flat_parameters());
    assert_eq!(b.model().flat_parameters(), g.flat_parameters());
}

#[test]
fn encrypted_round_matches_plaintext_shadow() {
    for seed in 0..3 {
        let plain_cfg = DualConfig {
            encryption: false,
            ..DualConfig::default()
        };
        let (mut pa, mut pb, ids) = dual_parties(40, 3, 4, 2.0, &plain_cfg, seed);
        let (mut ea, mut eb, _) = dual_parties(40, 3, 4, 2.0, &DualConfig::default(), seed);
        let batch = &ids[..16];
        let mut n1 = in_process();
        exchange_keys(&mut pa, &mut pb, &mut n1.a, &mut n1.b).unwrap();
        run_dual_round(&mut pa, &mut pb, batch, 0, &mut n1.a, &mut n1.b).unwrap();
        let mut n2 = in_process();
        exchange_keys(&mut ea, &mut eb, &mut n2.a, &mut n2.b).unwrap();
        run_dual_round(&mut ea, &mut eb, batch, 0, &mut n2.a, &mut n2.b).unwrap();
        let da = max_param_diff(&pa.model().flat_parameters(), &ea.model().flat_parameters());
        let db = max_param_diff(&pb.model().flat_parameters(), &eb.model().flat_parameters());
        eprintln!("seed {seed}: |Δθ_AB| = {da:e}, |Δθ_BA| = {db:e}");
        assert!(da < 2f64.powi(-35) && db < 2f64.powi(-35));
    }
}

#[test]
fn out_of_order_step_is_a_protocol_violation() {
    let cfg = DualConfig::default();
    let (mut a, mut b, ids) = dual_parties(20, 2, 2, 2.0, &cfg, 3);
    let mut net = in_process();
    exchange_keys(&mut a, &mut b, &mut net.a, &mut net.b).unwrap();
    let err = a.step_cross(&mut net.a).unwrap_err();
    assert!(err.is_protocol_violation(), "{err}");
    a.step_infer(&ids[..4], 9, &mut net.a).unwrap();
    let err = a.step_infer(&ids[..4], 10, &mut net.a).unwrap_err();
    assert!(err.is_protocol_violation());
}

#[test]
fn stale_batch_tag_is_rejected() {
    let cfg = DualConfig::default();
    let (mut a, mut b, ids) = dual_parties(20, 2, 2, 2.0, &cfg, 4);
    let mut net = in_process();
    exchange_keys(&mut a, &mut b, &mut net.a, &mut net.b).unwrap();
    a.step_infer(&ids[..4], 1, &mut net.a).unwrap();
    b.step_infer(&ids[..4], 2, &mut net.b).unwrap();
    let err = b.step_local_terms(&mut net.b).unwrap_err();
    assert!(err.is_protocol_violation(), "{err}");
}

#[test]
fn alignment_loss_decreases_with_training() {
    let cfg = DualConfig {
        encryption: false,
        ..DualConfig::default()
    };
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..5 {
        let (mut a, mut b, ids) = dual_parties(120, 4, 4, f64::INFINITY, &cfg, seed);
        let mut net = in_process();
        exchange_keys(&mut a, &mut b, &mut net.a, &mut net.b).unwrap();
        let log = train_duals(&mut a, &mut b, &ids, 10, 32, seed, 0, &mut 0, &mut net.a, &mut net.b).unwrap();
        first += log.epochs[0].at_b;
        last += log.epochs[9].at_b;
        assert_eq!(a.side(), Side::A);
    }
    assert!(last < first, "alignment loss {first} -> {last}");
}
