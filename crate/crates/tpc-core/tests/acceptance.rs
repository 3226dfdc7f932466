//! Acceptance gate: one test per criterion, each printing a PASS line on
//! success (run with `--nocapture` to see them). Tolerances are pinned in
//! the asserts.

mod common;

use common::{rel_err, rng};
use rand::Rng;

use tpc_core::controller::{self, HaltMode, TokenHaltState};
use tpc_core::losses;
use tpc_core::metrics::{
    bench_throughput, cls_only_after, count_flops_dense, count_params, emit_trace,
    events_from_records,
};
use tpc_core::model::{Model, ModelConfig};
use tpc_core::stabilizer::{build_plan, dense_attention, sparse_attention, ScaleMode};
use tpc_core::tensor::{DType, Tape};
use tpc_core::train::{RunConfig, Trainer};

fn pass(n: u32, what: &str) {
    println!("ACCEPTANCE {n:02} PASS: {what}");
}

#[test]
fn acceptance_01_flops_reproduction() {
    let targets = [("deit-t", 1.3), ("deit-s", 4.6), ("deit-b", 17.6)];
    for (preset, want) in targets {
        let cfg = ModelConfig::preset(preset).unwrap();
        let got = count_flops_dense(&cfg).gflops();
        assert!(
            (got - want).abs() / want < 0.05,
            "{preset}: {got} GFLOPs vs target {want} (tolerance 5%)"
        );
    }
    pass(1, "preset dense GFLOPs within 5% of 1.3 / 4.6 / 17.6");
}

#[test]
fn acceptance_02_param_reproduction() {
    let s = count_params(&ModelConfig::preset("deit-s").unwrap()) as f64;
    let b = count_params(&ModelConfig::preset("deit-b").unwrap()) as f64;
    assert!((s - 22e6).abs() / 22e6 < 0.02, "deit-s {s} vs 22M (2%)");
    assert!((b - 86.6e6).abs() / 86.6e6 < 0.02, "deit-b {b} vs 86.6M (2%)");
    // tiny preset: shape check only
    let t = ModelConfig::preset("deit-t").unwrap();
    assert_eq!((t.embed_dim, t.heads, t.depth), (192, 3, 12));
    assert!(count_params(&t) > 0);
    pass(2, "deit-s/deit-b param counts within 2% of 22M / 86.6M");
}

/// Independent scan: halting layer, remainder and per-layer weights of one
/// break sequence under the additive rule with final-layer forcing.
fn halting_oracle(b: &[f64], delta: f64) -> (usize, f64, Vec<f64>) {
    let depth = b.len();
    let threshold = 1.0 - delta;
    let mut cum = 0.0;
    for l in 1..=depth {
        let bl = if l == depth { 1.0 } else { b[l - 1] };
        if cum + bl >= threshold {
            let mut w = vec![0.0; depth];
            w[..l - 1].copy_from_slice(&b[..l - 1]);
            w[l - 1] = 1.0 - cum;
            return (l, 1.0 - cum, w);
        }
        cum += bl;
    }
    unreachable!("forced break at the final layer always crosses");
}

#[test]
fn acceptance_03_halting_oracle_equivalence() {
    let mut r = rng(0xACC3);
    let deltas = [0.5, 0.1, 0.01];
    for case in 0..1000 {
        let depth = r.gen_range(2..=24);
        let delta = deltas[case % deltas.len()];
        let b: Vec<f64> = (0..depth).map(|_| r.gen_range(0.0..1.0)).collect();

        let (want_m, want_r, want_w) = halting_oracle(&b, delta);

        let mut state = TokenHaltState::new(1, HaltMode::CumulativeSum, None);
        let mut got_w = Vec::with_capacity(depth);
        for l in 1..=depth {
            let w = controller::step(&mut state, &b[l - 1..l], l, delta, depth).unwrap();
            got_w.push(w[0]);
        }
        let got_m = state.halting_layer[0].unwrap();
        assert_eq!(got_m, want_m, "case {case}");
        assert!((state.remainder[0] - want_r).abs() < 1e-12, "case {case}");
        for (g, w) in got_w.iter().zip(&want_w) {
            assert!((g - w).abs() < 1e-12, "case {case}: {got_w:?} vs {want_w:?}");
        }
        assert!(
            (got_w.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "case {case}: weights sum {}",
            got_w.iter().sum::<f64>()
        );
        assert_eq!(
            controller::halting_layer(&b, delta, HaltMode::CumulativeSum),
            want_m
        );
    }
    pass(3, "1000 random sequences: step() == brute-force scan, weights sum to 1");
}

/// Dense attention with non-selected logits forced to -inf, computed in
/// plain f64 outside the tape.
fn masked_dense_oracle(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    selected: &[Vec<usize>],
    scale: f64,
) -> Vec<Vec<f64>> {
    let dv = v[0].len();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    if selected[i].contains(&j) {
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            (0..dv)
                .map(|c| {
                    exps.iter()
                        .zip(v)
                        .map(|(e, vj)| e / sum * vj[c])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

#[test]
fn acceptance_04_sparse_dense_equivalence() {
    let mut r = rng(0xACC4);
    // kappa = n reproduces dense within 1e-6 in f32 across 100 shapes
    for _ in 0..100 {
        let n = r.gen_range(1..12);
        let d = r.gen_range(1..8);
        let tape = Tape::new(DType::F32);
        let mk = |r: &mut rand_chacha::ChaCha8Rng, tape: &Tape| {
            tape.constant(
                (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect(),
                vec![n, d],
            )
        };
        let (q, k, v) = (mk(&mut r, &tape), mk(&mut r, &tape), mk(&mut r, &tape));
        let plan = build_plan(&q, &k, n);
        let sparse = sparse_attention(&q, &k, &v, &plan, ScaleMode::SqrtD).unwrap();
        let dense = dense_attention(&q, &k, &v, ScaleMode::SqrtD).unwrap();
        for (a, b) in sparse.value().iter().zip(dense.value()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    // kappa < n matches the masked-dense oracle within 1e-9 in f64
    for _ in 0..20 {
        let (n, d, kappa) = (16, 8, 5);
        let tape = Tape::new(DType::F64);
        let mk = |r: &mut rand_chacha::ChaCha8Rng, tape: &Tape| {
            tape.constant(
                (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect(),
                vec![n, d],
            )
        };
        let (q, k, v) = (mk(&mut r, &tape), mk(&mut r, &tape), mk(&mut r, &tape));
        let plan = build_plan(&q, &k, kappa);
        let sparse = sparse_attention(&q, &k, &v, &plan, ScaleMode::SqrtD).unwrap();
        let rows = |t: &tpc_core::tensor::Tensor| -> Vec<Vec<f64>> {
            t.value().chunks(d).map(|c| c.to_vec()).collect()
        };
        let oracle = masked_dense_oracle(
            &rows(&q),
            &rows(&k),
            &rows(&v),
            &plan.selected,
            1.0 / (d as f64).sqrt(),
        );
        for (row, orow) in rows(&sparse).iter().zip(&oracle) {
            for (a, b) in row.iter().zip(orow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
    pass(4, "kappa=n == dense (1e-6 f32, 100 shapes); kappa<n == masked-dense oracle (1e-9 f64)");
}

#[test]
fn acceptance_05_gradient_suite() {
    // elementwise / unary chains against central differences
    let mut r = rng(0xACC5);
    type UnaryOp = (&'static str, fn(&tpc_core::tensor::Tensor) -> tpc_core::tensor::Tensor);
    let unaries: Vec<UnaryOp> = vec![
        ("sigmoid", |t| t.sigmoid()),
        ("gelu", |t| t.gelu()),
        ("exp", |t| t.exp()),
        ("neg", |t| t.neg()),
        ("softmax", |t| t.softmax()),
        ("log_softmax", |t| t.log_softmax()),
        ("scale", |t| t.scale(1.7)),
        ("add_const", |t| t.add_const(0.3)),
    ];
    for (name, op) in &unaries {
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
            let tape = Tape::new(DType::F64);
            let t = tape.param(x.clone(), vec![6]);
            let loss = op(&t).mul(&op(&t)).unwrap().sum_all();
            tape.backward(&loss).unwrap();
            let grad = t.grad().unwrap();
            for i in 0..6 {
                let h = 1e-5;
                let f = |v: f64| {
                    let tape = Tape::new(DType::F64);
                    let mut xs = x.clone();
                    xs[i] = v;
                    let t = tape.param(xs, vec![6]);
                    op(&t).mul(&op(&t)).unwrap().sum_all().item()
                };
                let fd = (f(x[i] + h) - f(x[i] - h)) / (2.0 * h);
                let err = rel_err(grad[i], fd);
                assert!(
                    err < 1e-4 || (grad[i].abs() < 1e-7 && fd.abs() < 1e-7),
                    "{name}[{i}]: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }

    // end-to-end 2-layer adaptive model
    let mut cfg = ModelConfig::default();
    cfg.depth = 2;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.num_classes = 3;
    cfg.mlp_ratio = 2.0;
    cfg.tpc.gamma = 1.0;
    cfg.tpc.beta = 0.0;
    let mut model = Model::new(cfg.clone(), 55).unwrap();
    let image: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let eval = |m: &Model| {
        let out = m.bind();
        let f = out.forward_tpc(&image, Some(1)).unwrap();
        losses::compose_final(&f.task.unwrap(), &f.ponder, &f.distribution, 5e-4, 0.1)
            .unwrap()
            .item()
    };
    let bound = model.bind();
    let out = bound.forward_tpc(&image, Some(1)).unwrap();
    let total =
        losses::compose_final(&out.task.unwrap(), &out.ponder, &out.distribution, 5e-4, 0.1)
            .unwrap();
    bound.tape.backward(&total).unwrap();
    let grads: Vec<Vec<f64>> = bound
        .named_tensors()
        .map(|(_, t)| t.grad().unwrap())
        .collect();
    drop(bound);
    for pi in (0..model.params().len()).step_by(3) {
        let len = model.params()[pi].value.data.len();
        let ci = r.gen_range(0..len);
        let h = 1e-5;
        let orig = model.params()[pi].value.data[ci];
        model.params_mut()[pi].value.data[ci] = orig + h;
        let up = eval(&model);
        model.params_mut()[pi].value.data[ci] = orig - h;
        let down = eval(&model);
        model.params_mut()[pi].value.data[ci] = orig;
        let fd = (up - down) / (2.0 * h);
        let got = grads[pi][ci];
        assert!(
            rel_err(got, fd) < 1e-4 || (got.abs() < 1e-8 && fd.abs() < 1e-8),
            "param {pi} coord {ci}: {got} vs {fd}"
        );
    }
    pass(5, "op-level and end-to-end 2-layer model gradients match FD at rel err < 1e-4");
}

#[test]
fn acceptance_06_loss_identities() {
    let t = losses::gaussian_target(8, 4.0);
    assert!(losses::kl_divergence(&t, &t).abs() < 1e-9);
    let mut r = rng(0xACC6);
    for _ in 0..100 {
        let mut d: Vec<f64> = (0..8).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = d.iter().sum();
        for v in &mut d {
            *v /= s;
        }
        let q = losses::gaussian_target(8, r.gen_range(1.0..8.0));
        if d.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6) {
            assert!(losses::kl_divergence(&d, &q) > 0.0);
        }
    }
    let b = losses::LossBreakdown::compose(0.75, 2.0, 4.0, 0.5, 0.25);
    assert_eq!(b.final_loss, 0.75 + 0.5 * 2.0 + 0.25 * 4.0);
    let defaults = ModelConfig::default().tpc;
    assert_eq!(defaults.phi_p, 5e-4);
    assert_eq!(defaults.phi_d, 0.1);
    pass(6, "KL identities, exact composition, phi defaults 5e-4 / 0.1");
}

fn toy_run_config(phi_p: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.depth = 2;
    cfg.model.embed_dim = 64;
    cfg.model.heads = 4;
    cfg.model.patch_size = 4;
    cfg.model.image_size = 8;
    cfg.model.channels = 1;
    cfg.model.num_classes = 2;
    cfg.model.mlp_ratio = 2.0;
    cfg.model.tpc.gamma = 1.0;
    cfg.model.tpc.beta = 0.0;
    cfg.model.tpc.delta = 0.5;
    cfg.model.tpc.phi_p = phi_p;
    cfg.model.tpc.phi_d = 0.0;
    cfg.data.classes = 2;
    cfg.data.per_class = 12;
    cfg.data.train_fraction = 1.0;
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 200;
    cfg.optim.base_lr = 3e-3;
    cfg.optim.warmup_fraction = 0.0;
    cfg
}

/// Train until the accuracy target or the epoch budget; returns (train
/// accuracy, mean halting depth) at the stopping point.
fn train_toy(phi_p: f64, seed: u64) -> (f64, f64) {
    let cfg = toy_run_config(phi_p);
    let steps_per_epoch = 3; // 24 examples / batch 8
    let mut trainer = Trainer::new(cfg, seed).unwrap();
    let mut best = (0.0, f64::NAN);
    for epoch in 1..=200 {
        for _ in 0..steps_per_epoch {
            trainer.step().unwrap();
        }
        if epoch % 10 == 0 || epoch == 200 {
            let m = trainer.evaluate().unwrap();
            best = (m.top1, m.mean_depth);
            // give the ponder objective time to shape depth before stopping
            if m.top1 >= 0.95 && epoch >= 60 {
                break;
            }
        }
    }
    best
}

#[test]
fn acceptance_07_toy_training() {
    for seed in [1u64, 2, 3] {
        let (acc_base, depth_base) = train_toy(0.0, seed);
        let (_, depth_ponder) = train_toy(0.05, seed);
        assert!(
            acc_base >= 0.95,
            "seed {seed}: train accuracy {acc_base} below 95%"
        );
        assert!(
            depth_ponder < depth_base,
            "seed {seed}: mean depth {depth_ponder} (phi_p=0.05) not below {depth_base} (phi_p=0)"
        );
    }
    pass(7, "3/3 seeds reach 95% train accuracy; phi_p=0.05 strictly lowers mean depth");
}

#[test]
fn acceptance_08_throughput_property() {
    let mut cfg = ModelConfig::default();
    cfg.depth = 4;
    cfg.embed_dim = 32;
    cfg.heads = 2;
    cfg.num_classes = 10;
    cfg.tpc.stabilizer = false;
    assert_eq!(cfg.tokens(), 197);
    let model = Model::new(cfg.clone(), 3).unwrap();
    let image = vec![0.5; cfg.channels * cfg.image_size * cfg.image_size];
    let dense_masks = cls_only_after(cfg.depth, cfg.tokens(), cfg.depth);
    let halved_masks = cls_only_after(cfg.depth, cfg.tokens(), cfg.depth / 2);
    let dense = bench_throughput(&model, &image, &dense_masks, 10, 3).unwrap();
    let tpc = bench_throughput(&model, &image, &halved_masks, 10, 3).unwrap();
    let ratio = tpc.images_per_sec / dense.images_per_sec;
    assert!(
        ratio >= 1.5,
        "drop-mode speedup {ratio:.2}x below 1.5x (dense {:.2} img/s, tpc {:.2} img/s)",
        dense.images_per_sec,
        tpc.images_per_sec
    );
    pass(8, "forced depth-L/2 schedule at n=197 runs >= 1.5x dense throughput");
}

#[test]
fn acceptance_09_excluded_image_net_accuracy() {
    // Full-scale ImageNet-1K top-1/top-5 reproduction is out of scope for
    // this artifact by design: no ImageNet ingestion exists and the quoted
    // accuracies are hardware- and recipe-bound. The invariant, oracle,
    // gradient and toy-convergence criteria (3-7) stand in for it.
    pass(9, "EXCLUDED by design: ImageNet accuracy targets; covered by criteria 3-7");
}

#[test]
fn acceptance_10_hand_trace_conformance() {
    // 3 layers, 4 tokens, delta = 0.125; probabilities chosen by hand with
    // exactly-representable values. Token 0 pauses at 0.5 twice; token 1
    // halts immediately at 0.875; token 2 idles at 0.25 until the forced
    // final layer; token 3 accumulates 0.125 + 0.75.
    let delta = 0.125;
    let depth = 3;
    let pauses = [
        vec![0.5, 0.875, 0.25, 0.125],
        vec![0.5, 0.0, 0.25, 0.75],
        vec![0.0, 0.0, 0.0, 0.0], // forced layer: engine substitutes b = 1
    ];
    let mut state = TokenHaltState::new(4, HaltMode::CumulativeSum, None);
    let mut records = Vec::new();
    for l in 1..=depth {
        let was_halted: Vec<bool> = (0..4).map(|k| state.halted(k)).collect();
        let b = &pauses[l - 1];
        let weights = controller::step(&mut state, b, l, delta, depth).unwrap();
        for k in 0..4 {
            if was_halted[k] {
                continue;
            }
            let (p, b_val) = if l == depth { (1.0, 1.0) } else { (b[k], b[k]) };
            records.push(tpc_core::controller::BreakRecord {
                token: k,
                layer: l,
                pause: p,
                restart: 0.0,
                non_restart: 1.0,
                b_raw: b_val,
                b_reg: b_val,
                weight: weights[k],
            });
        }
    }
    let events = events_from_records(0, &records, delta, HaltMode::CumulativeSum);
    let mut out = Vec::new();
    emit_trace(&events, &mut out).unwrap();
    let got = String::from_utf8(out).unwrap();
    let golden = include_str!("golden/hand_trace.csv");
    assert_eq!(got, golden, "engine trace differs from the hand-computed golden file");

    // the same hand case pins the controller bookkeeping
    assert_eq!(state.halting_layer, vec![Some(2), Some(1), Some(3), Some(2)]);
    assert_eq!(state.remainder, vec![0.5, 1.0, 0.5, 0.875]);
    pass(10, "hand-computed 3-layer 4-token trace matches engine output byte-for-byte");
}
