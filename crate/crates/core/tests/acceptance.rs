//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (straight to stderr, so it survives output capture) and then asserts.

use std::io::Write;
use std::time::Instant;

use hyperattn::bench::{self, Workload};
use hyperattn::distractor::{self, EvalConfig, FirstImageAdapter, OracleAdapter, RandomAdapter, DEFAULT_N_VALUES};
use hyperattn::hyperattention::{
    adaptive_gate, apply_rotary, hatb_forward, hatb_forward_cached, AttentionInputs, HatbOptions, HatbParams, HostBlock,
};
use hyperattn::interleave::{build_sequence, CropPolicy, CrossAttentionMask, InterleavedSequence, Segment};
use hyperattn::model::{Example, Model, ModelConfig, Variant};
use hyperattn::oracle::{self, finite_diff_params, random_sequence, CaseLimits, HatbCase, FD_EPS, GRAD_FLOOR};
use hyperattn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let case = HatbCase::random(&mut rng, CaseLimits::default(), HatbOptions::default());
        worst = worst.max(oracle::oracle_deviation(&case).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && secs < 60.0;
    report(
        "oracle equivalence",
        pass,
        format!("100 cases (L<=32, M<=48, D<=64), max rel err {worst:.2e} < 1e-9, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let limits = CaseLimits {
        max_len: 12,
        max_visual: 16,
        max_dim: 16,
    };
    let mut worst = (0.0f64, String::new());
    for i in 0..20 {
        let r = oracle::gradcheck_hatb(&HatbCase::random(&mut rng, limits, HatbOptions::default()), 1e-4).unwrap();
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("hatb case {i} at {}", r.worst_location));
        }
    }
    for v in Variant::ALL {
        let (model, batch) = oracle::small_model_case(&mut rng, v, 3).unwrap();
        let r = oracle::gradcheck_model(&model, &batch, 1e-4).unwrap();
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("{v} model at {}", r.worst_location));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-4 && secs < 300.0;
    report(
        "gradient fidelity",
        pass,
        format!(
            "20 HATB cases + 5 model variants, eps {FD_EPS:e}, abs floor {GRAD_FLOOR:e}: max rel err {:.2e} ({}) < 1e-4, {secs:.1}s",
            worst.0, worst.1
        ),
    );
    assert!(pass);
}

#[test]
fn text_only_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let config = ModelConfig::default();
    let tokens: Vec<u32> = (0..24).map(|_| rng.gen_range(0..config.image_token())).collect();
    let seq = InterleavedSequence::text_only(tokens, config.image_token());
    let outputs: Vec<_> = Variant::ALL
        .iter()
        .map(|&v| {
            let model = Model::new(config.with_variant(v)).unwrap();
            model.forward(&model.example(seq.clone())).unwrap()
        })
        .collect();
    let variants_equal = outputs
        .windows(2)
        .all(|w| w[0].hidden == w[1].hidden && w[0].logits == w[1].logits);

    let mut blocks_equal = true;
    for _ in 0..20 {
        let d = 4 * rng.gen_range(1..=8);
        let host = HostBlock::init(d, 2, 2 * d, &mut rng);
        let mut params = HatbParams::from_host(&host, HatbOptions::default());
        params.w_gate.iter_mut().for_each(|g| *g = rng.gen_range(-1.0..1.0));
        let l = rng.gen_range(1..=20);
        let seq = InterleavedSequence::text_only((0..l as u32).collect(), 999);
        let x = Matrix::random(l, d, 1.0, &mut rng);
        let inputs = AttentionInputs::from_sequence(x.clone(), Matrix::zeros(0, d), &seq, 4).unwrap();
        let out = hatb_forward(&inputs, &host, &params).unwrap();
        let (plain, _) = host.forward(&x, &inputs.rope.query_positions, false).unwrap();
        blocks_equal &= out.out == plain;
    }
    let pass = variants_equal && blocks_equal;
    report(
        "text-only reduction",
        pass,
        format!(
            "5 variants bitwise equal: {variants_equal}; HATB == plain block bitwise over 20 cases: {blocks_equal}"
        ),
    );
    assert!(pass);
}

#[test]
fn causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let limits = CaseLimits {
        max_len: 24,
        max_visual: 32,
        max_dim: 16,
    };
    let mut violations = 0;
    let mut checked = 0;
    let mut interleavings = 0;
    while interleavings < 50 {
        let case = HatbCase::random(&mut rng, limits, HatbOptions::default());
        if case.seq.num_slots() == 0 {
            continue;
        }
        interleavings += 1;
        let base = hatb_forward(&case.inputs().unwrap(), &case.host, &case.hatb).unwrap();
        for (s, slot) in case.seq.slots.iter().enumerate() {
            let mut perturbed = case.clone();
            for p in 0..case.patches {
                perturbed
                    .h_img
                    .row_mut(s * case.patches + p)
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-1.0..1.0));
            }
            let out = hatb_forward(&perturbed.inputs().unwrap(), &case.host, &case.hatb).unwrap();
            for t in 0..case.seq.len() {
                let changed = out.out.row(t) != base.out.row(t);
                checked += 1;
                if changed != (slot.placeholder_position <= t) {
                    violations += 1;
                }
            }
        }
    }

    // The same property through a whole multi-layer model.
    let config = ModelConfig {
        hidden_dim: 16,
        n_heads: 2,
        n_layers: 3,
        head_dim: 0,
        ffn_dim: 32,
        vocab_size: 64,
        patches_per_slot: 2,
        hatb_indices: vec![0, 2],
        vision_dim: 6,
        ..ModelConfig::default()
    };
    let model = Model::new(config).unwrap();
    let mut model_violations = 0;
    for _ in 0..50 {
        let seq = random_sequence(&mut rng, 20, 4, model.config.image_token());
        let ex = model.example(seq);
        let base = model.forward(&ex).unwrap();
        for (s, slot) in ex.seq.slots.iter().enumerate() {
            let mut features = ex.features.clone();
            features.row_mut(s * 2).iter_mut().for_each(|v| *v += 0.5);
            let out = model
                .forward(&Example {
                    seq: ex.seq.clone(),
                    features,
                })
                .unwrap();
            for t in 0..ex.seq.len() {
                let changed = out.hidden.row(t) != base.hidden.row(t);
                if (t < slot.placeholder_position && changed) || (t == slot.placeholder_position && !changed) {
                    model_violations += 1;
                }
            }
        }
    }
    let pass = violations == 0 && model_violations == 0;
    report(
        "causality",
        pass,
        format!(
            "50 HATB interleavings, {checked} (slot, token) pairs changed iff pos(s) <= t: {violations} violations; 50 model interleavings: {model_violations} violations"
        ),
    );
    assert!(pass);
}

fn probs(inputs: &AttentionInputs, case: &HatbCase) -> (Vec<f64>, Vec<f64>, Matrix) {
    let (out, cache) = hatb_forward_cached(inputs, &case.host, &case.hatb, true).unwrap();
    (
        cache.cross.probs.clone().unwrap(),
        cache.sa.attn.probs.clone().unwrap(),
        out.out,
    )
}

#[test]
fn mi_rope_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let limits = CaseLimits {
        max_len: 24,
        max_visual: 32,
        max_dim: 32,
    };

    let mut shift_err = 0.0f64;
    for _ in 0..30 {
        let case = HatbCase::random(&mut rng, limits, HatbOptions::default());
        let inputs = case.inputs().unwrap();
        let (cross, selfp, out) = probs(&inputs, &case);
        for shift in [1, 17, 1000] {
            let mut shifted = inputs.clone();
            shifted.rope = inputs.rope.shifted(shift);
            let (c2, s2, o2) = probs(&shifted, &case);
            shift_err = shift_err
                .max(max_abs(&cross, &c2))
                .max(max_abs(&selfp, &s2))
                .max(out.max_abs_diff(&o2));
        }
    }

    let mut norm_err = 0.0f64;
    for _ in 0..30 {
        let heads = rng.gen_range(1..=4);
        let d = heads * 2 * rng.gen_range(1..=8);
        let rows = rng.gen_range(1..=16);
        let x = Matrix::random(rows, d, 3.0, &mut rng);
        let positions: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..5000)).collect();
        let y = apply_rotary(&x, heads, &positions).unwrap();
        for r in 0..rows {
            for (a, b) in x.row(r).chunks(2).zip(y.row(r).chunks(2)) {
                norm_err = norm_err.max((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs());
            }
        }
    }

    // Relabeling two images (features, placeholder positions and mask columns
    // together) permutes their attention probabilities and leaves outputs alone.
    let mut perm_err = 0.0f64;
    let mut perms = 0;
    while perms < 30 {
        let case = HatbCase::random(&mut rng, limits, HatbOptions::default());
        let slots = case.seq.num_slots();
        if slots < 2 {
            continue;
        }
        perms += 1;
        let inputs = case.inputs().unwrap();
        assert_eq!(
            inputs.cross_mask,
            CrossAttentionMask::from_positions(case.seq.len(), &inputs.rope.visual_key_positions)
        );
        let a = rng.gen_range(0..slots);
        let b = (a + rng.gen_range(1..slots)) % slots;
        let p = case.patches;
        let mut swapped = inputs.clone();
        swapped.rope.visual_key_positions.swap(a, b);
        swapped.cross_mask = CrossAttentionMask::from_positions(case.seq.len(), &swapped.rope.visual_key_positions);
        for j in 0..p {
            swapped
                .h_img
                .row_mut(a * p + j)
                .copy_from_slice(inputs.h_img.row(b * p + j));
            swapped
                .h_img
                .row_mut(b * p + j)
                .copy_from_slice(inputs.h_img.row(a * p + j));
        }
        let (c1, _, o1) = probs(&inputs, &case);
        let (c2, _, o2) = probs(&swapped, &case);
        let keys = slots * p;
        let heads = case.host.n_heads;
        let relabel = |k: usize| match k / p {
            s if s == a => b * p + k % p,
            s if s == b => a * p + k % p,
            _ => k,
        };
        for t in 0..case.seq.len() {
            for h in 0..heads {
                for k in 0..keys {
                    let base = (t * heads + h) * keys;
                    perm_err = perm_err.max((c1[base + k] - c2[base + relabel(k)]).abs());
                }
            }
        }
        perm_err = perm_err.max(o1.max_abs_diff(&o2));
    }

    let pass = shift_err < 1e-9 && norm_err < 1e-12 && perm_err < 1e-12;
    report(
        "MI-Rope properties",
        pass,
        format!(
            "shift invariance {shift_err:.2e} < 1e-9; pair norms {norm_err:.2e} < 1e-12; image permutation {perm_err:.2e} < 1e-12"
        ),
    );
    assert!(pass);
}

#[test]
fn gate_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let limits = CaseLimits {
        max_len: 16,
        max_visual: 24,
        max_dim: 16,
    };
    let mut in_range = true;
    let mut zero_exact = true;
    for _ in 0..50 {
        let case = HatbCase::random(&mut rng, limits, HatbOptions::default());
        let out = hatb_forward(&case.inputs().unwrap(), &case.host, &case.hatb).unwrap();
        in_range &= out.gate.iter().all(|&g| g > 0.0 && g < 1.0);
        let h = Matrix::random(8, case.h_text.cols, 5.0, &mut rng);
        zero_exact &= adaptive_gate(&h, &vec![0.0; h.cols], 0.0)
            .unwrap()
            .iter()
            .all(|&g| g == 0.5);
        let mut zeroed = case.clone();
        zeroed.hatb.w_gate.iter_mut().for_each(|g| *g = 0.0);
        zeroed.hatb.gate_bias.clear();
        let out = hatb_forward(&zeroed.inputs().unwrap(), &zeroed.host, &zeroed.hatb).unwrap();
        zero_exact &= out.gate.iter().all(|&g| g == 0.5);
    }

    // Saturate the gate through its bias: sigma(25 + w.h) ~ 1 - 1e-11.
    let options = HatbOptions {
        gate_bias: true,
        ..HatbOptions::default()
    };
    let (mut max_grad, mut max_fd, mut max_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut saturated_cases = 0;
    while saturated_cases < 10 {
        let mut case = HatbCase::random(&mut rng, limits, options);
        if case.seq.num_slots() == 0 {
            continue;
        }
        saturated_cases += 1;
        case.hatb.gate_bias = vec![25.0];
        case.hatb.w_gate.iter_mut().for_each(|g| *g *= 0.1);
        let analytic = case.analytic_grad().unwrap().hatb.w_gate;
        let fd = finite_diff_params(
            &case.hatb,
            |p| {
                HatbCase {
                    hatb: p.clone(),
                    ..case.clone()
                }
                .objective()
            },
            FD_EPS,
        )
        .unwrap();
        let fd = fd.iter().find(|t| t.name == "w_gate").unwrap().values.clone();
        max_grad = max_grad.max(analytic.iter().fold(0.0, |m, v| m.max(v.abs())));
        max_fd = max_fd.max(fd.iter().fold(0.0, |m, v| m.max(v.abs())));
        max_gap = max_gap.max(max_abs(&analytic, &fd));
    }
    let pass = in_range && zero_exact && max_grad < 1e-6 && max_fd < 1e-6;
    report(
        "gate properties",
        pass,
        format!(
            "gates in (0,1): {in_range}; w_gate=0 => 0.5 exactly: {zero_exact}; saturated |grad w_gate| {max_grad:.2e} < 1e-6 (finite differences {max_fd:.2e}, gap {max_gap:.2e})"
        ),
    );
    assert!(pass);
}

#[test]
fn scaling_claims() {
    let start = Instant::now();
    let workload = Workload::new(ModelConfig::default(), 0, 16, 256, 5);
    let ns = [1usize, 50, 100];
    let mut medians = Vec::new();
    let mut formulas_match = true;
    let mut rows = Vec::new();
    for variant in [Variant::Hyper, Variant::Concat] {
        let mut times = Vec::new();
        for &n in &ns {
            let w = Workload {
                n_images: n,
                ..workload.clone()
            };
            let r = bench::measure(variant, &w.config, &w).unwrap();
            let m = r.measured.as_ref().unwrap();
            let d = w.config.hidden_dim;
            formulas_match &= r.lm_seq_len == m.lm_seq_len
                && r.attn_flops == m.attn_flops(d)
                && (variant == Variant::Concat || m.visual_keys == n * w.patches_per_slot);
            times.push(r.wall_ms_median.unwrap());
            rows.push(r);
        }
        medians.push(times);
    }
    let (hyper, concat) = (&medians[0], &medians[1]);
    let monotone = concat.windows(2).all(|w| w[1] > w[0]);
    let ratio = bench::growth_ratio((concat[0], concat[2]), (hyper[0], hyper[2]));
    let convex = (concat[2] - concat[1]) / 50.0 > (concat[1] - concat[0]) / 49.0;
    let secs = start.elapsed().as_secs_f64();
    let pass = monotone && ratio > 2.0 && formulas_match && secs < 600.0;
    let csv = bench::to_csv(&rows).unwrap();
    let _ = std::io::stderr().lock().write_all(csv.as_bytes());
    report(
        "scaling claims",
        pass,
        format!(
            "t=256 v=16 D=64; concat ms {concat:.1?} (monotone {monotone}, convex {convex}), hyper ms {hyper:.1?}; slope ratio {ratio:.1} > 2; formulas match measured: {formulas_match}; {secs:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn parameter_economy() {
    let config = ModelConfig::default();
    let d = config.hidden_dim;
    let hyper = Model::new(config.with_variant(Variant::Hyper)).unwrap().count_params();
    let dense = Model::new(config.with_variant(Variant::FlamingoDense))
        .unwrap()
        .count_params();
    let expected = 4 * (2 * d * d + d);
    let pass = config.n_layers == 8
        && config.fusion_layers().len() == 4
        && hyper.added_by_fusion == expected
        && hyper.added_by_fusion < dense.added_by_fusion
        && hyper.base == dense.base;
    report(
        "parameter economy",
        pass,
        format!(
            "hyper k=4 adds {} = 4(2D^2+D) = {expected}; flamingo_dense adds {}",
            hyper.added_by_fusion, dense.added_by_fusion
        ),
    );
    assert!(pass);
}

#[test]
fn distractor_calibration() {
    let start = Instant::now();
    let oracle_cfg = EvalConfig {
        questions: 25,
        rng_seed: 107,
        ..EvalConfig::default()
    };
    let tasks = distractor::gen_tasks(&oracle_cfg).unwrap();
    let oracle = distractor::circular_eval(&OracleAdapter, &tasks, &oracle_cfg).unwrap();
    let oracle_ok =
        oracle.len() == DEFAULT_N_VALUES.len() && oracle.iter().all(|r| r.accuracy == 1.0 && r.failures == 0);

    let random_cfg = EvalConfig {
        questions: 250,
        rng_seed: 108,
        ..EvalConfig::default()
    };
    let tasks = distractor::gen_tasks(&random_cfg).unwrap();
    let random = distractor::circular_eval(&RandomAdapter { seed: 109 }, &tasks, &random_cfg).unwrap();
    let (correct, total) = random.iter().fold((0, 0), |(c, q), r| (c + r.correct, q + r.questions));
    let acc = correct as f64 / total as f64;
    let p = 0.25f64.powi((random_cfg.rotations * random_cfg.distractor_seeds) as i32);
    let se = (p * (1.0 - p) / total as f64).sqrt();
    let random_ok = total == 2000 && (acc - p).abs() <= 3.0 * se;

    let first = distractor::circular_eval(&FirstImageAdapter, &tasks, &random_cfg).unwrap();
    let accs: Vec<f64> = first.iter().map(|r| r.accuracy).collect();
    let decays = accs.windows(2).all(|w| w[1] < w[0]);

    let secs = start.elapsed().as_secs_f64();
    let pass = oracle_ok && random_ok && decays && secs < 300.0;
    report(
        "distractor calibration",
        pass,
        format!(
            "oracle 1.000 at N in {DEFAULT_N_VALUES:?}: {oracle_ok}; random {acc:.4} over {total} questions vs {p:.4} +- 3x{se:.4}; first-image {accs:.3?} strictly decreasing: {decays}; {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn training_smoke() {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig::default()).unwrap();
    let img = model.config.image_token();
    let batch: Vec<Example> = [(1u64, 2u64, [10, 11, 12, 13]), (3, 4, [20, 21, 22, 23])]
        .iter()
        .map(|&(a, b, answer)| {
            let seq = build_sequence(
                &[
                    Segment::text(vec![5, 6]),
                    Segment::image(a, 448, 448),
                    Segment::text(vec![7]),
                    Segment::image(b, 448, 448),
                    Segment::text(answer.to_vec()),
                ],
                CropPolicy::Off,
                img,
            )
            .unwrap();
            model.example(seq)
        })
        .collect();
    let initial = model.loss(&batch).unwrap();
    for _ in 0..500 {
        model.overfit_step(&batch, 0.1).unwrap();
    }
    let last = model.loss(&batch).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = last <= 0.1 * initial;
    report(
        "training smoke test",
        pass,
        format!(
            "hyper, 500 full-batch steps at lr 0.1: loss {initial:.4} -> {last:.4} ({:.2}% of initial, <= 10%), {secs:.1}s",
            100.0 * last / initial
        ),
    );
    assert!(pass);
}
