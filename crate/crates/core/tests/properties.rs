use std::collections::BTreeMap;

use proptest::prelude::*;

use sos_core::aae::{Aae, AaeConfig};
use sos_core::ingest::{
    combine_workers, compute_stats, normalize, segment_length_distribution, segment_runs, synth_worker, Frame,
    LabeledStream, SynthWorkerSpec,
};
use sos_core::labels::{LabelSet, NUM_CLASSES};
use sos_core::metrics::{accuracy, confusion_matrix, macro_scores, per_class_scores};
use sos_core::numeric::{grad_check, AdamState, Bound, Params, Prng, Tape, Tensor, TensorError, Var};
use sos_core::reorder::{flatten, rdss_groups, reorder_as, reorder_rs, RdssConfig, Strategy as Order};
use sos_core::windowing::split_stream;

fn stream_from_runs(runs: &[(usize, usize)], start: i64, gap: i64, seed: u64) -> LabeledStream {
    let mut rng = Prng::new(seed);
    let mut frames = Vec::new();
    for &(class, len) in runs {
        for _ in 0..len {
            let t = start + frames.len() as i64 * gap;
            frames.push(Frame { timestamp: t, acc: [rng.gaussian(), 3.0 + rng.gaussian(), -1.0 + 2.0 * rng.gaussian()], label: LabelSet::IDS[class] });
        }
    }
    LabeledStream::new(frames).unwrap()
}

fn runs() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..NUM_CLASSES, 1usize..30), 1..40)
}

fn frame_key(f: &Frame) -> (u32, [u64; 3]) {
    (f.label.raw(), f.acc.map(f64::to_bits))
}

fn sorted_keys(s: &LabeledStream) -> Vec<(u32, [u64; 3])> {
    let mut v: Vec<_> = s.frames().iter().map(frame_key).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_of_segment_runs_is_identity(r in runs(), start in 0i64..10_000, gap in 1i64..100, seed: u64) {
        let s = stream_from_runs(&r, start, gap, seed);
        prop_assert_eq!(flatten(&segment_runs(&s)).unwrap(), s);
    }

    #[test]
    fn combine_keeps_every_frame(a in runs(), b in runs(), seed: u64) {
        let (x, y) = (stream_from_runs(&a, 0, 33, seed), stream_from_runs(&b, 500, 20, seed ^ 1));
        let c = combine_workers(&x, &y).unwrap();
        prop_assert_eq!(c.len(), x.len() + y.len());
        let values: Vec<_> = c.frames().iter().map(frame_key).collect();
        let expected: Vec<_> = x.frames().iter().chain(y.frames()).map(frame_key).collect();
        prop_assert_eq!(values, expected);
    }

    #[test]
    fn normalize_is_invertible(r in runs(), seed: u64) {
        let s = stream_from_runs(&r, 0, 33, seed);
        prop_assume!(s.len() > 2);
        let stats = compute_stats(&s).unwrap();
        let n = normalize(&s, &stats).unwrap();
        for (orig, norm) in s.frames().iter().zip(n.frames()) {
            let back = stats.denormalize(norm.acc);
            for k in 0..3 {
                prop_assert!((back[k] - orig.acc[k]).abs() <= 1e-12 * orig.acc[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn splits_partition_the_stream(r in runs(), val in 0.0f64..0.4, test in 0.0f64..0.4, seed: u64) {
        let s = stream_from_runs(&r, 0, 33, seed);
        if let Ok(sp) = split_stream(&s, val, test) {
            let mut frames: Vec<Frame> = sp.train.frames().to_vec();
            for part in [&sp.val, &sp.test].into_iter().flatten() {
                prop_assert!(part.first_timestamp() > frames.last().unwrap().timestamp);
                frames.extend_from_slice(part.frames());
            }
            prop_assert_eq!(frames.as_slice(), s.frames());
        }
    }

    #[test]
    fn reorders_preserve_frames(r in runs(), seed: u64, groups in 1usize..20) {
        let s = stream_from_runs(&r, 0, 33, seed);
        let segs = segment_runs(&s);
        let source = sorted_keys(&s);
        for strategy in [Order::Random, Order::Ascending, Order::GroupedAscending] {
            prop_assert_eq!(sorted_keys(&strategy.apply(&segs, seed, groups).unwrap()), source.clone());
        }
    }

    #[test]
    fn ascending_has_few_transitions(r in runs(), seed: u64) {
        let s = stream_from_runs(&r, 0, 33, seed);
        let out = reorder_as(&segment_runs(&s)).unwrap();
        let labels: Vec<_> = out.labels().collect();
        prop_assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        let transitions = labels.windows(2).filter(|w| w[0] != w[1]).count();
        prop_assert!(transitions < NUM_CLASSES);
    }

    #[test]
    fn rdss_groups_are_balanced(r in runs(), seed: u64, g in 1usize..24) {
        let segs = segment_runs(&stream_from_runs(&r, 0, 33, seed));
        let groups = rdss_groups(&segs, &RdssConfig::new(g, seed).unwrap()).unwrap();
        prop_assert_eq!(groups.len(), g.min(segs.len()));
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(sizes.iter().sum::<usize>(), segs.len());
    }

    #[test]
    fn synth_worker_is_pure(seed: u64, duration in 1usize..3000, variant in 0u32..4) {
        let spec = SynthWorkerSpec::desk(seed, duration, variant);
        let (a, b) = (synth_worker(&spec).unwrap(), synth_worker(&spec.clone()).unwrap());
        let bits = |s: &LabeledStream| s.frames().iter().map(frame_key).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert_eq!(a.len(), duration);
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed: u64) {
        let mut rng = Prng::new(seed);
        let x = Tensor::from_fn([rows, cols], |_| 5.0 * rng.gaussian());
        let t = Tape::new();
        let a = t.value(t.softmax(t.constant(x.clone())).unwrap());
        let b = t.value(t.softmax(t.constant(x.add_scalar(shift))).unwrap());
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_with_zero_lr_is_identity(n in 1usize..20, seed: u64) {
        let mut rng = Prng::new(seed);
        let mut params = Params::new();
        let w = params.add("w", Tensor::from_fn([n], |_| rng.gaussian()));
        let before = params.clone();
        let t = Tape::new();
        let b = t.bind(&params);
        let grads = t.backward(t.sum(t.square(b.var(w)))).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step(&mut params, &grads, 0.0).unwrap();
        prop_assert_eq!(params, before);
    }

    #[test]
    fn macro_f1_is_mean_of_per_class(k in 2usize..12, n in 1usize..300, seed: u64) {
        let mut rng = Prng::new(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let cm = confusion_matrix(&truth, &pred, k).unwrap();
        let m = macro_scores(&cm);
        let present: Vec<f64> = per_class_scores(&cm).iter().filter(|c| c.support > 0).map(|c| c.f1).collect();
        prop_assert!(m.f1 <= 1.0 && m.f1 >= 0.0);
        prop_assert_eq!(m.f1, present.iter().sum::<f64>() / present.len() as f64);

        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        prop_assert_eq!(accuracy(&confusion_matrix(&t2, &p2, k).unwrap()), accuracy(&cm));
    }
}

type OpCase = fn(&Tape, &[Var]) -> Result<Var, TensorError>;

/// Every differentiable op against finite differences, on random shapes and values.
/// Each case lists its input shapes as functions of two free sizes `(m, n)`.
fn op_cases() -> Vec<(&'static str, Vec<fn(usize, usize) -> Vec<usize>>, OpCase)> {
    vec![
        ("add", vec![|m, n| vec![m, n], |m, n| vec![m, n]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![|m, n| vec![m, n], |m, n| vec![m, n]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![|m, n| vec![m, n], |m, n| vec![m, n]], |t, v| t.mul(v[0], v[1])),
        ("add_broadcast", vec![|m, n| vec![2, m, n], |_, n| vec![n]], |t, v| t.add_broadcast(v[0], v[1])),
        ("mul_broadcast", vec![|m, n| vec![2, m, n], |m, n| vec![m, n]], |t, v| t.mul_broadcast(v[0], v[1])),
        ("scale", vec![|m, n| vec![m, n]], |t, v| Ok(t.add_scalar(t.scale(v[0], -1.7), 0.3))),
        ("matmul", vec![|m, _| vec![m, 3], |_, n| vec![3, n]], |t, v| t.matmul(v[0], v[1])),
        ("bmm", vec![|m, n| vec![2, m, n], |m, n| vec![2, m, n]], |t, v| t.bmm(v[0], v[1], false, true, 0.7)),
        ("bmm_ta", vec![|m, n| vec![2, m, n], |m, _| vec![2, m, 3]], |t, v| t.bmm(v[0], v[1], true, false, 1.0)),
        ("transpose", vec![|m, n| vec![m, n]], |t, v| t.transpose(v[0])),
        ("permute", vec![|m, n| vec![m, 2, n]], |t, v| t.permute(v[0], &[2, 0, 1])),
        ("reshape", vec![|m, n| vec![m, n]], |t, v| {
            let len = t.shape(v[0]).iter().product();
            t.reshape(v[0], &[len])
        }),
        ("concat", vec![|m, n| vec![m, n], |m, _| vec![m, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![|m, n| vec![m, n + 1]], |t, v| t.slice(v[0], 1, 1, t.shape(v[0])[1] - 1)),
        ("softmax", vec![|m, n| vec![m, n]], |t, v| t.softmax(v[0])),
        ("layer_norm", vec![|m, n| vec![m, n + 2]], |t, v| t.layer_norm(v[0], 1e-5)),
        ("relu", vec![|m, n| vec![m, n]], |t, v| Ok(t.relu(v[0]))),
        ("exp", vec![|m, n| vec![m, n]], |t, v| Ok(t.exp(v[0]))),
        ("square", vec![|m, n| vec![m, n]], |t, v| Ok(t.square(v[0]))),
        ("sum", vec![|m, n| vec![m, n]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![|m, n| vec![m, n]], |t, v| Ok(t.mean(v[0]))),
        ("mean_axis", vec![|m, n| vec![m, 2, n]], |t, v| t.mean_axis(v[0], 1)),
        ("repeat_leading", vec![|m, n| vec![m, n]], |t, v| Ok(t.repeat_leading(v[0], 3))),
        ("cross_entropy", vec![|m, n| vec![m, n + 1]], |t, v| {
            let rows = t.shape(v[0])[0];
            t.softmax_cross_entropy(v[0], &(0..rows).map(|r| r % 2).collect::<Vec<_>>())
        }),
        ("attention", vec![|m, n| vec![2, m, n], |m, n| vec![2, m + 1, n], |m, _| vec![2, m + 1, 2]], |t, v| {
            Ok(t.attention(v[0], v[1], v[2], 0.6)?.0)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn every_op_passes_grad_check(m in 1usize..4, n in 1usize..4, seed: u64) {
        for (name, shapes, op) in op_cases() {
            let mut rng = Prng::new(seed);
            let mut params = Params::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    // keep relu inputs away from the kink
                    let t = Tensor::from_fn(s(m, n), |_| {
                        let g = rng.gaussian();
                        if name == "relu" { g.signum() * (0.1 + g.abs()) } else { g }
                    });
                    params.add(format!("x{i}"), t)
                })
                .collect();
            let probe = Tape::new();
            let bound = probe.bind(&params);
            let out_shape = probe.shape(op(&probe, &ids.iter().map(|&id| bound.var(id)).collect::<Vec<_>>()).unwrap());
            let weights = Tensor::from_fn(out_shape, |_| rng.gaussian());
            let loss = |t: &Tape, b: &Bound| {
                let y = op(t, &ids.iter().map(|&id| b.var(id)).collect::<Vec<_>>())?;
                let w = t.constant(weights.clone());
                Ok(t.sum(t.mul(y, w)?))
            };
            let tape = Tape::new();
            let bound = tape.bind(&params);
            let grads = tape.backward(loss(&tape, &bound).unwrap()).unwrap();
            // a gradient that cancels to almost zero leaves only rounding in the relative error
            let degenerate = ids.iter().any(|&id| grads.wrt(id).unwrap().data().iter().any(|g| *g != 0.0 && g.abs() < 1e-4));
            if degenerate {
                continue;
            }
            let err = grad_check(loss, &params, 1e-5).unwrap();
            prop_assert!(err < 1e-6, "{name}: {err}");
        }
    }
}

#[test]
fn random_order_is_uniform_over_permutations() {
    let s = stream_from_runs(&[(0, 1), (1, 1), (2, 1), (3, 1)], 0, 33, 0);
    let segs = segment_runs(&s);
    let trials = 10_000;
    let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for seed in 0..trials {
        let order: Vec<u32> = reorder_rs(&segs, seed).unwrap().labels().map(|l| l.raw()).collect();
        *counts.entry(order).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let p = 1.0 / 24.0;
    let expected = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for spot in [vec![100, 200, 300, 400], vec![400, 300, 200, 100], vec![200, 100, 400, 300], vec![300, 400, 100, 200]] {
        let c = counts[&spot] as f64;
        assert!((c - expected).abs() <= 3.0 * sigma, "{spot:?}: {c} vs {expected}");
    }
}

#[test]
fn generation_never_emits_others() {
    let cfg = AaeConfig { window_len: 16, embed_dim: 4, heads: 2, latent_dim: 2, kl_weight: 0.1 };
    let aae = Aae::build(cfg, 3).unwrap();
    let real = synth_worker(&SynthWorkerSpec::desk(4, 6000, 0)).unwrap();
    let segs = segment_runs(&real);
    let lengths = segment_length_distribution(&segs).unwrap();
    let mix = Aae::class_mix_of(&segs);
    let generated = aae.generate_dataset(&lengths, &mix, 5000, &mut Prng::new(8)).unwrap();
    assert_eq!(generated.iter().map(|s| s.len()).sum::<usize>(), 5000);
    assert!(generated.iter().all(|s| s.label().is_generatable()));
}
