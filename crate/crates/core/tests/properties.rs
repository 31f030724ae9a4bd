use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mitr::autodiff::{Tape, Tensor};
use mitr::data::{
    read_narratives, read_region_features, synth_dataset, synth_oracle_trace, write_narratives,
    write_region_features, SynthSpec,
};
use mitr::lbm::lbm_score;
use mitr::metrics::{bleu_n, cider, rouge_l};
use mitr::model::{mitr_forward, CaptionTokens, ModelConfig, ModelParams, TaskMode, FIRST_WORD_ID};
use mitr::trace::{encode_trace, AlignedTrace, TraceBox, TracePoint, WordTiming};
use mitr::training::random_box_replacement;

fn trace_from(seed: u64, n: usize) -> AlignedTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            let (c, d): (f64, f64) = (rng.gen(), rng.gen());
            TraceBox::from_corners(a.min(b), c.min(d), a.max(b), c.max(d))
        })
        .collect()
}

fn words(seed: u64, n: usize, vocab: u8) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ((b'a' + rng.gen_range(0..vocab)) as char).to_string())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lbm_is_symmetric_and_nonnegative(s1 in any::<u64>(), s2 in any::<u64>(), q in 1usize..9, m in 1usize..9, k in 0usize..3) {
        let a = trace_from(s1, q);
        let b = trace_from(s2, m);
        let ab = lbm_score(&a, &b, k).unwrap();
        let ba = lbm_score(&b, &a, k).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(lbm_score(&a, &a, k).unwrap(), 0.0);
    }

    #[test]
    fn lbm_shrinks_as_the_window_grows(s1 in any::<u64>(), s2 in any::<u64>(), q in 1usize..9, m in 1usize..9) {
        let a = trace_from(s1, q);
        let b = trace_from(s2, m);
        for k in 0..4 {
            prop_assert!(lbm_score(&a, &b, k + 1).unwrap() <= lbm_score(&a, &b, k).unwrap() + 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rows(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..rows {
            mask[r * cols + rng.gen_range(0..cols)] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, data).unwrap());
        let y = tape.masked_softmax(x, Some(&mask)).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row(r);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_replays_bit_identically(seed in 0u64..1000, n in 1usize..6) {
        let p = ModelParams::init(ModelConfig::desk(10, 4), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen()).collect()).unwrap();
        let cap = CaptionTokens((0..n).map(|_| rng.gen_range(FIRST_WORD_ID..10)).collect());
        let tr = trace_from(seed, n);
        let run = || {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let out = mitr_forward(&mut tape, &b, TaskMode::Joint, &x, &cap, &tr).unwrap();
            (tape.value(out.logits.unwrap()).clone(), tape.value(out.boxes.unwrap()).clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn metrics_stay_in_range(s1 in any::<u64>(), s2 in any::<u64>(), n in 0usize..10, m in 1usize..10, order in 1usize..=4) {
        let c = words(s1, n, 6);
        let r1 = words(s2, m, 6);
        let r2 = words(s2 ^ 1, m + 1, 6);
        let refs = vec![r1.clone(), r2.clone()];
        let b = bleu_n(&c, &refs, order);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert_eq!(b, bleu_n(&c, &[r2, r1], order));
        let r = rouge_l(&c, &refs);
        prop_assert!((0.0..=1.0).contains(&r));
        let other = vec![words(s1 ^ 7, 4, 6)];
        for s in cider(&[c.clone(), other[0].clone()], &[refs, other.clone()]) {
            prop_assert!((0.0..=10.0 + 1e-9).contains(&s));
        }
    }

    #[test]
    fn replacement_keeps_length_and_only_inserts_sentinels(seed in any::<u64>(), n in 0usize..20, p in 0.0f64..=1.0) {
        let t = trace_from(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_box_replacement(t.boxes(), p, &mut rng);
        prop_assert_eq!(out.len(), n);
        for (a, b) in out.iter().zip(t.boxes()) {
            prop_assert!(a == b || *a == TraceBox::WHOLE_IMAGE);
        }
        prop_assert_eq!(random_box_replacement(t.boxes(), 0.0, &mut rng), t.boxes().to_vec());
    }

    #[test]
    fn encoded_boxes_are_valid(seed in any::<u64>(), words in 1usize..8, points in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts: Vec<f64> = (0..points).map(|_| rng.gen_range(0.0..4.0)).collect();
        ts.sort_by(f64::total_cmp);
        let pts: Vec<TracePoint> = ts.iter().map(|&t| TracePoint::new(rng.gen(), rng.gen(), t)).collect();
        let timings: Vec<WordTiming> = (0..words)
            .map(|i| WordTiming::new(format!("w{i}"), i as f64 * 0.5, (i + 1) as f64 * 0.5))
            .collect();
        let enc = encode_trace(&pts, &timings).unwrap();
        prop_assert_eq!(enc.len(), words);
        for b in enc.iter() {
            prop_assert!(b.validate().is_ok());
        }
    }

    #[test]
    fn synthetic_files_round_trip(seed in any::<u64>(), images in 1usize..12) {
        let d = synth_dataset(&SynthSpec { images, seed, ..SynthSpec::default() }).unwrap();
        let mut buf = Vec::new();
        write_narratives(&mut buf, &d.records).unwrap();
        prop_assert_eq!(&read_narratives(buf.as_slice()).unwrap(), &d.records);
        let mut bin = Vec::new();
        write_region_features(&mut bin, &d.features).unwrap();
        let back = read_region_features(bin.as_slice()).unwrap();
        let mut bin2 = Vec::new();
        write_region_features(&mut bin2, &back).unwrap();
        prop_assert_eq!(bin, bin2);
    }

    #[test]
    fn synthetic_oracle_scores_zero(seed in any::<u64>(), k in 2usize..8) {
        let spec = SynthSpec { k, images: 6, seed, d_visual: k + 7, max_objects: k.min(3), ..SynthSpec::default() };
        let d = synth_dataset(&spec).unwrap();
        for r in &d.records {
            let oracle = synth_oracle_trace(r, &d.features.images[&r.features_key], k);
            let gt = r.encode().unwrap();
            prop_assert!(lbm_score(&gt, &oracle, 0).unwrap() <= 0.01);
        }
    }
}
