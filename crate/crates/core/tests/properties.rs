use diffcap::decoding::{aggregate_views, mbr_select, neg_bleu_loss, Pooling};
use diffcap::metrics::{bleu, rouge_l};
use diffcap::rng::rng_from_seed;
use diffcap::schedule::{NoiseSchedule, ScheduleKind};
use diffcap::synthdata::{generate_corpus, CaptionGrammar, ViewSpec};
use ndarray::Array2;
use proptest::prelude::*;

fn latents(max_views: usize) -> impl Strategy<Value = Vec<Array2<f64>>> {
    (1..=max_views, 1usize..5, 1usize..4).prop_flat_map(|(v, rows, cols)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, rows * cols), v)
            .prop_map(move |vs| vs.into_iter().map(|x| Array2::from_shape_vec((rows, cols), x).unwrap()).collect())
    })
}

fn seq() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(3u32..8, 1..10)
}

proptest! {
    #[test]
    fn max_dominates_mean_and_both_ignore_order(ls in latents(6)) {
        let mut rng = rng_from_seed(0);
        let max = aggregate_views(&ls, Pooling::Max, &mut rng).unwrap();
        let mean = aggregate_views(&ls, Pooling::Mean, &mut rng).unwrap();
        prop_assert!(max.iter().zip(mean.iter()).all(|(a, b)| a + 1e-12 >= *b));
        let mut rev = ls.clone();
        rev.reverse();
        prop_assert_eq!(aggregate_views(&rev, Pooling::Max, &mut rng).unwrap(), max);
        let mean_rev = aggregate_views(&rev, Pooling::Mean, &mut rng).unwrap();
        prop_assert!(mean_rev.iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn stochastic_pooling_picks_an_input_value(ls in latents(6), seed in any::<u64>()) {
        let pooled = aggregate_views(&ls, Pooling::Stochastic, &mut rng_from_seed(seed)).unwrap();
        for (idx, v) in pooled.indexed_iter() {
            prop_assert!(ls.iter().any(|l| l[idx] == *v));
        }
    }

    #[test]
    fn identical_views_pool_to_themselves(l in latents(1), copies in 1usize..5) {
        let ls = vec![l[0].clone(); copies];
        let mut rng = rng_from_seed(1);
        prop_assert_eq!(&aggregate_views(&ls, Pooling::Max, &mut rng).unwrap(), &l[0]);
        prop_assert_eq!(&aggregate_views(&ls, Pooling::Stochastic, &mut rng).unwrap(), &l[0]);
        let mean = aggregate_views(&ls, Pooling::Mean, &mut rng).unwrap();
        prop_assert!(mean.iter().zip(l[0].iter()).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0)));
    }

    #[test]
    fn metric_bounds(c in seq(), r in seq()) {
        for n in 1..=4 {
            let b = bleu(&c, &[&r], n, true).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
        let rl = rouge_l(&c, &[&r]).unwrap();
        prop_assert!((0.0..=1.0).contains(&rl));
        prop_assert!((bleu(&c, &[&c], 4, false).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((rouge_l(&c, &[&c]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mbr_loss_is_negative_smoothed_bleu(a in seq(), b in seq()) {
        prop_assert_eq!(neg_bleu_loss(&a, &b).to_bits(), (-bleu(&a, &[&b], 4, true).unwrap()).to_bits());
    }

    #[test]
    fn self_term_never_changes_the_choice(items in prop::collection::vec(seq(), 1..6)) {
        let (with_self, _) = mbr_select(&items, |a, b| neg_bleu_loss(a, b)).unwrap();
        // Excluding the self comparison removes the same constant from every risk.
        let (without, _) = mbr_select(&items, |a, b| if std::ptr::eq(a, b) { -1.0 } else { neg_bleu_loss(a, b) }).unwrap();
        prop_assert_eq!(with_self, without);
    }

    #[test]
    fn respacing_keeps_alpha_bars(steps in 2usize..400, frac in 0.05f64..1.0) {
        let k = ((steps as f64 * frac).round() as usize).clamp(1, steps);
        for kind in [ScheduleKind::Sqrt, ScheduleKind::Linear, ScheduleKind::Cosine] {
            let full = NoiseSchedule::build(kind, steps).unwrap();
            let short = full.respace(k).unwrap();
            let map = short.timestep_map().unwrap();
            prop_assert_eq!(map[short.steps()], steps);
            for t in 1..=short.steps() {
                prop_assert!(map[t] > map[t - 1]);
                prop_assert_eq!(short.alpha_bar(t), full.alpha_bar(map[t]));
            }
        }
    }

    #[test]
    fn captions_survive_encoding(seed in any::<u64>()) {
        let grammar = CaptionGrammar::default();
        let vocab = grammar.vocabulary();
        let ds = generate_corpus(3, &ViewSpec::standard(3).unwrap(), &grammar, seed).unwrap();
        for r in &ds.records {
            for c in &r.captions {
                let words: Vec<&str> = c.split_whitespace().collect();
                let ids = vocab.encode(&words, 16).unwrap();
                prop_assert_eq!(vocab.decode(&ids).join(" "), c.clone());
            }
        }
    }
}
