use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tada::autograd::{masked_softmax, GateMode, Graph};
use tada::data::events::{parse_events, serialize_series};
use tada::data::series::{
    build_value_mask, normalize_times, IrregularSeries, Label, Observation, TimeStep,
};
use tada::data::split::split_dataset;
use tada::dla::window_weights;
use tada::mixer::{MixerConfig, MixerParams};
use tada::params::{random_tensor, ParamStore};

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
    ]
}

fn step(d: usize) -> impl Strategy<Value = Vec<Observation>> {
    prop::collection::btree_set(0..d, 1..=d).prop_flat_map(|features| {
        let n = features.len();
        prop::collection::vec(value(), n).prop_map(move |values| {
            features
                .iter()
                .zip(values)
                .map(|(&feature, value)| Observation { feature, value })
                .collect()
        })
    })
}

fn series(d: usize, max_steps: usize, n_classes: usize) -> impl Strategy<Value = IrregularSeries> {
    (1..=max_steps)
        .prop_flat_map(move |t| {
            (
                -100.0..100.0f64,
                prop::collection::vec(1e-4..10.0f64, t),
                prop::collection::vec(step(d), t),
                prop::collection::vec(0..n_classes, t),
                any::<bool>(),
            )
        })
        .prop_map(|(start, gaps, obs, labels, per_step)| {
            let mut time = start;
            let steps = gaps
                .iter()
                .zip(obs)
                .map(|(gap, observations)| {
                    time += gap;
                    TimeStep { time, observations }
                })
                .collect();
            let label = if per_step {
                Label::Step(labels)
            } else {
                Label::Sequence(labels[0])
            };
            IrregularSeries {
                id: format!("s{start}"),
                steps,
                label,
            }
        })
}

proptest! {
    #[test]
    fn parse_inverts_serialize(s in (1usize..6).prop_flat_map(|d| (Just(d), series(d, 8, 3)))) {
        let (d, s) = s;
        let line = serialize_series(&s);
        let parsed = parse_events(&line, 1, d).unwrap();
        prop_assert_eq!(parsed.duplicates, 0);
        prop_assert_eq!(parsed.series, s);
    }

    #[test]
    fn normalized_times_span_unit_interval(s in series(3, 10, 2)) {
        let n = normalize_times(&s);
        let times = n.times();
        prop_assert_eq!(times.len(), s.len());
        prop_assert_eq!(times[0], 0.0);
        if times.len() > 1 {
            prop_assert_eq!(*times.last().unwrap(), 1.0);
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn mask_counts_observations(s in series(4, 10, 2)) {
        let vm = build_value_mask(&s, 4);
        prop_assert_eq!(vm.mask.iter().filter(|&&m| m).count(), s.num_observations());
        for (k, step) in s.steps.iter().enumerate() {
            for o in &step.observations {
                prop_assert_eq!(vm.value(k, o.feature), o.value);
            }
        }
    }

    #[test]
    fn split_partitions(
        labels in prop::collection::vec(0usize..3, 1..60),
        seed in any::<u64>(),
        stratify in any::<bool>(),
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let ratios = [lo, hi - lo, 1.0 - hi];
        let data: Vec<IrregularSeries> = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| IrregularSeries {
                id: format!("s{i}"),
                steps: vec![TimeStep { time: 0.0, observations: vec![Observation { feature: 0, value: 0.0 }] }],
                label: Label::Sequence(c),
            })
            .collect();
        let Ok((tr, va, te)) = split_dataset(&data, ratios, seed, stratify) else {
            prop_assume!(false);
            unreachable!()
        };
        let mut ids: Vec<String> = tr.iter().chain(&va).chain(&te).map(|s| s.id.clone()).collect();
        prop_assert_eq!(ids.len(), data.len());
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), data.len());
    }

    #[test]
    fn masked_softmax_sums(
        rows in (1usize..12).prop_flat_map(|n| (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(any::<bool>(), n),
        ))
    ) {
        let (scores, mask) = rows;
        let w = masked_softmax(&scores, &mask).unwrap();
        let total: f64 = w.iter().sum();
        if mask.iter().any(|&m| m) {
            prop_assert!((total - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(total, 0.0);
        }
        for (wi, &m) in w.iter().zip(&mask) {
            prop_assert!(m || *wi == 0.0);
            prop_assert!(*wi >= 0.0);
        }
    }

    #[test]
    fn larger_radius_keeps_support(
        times in prop::collection::vec(0.0..1.0f64, 1..20),
        anchor in 0.0..1.0f64,
        r1 in 0.0..0.5f64,
        dr in 0.0..0.5f64,
    ) {
        let hard = GateMode::Hard;
        let small = window_weights(anchor, &times, r1, 1.0, hard);
        let large = window_weights(anchor, &times, r1 + dr, 1.0, hard);
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(*s == 0.0 || *l == 1.0);
        }
        let soft = GateMode::Soft { tau: 0.05 };
        let s_small = window_weights(anchor, &times, r1, 1.0, soft);
        let s_large = window_weights(anchor, &times, r1 + dr, 1.0, soft);
        for (s, l) in s_small.iter().zip(&s_large) {
            prop_assert!((0.0..=1.0).contains(s));
            prop_assert!(s <= l);
        }
    }

    #[test]
    fn mixer_tokens_shrink_by_m(p_exp in 0u32..3, m_exp in 0u32..2, layers in 1usize..4, k in 1usize..3, seed in any::<u64>()) {
        let p = 1usize << p_exp;
        let m = (1usize << m_exp).min(p);
        let l = k * p * m.pow(layers as u32 - 1);
        let cfg = MixerConfig { p, m, n_layers: layers, ..MixerConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixer = MixerParams::init(&mut store, &mut rng, l, 3, &cfg).unwrap();
        let grid = random_tensor(&mut rng, &[l, 3], -1.0, 1.0);
        let mut g = Graph::new(&store);
        let x = g.constant(grid);
        let outs = mixer.forward(&mut g, x).unwrap();
        prop_assert_eq!(outs.len(), layers);
        for (i, o) in outs.iter().enumerate() {
            let shape = g.value(*o).shape().to_vec();
            prop_assert_eq!(shape[1], p);
            prop_assert_eq!(shape[0] * shape[1], l / m.pow(i as u32));
        }
    }
}
