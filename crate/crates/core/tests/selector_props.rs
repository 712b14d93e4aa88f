use olapguard_core::selector::{
    softmax_probabilities, Scorer, SelectionPolicy, Selector, SelectorParams, ServerStats, TauRule,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[derive(Debug, Clone)]
enum Event {
    Dispatch(usize),
    Respond(usize, f64),
    Fail(usize),
}

fn events(n: usize) -> impl Strategy<Value = Vec<Event>> {
    let ev = prop_oneof![
        (0..n).prop_map(Event::Dispatch),
        (0..n, 0.01f64..50.0).prop_map(|(k, ms)| Event::Respond(k, ms)),
        (0..n).prop_map(Event::Fail),
    ];
    proptest::collection::vec(ev, 0..60)
}

fn policies() -> impl Strategy<Value = SelectionPolicy> {
    let scorer = prop_oneof![
        Just(Scorer::RoundRobin),
        Just(Scorer::Inflight),
        Just(Scorer::LatencyEma),
        Just(Scorer::Hybrid),
    ];
    let rule = prop_oneof![
        Just(TauRule::MaxScore),
        (0.5f64..8.0).prop_map(|sharpness| TauRule::MinScore { sharpness }),
    ];
    (scorer, rule, any::<bool>()).prop_map(|(s, r, soft)| {
        if soft {
            SelectionPolicy::softmax(s, r)
        } else {
            SelectionPolicy::argmin(s)
        }
    })
}

fn replay(n: usize, evs: &[Event]) -> Selector<usize> {
    let mut sel = Selector::new(SelectorParams::default());
    for k in 0..n {
        sel.register_server(k, 1.0);
    }
    for e in evs {
        match *e {
            Event::Dispatch(k) => sel.on_dispatch(&k),
            Event::Respond(k, ms) => {
                sel.on_response(&k, ms);
            }
            Event::Fail(k) => sel.on_failure(&k),
        }
    }
    sel
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn picks_an_eligible_server_scoring_at_most_the_set(
        n in 1usize..12,
        evs in events(12),
        mask in proptest::collection::vec(any::<bool>(), 12),
        policy in policies(),
        seed in any::<u64>(),
    ) {
        let evs: Vec<Event> = evs.into_iter().filter(|e| match e {
            Event::Dispatch(k) | Event::Respond(k, _) | Event::Fail(k) => *k < n,
        }).collect();
        let mut sel = replay(n, &evs);
        let servers: Vec<usize> = (0..n).collect();
        let eligible = |k: &usize| mask[*k];
        let mut rng = StdRng::seed_from_u64(seed);
        match sel.select(0, &servers, eligible, &policy, &mut rng) {
            Ok(c) => {
                prop_assert!(mask[c.index]);
                prop_assert!(c.evaluated >= 1 && c.evaluated <= n);
                if policy.scorer != Scorer::RoundRobin && policy.mode == olapguard_core::selector::Mode::Argmin {
                    let best = (0..n).filter(|k| mask[*k]).map(|k| sel.score(&k, policy.scorer)).fold(f64::INFINITY, f64::min);
                    prop_assert_eq!(sel.score(&c.index, policy.scorer), best);
                }
            }
            Err(_) => prop_assert!(!mask[..n].iter().any(|&m| m)),
        }
    }

    #[test]
    fn inflight_counts_outstanding_dispatches(evs in events(1)) {
        let sel = replay(1, &evs);
        let mut outstanding = 0u32;
        let mut unmatched = 0u64;
        for e in &evs {
            match e {
                Event::Dispatch(_) => outstanding += 1,
                Event::Respond(..) if outstanding == 0 => unmatched += 1,
                Event::Respond(..) | Event::Fail(_) => outstanding = outstanding.saturating_sub(1),
            }
        }
        prop_assert_eq!(sel.stats(&0).unwrap().inflight, outstanding);
        prop_assert_eq!(sel.unmatched_responses(), unmatched);
    }

    #[test]
    fn hybrid_score_grows_with_load_and_latency(
        inflight in 0u32..50, q in 0.0f64..50.0, l in 0.01f64..100.0, exp in 0.0f64..5.0,
    ) {
        let s = ServerStats { inflight, latency_ema: l, queue_ema: q };
        let more = ServerStats { inflight: inflight + 1, ..s };
        let slower = ServerStats { latency_ema: l * 1.5, ..s };
        prop_assert!(more.score(Scorer::Hybrid, exp) >= s.score(Scorer::Hybrid, exp));
        prop_assert!(slower.score(Scorer::Hybrid, exp) > s.score(Scorer::Hybrid, exp));
        let expected = (f64::from(inflight) + q + 1.0).powf(exp) * l;
        prop_assert!((s.score(Scorer::Hybrid, exp) - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn softmax_is_a_distribution_favouring_low_scores(
        scores in proptest::collection::vec(0.0f64..1e4, 1..20),
        sharpness in 0.5f64..8.0,
        scale in 0.01f64..100.0,
    ) {
        for rule in [TauRule::MaxScore, TauRule::MinScore { sharpness }] {
            let p = softmax_probabilities(&scores, rule);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..scores.len() {
                prop_assert!(p[i] >= 0.0);
                for j in 0..scores.len() {
                    if scores[i] < scores[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }
        // ratio-based temperature: rescaling every score changes nothing
        if scores.iter().all(|&s| s > 1e-3) {
            let rule = TauRule::MinScore { sharpness };
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            let (a, b) = (softmax_probabilities(&scores, rule), softmax_probabilities(&scaled, rule));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn round_robin_visits_every_server_once_per_cycle(n in 1usize..16, start in 0usize..40) {
        let mut sel: Selector<usize> = Selector::new(SelectorParams::default());
        let servers: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(0);
        for _ in 0..start {
            sel.select(3, &servers, |_| true, &SelectionPolicy::ROUND_ROBIN, &mut rng).unwrap();
        }
        let mut seen: Vec<usize> = (0..n)
            .map(|_| sel.select(3, &servers, |_| true, &SelectionPolicy::ROUND_ROBIN, &mut rng).unwrap().index)
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, servers);
    }
}
