use backoff_core::analysis::{chernoff_lower_bound, chernoff_upper_bound, TailLaw};
use backoff_core::backoff::{run_backoff, step_backoff, BackoffState, ObserverConfig, StreamDraws};
use backoff_core::blocks::{block_range, block_upper, build_block_table};
use backoff_core::jammed::{step_jammed, step_two_stream, two_stream_draws, JammedState, TwoStreamState};
use backoff_core::sequences::mu_tau_profile;
use backoff_core::unsticking::{
    p_unstick, reverse_bijection, reverse_bijection_inverse, ForwardTrajectory, UnstickSchedule,
};
use backoff_core::{BlockConfig, BlockOverrides, RngStream, SendSequence};
use proptest::prelude::*;

fn sequence() -> impl Strategy<Value = SendSequence> {
    prop_oneof![
        (0.05f64..=1.0).prop_map(|c| SendSequence::constant(c).unwrap()),
        (0.1f64..0.95).prop_map(|r| SendSequence::geometric(r).unwrap()),
        (0.5f64..3.0).prop_map(|a| SendSequence::polynomial(a).unwrap()),
        Just(SendSequence::binary_exponential()),
    ]
}

fn unit_p0(seq: SendSequence) -> SendSequence {
    seq.with_p0(1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backoff_conserves_balls(seq in sequence(), lambda in 0.05f64..0.95, seed in any::<u64>()) {
        let mut st = BackoffState::empty();
        let mut d = StreamDraws::new(RngStream::new(seed));
        for _ in 0..300 {
            let before = st.backlog();
            let ev = step_backoff(&mut st, &seq, lambda, &mut d);
            let escaped = u64::from(ev.escaped_from.is_some());
            prop_assert_eq!(st.backlog(), before + ev.births - escaped);
            prop_assert!(ev.escaped_from.is_none() || ev.total_senders == 1);
            prop_assert_eq!(ev.total_senders, ev.senders.iter().sum::<u64>());
            prop_assert_eq!(st.backlog(), st.births - st.escapes);
        }
    }

    #[test]
    fn backoff_runs_are_reproducible(lambda in 0.05f64..0.95, seed in any::<u64>()) {
        let seq = SendSequence::binary_exponential();
        let a = run_backoff(&seq, lambda, 200, seed, ObserverConfig::default());
        let b = run_backoff(&seq, lambda, 200, seed, ObserverConfig::default());
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn jammed_moves_up_without_escapes(seq in sequence(), lambda in 0.05f64..0.95, seed in any::<u64>()) {
        let seq = unit_p0(seq);
        let root = RngStream::new(seed);
        let mut st = JammedState::init(&seq, lambda, 8, &root.split("init")).unwrap();
        let mut d = StreamDraws::new(root);
        let mut births = 0;
        let mut unsticks = 0;
        for _ in 0..200 {
            let ev = step_jammed(&mut st, &seq, &mut d);
            births += ev.births;
            unsticks += u64::from(ev.unstick_to.is_some());
            prop_assert_eq!(st.stuck.total(), births - unsticks);
            prop_assert_eq!(st.unsticks, unsticks);
            for j in 1..=8 {
                prop_assert_eq!(st.total_at(j).unwrap(), st.stuck_at(j) + st.unstuck_at(j).unwrap());
            }
        }
    }

    #[test]
    fn two_stream_unsticks_at_most_once(seq in sequence(), lambda in 0.05f64..0.95, seed in any::<u64>()) {
        let seq = unit_p0(seq);
        let root = RngStream::new(seed);
        let mut st = TwoStreamState::init(&seq, lambda, 8, &root).unwrap();
        let mut d = two_stream_draws(&root);
        let choice = root.split("choice");
        let mut prev = 0;
        for _ in 0..200 {
            let ev = step_two_stream(&mut st, &seq, &mut d, &choice);
            let now = st.unsticks();
            prop_assert!(now - prev <= 1);
            prop_assert_eq!(now - prev, u64::from(ev.unstick.is_some()));
            prev = now;
        }
    }

    #[test]
    fn mu_tau_monotone_and_bounded(seq in sequence(), tau_max in 1u64..200) {
        let mu = mu_tau_profile(&seq, tau_max);
        prop_assert_eq!(mu[0], 0.0);
        for t in 1..=tau_max as usize {
            prop_assert!(mu[t] + 1e-12 >= mu[t - 1]);
            prop_assert!(mu[t] <= t as f64 + 1e-9);
        }
    }

    #[test]
    fn block_shapes(kappa in 3u64..=12, i in 1u64..=12) {
        let u = block_upper(kappa, i).unwrap();
        prop_assert_eq!(u, kappa.pow(i as u32 - 1));
        let (lo, hi) = block_range(kappa, i).unwrap();
        prop_assert_eq!(hi, u);
        if i >= 2 {
            prop_assert_eq!(hi - lo + 1, u * (kappa - 1) / kappa);
        } else {
            prop_assert_eq!((lo, hi), (1, 1));
        }
    }

    #[test]
    fn tau_telescopes(kappa in 3u64..=8, i0 in 1u64..=3, c in 0.2f64..=1.0) {
        let seq = unit_p0(SendSequence::constant(c).unwrap());
        let cfg = BlockConfig {
            overrides: BlockOverrides { kappa: Some(kappa), i0: Some(i0), tau_init: Some(0), c_init: Some(0), ..Default::default() },
            max_block: 7,
            horizon: 100,
            sum_budget: 10_000_000,
        };
        let t = build_block_table(&seq, 0.5, 0.9, 0.5, &cfg).unwrap();
        for i in 2..t.tau.len() {
            let s: u128 = (1..=i0 + i as u64).map(|k| t.block(k).unwrap().weight_ceil).sum();
            prop_assert_eq!(t.tau[i] - t.tau[i - 1], kappa as u128 * s);
        }
    }

    #[test]
    fn p_unstick_range(t0 in 1u64..20, t in 1u64..60, zeta in 0.0f64..50.0) {
        let seq = SendSequence::binary_exponential();
        let cfg = BlockConfig {
            overrides: BlockOverrides { kappa: Some(3), i0: Some(1), zeta: Some(zeta), tau_init: Some(1), c_init: Some(1), ..Default::default() },
            max_block: 5,
            horizon: 100,
            sum_budget: 1_000_000,
        };
        let table = build_block_table(&seq, 0.5, 0.9, 0.5, &cfg).unwrap();
        let p = p_unstick(&table, t0, t).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        if t <= t0 {
            prop_assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn bijection_round_trips(
        t0 in 1u64..10,
        tau_end in 1u64..12,
        offset in 0u64..12,
        cuts in prop::collection::vec(any::<bool>(), 12),
        flags in prop::collection::vec(any::<bool>(), 12),
        q in 0.01f64..0.99,
    ) {
        let offset = offset % tau_end;
        let t_birth = t0 + 1 + offset;
        let len = tau_end - offset;
        let mut sojourns = vec![1u64];
        for &c in &cuts[..len as usize - 1] {
            if c { sojourns.push(1) } else { *sojourns.last_mut().unwrap() += 1 }
        }
        let b = ForwardTrajectory { t_birth, sojourns, flags: flags[..len as usize].to_vec() };
        let seq = SendSequence::binary_exponential();
        let sched = UnstickSchedule::constant(t0, tau_end, q);
        let r = reverse_bijection(&b, t0, tau_end, 64).unwrap();
        prop_assert_eq!(reverse_bijection_inverse(&r, t0, tau_end, 64).unwrap(), b.clone());
        let (mf, mr) = (b.mean(&seq, 0.5, &sched), r.mean(&seq, 0.5, &sched));
        prop_assert!((mf - mr).abs() <= 1e-12 * mf.max(mr));
        let mut fwd: Vec<u64> = b.send_times().iter().map(|&t| tau_end + t0 + 1 - t).collect();
        fwd.sort_unstable();
        let mut rev = r.send_times();
        rev.sort_unstable();
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn chernoff_dominates_poisson(mu in 0.5f64..100.0, delta in 0.05f64..0.95, x in 1.05f64..12.0) {
        let law = TailLaw::Poisson { mu };
        prop_assert!(law.cdf(((1.0 - delta) * mu).floor() as u64) <= chernoff_lower_bound(mu, delta).unwrap());
        prop_assert!(law.sf_from((x * mu).ceil() as u64) <= chernoff_upper_bound(mu, x).unwrap());
    }
}
