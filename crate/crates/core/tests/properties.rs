use gmethods_core::gformula::{sample_chain, SequentialModel};
use gmethods_core::ipw::{effective_sample_size, weighted_summary, IeModel};
use gmethods_core::report::{read_summary_csv, rounded, write_summary_csv};
use gmethods_core::trial::{pointers, realized_doses, IeScope, ARMS};
use gmethods_core::{MethodId, Status, SummaryRow};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn values_and_weights() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-1e3f64..1e3, 0.01f64..50.0), 1..40).prop_map(|v| v.into_iter().unzip())
}

/// Gaussian random walk; each period adds a standard normal step.
struct Walk(usize);

impl SequentialModel for Walk {
    fn periods(&self) -> usize {
        self.0
    }

    fn draw<R: Rng + ?Sized>(&self, _t: usize, history: &[f64], rng: &mut R) -> f64 {
        history.last().copied().unwrap_or(0.0) + rng.sample::<f64, _>(StandardNormal)
    }
}

fn summary_row() -> impl Strategy<Value = SummaryRow> {
    (
        "[a-z]{1,10}",
        1u8..=5,
        0usize..6,
        0usize..100_000,
        (0.0f64..500.0, 0.0f64..200.0, 0.0f64..2.0, 0.0f64..2.0),
        0usize..5,
    )
        .prop_map(|(scenario, arm, m, n, (mean, sd, rel_mean, rel_sd), st)| SummaryRow {
            scenario,
            arm,
            method: MethodId::ALL[m],
            n,
            mean,
            sd,
            rel_mean,
            rel_sd,
            status: Status::ALL[st],
        })
}

proptest! {
    #[test]
    fn weighted_summary_ignores_weight_scale((x, w) in values_and_weights(), c in 1e-3f64..1e3) {
        let (m1, s1) = weighted_summary(&x, &w).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let (m2, s2) = weighted_summary(&x, &scaled).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-9 * (1.0 + m1.abs()));
        prop_assert!((s1 - s2).abs() <= 1e-9 * (1.0 + s1));
    }

    #[test]
    fn weighted_mean_within_range((x, w) in values_and_weights()) {
        let (m, s) = weighted_summary(&x, &w).unwrap();
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        prop_assert!(s <= (hi - lo) + 1e-9);
    }

    #[test]
    fn effective_sample_size_bounds((_, w) in values_and_weights()) {
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= w.len() as f64 + 1e-9);
    }

    #[test]
    fn adherence_falls_with_exposure(beta in 0.0f64..10.0, e in 0.1f64..500.0, de in 0.0f64..500.0, week in 0usize..3) {
        let m = IeModel::new(beta, [15.0, 40.0, 100.0], IeScope::Always).unwrap();
        let p = m.adherence_probability(week, e);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(m.adherence_probability(week, e + de) <= p + 1e-12);
    }

    #[test]
    fn doses_follow_the_pointer(arm in 0usize..5, ie in any::<[bool; 3]>()) {
        let ladder = ARMS[arm].ladder;
        let doses = realized_doses(&ladder, &ie);
        let p = pointers(&ie);
        prop_assert_eq!(doses[0], ladder[0]);
        for w in 0..3 {
            prop_assert!(doses[w + 1] >= doses[w]);
            prop_assert_eq!(doses[w + 1], ladder[(p[w] + usize::from(!ie[w])).min(3)]);
        }
        if ie == [false; 3] {
            prop_assert_eq!(doses, ladder);
        }
    }

    #[test]
    fn summary_csv_round_trip(rows in prop::collection::vec(summary_row(), 1..12)) {
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        let back = read_summary_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, rounded(&rows));
    }

    #[test]
    fn chain_draws_are_prefix_stable(n in 1usize..60, extra in 0usize..60, seed in any::<u64>(), arm in 1u8..=5) {
        let model = Walk(3);
        let short = sample_chain(&model, 3, arm, n, seed).unwrap();
        let long = sample_chain(&model, 3, arm, n + extra, seed).unwrap();
        prop_assert_eq!(&long[..n], &short[..]);
    }
}
