use std::sync::Arc;

use proptest::prelude::*;

use evoprompt::config::{self, KeyValues};
use evoprompt::evolution::EvolutionSchedule;
use evoprompt::losses;
use evoprompt::numcore::{batch_covariance, Tape, Tensor};
use evoprompt::snapshot::{self, Section, TAG_TRAINABLE};
use evoprompt::tasks::harmonic_mean;
use evoprompt::trainer::TrainConfig;

fn fgr(v: &Tensor, t: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let a = tape.leaf(v).unwrap();
    let b = tape.leaf(t).unwrap();
    let l = losses::fgr(&mut tape, a, b).unwrap();
    tape.scalar(l)
}

/// Matrices of eighths with a power-of-two row count, so centering is exact.
fn dyadic(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-80i32..=80, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v.into_iter().map(|x| f64::from(x) / 8.0).collect()).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    (1u32..=4, 1usize..=5).prop_flat_map(|(p, d)| {
        let b = 1usize << p;
        (dyadic(b, d), dyadic(b, d), dyadic(1, d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fgr_symmetric_nonnegative_and_shift_free((v, t, c) in pair()) {
        let base = fgr(&v, &t);
        prop_assert!(base >= 0.0);
        prop_assert_eq!(fgr(&t, &v), base);
        let d = v.cols();
        let shifted: Vec<f64> = v.values().iter().enumerate().map(|(i, x)| x + c.values()[i % d]).collect();
        let shifted = Tensor::matrix(v.rows(), d, shifted).unwrap();
        prop_assert_eq!(fgr(&shifted, &t), base);
        prop_assert_eq!(batch_covariance(&shifted).unwrap(), batch_covariance(&v).unwrap());
    }

    #[test]
    fn kcl_within_range(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        c in prop::collection::vec(-3.0f64..3.0, 6),
        d in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        prop_assume!([&a, &b, &c, &d].iter().all(|v| v.chunks(3).all(|row| row.iter().map(|x| x * x).sum::<f64>() > 1e-6)));
        let m = |v: Vec<f64>| Arc::new(Tensor::matrix(2, 3, v).unwrap());
        let (a, b, c, d) = (m(a), m(b), m(c), m(d));
        let mut tape = Tape::new();
        let x = tape.leaf(&a).unwrap();
        let y = tape.leaf(&b).unwrap();
        let k = losses::kcl(&mut tape, x, y, &c, &d).unwrap();
        let k = tape.scalar(k);
        prop_assert!((0.0..=2.0).contains(&k), "{}", k);
    }

    #[test]
    fn harmonic_mean_ordering(a in 0.001f64..1.0, b in 0.001f64..1.0) {
        let hm = harmonic_mean(a, b);
        prop_assert_eq!(hm, harmonic_mean(b, a));
        prop_assert!(hm <= (a * b).sqrt() * (1.0 + 1e-15));
        prop_assert!((a * b).sqrt() <= 0.5 * (a + b) * (1.0 + 1e-15));
    }

    #[test]
    fn rank_never_increases(epochs in 3usize..40, a in 0.0f64..1.0, b in 0.0f64..1.0, r in (1usize..4, 1usize..4, 1usize..4)) {
        let mu = 2 + ((epochs - 3) as f64 * a) as usize;
        let nu = mu + 1 + ((epochs - mu - 1) as f64 * b) as usize;
        let s = EvolutionSchedule { epochs, mu, nu, r_low: r.0, r_mid: r.0 + r.1, r_high: r.0 + r.1 + r.2 };
        s.validate().unwrap();
        for t in 1..epochs {
            prop_assert!(s.rank_at(t + 1).unwrap() <= s.rank_at(t).unwrap());
        }
    }

    #[test]
    fn snapshot_round_trip(shapes in prop::collection::vec((1usize..4, 1usize..5), 0..5), seed in any::<u64>()) {
        let mut x = seed;
        let tensors: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, &(r, c))| {
            let v = (0..r * c).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5 }).collect();
            (format!("t{i}"), Tensor::matrix(r, c, v).unwrap())
        }).collect();
        let sections = vec![Section { tag: TAG_TRAINABLE, tensors }];
        let mut buf = Vec::new();
        snapshot::write_snapshot(&mut buf, &sections).unwrap();
        prop_assert_eq!(snapshot::read_snapshot(&buf[..]).unwrap(), sections);
    }

    #[test]
    fn config_text_round_trip(lr in 0.0f64..1.0, gamma in 0.0f64..100.0, eta in 0.0f64..5.0, seed in any::<u64>()) {
        let mut c = TrainConfig::default();
        c.optim.lr = lr;
        c.loss.gamma = gamma;
        c.loss.eta = eta;
        c.seed = seed;
        let text: String = config::to_key_values(&c).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let back = config::resolve(TrainConfig::tiny(), &KeyValues::parse(&text).unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}
