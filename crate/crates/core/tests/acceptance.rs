//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! terminal. The process fails if any criterion outside `KNOWN_RED` fails.

use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evoprompt::encoder::Modality;
use evoprompt::evolution::EvolutionSchedule;
use evoprompt::losses;
use evoprompt::mpp::{self, Architecture, MppConfig, PromptProjector};
use evoprompt::numcore::{ParamStore, Tape, Tensor};
use evoprompt::tasks::harmonic_mean;
use evoprompt::trainer::{self, Ablation, TrainConfig, Trainer};

/// Criteria that cannot hold as written, with the reason.
const KNOWN_RED: &[(u32, &str)] = &[(
    3,
    "the threshold r < min(d_r, d_m)(L-J)/(L-J+1) matches r*max(d_r, d_m) scalars per layer, \
     but factors A and B hold r*(d_r + d_m) plus one magnitude, so ranks near it exceed the baseline",
)];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn c1_gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut cfg = TrainConfig::tiny();
    cfg.gradcheck_each_epoch = true;
    let (enc, task) = cfg.setup().unwrap();
    let report = match trainer::train(&cfg, &enc, &task) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let secs = started.elapsed().as_secs_f64();
    let worst = report.gradchecks.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let params = report.gradchecks.iter().map(|g| g.parameters).max().unwrap_or(0);
    outcome(
        report.gradchecks.len() == cfg.evolution.epochs && worst <= 1e-4 && params <= 10_000 && secs < 60.0,
        format!("{} epochs, up to {params} params, max rel error {worst:.2e}, {secs:.1}s", report.gradchecks.len()),
    )
}

fn c2_direction_immutability() -> Outcome {
    let cfg = TrainConfig::default();
    let (enc, task) = cfg.setup().unwrap();
    let mut t = Trainer::new(cfg.clone(), &enc, &task).unwrap();
    let report = t.run().unwrap();
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut checksums_ok = true;
    for st in t.projector().evolving_adapters() {
        for d in st.history() {
            let norm = evoprompt::numcore::frobenius_norm(&d.direction).unwrap();
            worst = worst.max((norm - 1.0).abs());
            checksums_ok &= d.direction.checksum() == d.checksum;
            count += 1;
        }
    }
    let recorded_ok = report.checkpoint.directions.len() == count;
    let expected = 2 * cfg.mpp.span() * (cfg.evolution.epochs - 1);
    outcome(
        count == expected && worst <= 1e-9 && checksums_ok && recorded_ok,
        format!(
            "{count} frozen directions after {} epochs, max |norm-1| {worst:.1e}, checksums unchanged: {checksums_ok}",
            report.epochs.len()
        ),
    )
}

fn modality_count(store: &ParamStore, m: Modality) -> usize {
    store.iter().filter(|(_, name, _)| name.split('.').any(|p| p == m.tag())).map(|(_, _, t)| t.len()).sum()
}

fn c3_parameter_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = 0;
    let mut configs = 0;
    let mut qualifying = 0;
    let mut violations = Vec::new();
    for _ in 0..6 {
        let layers = rng.random_range(2..=8);
        let k = rng.random_range(1..=6);
        let cfg = MppConfig {
            first_layer: rng.random_range(1..layers),
            last_layer: layers,
            prompt_len: k,
            num_vectors: k,
            shared_dim: [4, 8, 16][rng.random_range(0..3)],
            sigma: 0.02,
            weight_std: 0.25,
            vision_width: [8, 12, 16, 32][rng.random_range(0..4)],
            text_width: [8, 12, 16, 32][rng.random_range(0..4)],
        };
        let arch = loop {
            let a = Architecture {
                no_mpp: rng.random_bool(0.2),
                no_shared: rng.random_bool(0.2),
                full_rank: rng.random_bool(0.2),
                no_evolution: rng.random_bool(0.2),
            };
            if a.validate().is_ok() {
                break a;
            }
        };
        let epochs = rng.random_range(1..=5);
        let mut ranks: Vec<usize> = (0..epochs).map(|_| rng.random_range(1..=4)).collect();
        ranks.sort_unstable_by(|a, b| b.cmp(a));
        let mut store = ParamStore::new();
        let mut p = PromptProjector::new(cfg.clone(), arch, &mut store, ranks[0], 1e-8, &mut rng).unwrap();
        for &r in &ranks[1..] {
            p.transition(&mut store, r, &mut rng).unwrap();
        }
        configs += 1;
        if store.scalar_count() == mpp::param_count(&cfg, &arch, &ranks).total {
            exact += 1;
        }

        // complexity clause, full architecture, one epoch at rank r
        let span = cfg.span();
        for m in Modality::BOTH {
            let dm = cfg.width(m);
            let bound = cfg.shared_dim.min(dm) as f64 * (span - 1) as f64 / span as f64;
            for r in (1..).take_while(|&r| (r as f64) < bound) {
                let mut store = ParamStore::new();
                PromptProjector::new(cfg.clone(), Architecture::default(), &mut store, r, 1e-8, &mut rng).unwrap();
                qualifying += 1;
                let n = modality_count(&store, m);
                let baseline = mpp::full_weight_baseline(&cfg, m);
                if n >= baseline {
                    violations.push(format!("d_r={} d_m={dm} span={span} r={r}: {n} >= {baseline}", cfg.shared_dim));
                }
            }
        }
    }
    let detail = format!(
        "closed form exact on {exact}/{configs} randomized configs; complexity claim holds for {}/{qualifying} qualifying ranks{}",
        qualifying - violations.len(),
        violations.first().map_or(String::new(), |v| format!(" (counterexample {v})"))
    );
    outcome(exact == configs && configs >= 3 && violations.is_empty(), detail)
}

/// Half the trace of the product of the two batch covariances, by explicit sums.
fn brute_force_fgr(v: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let b = v.len();
    let cov = |f: &[Vec<f64>]| {
        let d = f[0].len();
        let mean: Vec<f64> = (0..d).map(|j| f.iter().map(|r| r[j]).sum::<f64>() / b as f64).collect();
        let mut c = vec![vec![0.0; d]; d];
        for row in f {
            for i in 0..d {
                for j in 0..d {
                    c[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (b as f64 - 1.0);
                }
            }
        }
        c
    };
    let (cv, ct) = (cov(v), cov(t));
    let d = cv.len();
    let mut tr = 0.0;
    for i in 0..d {
        for j in 0..d {
            tr += cv[i][j] * ct[j][i];
        }
    }
    0.5 * tr
}

fn fgr_value(v: &Tensor, t: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let a = tape.leaf(v).unwrap();
    let b = tape.leaf(t).unwrap();
    let l = losses::fgr(&mut tape, a, b).unwrap();
    tape.scalar(l)
}

fn c4_loss_oracles() -> Outcome {
    let v = vec![vec![1.0], vec![-1.0]];
    let t = vec![vec![2.0], vec![-2.0]];
    let brute = brute_force_fgr(&v, &t);
    let fgr = fgr_value(&Tensor::from_rows(&v).unwrap(), &Tensor::from_rows(&t).unwrap());
    let fgr_ok = (fgr - 8.0).abs() <= 1e-12 && (fgr - brute).abs() <= 1e-12;

    let c = 7;
    let mut tape = Tape::new();
    let f = tape.leaf(&Tensor::from_rows(&[vec![0.3, -1.2, 0.5]]).unwrap()).unwrap();
    let same = Tensor::from_rows(&vec![vec![1.0, 2.0, -0.5]; c]).unwrap();
    let cf = tape.leaf(&same).unwrap();
    let l = losses::info_nce(&mut tape, f, cf, &[4], 0.01).unwrap();
    let nce = tape.scalar(l);
    let nce_ok = (nce - (c as f64).ln()).abs() <= 1e-12;

    let e1 = Arc::new(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let e2 = Arc::new(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    let e3 = Arc::new(Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap());
    let kcl = |img: &Arc<Tensor>, txt: &Arc<Tensor>, fi: &Arc<Tensor>, ft: &Arc<Tensor>| {
        let mut tape = Tape::new();
        let a = tape.leaf(img).unwrap();
        let b = tape.leaf(txt).unwrap();
        let k = losses::kcl(&mut tape, a, b, fi, ft).unwrap();
        tape.scalar(k)
    };
    let k = [kcl(&e1, &e1, &e1, &e1), kcl(&e1, &e3, &e2, &e3), kcl(&e1, &e1, &e2, &e2)];
    let kcl_ok = k == [0.0, 0.5, 1.0];
    outcome(
        fgr_ok && nce_ok && kcl_ok,
        format!("fgr {fgr} (brute force {brute}), info_nce {nce:.15} vs ln {c}, kcl {k:?}"),
    )
}

fn c5_fgr_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut nonneg, mut trans, mut scale, mut sym) = (0, 0, 0, 0);
    let mut worst_scale = 0.0f64;
    for _ in 0..100 {
        // entries and shifts are multiples of 1/8 and B is a power of two, so
        // batch means and centering are exact in binary floating point
        let b = 1 << rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let dyadic = |rng: &mut ChaCha8Rng, rows: usize| {
            let v: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-64..=64) as f64 / 8.0).collect();
            Tensor::matrix(rows, d, v).unwrap()
        };
        let fv = dyadic(&mut rng, b);
        let ft = dyadic(&mut rng, b);
        let shift = dyadic(&mut rng, 1);
        let shifted: Vec<f64> = fv.values().iter().enumerate().map(|(i, x)| x + shift.values()[i % d]).collect();
        let shifted = Tensor::matrix(b, d, shifted).unwrap();
        let base = fgr_value(&fv, &ft);
        if base >= 0.0 {
            nonneg += 1;
        }
        if fgr_value(&shifted, &ft) == base {
            trans += 1;
        }
        if fgr_value(&ft, &fv) == base {
            sym += 1;
        }
        let c: f64 = rng.random_range(-3.0..3.0);
        let scaled = Tensor::matrix(b, d, fv.values().iter().map(|x| c * x).collect()).unwrap();
        let rel = (fgr_value(&scaled, &ft) - c * c * base).abs() / (c * c * base).abs().max(f64::MIN_POSITIVE);
        let rel = if base == 0.0 { 0.0 } else { rel };
        worst_scale = worst_scale.max(rel);
        if rel <= 1e-12 {
            scale += 1;
        }
    }
    outcome(
        nonneg == 100 && trans == 100 && scale == 100 && sym == 100,
        format!(
            "nonnegative {nonneg}/100, translation exact {trans}/100, quadratic scaling {scale}/100 (worst {worst_scale:.1e}), symmetric {sym}/100"
        ),
    )
}

fn c6_rank_schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = 0;
    let trials = 200;
    for _ in 0..trials {
        let epochs = rng.random_range(3..=30);
        let mu = rng.random_range(2..epochs);
        let nu = rng.random_range(mu + 1..=epochs);
        let r_low = rng.random_range(1..=3);
        let r_mid = rng.random_range(r_low + 1..=6);
        let r_high = rng.random_range(r_mid + 1..=10);
        let s = EvolutionSchedule { epochs, mu, nu, r_high, r_mid, r_low };
        if s.validate().is_err() {
            continue;
        }
        let ranks: Vec<usize> = (1..=epochs).map(|t| s.rank_at(t).unwrap()).collect();
        let stepwise = ranks.iter().enumerate().all(|(i, &r)| {
            let t = i + 1;
            r == if t < mu {
                r_high
            } else if t < nu {
                r_mid
            } else {
                r_low
            }
        });
        let monotone = ranks.windows(2).all(|w| w[1] <= w[0]);
        let bounded = s.rank_at(0).is_err() && s.rank_at(epochs + 1).is_err();
        if stepwise && monotone && bounded {
            ok += 1;
        }
    }
    outcome(ok == trials, format!("{ok}/{trials} randomized schedules stepwise, non-increasing and range-checked"))
}

fn c7_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_evoprompt");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(bin).args(["train", "--seed", "7", "--out"]).arg(&out).output().unwrap();
        if !status.status.success() {
            return outcome(false, format!("train exited with {}", status.status));
        }
        files.push(std::fs::read(out.join("epochs.csv")).unwrap());
    }
    let same = files[0] == files[1];
    outcome(
        same && !files[0].is_empty(),
        format!("two runs, epochs.csv {} bytes each, identical: {same}", files[0].len()),
    )
}

fn c8_harmonic_mean() -> Outcome {
    let hm = 100.0 * harmonic_mean(0.7698, 0.7180);
    outcome((hm - 74.29).abs() <= 0.02, format!("hm(76.98, 71.80) = {hm:.4}, expected 74.29"))
}

fn c9_forgetting() -> Outcome {
    let started = Instant::now();
    let cfg = TrainConfig::default();
    let (enc, task) = cfg.setup().unwrap();
    let extended = 2 * cfg.evolution.epochs;
    let (mut drop_full, mut drop_frozen, mut hm_full, mut hm_frozen) = (vec![], vec![], vec![], vec![]);
    for seed in 0..5 {
        let c = TrainConfig { seed, ..cfg.clone() };
        let r = trainer::breakpoint_experiment(&c, &enc, &task, extended).unwrap();
        drop_full.push(r.full.novel_drop);
        drop_frozen.push(r.no_evolution.novel_drop);
        hm_full.push(r.full.final_hm);
        hm_frozen.push(r.no_evolution.final_hm);
    }
    let secs = started.elapsed().as_secs_f64();
    let m = trainer::median;
    let (df, dn, hf, hn) = (m(&drop_full), m(&drop_frozen), m(&hm_full), m(&hm_frozen));
    outcome(
        df <= dn && hf >= hn && secs < 600.0,
        format!(
            "5 seeds x {extended} epochs: median novel drop full {df:.4} vs no_evolution {dn:.4}, median final hm {hf:.4} vs {hn:.4}, {secs:.0}s"
        ),
    )
}

fn c10_ablation_harness() -> Outcome {
    let cfg = TrainConfig::default();
    let (enc, task) = cfg.setup().unwrap();
    let mut done = Vec::new();
    let mut zero_ok = true;
    for name in Ablation::VARIANTS {
        let flags = Ablation::parse(name).unwrap();
        match trainer::ablate(&cfg, flags, &enc, &task) {
            Ok(r) => {
                if flags.no_kcl {
                    zero_ok &= r.epochs.iter().all(|e| e.loss.kcl == 0.0) && r.steps.iter().all(|s| s.loss.kcl == 0.0);
                }
                if flags.no_fgr {
                    zero_ok &= r.epochs.iter().all(|e| e.loss.fgr == 0.0) && r.steps.iter().all(|s| s.loss.fgr == 0.0);
                }
                done.push(format!("{name} hm {:.3}", r.final_eval.hm));
            }
            Err(e) => done.push(format!("{name} failed: {e}")),
        }
    }
    let all = done.iter().all(|d| !d.contains("failed"));
    outcome(all && zero_ok && done.len() == 6, format!("{}; disabled terms exactly 0: {zero_ok}", done.join(", ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient fidelity", c1_gradient_fidelity),
        (2, "direction immutability and normalization", c2_direction_immutability),
        (3, "parameter accounting", c3_parameter_accounting),
        (4, "loss oracles", c4_loss_oracles),
        (5, "fgr invariants", c5_fgr_invariants),
        (6, "rank schedule", c6_rank_schedule),
        (7, "determinism", c7_determinism),
        (8, "harmonic mean arithmetic", c8_harmonic_mean),
        (9, "forgetting mitigation", c9_forgetting),
        (10, "ablation harness", c10_ablation_harness),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (id, name, f) in criteria {
        let o = f();
        println!("{} criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if o.pass {
            passed += 1;
        } else if let Some((_, why)) = KNOWN_RED.iter().find(|(k, _)| *k == id) {
            println!("     known red: {why}");
        } else {
            unexpected.push(id);
        }
    }
    println!("{passed}/10 criteria pass");
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
