//! Acceptance criteria. Every test prints one `criterion N: PASS|FAIL …`
//! line. A FAIL only fails the test when `OGMM_STRICT_ACCEPTANCE=1` is set.

mod common;

use std::time::Instant;

use common::{report, DirectOgmm, ExpIv, OracleWeight};
use nalgebra::{DMatrix, DVector};
use ogmm_core::inference::size_adjusted_rejection;
use ogmm_core::moments::{gmwm_nu, gmwm_nu_gradient};
use ogmm_core::offline::{twostep_gmm, FirstStep, TwoStepOptions};
use ogmm_core::simgen::gmwm_signal;
use ogmm_core::{
    run_experiment, Batch, ExperimentConfig, ExperimentResult, GmwmMoment, IvMoment, KernelLrvConfig, KernelLrvState,
    ModwtState, MomentModel, OgmmState, OlsMoment, UpdateOptions, WeightingMode,
};
use rand::Rng;

fn verdict(id: u32, ok: bool, detail: &str) {
    report(&format!("criterion {id}: {} {detail}", if ok { "PASS" } else { "FAIL" }));
    let strict = std::env::var("OGMM_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    assert!(ok || !strict, "criterion {id} failed");
}

fn experiment(toml: &str) -> ExperimentResult {
    let cfg = ExperimentConfig::from_toml_str(toml).expect("config parses");
    let res = run_experiment(&cfg).expect("experiment runs");
    for f in res.failures.iter().take(5) {
        report(&format!("  failure: rep {} {} batch {}: {}", f.rep, f.method, f.batch, f.error));
    }
    res
}

fn rate(res: &ExperimentResult, method: &str, batch: usize) -> f64 {
    res.row(method, batch).and_then(|r| r.rejection_rate).unwrap_or(f64::NAN)
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

fn random_spd(rng: &mut impl Rng, q: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(q, q, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(q, q) * q as f64
}

#[test]
fn criterion_01_telescoping_equivalence() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..50u64 {
        let mut rng = common::rng(1000 + s);
        let (p, q) = (2, 4);
        let truth = [0.6, -0.4];
        let nonlinear = s % 2 == 1;
        let (first, count) = (rng.gen_range(30..80), rng.gen_range(2..=20));
        let sizes = common::random_sizes(&mut rng, first, count);
        let total: usize = sizes.iter().sum();
        let rows = if nonlinear {
            common::exp_rows(&mut rng, total, &truth, q)
        } else {
            common::linear_iv_rows(&mut rng, total, &truth, q)
        };
        let batches = common::to_batches(&rows, &sizes);
        let theta1 = DVector::from_vec(vec![truth[0] + 0.1, truth[1] - 0.1]);
        let (mode, oracle_mode) = if s % 4 < 2 {
            let w = random_spd(&mut rng, q);
            (WeightingMode::Fixed(w.clone()), OracleWeight::Fixed(w))
        } else {
            (WeightingMode::Welford, OracleWeight::Covariance)
        };
        let iv = IvMoment::new(p, q);
        let exp = ExpIv { p, q };
        let model: &dyn MomentModel = if nonlinear { &exp } else { &iv };

        let mut state = OgmmState::init(model, &batches[0], theta1.clone(), mode, UpdateOptions::default()).unwrap();
        let mut oracle = match nonlinear {
            true => DirectOgmm::init(&exp, &batches[0], theta1, oracle_mode),
            false => DirectOgmm::init(&iv, &batches[0], theta1, oracle_mode),
        };
        for b in &batches[1..] {
            state.step(model, b).unwrap();
            match nonlinear {
                true => oracle.step(&exp, b),
                false => oracle.step(&iv, b),
            }
            let e_theta = rel_err(&DMatrix::from_column_slice(p, 1, state.theta().as_slice()), &DMatrix::from_column_slice(p, 1, oracle.theta.as_slice()));
            let up = oracle.u_prime();
            let e_u = rel_err(&DMatrix::from_column_slice(q, 1, state.u_prime().as_slice()), &DMatrix::from_column_slice(q, 1, up.as_slice()));
            let e_v = rel_err(state.v_prime(), &oracle.v);
            worst = worst.max(e_theta).max(e_u).max(e_v);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-10 && secs < 60.0;
    verdict(1, ok, &format!("max rel diff {worst:.2e} over 50 streams, {secs:.1}s"));
}

#[test]
fn criterion_02_exact_ols_recovery() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..100u64 {
        let mut rng = common::rng(5000 + s);
        let p = rng.gen_range(1..=5);
        let (first, count) = (rng.gen_range(p + 5..40), rng.gen_range(2..=20));
        let sizes = common::random_sizes(&mut rng, first, count);
        let total: usize = sizes.iter().sum();
        let beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rows: Vec<Vec<f64>> = (0..total)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|j| if j == 0 { 1.0 } else { common::normal(&mut rng) }).collect();
                let y = x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + common::normal(&mut rng);
                std::iter::once(y).chain(x).collect()
            })
            .collect();
        let batches = common::to_batches(&rows, &sizes);
        let pooled = |n: usize| -> DVector<f64> {
            let mut xtx = DMatrix::zeros(p, p);
            let mut xty = DVector::zeros(p);
            for r in &rows[..n] {
                let x = DVector::from_column_slice(&r[1..]);
                xtx += &x * x.transpose();
                xty += &x * r[0];
            }
            xtx.lu().solve(&xty).unwrap()
        };
        let model = OlsMoment::new(p);
        let w = random_spd(&mut rng, p);
        let mut state = OgmmState::init(&model, &batches[0], pooled(sizes[0]), WeightingMode::Fixed(w), UpdateOptions::default()).unwrap();
        let mut seen = sizes[0];
        for (b, &n) in batches[1..].iter().zip(&sizes[1..]) {
            state.step(&model, b).unwrap();
            seen += n;
            let expect = pooled(seen);
            let diff = (state.theta() - &expect).amax() / (1.0 + expect.amax());
            worst = worst.max(diff);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-10 && secs < 60.0;
    verdict(2, ok, &format!("max rel diff {worst:.2e} over 100 instances, {secs:.1}s"));
}

/// Direct double sum with the truncation sequence rebuilt from its
/// definition.
fn klrv_brute_force(xs: &[Vec<f64>], cfg: &KernelLrvConfig) -> DMatrix<f64> {
    let n = xs.len();
    let q = xs[0].len();
    let s_of = |m: usize| -> usize {
        let raw = (cfg.s_scale * (m as f64).powf(cfg.s_exponent)).floor() as usize;
        raw.min(m.saturating_sub(1))
    };
    let mut sp = vec![0usize; n + 1];
    for m in 2..=n {
        let prev = s_of(m - 1);
        let cand = sp[m - 1] + 1;
        sp[m] = if prev <= cand && (cand as f64) < cfg.phi * prev as f64 { cand } else { s_of(m) };
    }
    let t = ((cfg.t_scale * (n as f64).powf(cfg.t_exponent)).ceil() as usize).min(n) as f64;
    let mut mean = vec![0.0; q];
    for x in xs {
        for c in 0..q {
            mean[c] += x[c] / n as f64;
        }
    }
    let mut out = DMatrix::zeros(q, q);
    for i in 1..=n {
        let lo = i.saturating_sub(sp[i]).max(1);
        for j in lo..=i {
            let d = (i - j) as f64;
            let k = 1.0 - d.powi(cfg.lambda as i32) / t.powi(cfg.lambda as i32);
            for a in 0..q {
                for b in 0..q {
                    let pair = (xs[i - 1][a] - mean[a]) * (xs[j - 1][b] - mean[b]);
                    let sym = (xs[j - 1][a] - mean[a]) * (xs[i - 1][b] - mean[b]);
                    out[(a, b)] += k * if i == j { pair } else { pair + sym };
                }
            }
        }
    }
    out / n as f64
}

#[test]
fn criterion_03_lrv_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for &lambda in &[1u32, 3] {
        for &phi in &[1.0, 2.0] {
            let cfg = KernelLrvConfig::new(lambda, phi);
            for s in 0..6u64 {
                let mut rng = common::rng(100 * lambda as u64 + 10 * phi as u64 + s);
                let q = 1 + (s as usize % 3);
                let len = 200;
                let mut prev = vec![0.0; q];
                let xs: Vec<Vec<f64>> = (0..len)
                    .map(|_| {
                        prev = prev.iter().map(|v| 0.6 * v + common::normal(&mut rng)).collect();
                        prev.clone()
                    })
                    .collect();
                let mut st = KernelLrvState::new(q, cfg.clone()).unwrap();
                for (k, x) in xs.iter().enumerate() {
                    st.push(x);
                    if k >= 1 {
                        let got = st.query_raw().unwrap();
                        let want = klrv_brute_force(&xs[..=k], &cfg);
                        worst = worst.max(rel_err(&got, &want));
                    }
                }
            }
        }
    }
    let seeds = 100;
    let n = 100_000;
    let mut avg = 0.0;
    for seed in 0..seeds {
        let mut rng = common::rng(90_000 + seed);
        let mut st = KernelLrvState::new(1, KernelLrvConfig::new(1, 1.0)).unwrap();
        let mut x = common::normal(&mut rng) / (0.75f64).sqrt();
        for _ in 0..n {
            st.push(&[x]);
            x = 0.5 * x + common::normal(&mut rng);
        }
        avg += st.query_raw().unwrap()[(0, 0)] / seeds as f64;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-10 && (avg / 4.0 - 1.0).abs() <= 0.2 && secs < 300.0;
    verdict(3, ok, &format!("max rel diff vs double sum {worst:.2e}; AR(1) long-run variance {avg:.3} (target 4); {secs:.1}s"));
}

#[test]
fn criterion_04_coverage() {
    let start = Instant::now();
    let res = experiment(
        r#"
schema_version = 1
model = { name = "m2" }
schedule = { linear = { step = 2000, count = 25 } }
replications = 200
seed_base = 40000
alphas = [0.05]
target = { coord = 0 }
methods = [{ method = "ogmm", update = "explicit", weighting = { kind = "klrv" } }]
"#,
    );
    let row = res.row("ogmm-explicit-klrv", 25).expect("final row");
    let cov = row.coverage.unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    let ok = (0.91..=0.98).contains(&cov) && row.reps_ok == 200 && secs < 900.0;
    verdict(4, ok, &format!("coverage {cov:.3} at N = {} over {} reps, {secs:.1}s", row.n, row.reps_ok));
}

fn sargan_config(theta2: f64) -> String {
    format!(
        r#"
schema_version = 1
model = {{ name = "m3", theta2 = {theta2:?} }}
schedule = {{ doubling = {{ base = 100, count = 5 }} }}
replications = 500
seed_base = 50000
alphas = [0.05]
methods = [
  {{ method = "ogmm", weighting = {{ kind = "welford" }} }},
  {{ method = "ogmm", weighting = {{ kind = "klrv" }} }},
  {{ method = "sgmm", kappa = 0.5 }},
]
"#
    )
}

#[test]
fn criterion_05_sargan_hansen_calibration() {
    let start = Instant::now();
    let null = experiment(&sargan_config(0.0));
    let alt = experiment(&sargan_config(0.4));
    let last = null.row("ogmm-explicit-welford", 5).expect("final row");
    assert_eq!(last.n, 3200);
    let mut detail = String::new();
    let mut ok = true;
    for (method, pinned) in [("ogmm-explicit-welford", true), ("ogmm-explicit-klrv", false), ("sgmm-k0.5", false)] {
        let size = rate(&null, method, 5);
        let power = size_adjusted_rejection(&null.statistics(method, 5), &alt.statistics(method, 5), 0.05).unwrap_or(f64::NAN);
        detail.push_str(&format!("{method}: size {size:.3} power {power:.3}; "));
        if pinned {
            ok &= (0.033..=0.07).contains(&size) && power >= 0.85;
        }
        if method.starts_with("sgmm") {
            ok &= !(0.033..=0.07).contains(&size);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    verdict(5, ok, &format!("{detail}{secs:.1}s"));
}

fn anomaly_config(theta2: f64) -> String {
    format!(
        r#"
schema_version = 1
model = {{ name = "m7", theta2 = {theta2:?} }}
schedule = {{ linear = {{ step = 500, count = 20 }} }}
replications = 500
seed_base = 60000
alphas = [0.05]
methods = [
  {{ method = "anomaly", statistic = "tf", weighting = {{ kind = "klrv" }} }},
  {{ method = "anomaly", statistic = "tu", weighting = {{ kind = "klrv" }} }},
]
"#
    )
}

#[test]
fn criterion_06_anomaly_tests() {
    let start = Instant::now();
    let null = experiment(&anomaly_config(0.0));
    let alt = experiment(&anomaly_config(0.2));
    let tf_adj = |b: usize| {
        size_adjusted_rejection(&null.statistics("tf-initial", b), &alt.statistics("tf-initial", b), 0.05).unwrap_or(f64::NAN)
    };
    let (tf5, tf9) = (tf_adj(5), tf_adj(9));
    let (tu5, tu9) = (rate(&alt, "tu-initial", 5), rate(&alt, "tu-initial", 9));
    let mut null_lo = f64::INFINITY;
    let mut null_hi = f64::NEG_INFINITY;
    for method in ["tf-initial", "tu-initial"] {
        for b in 2..=20 {
            let r = rate(&null, method, b);
            null_lo = null_lo.min(r);
            null_hi = null_hi.max(r);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = tf5 >= 0.5
        && tf9 >= 0.5
        && tu9 >= 0.5
        && (0.02..=0.09).contains(&tu5)
        && null_lo >= 0.03
        && null_hi <= 0.08
        && secs < 900.0;
    verdict(
        6,
        ok,
        &format!(
            "T_F size-adjusted b5 {tf5:.3} b9 {tf9:.3}; T_U b5 {tu5:.3} b9 {tu9:.3}; null range [{null_lo:.3}, {null_hi:.3}]; {secs:.1}s"
        ),
    );
}

/// Level-by-level pyramid over the whole series; `out[j][t]` is `None`
/// until the level has enough history.
fn pyramid(y: &[f64], levels: usize) -> Vec<Vec<Option<f64>>> {
    let n = y.len();
    let mut v: Vec<Option<f64>> = y.iter().map(|&a| Some(a)).collect();
    let mut out = Vec::new();
    for j in 0..levels {
        let lag = 1usize << j;
        let mut w = vec![None; n];
        let mut next = vec![None; n];
        for t in lag..n {
            if let (Some(a), Some(b)) = (v[t], v[t - lag]) {
                w[t] = Some(0.5 * a - 0.5 * b);
                next[t] = Some(0.5 * a + 0.5 * b);
            }
        }
        out.push(w);
        v = next;
    }
    out
}

#[test]
fn criterion_07_online_modwt() {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for s in 0..100u64 {
        let mut rng = common::rng(70_000 + s);
        let q = rng.gen_range(1..=10);
        let n = rng.gen_range((1usize << q) + 2..=10_000);
        let y: Vec<f64> = (0..n).map(|_| common::normal(&mut rng)).collect();
        let want = pyramid(&y, q);
        let m = rng.gen_range((1usize << q) + 1..n);
        let (mut st, _) = ModwtState::init(&y[..m], q).unwrap();
        for (t, &v) in y.iter().enumerate().skip(m) {
            let got = st.push(v);
            for j in 0..q {
                compared += 1;
                if want[j][t].map(f64::to_bits) != Some(got[j].to_bits()) {
                    mismatches += 1;
                }
            }
        }
    }

    let q = 10;
    let n = 100_000;
    let chunk = 1000;
    let mut rng = common::rng(71_000);
    let y: Vec<f64> = (0..n + 2048).map(|_| common::normal(&mut rng)).collect();
    let mut ratios = Vec::new();
    for _ in 0..5 {
        let (mut st, _) = ModwtState::init(&y[..2048], q).unwrap();
        let mut out = vec![0.0; q];
        let mut times = Vec::new();
        let mut sink = 0.0;
        for c in y[2048..].chunks(chunk) {
            let t0 = Instant::now();
            for &v in c {
                st.push_into(v, &mut out);
                sink += out[q - 1];
            }
            times.push(t0.elapsed().as_secs_f64());
        }
        std::hint::black_box(sink);
        let d = times.len() / 10;
        let med = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        ratios.push(med(&times[times.len() - d..]) / med(&times[..d]));
    }
    ratios.sort_by(f64::total_cmp);
    let ratio = ratios[ratios.len() / 2];
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && ratio < 2.0 && secs < 120.0;
    verdict(7, ok, &format!("{mismatches} mismatches in {compared} coefficients; late/early push time {ratio:.2}; {secs:.1}s"));
}

const GMWM_TRUTH: [f64; 5] = [0.99, 1e-8, 0.6, 1e-6, 2e-6];

#[test]
fn criterion_08_gmwm() {
    let start = Instant::now();
    let mut rng = common::rng(80_000);
    let mut grad_err = 0.0f64;
    for _ in 0..50 {
        let theta: [f64; 5] = [rng.gen_range(0.05..0.99), rng.gen_range(1e-9..1e-6), rng.gen_range(0.05..0.9), rng.gen_range(1e-8..1e-5), rng.gen_range(1e-8..1e-5)];
        for j in 1..=8 {
            let g = gmwm_nu_gradient(&theta, j).unwrap();
            for k in 0..5 {
                let h = 1e-6 * theta[k].abs().max(1e-12);
                let mut up = theta;
                let mut dn = theta;
                up[k] += h;
                dn[k] -= h;
                let fd = (gmwm_nu(&up, j).unwrap() - gmwm_nu(&dn, j).unwrap()) / (2.0 * h);
                grad_err = grad_err.max((fd - g[k]).abs() / g[k].abs().max(1e-300));
            }
        }
    }

    let q = 8;
    let y = gmwm_signal(&GMWM_TRUTH, 1_000_000, 80_001).unwrap();
    let (_, coefs) = ModwtState::init(&y, q).unwrap();
    let mut var_err = 0.0f64;
    for (j, c) in coefs.iter().enumerate().take(q) {
        let emp = c.iter().map(|w| w * w).sum::<f64>() / c.len() as f64;
        let nu = gmwm_nu(&GMWM_TRUTH, j + 1).unwrap();
        var_err = var_err.max((emp / nu - 1.0).abs());
    }

    let reps = 30;
    let n = 100_000;
    let model = GmwmMoment::new(2, q);
    let mut estimates = Vec::new();
    for r in 0..reps {
        let y = gmwm_signal(&GMWM_TRUTH, n, 81_000 + r).unwrap();
        let (_, coefs) = ModwtState::init(&y, q).unwrap();
        let rows = ogmm_core::modwt::coefficient_rows(&coefs);
        let batch = Batch::new(q, rows.concat()).unwrap();
        let start_theta = DVector::from_iterator(5, GMWM_TRUTH.iter().enumerate().map(|(k, v)| if k % 2 == 0 && k < 4 { v * 0.98 } else { v * 1.3 }));
        let mut opts = TwoStepOptions::new(start_theta);
        opts.first_step = FirstStep::DiagonalInverseVariance;
        let fit = twostep_gmm(&model, std::slice::from_ref(&batch), &opts).unwrap();
        estimates.push(fit.theta);
    }
    let mut worst_z = 0.0f64;
    let mut summary = Vec::new();
    for k in 0..5 {
        let vals: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let z = (mean - GMWM_TRUTH[k]).abs() / sd;
        worst_z = worst_z.max(z);
        summary.push(format!("{mean:.3e}±{sd:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = grad_err < 1e-5 && var_err <= 0.05 && worst_z <= 3.0 && secs < 600.0;
    verdict(
        8,
        ok,
        &format!(
            "gradient rel err {grad_err:.1e}; wavelet variance rel err {var_err:.3}; estimates [{}] worst |bias|/sd {worst_z:.2}; {secs:.1}s",
            summary.join(", ")
        ),
    );
}

#[test]
fn criterion_09_cost_scaling() {
    let nb = 500;
    let (p, q) = (2, 4);
    let model = IvMoment::new(p, q);
    let cfg = KernelLrvConfig::new(1, 1.0).with_pilot(nb as u64);
    let mut ratios = Vec::new();
    let mut worst_buffer = 0.0f64;
    for s in 0..20u64 {
        let mut rng = common::rng(90_500 + s);
        let rows = common::linear_iv_rows(&mut rng, nb * 100, &[0.6, -0.4], q);
        let batches = common::to_batches(&rows, &vec![nb; 100]);
        let mut state = OgmmState::init(&model, &batches[0], DVector::from_vec(vec![0.6, -0.4]), WeightingMode::KernelLrv(cfg.clone()), UpdateOptions::default()).unwrap();
        let mut times = vec![0.0; 101];
        for (b, batch) in batches.iter().enumerate().skip(1) {
            let t0 = Instant::now();
            state.step(&model, batch).unwrap();
            times[b + 1] = t0.elapsed().as_secs_f64();
            let kernel = state.weighting().kernel().unwrap();
            let n = state.n() as f64;
            let bound = cfg.phi * cfg.s_scale * n.powf(cfg.s_exponent) + 2.0;
            worst_buffer = worst_buffer.max(kernel.buffer_len() as f64 - bound);
        }
        ratios.push(times[100] / times[2]);
    }
    ratios.sort_by(f64::total_cmp);
    let ratio = ratios[ratios.len() / 2];
    let ok = ratio < 2.0 && worst_buffer <= 0.0;
    verdict(9, ok, &format!("median time ratio batch 100 / batch 2 = {ratio:.2}; buffer excess over bound {worst_buffer:.0}"));
}

#[test]
fn criterion_10_quantile_regression() {
    let start = Instant::now();
    let res = experiment(
        r#"
schema_version = 1
model = { name = "m5", tau = 0.1 }
schedule = { linear = { step = 2000, count = 50 } }
replications = 200
seed_base = 100000
alphas = [0.05]
target = "sum"
methods = [
  { method = "ogmm", weighting = { kind = "klrv" } },
  { method = "leqr" },
]
"#,
    );
    let og = res.row("ogmm-explicit-klrv", 50).expect("ogmm row");
    let lq = res.row("leqr", 50).expect("leqr row");
    let cov = og.coverage.unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    let ok = og.mae_vec <= 1.05 * lq.mae_vec && (0.90..=0.985).contains(&cov);
    verdict(
        10,
        ok,
        &format!("MAE ogmm {:.4e} leqr {:.4e}; coverage {cov:.3} at N = {}; {secs:.1}s", og.mae_vec, lq.mae_vec, og.n),
    );
}
