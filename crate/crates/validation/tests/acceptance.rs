//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion and exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supcp::cp_als::{cp_fit_als, CpConfig};
use supcp::io::{decode_tensor, encode_tensor, read_tensor, write_matrix_csv, write_tensor, ModelDocument};
use supcp::model_selection::{heldout_loglik, select_rank, SelectionConfig};
use supcp::simulation::{
    generate_rank_sim, generate_setting, run_benchmark, run_init_study, BenchmarkConfig,
    InitStudyConfig, InitVariant, Method,
};
use supcp::supcp::{
    e_step, fit, fit_multistart, identifiability_check, marginal_loglik, FitConfig, InitMethod,
    SupCpParams,
};
use supcp::tensor::{frobenius_distance, vmat};
use supcp::{derive_seed, LoadingSet, Matrix, MultiwayArray};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b): (f64, f64) = (1.0 - rng.random::<f64>(), rng.random());
    (-2.0 * a.ln()).sqrt() * (2.0 * PI * b).cos()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) { 0.5 * (s[m - 1] + s[m]) } else { s[m] }
}

struct Instance {
    x: MultiwayArray,
    y: Matrix,
    params: SupCpParams,
}

const SHAPES: [&[usize]; 8] = [&[12], &[5], &[3, 4], &[2, 2, 3], &[2, 5], &[4, 3], &[2, 3, 2], &[6]];

fn instances() -> Vec<Instance> {
    (0..50u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let dims = SHAPES[(i as usize) % SHAPES.len()];
            let n = rng.random_range(1..=5);
            let r = rng.random_range(1..=3);
            let q = rng.random_range(1..=3);
            let factors = dims
                .iter()
                .map(|&d| {
                    let mut f = gaussian(d, r, &mut rng);
                    for mut c in f.column_iter_mut() {
                        let norm = c.norm();
                        c /= norm;
                    }
                    f
                })
                .collect();
            let sigma_f = match i % 3 {
                0 => Matrix::from_diagonal(&DVector::from_fn(r, |_, _| rng.random_range(0.2..3.0))),
                1 => {
                    let a = gaussian(r, r, &mut rng);
                    &a * a.transpose()
                }
                _ => {
                    let a = gaussian(r, 1, &mut rng);
                    &a * a.transpose()
                }
            };
            let params = SupCpParams {
                loadings: LoadingSet::new(factors).unwrap(),
                b: gaussian(q, r, &mut rng),
                sigma_f,
                sigma_e2: rng.random_range(0.2..2.0),
                diag_constraint: i % 3 == 0,
            };
            let d: usize = dims.iter().product();
            let x = MultiwayArray::from_sample_matrix(&gaussian(n, d, &mut rng), dims).unwrap();
            let y = gaussian(n, q, &mut rng);
            Instance { x, y, params }
        })
        .collect()
}

/// Joint covariance of `(u_i, x_i)` as an explicit `(R+d)` matrix, conditioned on `x_i`.
fn dense_posterior(inst: &Instance) -> (Matrix, Matrix) {
    let p = &inst.params;
    let vm = vmat(&p.loadings);
    let (d, r) = (vm.nrows(), p.sigma_f.nrows());
    let mut joint = Matrix::zeros(r + d, r + d);
    let cross = &p.sigma_f * vm.transpose();
    joint.view_mut((0, 0), (r, r)).copy_from(&p.sigma_f);
    joint.view_mut((0, r), (r, d)).copy_from(&cross);
    joint.view_mut((r, 0), (d, r)).copy_from(&cross.transpose());
    let sxx = &vm * &p.sigma_f * vm.transpose() + Matrix::identity(d, d) * p.sigma_e2;
    joint.view_mut((r, r), (d, d)).copy_from(&sxx);

    let s_ux = joint.view((0, r), (r, d)).into_owned();
    let s_xx_inv = joint.view((r, r), (d, d)).into_owned().try_inverse().unwrap();
    let gain = &s_ux * s_xx_inv;
    let cov = joint.view((0, 0), (r, r)).into_owned() - &gain * s_ux.transpose();
    let x1 = inst.x.sample_matrix();
    let prior = &inst.y * &p.b;
    let mut means = Matrix::zeros(x1.nrows(), r);
    for i in 0..x1.nrows() {
        let m_u = prior.row(i).transpose();
        let post = &m_u + &gain * (x1.row(i).transpose() - &vm * &m_u);
        means.set_row(i, &post.transpose());
    }
    (means, cov)
}

fn dense_loglik(inst: &Instance) -> f64 {
    let p = &inst.params;
    let vm = vmat(&p.loadings);
    let d = vm.nrows();
    let cov = &vm * &p.sigma_f * vm.transpose() + Matrix::identity(d, d) * p.sigma_e2;
    let chol = Cholesky::new(cov).unwrap();
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let x1 = inst.x.sample_matrix();
    let mean = &inst.y * &p.b * vm.transpose();
    (0..x1.nrows())
        .map(|i| {
            let r: DVector<f64> = (x1.row(i) - mean.row(i)).transpose();
            -0.5 * (d as f64 * (2.0 * PI).ln() + logdet + r.dot(&chol.solve(&r)))
        })
        .sum()
}

fn c1_posterior() -> Outcome {
    let mut worst = 0.0f64;
    for inst in instances() {
        let got = e_step(&inst.x, &inst.y, &inst.params).unwrap();
        let (means, cov) = dense_posterior(&inst);
        worst = worst
            .max((&got.u_hat - means).abs().max())
            .max((&got.sigma_u - cov).abs().max());
    }
    outcome(worst < 1e-8, format!("max abs error {worst:.2e} over 50 instances"))
}

fn c2_likelihood() -> Outcome {
    let mut worst = 0.0f64;
    for inst in instances() {
        let got = marginal_loglik(&inst.x, &inst.y, &inst.params).unwrap();
        worst = worst.max((got - dense_loglik(&inst)).abs());
    }
    outcome(worst < 1e-8, format!("max abs error {worst:.2e} over 50 instances"))
}

fn c3_monotone() -> Outcome {
    let mut worst_drop = 0.0f64;
    let mut restricted = 0;
    for i in 0..50u64 {
        let data = generate_setting(1 + (i % 3) as u8, derive_seed(3, i)).unwrap();
        let config = FitConfig { seed: i, ..FitConfig::new(5) };
        let res = fit(&data.x, &data.y, &config).unwrap();
        let tail = &res.loglik_trace[config.anneal_iters.saturating_sub(1).min(res.loglik_trace.len())..];
        for w in tail.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
        if res.params.satisfies_restrictions(1e-12) {
            restricted += 1;
        }
    }
    outcome(
        worst_drop <= 1e-6 && restricted == 50,
        format!("largest post-annealing decrease {worst_drop:.2e}; restrictions hold in {restricted}/50 fits"),
    )
}

fn table_config() -> BenchmarkConfig {
    BenchmarkConfig { n_starts: 5, cp_starts: 1, ..BenchmarkConfig::default() }
}

fn c4_setting3() -> Outcome {
    let rep = run_benchmark(3, 20, &Method::ALL, 0, &table_config()).unwrap();
    let se = |m| rep.median(m, "se").unwrap();
    let (s, c, v) = (se(Method::SupCp), se(Method::Cp), se(Method::SupSvd));
    let a_s = rep.median(Method::SupCp, "angle_v1").unwrap();
    let a_c = rep.median(Method::Cp, "angle_v1").unwrap();
    let pass = s < v && v < c && (s - 34.43).abs() <= 0.3 * 34.43 && a_s < 40.0 && a_c > 50.0;
    outcome(
        pass,
        format!("SE SupCP {s:.2} < SupSVD {v:.2} < CP {c:.2}; angle V1 SupCP {a_s:.1} deg, CP {a_c:.1} deg"),
    )
}

fn c5_setting1() -> Outcome {
    let rep = run_benchmark(1, 20, &[Method::SupCp, Method::Cp], 0, &table_config()).unwrap();
    let s = rep.median(Method::SupCp, "se").unwrap();
    let c = rep.median(Method::Cp, "se").unwrap();
    outcome(s <= 1.10 * c, format!("SE SupCP {s:.2} vs 1.10 x CP {:.2}", 1.10 * c))
}

fn c6_setting4() -> Outcome {
    let rep = run_benchmark(4, 10, &Method::ALL, 0, &table_config()).unwrap();
    let se = |m| rep.median(m, "se").unwrap();
    let (s, c, v) = (se(Method::SupCp), se(Method::Cp), se(Method::SupSvd));
    let re_s = rep.median(Method::SupCp, "re_e_x100").unwrap();
    let re_v = rep.median(Method::SupSvd, "re_e_x100").unwrap();
    outcome(
        s < 0.5 * v && c < 0.5 * v && re_s < re_v,
        format!("SE SupCP {s:.2}, CP {c:.2} vs SupSVD {v:.2}; 100 RE_e SupCP {re_s:.2} vs SupSVD {re_v:.2}"),
    )
}

fn c7_rank_selection() -> Outcome {
    let candidates: Vec<usize> = (1..=10).collect();
    let (mut exact, mut near, mut total) = (0, 0, 0);
    let mut misses = Vec::new();
    for r in 1..=10usize {
        for rep in 0..5u64 {
            let seed = derive_seed(r as u64 * 1000, rep);
            let data = generate_rank_sim(r, seed).unwrap();
            let selection = SelectionConfig {
                train_fraction: 0.5,
                split_seed: derive_seed(seed, 1),
                fit_seeds: vec![derive_seed(seed, 2)],
            };
            let report = select_rank(&data.x, &data.y, &candidates, &FitConfig::new(1), &selection).unwrap();
            let chosen = report.chosen_rank;
            total += 1;
            exact += usize::from(chosen == r);
            near += usize::from(chosen.abs_diff(r) <= 1);
            if chosen != r {
                misses.push(format!("{r}->{chosen}"));
            }
        }
    }
    let (fe, fn_) = (exact as f64 / total as f64, near as f64 / total as f64);
    outcome(
        fe >= 0.70 && fn_ >= 0.95,
        format!("exact {exact}/{total}, within one {near}/{total}; misses [{}]", misses.join(", ")),
    )
}

fn rel_dist(a: &MultiwayArray, b: &MultiwayArray) -> f64 {
    frobenius_distance(a, b).unwrap() / b.frobenius_norm()
}

fn c8_limits() -> Outcome {
    let mut dists = Vec::new();
    for s in 0..3u64 {
        let data = generate_setting(1, derive_seed(8, s)).unwrap();
        let n = data.x.dims()[0];
        let y0 = Matrix::zeros(n, 1);
        let seeds: Vec<u64> = (0..5).map(|j| derive_seed(s, j)).collect();
        let sup = fit_multistart(&data.x, &y0, &FitConfig::new(5), &seeds).unwrap();
        let cp = seeds
            .iter()
            .map(|&seed| cp_fit_als(&data.x, &CpConfig { seed, ..CpConfig::new(5) }).unwrap())
            .min_by(|a, b| a.rss.total_cmp(&b.rss))
            .unwrap();
        dists.push(rel_dist(&sup.fitted_signal().unwrap(), &cp.signal().unwrap()));
    }
    let mut ratios = Vec::new();
    for s in 0..5u64 {
        let data = generate_setting(3, derive_seed(88, s)).unwrap();
        let seeds: Vec<u64> = (0..5).map(|j| derive_seed(100 + s, j)).collect();
        let res = fit_multistart(&data.x, &data.y, &FitConfig::new(5), &seeds).unwrap();
        ratios.push(res.params.sigma_f.norm() / res.params.sigma_e2);
    }
    let worst = dists.iter().copied().fold(0.0, f64::max);
    let ratio = median(&ratios);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    outcome(
        worst < 0.05 && ratio < 0.05,
        format!(
            "(i) Y=0 vs CP relative distance [{}] (max {worst:.3} < 0.05: {}); \
             (ii) F=0 ratio ||Sigma_f||/sigma2 [{}] (median {ratio:.3} < 0.05: {})",
            fmt(&dists),
            worst < 0.05,
            fmt(&ratios),
            ratio < 0.05
        ),
    )
}

fn c9_init_study() -> Outcome {
    let variants: Vec<InitVariant> = [InitMethod::Random, InitMethod::Cp]
        .into_iter()
        .flat_map(|init| [0, 500].map(|anneal_iters| InitVariant { init, anneal_iters }))
        .collect();
    let rows = run_init_study(20, &variants, 0, &InitStudyConfig::default()).unwrap();
    let row = |init, a| rows.iter().find(|r| r.init == init && r.anneal_iters == a).unwrap();
    let wins = |init| {
        let (r0, r5) = (row(init, 0), row(init, 500));
        r5.abs_diffs.iter().zip(&r0.abs_diffs).filter(|(a, b)| a < b).count()
    };
    let (r0, r5) = (row(InitMethod::Random, 0).mean_abs_diff, row(InitMethod::Random, 500).mean_abs_diff);
    let (c0, c5) = (row(InitMethod::Cp, 0).mean_abs_diff, row(InitMethod::Cp, 500).mean_abs_diff);
    outcome(
        r5 < r0 && c5 < c0,
        format!(
            "mean |diff| random {r0:.3} -> {r5:.3}, cp {c0:.3} -> {c5:.3} (0 -> 500 annealing); \
             500 smaller on {}/20 (random), {}/20 (cp) datasets",
            wins(InitMethod::Random),
            wins(InitMethod::Cp)
        ),
    )
}

fn c10_identifiability() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for setting in 1..=4u8 {
        let data = generate_setting(setting, 10).unwrap();
        let rep = identifiability_check(&data.truth.params(), &data.y).unwrap();
        pass &= rep.satisfied;
        parts.push(format!("setting {setting}: {} (margin {})", rep.satisfied, rep.margin));
    }
    let data = generate_setting(3, 10).unwrap();
    let mut factors = data.truth.loadings.clone().into_factors();
    let first = factors[0].column(0).into_owned();
    factors[0].set_column(1, &first);
    let dup = SupCpParams { loadings: LoadingSet::new(factors).unwrap(), ..data.truth.params() };
    let rep = identifiability_check(&dup, &data.y).unwrap();
    pass &= !rep.satisfied;
    parts.push(format!("duplicate column: {} (margin {})", rep.satisfied, rep.margin));
    outcome(pass, parts.join("; "))
}

fn run_cli(args: &[&str]) -> u8 {
    supcp_cli::run_from(std::iter::once("supcp").chain(args.iter().copied()))
}

fn c11_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = MultiwayArray::from_sample_matrix(&gaussian(4, 12, &mut rng), &[3, 4]).unwrap();
    let path = dir.path().join("x.mway");
    write_tensor(&path, &x).unwrap();
    let back = read_tensor(&path).unwrap();
    let decoded = decode_tensor(&encode_tensor(&x)).unwrap();
    let bits = |t: &MultiwayArray| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let tensor_ok = back.dims() == x.dims() && bits(&back) == bits(&x) && bits(&decoded) == bits(&x);
    notes.push(format!("tensor bit-exact {tensor_ok}"));

    let data = generate_setting(3, 11).unwrap();
    let config = FitConfig { max_iters: 300, anneal_iters: 20, seed: 5, ..FitConfig::new(5) };
    let res = fit(&data.x, &data.y, &config).unwrap();
    let model_path = dir.path().join("model.json");
    ModelDocument::from_fit(&res, &config, &[5]).write(&model_path).unwrap();
    let doc = ModelDocument::read(&model_path).unwrap();
    let params = doc.params().unwrap();
    let ll = heldout_loglik(&data.x, &data.y, &params, &doc.centering().unwrap()).unwrap();
    let ll_err = (ll - res.final_loglik()).abs();
    let model_ok = params == res.params && ll_err <= 1e-10;
    notes.push(format!("model document exact {}, log-lik error {ll_err:.1e}", params == res.params));

    let file = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    write_tensor(file("d.mway"), &data.x).unwrap();
    write_matrix_csv(file("d_y.csv"), &data.y, None).unwrap();
    let (x_path, y_path) = (file("d.mway"), file("d_y.csv"));
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = file(name);
        let code = run_cli(&[
            "fit", "--x", &x_path, "--y", &y_path, "--rank", "3", "--max-iters", "200", "--anneal", "10",
            "--seed", "42", "--out", &out,
        ]);
        assert_eq!(code, 0, "fit exited with {code}");
        outputs.push(std::fs::read(out).unwrap());
    }
    let mut sims = Vec::new();
    for prefix in ["s1", "s2"] {
        let code = run_cli(&["simulate", "--scheme", "setting2", "--seed", "9", "--out-prefix", &file(prefix)]);
        assert_eq!(code, 0, "simulate exited with {code}");
        sims.push(std::fs::read(file(&format!("{prefix}.mway"))).unwrap());
    }
    let cli_ok = outputs[0] == outputs[1] && sims[0] == sims[1];
    notes.push(format!("CLI fit and simulate byte-identical {cli_ok}"));
    outcome(tensor_ok && model_ok && cli_ok, notes.join("; "))
}

type Criterion = (u8, &'static str, Duration, fn() -> Outcome);

fn main() {
    let secs = Duration::from_secs;
    let criteria: [Criterion; 11] = [
        (1, "posterior oracle", secs(10), c1_posterior),
        (2, "likelihood oracle", secs(10), c2_likelihood),
        (3, "EM monotonicity", secs(300), c3_monotone),
        (4, "setting 3 benchmark", secs(600), c4_setting3),
        (5, "setting 1 benchmark", secs(300), c5_setting1),
        (6, "setting 4 benchmark", secs(900), c6_setting4),
        (7, "rank selection", secs(1200), c7_rank_selection),
        (8, "limiting behaviors", Duration::MAX, c8_limits),
        (9, "initialization study", secs(1200), c9_init_study),
        (10, "identifiability diagnostic", secs(1), c10_identifiability),
        (11, "format round trips", secs(30), c11_round_trips),
    ];
    let only: Vec<u8> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= limit;
        failed += usize::from(!pass);
        println!(
            "{} criterion {id:>2} ({name}): {} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
