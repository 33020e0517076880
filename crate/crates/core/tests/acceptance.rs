//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 always run. The benchmark criteria (6-9) read recorded
//! result documents from `results/` at the repository root, or from the
//! directory named by `DGP_ACCEPTANCE_RESULTS`. With `DGP_ACCEPTANCE_FULL=1`
//! they are recomputed from scratch instead, which takes several hours on a
//! single core.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgp_core::autodiff::{finite_difference, max_relative_error};
use dgp_core::bench::{run_experiment, ExperimentConfig, RunResult};
use dgp_core::kernels::{gram, Kernel, MeanFunction, NoisyKernel, RbfArdKernel};
use dgp_core::linalg::{cholesky_with_jitter, DenseMatrix, LowerTriangular, DEFAULT_JITTER};
use dgp_core::model::{
    elbo_gradient, elbo_with_noise, expected_log_lik, predict_density_with_noise, propagate_with_noise, DGPModel,
    Likelihood,
};
use dgp_core::quadrature::GaussHermite;
use dgp_core::rng::RngStream;
use dgp_core::svgp::{kl_to_prior, marginal_posterior, GPLayer};
use dgp_core::trainer::Task;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, o: Outcome) -> bool {
    println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn naive_cholesky(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        l[(j, j)] = d.sqrt();
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / l[(j, j)];
        }
    }
    l
}

fn naive_solve(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let l = naive_cholesky(a);
    let n = a.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

fn random_layer(rng: &mut RngStream, d_in: usize, d_out: usize, m: usize, inner: bool) -> GPLayer {
    let z = DenseMatrix::from_vec(m, d_in, rng.standard_normal(m * d_in)).unwrap();
    let lengthscales: Vec<f64> = (0..d_in).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
    let base = RbfArdKernel::new(0.5 + 2.0 * rng.uniform(), &lengthscales);
    let (kernel, mean_fn) = if inner {
        (
            Kernel::Noisy(NoisyKernel::new(base, 1e-3)),
            MeanFunction::Linear {
                w: DenseMatrix::from_fn(d_in, d_out, |i, j| if i == j { 1.0 } else { 0.0 }),
            },
        )
    } else {
        (Kernel::Rbf(base), MeanFunction::Zero { output_dim: d_out })
    };
    let q_mu = DenseMatrix::from_vec(m, d_out, rng.standard_normal(m * d_out)).unwrap();
    let q_sqrt: Vec<_> = (0..d_out)
        .map(|_| {
            let mut l = DenseMatrix::from_fn(m, m, |i, j| if j < i { 0.2 * rng.normal() } else { 0.0 });
            for i in 0..m {
                l[(i, i)] = 0.2 + rng.uniform();
            }
            LowerTriangular::from_matrix(l).unwrap()
        })
        .collect();
    GPLayer::new(z, kernel, mean_fn, q_mu, &q_sqrt).unwrap()
}

fn chain(seed: u64, widths: &[usize], m: usize, likelihood: Likelihood, n: usize) -> DGPModel {
    let mut rng = RngStream::new(seed);
    let last = widths.len() - 2;
    let layers = (0..widths.len() - 1)
        .map(|l| random_layer(&mut rng, widths[l], widths[l + 1], m, l < last))
        .collect();
    DGPModel::new(layers, likelihood, n).unwrap()
}

fn inputs(seed: u64, n: usize, d: usize) -> (DenseMatrix, DenseMatrix) {
    let mut rng = RngStream::new(seed);
    let x = DenseMatrix::from_vec(n, d, rng.standard_normal(n * d)).unwrap();
    let y = DenseMatrix::from_fn(n, 1, |i, _| x.row(i).iter().map(|v| v.sin()).sum::<f64>() + 0.1 * rng.normal());
    (x, y)
}

fn collapsed_bound() -> Outcome {
    let start = Instant::now();
    let n = 20;
    let noise = 0.1;
    let x = DenseMatrix::from_fn(n, 1, |i, _| -2.0 + 4.0 * i as f64 / (n - 1) as f64);
    let y = DenseMatrix::from_fn(n, 1, |i, _| (1.5 * x[(i, 0)]).sin() + 0.3 * x[(i, 0)]);
    let kernel = Kernel::Rbf(RbfArdKernel::new(1.2, &[0.7]));
    let k = gram(&kernel, &x, &x, true).unwrap();
    let mut ky = k.clone();
    ky.add_diag(noise);

    let q_mu = k.matmul(&naive_solve(&ky, &y)).unwrap();
    let cov = k.sub(&k.matmul(&naive_solve(&ky, &k)).unwrap()).unwrap();
    let sym = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let mut layer = GPLayer::new(
        x.clone(),
        kernel,
        MeanFunction::Zero { output_dim: 1 },
        q_mu,
        &[LowerTriangular::from_matrix(naive_cholesky(&sym)).unwrap()],
    )
    .unwrap();
    layer.set_inducing_jitter(0.0).unwrap();
    let model = DGPModel::new(vec![layer], Likelihood::gaussian(noise), n).unwrap();
    let bound = elbo_with_noise(&model, &x, &y, &[], 1).unwrap().value;

    let l = naive_cholesky(&ky);
    let alpha = naive_solve(&ky, &y);
    let fit: f64 = y.data().iter().zip(alpha.data()).map(|(a, b)| a * b).sum();
    let logdet: f64 = (0..n).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let lml = -0.5 * fit - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln();

    let secs = start.elapsed().as_secs_f64();
    let gap = (bound - lml).abs();
    outcome(
        gap <= 1e-6 && secs < 1.0,
        format!("bound {bound:.10} vs exact {lml:.10}, |gap| {gap:.2e} (tol 1e-6, zero inducing jitter), {secs:.3}s"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let model = chain(101, &[2, 2, 2, 1], 5, Likelihood::gaussian(0.3), 12);
    let (x, y) = inputs(102, 12, 2);
    let samples = 2;
    let eps = model.draw_inner_noise(x.rows(), samples, &mut RngStream::new(103));
    let (_, tape) = elbo_gradient(&model, &x, &y, &eps, samples).unwrap();
    let params = model.params();
    let numeric = finite_difference(&params, 1e-5, |p| {
        let mut m = model.clone();
        m.set_params(p)?;
        Ok(elbo_with_noise(&m, &x, &y, &eps, samples)?.value)
    })
    .unwrap();
    let err = max_relative_error(tape.grads(), &numeric);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err < 1e-4 && secs < 30.0,
        format!(
            "{} parameter tensors, {} scalars, max relative error {err:.2e} (tol 1e-4), {secs:.2}s",
            params.len(),
            params.num_scalars()
        ),
    )
}

fn mc_unbiasedness() -> Outcome {
    let start = Instant::now();
    let spaced = |c: f64| DenseMatrix::from_fn(5, 1, |i, _| c * (i as f64 - 2.0));
    let inner = GPLayer::new(
        spaced(1.0),
        Kernel::Noisy(NoisyKernel::new(RbfArdKernel::new(1.0, &[1.0]), 1e-3)),
        MeanFunction::Linear { w: DenseMatrix::scalar(1.0) },
        DenseMatrix::column_vector(&[-1.0, 0.5, 0.8, 0.2, 1.0]),
        &[LowerTriangular::scaled_identity(5, 0.5)],
    )
    .unwrap();
    let outer = GPLayer::new(
        spaced(1.2),
        Kernel::Rbf(RbfArdKernel::new(1.5, &[0.9])),
        MeanFunction::Zero { output_dim: 1 },
        DenseMatrix::column_vector(&[0.3, -1.0, 1.2, 0.4, -0.6]),
        &[LowerTriangular::scaled_identity(5, 0.2)],
    )
    .unwrap();
    let likelihood = Likelihood::gaussian(0.05);
    let x = DenseMatrix::column_vector(&[-0.7, 0.4, 1.3]);
    let y = DenseMatrix::column_vector(&[0.1, 0.3, -0.5]);
    let model = DGPModel::new(vec![inner, outer], likelihood.clone(), x.rows()).unwrap();

    let hidden = marginal_posterior(&model.layers()[0], &x).unwrap();
    let quad = GaussHermite::new(50).unwrap();
    let oracle: f64 = (0..x.rows())
        .map(|i| {
            quad.expect(hidden.mean[(i, 0)], hidden.variance[(i, 0)], |h| {
                let c = marginal_posterior(&model.layers()[1], &DenseMatrix::scalar(h)).unwrap();
                expected_log_lik(&likelihood, &[c.mean[(0, 0)]], &[c.variance[(0, 0)]], &[y[(i, 0)]], 20).unwrap()
            })
        })
        .sum();

    let (chunks, per_chunk) = (1000usize, 100usize);
    let mut rng = RngStream::new(301);
    let estimates: Vec<f64> = (0..chunks)
        .map(|_| {
            let eps = model.draw_inner_noise(x.rows(), per_chunk, &mut rng);
            elbo_with_noise(&model, &x, &y, &eps, per_chunk).unwrap().data_fit
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / chunks as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (chunks - 1) as f64;
    let se = (var / chunks as f64).sqrt();
    let z = (mean - oracle) / se;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        z.abs() <= 3.0 && secs < 60.0,
        format!(
            "{} draws: mean {mean:.6} vs 50-node Gauss-Hermite {oracle:.6}, {z:+.2} standard errors (se {se:.1e}), {secs:.1}s",
            chunks * per_chunk
        ),
    )
}

fn locality() -> Outcome {
    let model = chain(401, &[2, 3, 2, 1], 6, Likelihood::gaussian(0.2), 9);
    let (x, y) = inputs(402, 9, 2);
    let perm = [4, 8, 1, 0, 6, 2, 7, 3, 5];
    let mut rng = RngStream::new(403);

    let eps: Vec<DenseMatrix> = [3, 2, 1]
        .iter()
        .map(|&w| DenseMatrix::from_vec(9, w, rng.standard_normal(9 * w)).unwrap())
        .collect();
    let base = propagate_with_noise(&model, &x, &eps).unwrap();
    let permuted_eps: Vec<_> = eps.iter().map(|e| e.select_rows(&perm)).collect();
    let moved = propagate_with_noise(&model, &x.select_rows(&perm), &permuted_eps).unwrap();
    let prop_err = base
        .iter()
        .zip(&moved)
        .map(|(a, b)| a.select_rows(&perm).max_abs_diff(b))
        .fold(0.0, f64::max);

    let samples = 16;
    let noise = model.draw_inner_noise(9, samples, &mut rng);
    let replica_perm: Vec<usize> = (0..samples).flat_map(|s| perm.iter().map(move |&i| s * 9 + i)).collect();
    let dens = predict_density_with_noise(&model, &x, &y, &noise, samples).unwrap();
    let moved_noise: Vec<_> = noise.iter().map(|e| e.select_rows(&replica_perm)).collect();
    let moved_dens =
        predict_density_with_noise(&model, &x.select_rows(&perm), &y.select_rows(&perm), &moved_noise, samples)
            .unwrap();
    let dens_err = perm
        .iter()
        .zip(&moved_dens)
        .map(|(&i, d)| (dens[i] - d).abs())
        .fold(0.0, f64::max);
    outcome(
        prop_err <= 1e-12 && dens_err <= 1e-12,
        format!("max deviation: propagate {prop_err:.1e}, predict_density {dens_err:.1e} (tol 1e-12)"),
    )
}

fn kl_suite() -> Outcome {
    let mut rng = RngStream::new(501);
    let mut min_kl = f64::INFINITY;
    let mut max_prior_kl = 0.0f64;
    for s in 0..1000u64 {
        let d_in = 1 + rng.below(3);
        let d_out = 1 + rng.below(3);
        let m = 1 + rng.below(8);
        let mut layer = random_layer(&mut rng, d_in, d_out, m, s % 2 == 0);
        min_kl = min_kl.min(kl_to_prior(&layer).unwrap());

        let mz = layer.mean_fn().apply(layer.z()).unwrap();
        layer.set_q_mu(&mz).unwrap();
        let chol = cholesky_with_jitter(&layer.inducing_covariance().unwrap(), DEFAULT_JITTER).unwrap();
        for d in 0..d_out {
            layer.set_q_sqrt(d, &chol).unwrap();
        }
        max_prior_kl = max_prior_kl.max(kl_to_prior(&layer).unwrap().abs());
    }
    outcome(
        min_kl >= 0.0 && max_prior_kl <= 1e-9,
        format!("1000 random states: min KL {min_kl:.3e}; max |KL| at the prior {max_prior_kl:.1e} (tol 1e-9)"),
    )
}

fn repo_root() -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    root.canonicalize().unwrap_or(root)
}

fn full_mode() -> bool {
    std::env::var("DGP_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

struct Benchmarks {
    source: String,
    dir: PathBuf,
}

impl Benchmarks {
    fn locate() -> Self {
        if full_mode() {
            let dir = std::env::temp_dir().join(format!("dgp-acceptance-{}", std::process::id()));
            return Self {
                source: format!("recomputed in {}", dir.display()),
                dir,
            };
        }
        let dir = std::env::var_os("DGP_ACCEPTANCE_RESULTS")
            .map(PathBuf::from)
            .unwrap_or_else(|| repo_root().join("results"));
        Self {
            source: format!("recorded in {}", dir.display()),
            dir,
        }
    }

    /// Result document for `name` (e.g. `boston-L2`), recomputing it in full
    /// mode.
    fn get(&self, dataset: &str, layers: usize, tag: &str) -> Result<RunResult, String> {
        let name = format!("{dataset}-L{layers}{tag}");
        if full_mode() {
            let path = repo_root().join("data").join(format!("{dataset}.csv"));
            if !path.exists() {
                return Err(format!("{} not found", path.display()));
            }
            let mut cfg = ExperimentConfig::new(path);
            cfg.task = Task::Regression;
            cfg.header = true;
            cfg.layers = layers;
            cfg.folds = 5;
            cfg.out = Some(self.dir.join(&name));
            if dataset == "energy" {
                cfg.target_columns = vec![8];
            }
            eprintln!("running {name} ...");
            return run_experiment(&cfg, &mut |f| eprintln!("  fold {} done", f.fold)).map_err(|e| e.to_string());
        }
        let path = self.dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).map_err(|_| format!("{} not found", path.display()))?;
        let r: RunResult = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let c = &r.config;
        let protocol = c.layers == layers
            && c.folds == 5
            && c.inducing == 100
            && c.iterations == 20_000
            && c.lr == 0.01
            && (c.test_fraction - 0.1).abs() < 1e-12
            && c.samples_pred == 100
            && r.dataset.name == dataset;
        if !protocol {
            return Err(format!("{} was not produced with the acceptance protocol", path.display()));
        }
        Ok(r)
    }
}

fn ll(r: &RunResult) -> f64 {
    r.aggregate.test_log_likelihood.mean
}

fn rmse(r: &RunResult) -> f64 {
    r.aggregate.test_rmse.as_ref().map_or(f64::NAN, |a| a.mean)
}

fn minutes(r: &RunResult) -> String {
    format!("{:.1} min", r.wall_clock_seconds / 60.0)
}

fn boston(b: &Benchmarks) -> Outcome {
    let (sgp, dgp) = match (b.get("boston", 1, ""), b.get("boston", 2, "")) {
        (Ok(s), Ok(d)) => (s, d),
        (s, d) => {
            let why: Vec<String> = [s.err(), d.err()].into_iter().flatten().collect();
            return outcome(false, format!("results unavailable: {}", why.join("; ")));
        }
    };
    let in_band = |v: f64| (-2.72..=-2.22).contains(&v);
    let pass = in_band(ll(&sgp)) && in_band(ll(&dgp)) && (2.0..=3.8).contains(&rmse(&dgp));
    outcome(
        pass,
        format!(
            "SGP test LL {:.3} ({}), DGP-2 test LL {:.3}, RMSE {:.3} ({}); bands LL [-2.72, -2.22], RMSE [2.0, 3.8]; {}",
            ll(&sgp),
            minutes(&sgp),
            ll(&dgp),
            rmse(&dgp),
            minutes(&dgp),
            b.source
        ),
    )
}

fn energy(b: &Benchmarks) -> Outcome {
    let data = repo_root().join("data/energy.csv");
    if !data.exists() && !full_mode() && b.get("energy", 1, "").is_err() {
        return outcome(false, "energy dataset not available in this environment (data/energy.csv missing)");
    }
    match (b.get("energy", 1, ""), b.get("energy", 2, "")) {
        (Ok(sgp), Ok(dgp)) => outcome(
            rmse(&dgp) <= 0.60 && (ll(&sgp) + 1.29).abs() <= 0.25,
            format!(
                "DGP-2 RMSE {:.3} (<= 0.60), SGP test LL {:.3} (-1.29 +/- 0.25)",
                rmse(&dgp),
                ll(&sgp)
            ),
        ),
        (s, d) => {
            let why: Vec<String> = [s.err(), d.err()].into_iter().flatten().collect();
            outcome(false, format!("results unavailable: {}", why.join("; ")))
        }
    }
}

fn depth(b: &Benchmarks) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for dataset in ["boston", "energy"] {
        match (b.get(dataset, 1, ""), b.get(dataset, 5, "")) {
            (Ok(sgp), Ok(deep)) => {
                let ok = ll(&deep) >= ll(&sgp) - 0.15;
                pass &= ok;
                parts.push(format!(
                    "{dataset}: DGP-5 {:.3} vs SGP {:.3} ({})",
                    ll(&deep),
                    ll(&sgp),
                    if ok { "ok" } else { "overfits" }
                ));
            }
            (s, d) => {
                pass = false;
                let why: Vec<String> = [s.err(), d.err()].into_iter().flatten().collect();
                parts.push(format!("{dataset}: unavailable ({})", why.join("; ")));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn determinism(b: &Benchmarks) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for layers in [1, 2] {
        match (b.get("boston", layers, ""), b.get("boston", layers, "-rerun")) {
            (Ok(first), Ok(second)) => {
                let strip = |r: &RunResult| {
                    let mut r = r.without_timing();
                    r.config.out = None;
                    serde_json::to_string(&r).unwrap()
                };
                let same = strip(&first) == strip(&second);
                pass &= same;
                parts.push(format!("boston-L{layers} {}", if same { "identical" } else { "DIFFERS" }));
            }
            (s, d) => {
                pass = false;
                let why: Vec<String> = [s.err(), d.err()].into_iter().flatten().collect();
                parts.push(format!("boston-L{layers} unavailable ({})", why.join("; ")));
            }
        }
    }
    outcome(pass, format!("{} (timing and output path excluded)", parts.join(", ")))
}

fn main() {
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += usize::from(ok);
    };
    tally(report(1, "collapsed-bound tightness", collapsed_bound()));
    tally(report(2, "gradient suite", gradient_suite()));
    tally(report(3, "Monte-Carlo unbiasedness", mc_unbiasedness()));
    tally(report(4, "locality", locality()));
    tally(report(5, "KL suite", kl_suite()));
    let bench = Benchmarks::locate();
    tally(report(6, "boston reproduction", boston(&bench)));
    tally(report(7, "energy reproduction", energy(&bench)));
    tally(report(8, "depth does not overfit", depth(&bench)));
    tally(report(9, "determinism", determinism(&bench)));
    println!("acceptance: {passed}/{total} criteria pass");
}
