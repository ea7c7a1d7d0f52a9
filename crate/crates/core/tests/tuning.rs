//! Temporary tuning probe (deleted before release).
use latentmark::attribution::*;
use latentmark::fingerprint::*;
use latentmark::latent_model::*;
use latentmark::metrics::MetricHandle;
use latentmark::rng::{normal_vec, substream};
use latentmark::spectral::*;

#[test]
#[ignore]
fn probe_single_decode_trace() {
    let g = build_generator(&GeneratorSpec::<f64>::default_desk_scale(1)).unwrap();
    let stats = estimate_stats(&g, 10_000, 71).unwrap();
    let basis = select_basis(&stats, 48, 64).unwrap();
    let cfg = FingerprintConfig::derive(&g, &stats, basis, 1.0).unwrap();
    let key = sample_keys(16, 1, 6).unwrap().entries[0].clone();
    let z = normal_vec::<f64, _>(&mut substream(50, 0), 32);
    let target = generate_fingerprinted(&g, &cfg, &z, &key).unwrap();
    let metric = MetricHandle::L2;
    let mut problem = AttributionProblem::new(&g, &cfg, &metric, &target);
    problem.restarts = 4;
    let t0 = std::time::Instant::now();
    let result = decode(&problem, 1).unwrap();
    println!("elapsed {:?} iters {} residual {:.3e}", t0.elapsed(), result.iterations_used, result.residual);
    println!("per-restart: {:?}", result.per_restart_residuals.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>());
    println!("exact {}", result.phi_hat == key.bits);
    println!("alpha_hat[0..6] {:?}", &result.alpha_hat[0..6]);
    println!("phi_relaxed {:?}", result.phi_relaxed.iter().map(|p| (p*100.0).round()/100.0).collect::<Vec<_>>());
}

#[test]
#[ignore]
fn probe_lm_from_truth() {
    let g = build_generator(&GeneratorSpec::<f64>::default_desk_scale(1)).unwrap();
    let stats = estimate_stats(&g, 10_000, 71).unwrap();
    let basis = select_basis(&stats, 48, 64).unwrap();
    let cfg = FingerprintConfig::derive(&g, &stats, basis, 1.0).unwrap();
    let key = sample_keys(16, 1, 6).unwrap().entries[0].clone();
    let z = normal_vec::<f64, _>(&mut substream(50, 0), 32);
    let w = g.map_latent(&z).unwrap();
    let alpha_true = project_alpha(&cfg, &w).unwrap();
    let target = generate_fingerprinted(&g, &cfg, &z, &key).unwrap();
    let metric = MetricHandle::L2;
    // Start from truth plus small noise via frozen-alpha decode at the true alpha.
    let mut problem = AttributionProblem::new(&g, &cfg, &metric, &target);
    problem.restarts = 1;
    let r = decode_with_frozen_alpha(&problem, &alpha_true, 3).unwrap();
    println!("frozen-at-truth: residual {:.3e} exact {} phi {:?}", r.residual, r.phi_hat == key.bits,
        r.phi_relaxed.iter().map(|p| (p*100.0).round()/100.0).collect::<Vec<_>>());
}
