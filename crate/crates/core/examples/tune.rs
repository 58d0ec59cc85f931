// scratch tuning harness, not part of the deliverable
use ndvae_core::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(|s| s.as_str()).unwrap_or("traces");
    match what {
        "traces" => traces(&args[2..]),
        "fig4" => fig4(&args[2..]),
        "batch2d" => batch2d(&args[2..]),
        other => eprintln!("unknown: {other}"),
    }
}

fn arg_f64(args: &[String], name: &str, default: f64) -> f64 {
    args.iter()
        .position(|a| a == name)
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn traces(args: &[String]) {
    let iters = arg_f64(args, "--iters", 30000.0) as usize;
    let eta = arg_f64(args, "--eta", 1.0);
    let c = arg_f64(args, "--c", 1.0);
    let lr = arg_f64(args, "--lr", 1e-3);
    let grid = arg_f64(args, "--grid", 32.0) as usize;
    for method in [
        ConstraintMethod::Penalty,
        ConstraintMethod::Bdmm,
        ConstraintMethod::Mdmm,
    ] {
        let cfg = TraceConfig {
            method,
            iterations: iters,
            grid_size: grid,
            eta,
            c,
            learning_rate: lr,
            seed: 7,
            n_points: 256,
            hidden_units: 64,
            record_every: 1,
        };
        let t0 = Instant::now();
        let run = run_trace_experiment(&cfg).unwrap();
        let sustained = run.sustained_below(1e-2);
        // max sign changes over grid series of constraint 1
        let n_grid = run.records[0].residuals[1].len();
        let mut max_sc = 0;
        for g in 0..n_grid {
            let series = run.grid_series(1, g);
            max_sc = max_sc.max(sign_changes(&series));
        }
        println!(
            "{method:?}: final_max_g={:.5} sustained<1e-2 @ {:?} max_sign_changes={} loss={:.4} ({:.1}s)",
            run.final_max_g,
            sustained,
            max_sc,
            run.records.last().unwrap().data_loss,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn fig4(args: &[String]) {
    let iters = arg_f64(args, "--iters", 20000.0) as usize;
    let lr = arg_f64(args, "--lr", 1e-3);
    let seed = arg_f64(args, "--seed", 1.0) as u64;
    let spec = SyntheticSpec::new(Generator::Fig4Panel, 500, 0.05, seed).unwrap();
    let (data, truth) = generate_fig4(&spec).unwrap();
    let table = truth.fractions(2, 1_000_000, 17).unwrap();
    let only = args
        .iter()
        .position(|a| a == "--only")
        .and_then(|i| args.get(i + 1))
        .cloned()
        .unwrap_or_default();
    for variant in [
        DecoderVariant::NdConstrained,
        DecoderVariant::NdUnconstrained,
        DecoderVariant::Linear,
    ] {
        if !only.is_empty() && !format!("{variant:?}").to_lowercase().contains(&only) {
            continue;
        }
        let masks_on = arg_f64(args, "--masks", 1.0) != 0.0;
        let c0 = arg_f64(args, "--c0", 5.0);
        let eta = arg_f64(args, "--eta", 0.02);
        let growth = arg_f64(args, "--growth", 1.01);
        let cfg = TrainConfig {
            iterations: iters,
            seed,
            variant,
            masks: masks_on,
            eta,
            schedule: PenaltySchedule { c0, growth, ..Default::default() },
            adam: AdamParams::with_learning_rate(lr),
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let result = fit(&data, &cfg).unwrap();
        let report = result.variance_report(&data).unwrap();
        let score = score_against_truth(&report, &table).unwrap();
        // check features 1-5 biggest fraction is z
        let z_idx = report.term_labels.iter().position(|l| l == "z").unwrap();
        let mut z_dominant = 0;
        for j in 0..5 {
            let zf = report.fractions[[j, z_idx]];
            let best = (0..report.term_labels.len())
                .map(|t| report.fractions[[j, t]])
                .fold(f64::NEG_INFINITY, f64::max);
            if zf == best {
                z_dominant += 1;
            }
        }
        println!(
            "{variant:?}: mean_l1={:.4} max_l1={:.4} max_g={:.5} status={:?} z_dom={}/5 elbo={:.1} ({:.1}s)",
            score.mean_l1,
            score.max_l1,
            result.tolerance.max_abs_residual,
            result.status,
            z_dominant,
            result.log.last().map(|r| r.elbo).unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
        // representative feature fractions (est vs truth)
        for j in [0usize, 5, 10, 15, 20] {
            let est: Vec<String> = (0..report.term_labels.len())
                .map(|t| format!("{}={:.3}", report.term_labels[t], report.fractions[[j, t]]))
                .collect();
            let tru: Vec<String> = (0..table.term_labels.len())
                .map(|t| format!("{}={:.3}", table.term_labels[t], table.fractions[[j, t]]))
                .collect();
            println!("  f{}: est [{}] noise={:.3} | truth [{}] noise={:.3}",
                j + 1, est.join(" "), report.noise_fraction[j], tru.join(" "), table.noise_fraction[j]);
        }
        if let Some(m) = &result.masks {
            let e = m.expected();
            let means: Vec<String> = (0..m.n_terms())
                .map(|t| format!("{:.3}", e.column(t).sum() / e.nrows() as f64))
                .collect();
            println!("  mean expected masks per term: [{}]", means.join(" "));
        }
        // latent quality: rank correlation of posterior mean z vs a strong z feature (f6 = 0.5 z + small c)
        let zs: Vec<f64> = result.posterior_mean_z.column(0).to_vec();
        let f6: Vec<f64> = data.y.column(5).to_vec();
        println!("  |spearman(z_post, f6)| = {:.3}", spearman(&zs, &f6).unwrap().abs());
        let log = result.log;
        let k = log.len();
        let mut idxs: Vec<usize> = vec![0, k / 8, k / 4, 3 * k / 8, k / 2, 5 * k / 8, 3 * k / 4, 7 * k / 8, k - 1];
        idxs.dedup();
        for idx in idxs {
            let r = &log[idx];
            println!("  it {:>6}: elbo={:>10.1} recon={:>10.1} kl_z={:>8.1} kl_s={:>7.2} max_g={:.4} c_t={:.2}",
                r.iteration, r.elbo, r.reconstruction, r.kl_z, r.kl_masks, r.max_residual, r.c_t);
        }
    }
}

fn batch2d(args: &[String]) {
    let iters = arg_f64(args, "--iters", 20000.0) as usize;
    let lr = arg_f64(args, "--lr", 1e-3);
    let seed = arg_f64(args, "--seed", 1.0) as u64;
    let spec = SyntheticSpec::new(Generator::Batch2d, 500, 0.05, seed).unwrap();
    let (data, _) = generate_batch2d(&spec).unwrap();
    let labels: Vec<f64> = data.covariates.column(0).to_vec();
    for variant in [DecoderVariant::NdConstrained, DecoderVariant::Cvae] {
        let cfg = TrainConfig {
            iterations: iters,
            seed,
            z_dim: 2,
            variant,
            adam: AdamParams::with_learning_rate(lr),
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let result = fit(&data, &cfg).unwrap();
        let acc = knn_cv_accuracy(&result.posterior_mean_z.view(), &labels, 5, 5).unwrap();
        println!(
            "{variant:?}: knn_acc={:.3} max_g={:.5} status={:?} elbo={:.1} ({:.1}s)",
            acc,
            result.tolerance.max_abs_residual,
            result.status,
            result.log.last().map(|r| r.elbo).unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
    }
}
