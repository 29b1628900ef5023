//! Median target accuracy of the three training variants over several seeds.
//!
//! `cargo run --release --example benchmark -- [seeds] [n_iter]`
//!
//! `BENCH_CFG` replaces the bundled config, `VARIANTS` picks a comma-separated
//! subset, `TRACE` prints head and GMM accuracy every 500 iterations.

use std::time::Instant;

use protogmm::config::TrainConfig;
use protogmm::data::{generate_domain_pair, DomainSpec};
use protogmm::pipeline::{evaluate, Predictor, Trainer};

fn base_config(seed: u64, n_iter: usize) -> TrainConfig {
    let body = match std::env::var("BENCH_CFG") {
        Ok(path) => std::fs::read_to_string(path).expect("config file"),
        Err(_) => include_str!("benchmark.cfg").to_string(),
    };
    let text = format!("seed = {seed}\nn_iter = {n_iter}\n{body}");
    TrainConfig::from_kv(&text).expect("benchmark config")
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().unwrap());
    let n_iter: usize = args.get(2).map_or(3000, |s| s.parse().unwrap());
    let variants = ["source-only", "self-training", "full"];
    let mut acc = vec![Vec::new(); 3];
    let t0 = Instant::now();
    for seed in 0..seeds {
        let spec = DomainSpec {
            seed,
            ..DomainSpec::benchmark()
        };
        let (src, tgt, labels) = generate_domain_pair(&spec).unwrap();
        for (v, name) in variants.iter().enumerate() {
            if std::env::var("VARIANTS").is_ok_and(|only| !only.split(',').any(|o| o == *name)) {
                continue;
            }
            let mut cfg = base_config(seed, n_iter);
            match *name {
                "source-only" => {
                    cfg.target_losses = false;
                    cfg.loss.lambda_contrast = 0.0;
                }
                "self-training" => cfg.loss.lambda_contrast = 0.0,
                _ => {}
            }
            let mut trainer = Trainer::new(cfg, src.clone(), tgt.clone()).unwrap();
            let trace = std::env::var("TRACE").is_ok();
            while !trainer.is_finished() {
                let r = trainer.step().unwrap();
                if trace && r.iteration.is_multiple_of(500) {
                    let st = trainer.state();
                    let h = evaluate(st, &tgt, &labels, Predictor::Head).unwrap().accuracy;
                    let g = evaluate(st, &tgt, &labels, Predictor::Gmm).map(|m| m.accuracy).unwrap_or(f64::NAN);
                    println!("  it {} head {h:.4} gmm {g:.4} conf {:.3} cs {:.3} ct {:.3} dis {} tprior {:?}",
                        r.iteration, r.confidence, r.contrast_source, r.contrast_target, r.pseudo_disagreements,
                        st.priors.delta_target.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>());
                }
            }
            let state = trainer.into_state();
            let m = evaluate(&state, &tgt, &labels, Predictor::Head).unwrap();
            let g = evaluate(&state, &tgt, &labels, Predictor::Gmm).map(|m| m.accuracy).unwrap_or(f64::NAN);
            println!("seed {seed} {name:<14} acc {:.4} gmm {:.4} ({:.1?})", m.accuracy, g, t0.elapsed());
            acc[v].push(m.accuracy);
        }
    }
    for (v, name) in variants.iter().enumerate() {
        let mut a = acc[v].clone();
        if a.is_empty() {
            continue;
        }
        a.sort_by(f64::total_cmp);
        println!("{name:<14} median {:.4}  all {:?}", a[a.len() / 2], acc[v]);
    }
}
