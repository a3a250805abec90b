//! Times one fit on a simulated scenario-1 replicate.
//!
//! `cargo run --release --example timing -- hdlm-nested 2000 4000`

use std::time::Instant;

use hdlm::samplers::{fit, FitConfig, ModelKind};
use hdlm::simulation::{simulate_replicate, ScenarioSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: ModelKind = args.first().map_or("hdlm-nested", |s| s.as_str()).parse().expect("model name");
    let n: usize = args.get(1).map_or(2000, |s| s.parse().expect("n"));
    let iterations: usize = args.get(2).map_or(4000, |s| s.parse().expect("iterations"));
    let spec = ScenarioSpec { n, test_n: 1, sigma2: 10.0, ..ScenarioSpec::default() };
    let rep = simulate_replicate(&spec).expect("simulation");
    let cfg = FitConfig { model, iterations, burn_in: iterations / 2, thin: 4, ..FitConfig::default() };
    let start = Instant::now();
    let post = fit(&rep.train, None, &cfg).expect("fit");
    println!(
        "{model} n={n} iterations={iterations}: {:.1}s, {} draws, mean acceptance {:.3}",
        start.elapsed().as_secs_f64(),
        post.draws.len(),
        post.diagnostics[0].mean_acceptance()
    );
}
