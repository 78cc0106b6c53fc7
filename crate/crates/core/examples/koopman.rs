//! Deep Koopman identification with a latent operator that is stable by
//! construction.

use dcbd::optimize::{run_example3, Example3Config};

fn main() -> dcbd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DCBD_LOG")).init();
    let mut cfg = Example3Config::default();
    if let Some(n) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.train.iterations = n;
    }
    let out = run_example3(&cfg)?;
    let m = &out.metrics;
    println!("final objective {:.4}", m.final_objective);
    println!("spectral radius: initial {:.4}, max over iterates {:.4}", m.initial_spectral_radius, m.max_spectral_radius);
    for e in &m.eigenvalues {
        println!("  eig {:+.4} {:+.4}i  |{:.4}|", e.re, e.im, e.modulus);
    }
    println!("500-step rollout MSE: x1 {:.4}, x2 {:.4}", m.rollout_mse[0], m.rollout_mse[1]);
    Ok(())
}
