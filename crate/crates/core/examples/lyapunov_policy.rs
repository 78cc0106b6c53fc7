//! Joint training of a bounded neural policy and an ICNN Lyapunov
//! certificate on the Van der Pol oscillator.

use dcbd::optimize::{run_example2, Example2Config};

fn main() -> dcbd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DCBD_LOG")).init();
    let mut cfg = Example2Config::default();
    if let Some(n) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.train.iterations = n;
    }
    let out = run_example2(&cfg)?;
    let m = &out.metrics;
    println!("final objective {:.4}", m.final_objective);
    println!("worst Lyapunov residual on final batch: {:.3e}", m.final_batch_worst_residual);
    println!("max |u|: train {:.4}, held-out {:.4}", m.final_batch_max_abs_u, m.held_out_max_abs_u);
    println!("held-out dV < 0 on {:.1}% of steps", 100.0 * m.held_out_dv_negative_fraction);
    println!("held-out median |x_N|/|x_0|: {:.4}", m.held_out_median_contraction);
    Ok(())
}
