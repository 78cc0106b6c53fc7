//! Stability-certified tuning of a scalar feedback gain with projected
//! gradient steps.

use dcbd::optimize::{run_example1, Example1Config};

fn main() -> dcbd::Result<()> {
    let out = run_example1(&Example1Config::default())?;
    let m = &out.metrics;
    println!("admissible interval [{:.4}, {:.4}]", m.interval.0, m.interval.1);
    println!("kappa: {:.6} -> {:.6} (pole {:.3e})", m.kappa_initial, m.kappa_star, m.closed_loop_pole);
    println!("worst residual over iterates: {:.6}", m.max_iterate_residual);
    println!("ISS bound {:.6}, max |y_k| for k >= {}: {:.6}", m.iss_bound, m.transient_k0, m.max_tail_abs_y);
    println!("untuned: y_0 = {:.3}, y_N = {:.3}", m.untuned_y0, m.untuned_y_final);
    Ok(())
}
