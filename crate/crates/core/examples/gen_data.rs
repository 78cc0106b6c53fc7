//! Van der Pol trajectories sampled with RK4, written as CSV.

use dcbd::dynamics::{dataset_to_csv, vdp_trajectories, VdpParams};
use dcbd::time::time;
use dcbd::Tensor;

fn main() -> dcbd::Result<()> {
    let p = VdpParams { mu: 1.0, tau: time(1, 10), substeps: 4 };
    let x0 = Tensor::matrix(2, 2, vec![1.0, 0.0, -0.5, 1.5]);
    let traj = vdp_trajectories(p, &x0, 50)?;
    print!("{}", dataset_to_csv(&traj));
    Ok(())
}
