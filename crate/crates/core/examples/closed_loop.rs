//! A scalar plant under proportional feedback, built with `serial` and
//! `feedback`, simulated and printed as CSV.

use dcbd::blocks::{simulate, InputSignal};
use dcbd::compose::{feedback, serial};
use dcbd::dynamics::{gain, scalar_plant, sum, ScalarPlantParams};
use dcbd::time::time;

fn main() -> dcbd::Result<()> {
    let one = time(1, 1);
    let plant = ScalarPlantParams { a: 1.02, b: 1.0, w_max: 0.0 };
    let mut e = sum(1, one)?;
    e.name = "E".into();
    let mut c = gain(0.6, one)?;
    c.name = "C".into();
    let mut p = scalar_plant(plant, 1.0, one)?;
    p.name = "P".into();

    // E.e = r - y, C.u = E.e, P.u = C.y, and P.y closes the loop into E.y.
    // The remaining inputs are the reference E.r and the disturbance P.w.
    let ec = serial(e, c, &[("e", "u")])?;
    let open = serial(ec, p, &[("C.y", "u")])?;
    let closed = feedback(open, &[("P.y", "E.y")])?;
    println!("inputs: {:?}", closed.inputs.iter().map(|s| &s.name).collect::<Vec<_>>());

    let (x, y) = simulate(&closed, &[InputSignal::scalar(0.0), InputSignal::scalar(0.0)], time(15, 1))?;
    print!("{}", y.to_csv());
    println!("final state: {:?}", x.signals[0].values.last().map(|v| v.data().to_vec()));
    Ok(())
}
