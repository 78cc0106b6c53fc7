//! An output defined implicitly by `y = c y + u`, solved by fixed-point
//! iteration and differentiated through the solution.

use dcbd::blocks::{eval_output, Env, SignalSpec};
use dcbd::time::time;
use dcbd::{BlockDef, Tape, Tensor};

fn main() -> dcbd::Result<()> {
    let one = time(1, 1);
    for c in [-0.5, 0.0, 0.5, 0.9] {
        let b = BlockDef::builder("fp")
            .input(SignalSpec::discrete("u", 1, one))
            .output(SignalSpec::discrete("y", 1, one))
            .implicit_output(
                move |t, y, e| {
                    let cy = t.scale(y[0], c)?;
                    Ok(vec![t.add(cy, e.u[0])?])
                },
                1e-14,
                10_000,
            )
            .build()?;
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![1.0]));
        let env = Env { t: time(0, 1), x: &[], u: &[u], p: &[], batch: None };
        let y = eval_output(&mut tape, &b, &env)?[0];
        let s = tape.sum(y)?;
        let g = tape.backward(s)?.get(u).map(|g| g.item()).unwrap_or(0.0);
        println!("c = {c:+.1}: y = {:.6}, dy/du = {g:.10} (1/(1-c) = {:.10})", tape.value(y).item(), 1.0 / (1.0 - c));
    }
    Ok(())
}
