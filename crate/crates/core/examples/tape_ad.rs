//! Reverse-mode gradients on the tape, checked against central differences.

use dcbd::tape::check_gradient;
use dcbd::{Tape, Tensor};

fn main() -> dcbd::Result<()> {
    // f(W, x) = sum(tanh(W x))^2
    let w0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]);
    let x0 = Tensor::vector(vec![1.0, -0.5, 2.0]);
    let f = |tape: &mut Tape, ids: &[dcbd::NodeId]| {
        let z = tape.matmul(ids[0], ids[1])?;
        let h = tape.tanh(z)?;
        let s = tape.sum(h)?;
        tape.mul(s, s)
    };

    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone());
    let x = tape.leaf(x0.clone());
    let y = f(&mut tape, &[w, x])?;
    let grads = tape.backward(y)?;
    println!("f = {:.6}", tape.value(y).item());
    println!("df/dW = {:?}", grads.get(w).map(|g| g.data().to_vec()));
    println!("df/dx = {:?}", grads.get(x).map(|g| g.data().to_vec()));

    let report = check_gradient(f, &[w0, x0], 1e-5, 1e-5)?;
    println!(
        "finite-difference check: {} coordinates, max rel err {:.2e}, {}",
        report.checked,
        report.max_rel_error,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    println!("\n{}", tape.dump());
    Ok(())
}
