//! Loads a JSON diagram, flattens it and simulates it. Pass a path, or run
//! without arguments to use the bundled feedback example.

use dcbd::blocks::simulate;
use dcbd::compose::flatten;
use dcbd::dynamics::load_diagram;
use dcbd::time::time;

fn main() -> dcbd::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/diagrams/fig2.json").to_string());
    let text = std::fs::read_to_string(&path)?;
    let loaded = load_diagram(&text)?;
    let flat = flatten(&loaded.diagram)?;
    let tf = loaded.tf.unwrap_or(time(10, 1));
    let (_, y) = simulate(&flat, &loaded.inputs, tf)?;
    println!("{path}: {} blocks, {} connections", loaded.diagram.blocks.len(), loaded.diagram.connections.len());
    print!("{}", y.to_csv());
    Ok(())
}
