//! Same-instant dependency cycles are found and named before anything runs.

use dcbd::compose::{detect_algebraic_loops, Diagram};
use dcbd::dynamics::{gain, scalar_plant, ScalarPlantParams};
use dcbd::time::time;

fn main() -> dcbd::Result<()> {
    let one = time(1, 1);
    let mut ring = Diagram::new();
    ring.add_block("A", gain(0.5, one)?)?;
    ring.add_block("B", gain(2.0, one)?)?;
    ring.connect("A.y", "B.u")?;
    ring.connect("B.y", "A.u")?;
    for cycle in detect_algebraic_loops(&ring)? {
        println!("loop: {}", cycle.join(" -> "));
    }

    // A strictly proper plant in the ring breaks the loop.
    let mut ok = Diagram::new();
    ok.add_block("A", gain(0.5, one)?)?;
    let plant = ScalarPlantParams { a: 0.9, b: 1.0, w_max: 0.0 };
    ok.add_block("P", scalar_plant(plant, 1.0, one)?)?;
    ok.connect("A.y", "P.u")?;
    ok.connect("P.y", "A.u")?;
    println!("with a plant in the ring: {} loops", detect_algebraic_loops(&ok)?.len());
    Ok(())
}
