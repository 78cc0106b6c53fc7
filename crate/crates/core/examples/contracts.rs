//! Residual contracts on a closed loop, and assume-guarantee boxes checked
//! across a wire.

use dcbd::blocks::{execute_block, Bindings, InputSignal};
use dcbd::compose::{flatten, Diagram};
use dcbd::contracts::{bound_residual, check_ag_compatibility, check_block_contracts, stability_residual, AgContract, PortBox};
use dcbd::dynamics::{gain, scalar_plant, sum, ScalarPlantParams};
use dcbd::time::time;
use dcbd::Tape;

fn main() -> dcbd::Result<()> {
    let one = time(1, 1);
    let plant = ScalarPlantParams { a: 1.02, b: 1.0, w_max: 0.0 };
    for kappa in [0.6, 2.5] {
        let mut d = Diagram::new();
        d.add_block("C", gain(kappa, one)?.with_residual(stability_residual(1.02, 1.0, 0.05)))?;
        d.add_block("P", scalar_plant(plant, 1.0, one)?.with_residual(bound_residual(1.0, 0)))?;
        d.add_block("S", sum(1, one)?)?;
        d.connect("S.e", "C.u")?;
        d.connect("C.y", "P.u")?;
        d.connect("P.y", "S.y")?;
        let flat = flatten(&d)?;
        let mut tape = Tape::new();
        let bind = Bindings::constants(&mut tape, &flat);
        // Free inputs: the disturbance P.w and the reference S.r.
        let inputs = [InputSignal::scalar(0.0), InputSignal::scalar(0.0)];
        let ex = execute_block(&mut tape, &flat, &bind, &inputs, time(10, 1))?;
        for r in check_block_contracts(&mut tape, &flat, &ex)? {
            println!(
                "kappa {kappa}: {} satisfied={} worst={:.4} at {:?}",
                r.contract, r.satisfied, r.worst, r.location
            );
        }
    }

    let sat = AgContract::new(vec![], vec![PortBox::uniform("S.y", 1, -2.0, 2.0)?]);
    for bound in [3.0, 1.0] {
        let consumer = AgContract::new(vec![PortBox::uniform("G.u", 1, -bound, bound)?], vec![]);
        let r = check_ag_compatibility(&sat, &consumer, &[(0, 0)])?;
        println!("guarantee [-2, 2] into assumption [-{bound}, {bound}]: {} {:?}", r.satisfied, r.witness);
    }
    Ok(())
}
