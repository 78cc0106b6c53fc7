//! Property tests: composition laws, flattening, loop detection, contract
//! algebra and integrator order.

mod common;

use common::{flatten_discrepancy, random_block, random_diagram, rng, run_by_name, RATES};
use dcbd::blocks::{execute_block, simulate, Bindings, InputSignal};
use dcbd::compose::{detect_algebraic_loops, flatten, interpret, parallel, serial, Diagram};
use dcbd::contracts::{
    bound_residual, check_ag_compatibility, eval_block_residuals, stability_residual, AgContract, PortBox,
};
use dcbd::dynamics::{gain, scalar_plant, vdp_trajectories, ScalarPlantParams, VdpParams};
use dcbd::time::{is_multiple, time};
use dcbd::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flatten_matches_interpreter(seed in any::<u64>()) {
        let (d, inputs) = random_diagram(seed);
        let gap = flatten_discrepancy(&d, &inputs, time(50, 1));
        prop_assert!(gap < 1e-12, "discrepancy {gap:e}");
    }

    /// Every discrete output of a flattened multirate diagram is constant
    /// between multiples of its period.
    #[test]
    fn discrete_outputs_hold_between_ticks(seed in any::<u64>()) {
        let (d, inputs) = random_diagram(seed);
        let flat = flatten(&d).unwrap();
        let (_, y) = simulate(&flat, &inputs, time(12, 1)).unwrap();
        for (spec, s) in flat.outputs.iter().zip(&y.signals) {
            for k in 1..y.times.len() {
                if !is_multiple(y.times[k], spec.period) {
                    prop_assert_eq!(&s.values[k], &s.values[k - 1], "{} changes at t = {}", s.name, y.times[k]);
                }
            }
        }
    }

    #[test]
    fn parallel_commutes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = time(RATES[r.gen_range(0..3)].0, RATES[r.gen_range(0..3)].1);
        let b1 = random_block(&mut r, "b1", p, true);
        let b2 = random_block(&mut r, "b2", p, true);
        let tf = time(20, 1);
        let ab = run_by_name(&parallel(b1.clone(), b2.clone()).unwrap(), tf);
        let ba = run_by_name(&parallel(b2, b1).unwrap(), tf);
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn parallel_associates(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = time(RATES[r.gen_range(0..3)].0, 1);
        let bs: Vec<_> = (1..=3).map(|i| random_block(&mut r, &format!("b{i}"), p, true)).collect();
        let tf = time(20, 1);
        let left = parallel(parallel(bs[0].clone(), bs[1].clone()).unwrap(), bs[2].clone()).unwrap();
        let right = parallel(bs[0].clone(), parallel(bs[1].clone(), bs[2].clone()).unwrap()).unwrap();
        prop_assert_eq!(run_by_name(&left, tf), run_by_name(&right, tf));
    }

    #[test]
    fn serial_associates(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = time(1, RATES[r.gen_range(0..3)].1);
        let bs: Vec<_> = (1..=3).map(|i| random_block(&mut r, &format!("b{i}"), p, false)).collect();
        let tf = time(20, 1);
        let s12 = serial(bs[0].clone(), bs[1].clone(), &[("y", "u")]).unwrap();
        let left = serial(s12, bs[2].clone(), &[("b2.y", "u")]).unwrap();
        let s23 = serial(bs[1].clone(), bs[2].clone(), &[("y", "u")]).unwrap();
        let right = serial(bs[0].clone(), s23, &[("y", "b2.u")]).unwrap();
        prop_assert_eq!(run_by_name(&left, tf), run_by_name(&right, tf));
    }

    /// An algebraic loop exists iff the same-instant dependency graph over
    /// outputs has a cycle; every reported cycle is such a cycle.
    #[test]
    fn loop_detection_matches_brute_force(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=5);
        let mut d = Diagram::new();
        for i in 0..n {
            let name = format!("b{i}");
            d.add_block(name.clone(), random_block(&mut r, &name, time(1, 1), true)).unwrap();
        }
        for _ in 0..2 * n {
            let (sb, db) = (r.gen_range(0..n), r.gen_range(0..n));
            let so = r.gen_range(0..d.blocks[sb].outputs.len());
            let di = r.gen_range(0..d.blocks[db].inputs.len());
            let _ = d.connect(
                &format!("b{sb}.{}", d.blocks[sb].outputs[so].name),
                &format!("b{db}.{}", d.blocks[db].inputs[di].name),
            );
        }
        // Outputs as nodes; (sb,so) -> (db,dj) when wired into an input of db
        // with feedthrough to dj.
        let nodes: Vec<(usize, usize)> =
            (0..n).flat_map(|b| (0..d.blocks[b].outputs.len()).map(move |o| (b, o))).collect();
        let idx = |b: usize, o: usize| nodes.iter().position(|x| *x == (b, o)).unwrap();
        let m = nodes.len();
        let mut reach = vec![vec![false; m]; m];
        let conns = d.indexed_connections().unwrap();
        for &((sb, so), (db, di)) in &conns {
            for (dj, ft) in d.blocks[db].feedthrough[di].iter().enumerate() {
                if *ft {
                    reach[idx(sb, so)][idx(db, dj)] = true;
                }
            }
        }
        let edge = reach.clone();
        for k in 0..m {
            for i in 0..m {
                for j in 0..m {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let has_cycle = (0..m).any(|i| reach[i][i]);
        let cycles = detect_algebraic_loops(&d).unwrap();
        prop_assert_eq!(has_cycle, !cycles.is_empty());
        let name_of = |s: &str| {
            let (b, p) = s.split_once('.').unwrap();
            let bi = d.block_index(b).unwrap();
            idx(bi, d.blocks[bi].outputs.iter().position(|o| o.name == p).unwrap())
        };
        for c in &cycles {
            for w in 0..c.len() {
                let (a, b) = (name_of(&c[w]), name_of(&c[(w + 1) % c.len()]));
                prop_assert!(edge[a][b], "{} -> {} is not a same-instant dependency", c[w], c[(w + 1) % c.len()]);
            }
        }
    }

    /// A `compatible` verdict admits no sampled output outside the target's
    /// assumption; an `incompatible` verdict names a bound that really sticks out.
    #[test]
    fn ag_compatibility_agrees_with_sampling(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dim = r.gen_range(1..=3);
        let mut boxes = |name: &str| {
            let iv: Vec<(f64, f64)> = (0..dim)
                .map(|_| {
                    let lo = r.gen_range(-2.0..1.0);
                    (lo, lo + r.gen_range(0.0..2.0))
                })
                .collect();
            PortBox::new(name, iv.iter().map(|(l, h)| dcbd::contracts::Interval::new(*l, *h).unwrap()).collect())
        };
        let g = boxes("y");
        let a = boxes("u");
        let src = AgContract::new(vec![], vec![g.clone()]);
        let dst = AgContract::new(vec![a.clone()], vec![]);
        let rep = check_ag_compatibility(&src, &dst, &[(0, 0)]).unwrap();
        if rep.satisfied {
            for _ in 0..1000 {
                let v: Vec<f64> = g.bounds.iter().map(|b| if b.lo == b.hi { b.lo } else { r.gen_range(b.lo..=b.hi) }).collect();
                prop_assert!(a.contains(&v), "{v:?} escapes {a:?}");
            }
        } else {
            let stick_out = g.bounds.iter().zip(&a.bounds).any(|(x, y)| x.lo < y.lo || x.hi > y.hi);
            prop_assert!(stick_out);
            prop_assert!(rep.witness.is_some());
        }
    }

    /// The flattened block's residual vector is the concatenation of the
    /// sub-blocks' residuals on the same run.
    #[test]
    fn composed_residuals_concatenate(kappa in 0.0f64..2.0, bound in 0.1f64..2.0, x0 in -2.0f64..2.0) {
        let one = time(1, 1);
        let mut d = Diagram::new();
        d.add_block("C", gain(kappa, one).unwrap().with_residual(stability_residual(1.02, 1.0, 0.05))).unwrap();
        let plant = ScalarPlantParams { a: 1.02, b: 1.0, w_max: 0.0 };
        d.add_block("P", scalar_plant(plant, x0, one).unwrap().with_residual(bound_residual(bound, 0))).unwrap();
        d.connect("C.y", "P.u").unwrap();
        let inputs = [InputSignal::scalar(0.3), InputSignal::scalar(0.0)];
        let tf = time(12, 1);

        let flat = flatten(&d).unwrap();
        let mut tape = Tape::new();
        let bind = Bindings::constants(&mut tape, &flat);
        let ex = execute_block(&mut tape, &flat, &bind, &inputs, tf).unwrap();
        let composed = eval_block_residuals(&mut tape, &flat, &ex).unwrap().unwrap();
        let composed = tape.value(composed.value).data().to_vec();

        let mut t2 = Tape::new();
        let bindings: Vec<Bindings> = d.blocks.iter().map(|b| Bindings::constants(&mut t2, b)).collect();
        let dx = interpret(&mut t2, &d, &bindings, &inputs, tf).unwrap();
        let mut parts = Vec::new();
        for (b, blk) in d.blocks.iter().enumerate() {
            let r = eval_block_residuals(&mut t2, blk, &dx.blocks[b]).unwrap().unwrap();
            parts.extend_from_slice(t2.value(r.value).data());
        }
        prop_assert_eq!(composed, parts);
    }

    /// Global RK4 error shrinks like `h^4`: halving the step divides the
    /// worst error along the trajectory by about 16.
    #[test]
    fn rk4_global_order_four(mu in 0.5f64..2.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let run = |substeps: usize| {
            let p = VdpParams { mu, tau: time(1, 5), substeps };
            vdp_trajectories(p, &Tensor::matrix(1, 2, vec![a, b]), 10).unwrap()
        };
        let reference = run(256);
        let err = |s: usize| {
            run(s)
                .iter()
                .zip(&reference)
                .map(|(x, r)| x.data().iter().zip(r.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        };
        let slope = (err(8) / err(16)).log2();
        prop_assert!((slope - 4.0).abs() < 0.4, "slope {slope}");
    }
}
