//! Generators and oracles shared by the property and acceptance suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dcbd::blocks::{simulate, Bindings, InputSignal};
use dcbd::compose::{detect_algebraic_loops, flatten, interpret, Diagram};
use dcbd::dynamics::{gain, saturate, scalar_plant, sum, ScalarPlantParams};
use dcbd::time::{time, to_f64};
use dcbd::{BlockDef, Tape, Tensor, Time};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RATES: [(i64, i64); 3] = [(1, 1), (1, 2), (2, 1)];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth deterministic input keyed by the port name.
pub fn signal_for(name: &str) -> InputSignal {
    let h = name.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    let freq = 0.3 + (h % 97) as f64 / 97.0;
    let phase = (h % 13) as f64 / 13.0;
    InputSignal::function(move |t: Time| Tensor::vector(vec![(freq * to_f64(t) + phase).sin()]))
}

/// One scalar block: gain, sum, saturating clamp or scalar plant.
pub fn random_block(r: &mut ChaCha8Rng, name: &str, period: Time, allow_sum: bool) -> BlockDef {
    let kinds = if allow_sum { 4 } else { 3 };
    let mut b = match r.gen_range(0..kinds) {
        0 => gain(r.gen_range(-1.0..1.0), period),
        1 => {
            let lo = r.gen_range(-1.0..0.0);
            saturate(1, lo, lo + r.gen_range(0.2..1.5), period)
        }
        2 => scalar_plant(
            ScalarPlantParams {
                a: r.gen_range(-0.9..0.9),
                b: r.gen_range(0.1..1.0),
                w_max: 0.0,
            },
            r.gen_range(-1.0..1.0),
            period,
        ),
        _ => sum(1, period),
    }
    .unwrap();
    b.name = name.to_string();
    b
}

/// A loop-free diagram of up to 6 blocks on up to 3 rates, plus one input
/// signal per external input.
pub fn random_diagram(seed: u64) -> (Diagram, Vec<InputSignal>) {
    let mut r = rng(seed);
    let n = r.gen_range(1..=6);
    let n_rates = r.gen_range(1..=3);
    let mut d = Diagram::new();
    for i in 0..n {
        let (p, q) = RATES[r.gen_range(0..n_rates)];
        let name = format!("b{i}");
        d.add_block(name.clone(), random_block(&mut r, &name, time(p, q), true)).unwrap();
    }
    for _ in 0..3 * n {
        let sb = r.gen_range(0..n);
        let db = r.gen_range(0..n);
        let so = r.gen_range(0..d.blocks[sb].outputs.len());
        let di = r.gen_range(0..d.blocks[db].inputs.len());
        let from = format!("b{sb}.{}", d.blocks[sb].outputs[so].name);
        let to = format!("b{db}.{}", d.blocks[db].inputs[di].name);
        if d.connect(&from, &to).is_ok() && !detect_algebraic_loops(&d).unwrap().is_empty() {
            d.connections.pop();
        }
    }
    let inputs = d.external_input_names().unwrap().iter().map(|n| signal_for(n)).collect();
    (d, inputs)
}

/// Largest `|flatten-then-simulate - interpret|` over every block output.
pub fn flatten_discrepancy(d: &Diagram, inputs: &[InputSignal], tf: Time) -> f64 {
    let flat = flatten(d).unwrap();
    let (_, y) = simulate(&flat, inputs, tf).unwrap();
    let mut tape = Tape::new();
    let bindings: Vec<Bindings> = d.blocks.iter().map(|b| Bindings::constants(&mut tape, b)).collect();
    let ex = interpret(&mut tape, d, &bindings, inputs, tf).unwrap();
    assert_eq!(y.times, ex.grid, "grids differ");
    let mut worst = 0.0f64;
    for (b, blk) in d.blocks.iter().enumerate() {
        let tr = ex.blocks[b].output_trajectory(&tape, blk);
        for s in &tr.signals {
            let q = format!("{}.{}", blk.name, s.name);
            let flat_s = y.signal(&q).or_else(|| y.signal(&s.name)).unwrap_or_else(|| panic!("missing {q}"));
            for (a, b) in flat_s.values.iter().zip(&s.values) {
                for (x, z) in a.data().iter().zip(b.data()) {
                    worst = worst.max((x - z).abs());
                }
            }
        }
    }
    worst
}

/// Output and state series by qualified name, inputs driven by
/// [`signal_for`].
pub fn run_by_name(b: &BlockDef, tf: Time) -> BTreeMap<String, Vec<Vec<f64>>> {
    let inputs: Vec<InputSignal> = b.inputs.iter().map(|s| signal_for(&s.name)).collect();
    let (x, y) = simulate(b, &inputs, tf).unwrap();
    let mut out = BTreeMap::new();
    for (prefix, tr) in [("out:", &y), ("state:", &x)] {
        for s in &tr.signals {
            out.insert(
                format!("{prefix}{}", s.name),
                s.values.iter().map(|v| v.data().to_vec()).collect(),
            );
        }
    }
    out
}
