use super::*;
use crate::blocks::{execute_block, simulate, Bindings, InputSignal, SignalSpec};
use crate::contracts::{stability_residual, AgContract, PortBox};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::time::{time, Time};

fn one() -> Time {
    time(1, 1)
}

fn gain(name: &str, k: f64) -> BlockDef {
    BlockDef::builder(name)
        .input(SignalSpec::discrete("u", 1, one()))
        .output(SignalSpec::discrete("y", 1, one()))
        .param("k", Tensor::scalar(k))
        .output_map(|t, e| Ok(vec![t.mul(e.p[0], e.u[0])?]))
        .build()
        .unwrap()
}

fn sum() -> BlockDef {
    BlockDef::builder("sum")
        .input(SignalSpec::discrete("r", 1, one()))
        .input(SignalSpec::discrete("y", 1, one()))
        .output(SignalSpec::discrete("e", 1, one()))
        .output_map(|t, e| Ok(vec![t.sub(e.u[0], e.u[1])?]))
        .build()
        .unwrap()
}

fn plant(a: f64, b: f64, y0: f64) -> BlockDef {
    BlockDef::builder("plant")
        .input(SignalSpec::discrete("u", 1, one()))
        .state(SignalSpec::discrete("x", 1, one()), Tensor::vector(vec![y0]))
        .output(SignalSpec::discrete("y", 1, one()))
        .param("a", Tensor::scalar(a))
        .param("b", Tensor::scalar(b))
        .transition(one(), &[0], |t, e| {
            let ax = t.mul(e.p[0], e.x[0])?;
            let bu = t.mul(e.p[1], e.u[0])?;
            Ok(vec![t.add(ax, bu)?])
        })
        .output_map(|_, e| Ok(vec![e.x[0]]))
        .no_feedthrough()
        .build()
        .unwrap()
}

fn fig2(kappa: f64) -> Diagram {
    let mut d = Diagram::new();
    d.add_block("sum", sum()).unwrap();
    d.add_block("C", gain("C", kappa)).unwrap();
    d.add_block("P", plant(1.02, 1.0, 1.0)).unwrap();
    d.connect("sum.e", "C.u").unwrap();
    d.connect("C.y", "P.u").unwrap();
    d.connect("P.y", "sum.y").unwrap();
    d
}

fn column(tr: &crate::blocks::Trajectory, name: &str) -> Vec<f64> {
    tr.column(name, 0).unwrap_or_else(|| panic!("no signal {name}"))
}

#[test]
fn connect_checks_ports() {
    let mut d = Diagram::new();
    d.add_block("a", gain("a", 1.0)).unwrap();
    d.add_block("b", gain("b", 1.0)).unwrap();
    let wide = BlockDef::builder("w")
        .input(SignalSpec::discrete("u", 1, one()))
        .output(SignalSpec::discrete("y", 2, one()))
        .output_map(|t, e| Ok(vec![t.concat_last(&[e.u[0], e.u[0]])?]))
        .build()
        .unwrap();
    d.add_block("w", wide).unwrap();
    d.connect("a.y", "b.u").unwrap();
    assert!(matches!(d.connect("w.y", "a.u"), Err(Error::DimMismatch { .. })));
    assert!(matches!(d.connect("a.y", "b.u"), Err(Error::InputAlreadyDriven(_))));
    assert!(matches!(d.connect("a.nope", "w.u"), Err(Error::UnknownPort(_))));
    assert!(matches!(d.connect("a", "w.u"), Err(Error::UnknownPort(_))));
}

#[test]
fn incommensurate_discrete_rates_are_rejected() {
    let fast = BlockDef::builder("f")
        .input(SignalSpec::discrete("u", 1, time(1, 2)))
        .output(SignalSpec::discrete("y", 1, time(1, 2)))
        .output_map(|_, e| Ok(vec![e.u[0]]))
        .build()
        .unwrap();
    let slow = BlockDef::builder("s")
        .input(SignalSpec::discrete("u", 1, time(1, 3)))
        .output(SignalSpec::discrete("y", 1, time(1, 3)))
        .output_map(|_, e| Ok(vec![e.u[0]]))
        .build()
        .unwrap();
    let mut d = Diagram::new();
    d.add_block("f", fast).unwrap();
    d.add_block("s", slow).unwrap();
    assert!(matches!(d.connect("f.y", "s.u"), Err(Error::KindMismatch { .. })));
}

#[test]
fn parallel_gains() {
    let p = parallel(gain("g2", 2.0), gain("g3", 3.0)).unwrap();
    assert_eq!(p.inputs.len(), 2);
    let (_, y) = simulate(&p, &[InputSignal::scalar(1.0), InputSignal::scalar(1.0)], one()).unwrap();
    assert_eq!(column(&y, "g2.y"), vec![2.0, 2.0]);
    assert_eq!(column(&y, "g3.y"), vec![3.0, 3.0]);
}

#[test]
fn parallel_state_dims_add_up() {
    let p = parallel(plant(1.0, 1.0, 0.0), plant(1.0, 1.0, 0.0)).unwrap();
    assert_eq!(p.states.len(), 2);
    assert_eq!(p.states[1].name, "plant.x~2");
}

#[test]
fn serial_gains_and_feedthrough() {
    let s = serial(gain("g2", 2.0), gain("g3", 3.0), &[("y", "u")]).unwrap();
    assert_eq!(s.inputs.len(), 1);
    assert_eq!(s.feedthrough, vec![vec![true, true]]);
    let (_, y) = simulate(&s, &[InputSignal::scalar(1.0)], one()).unwrap();
    assert_eq!(column(&y, "g3.y"), vec![6.0, 6.0]);
}

#[test]
fn serial_through_state_has_no_feedthrough() {
    let s = serial(plant(1.0, 1.0, 0.0), gain("g", 3.0), &[("y", "u")]).unwrap();
    assert_eq!(s.feedthrough, vec![vec![false, false]]);
}

#[test]
fn serial_rejects_bad_sigma() {
    let r = serial(gain("a", 1.0), gain("b", 1.0), &[]);
    assert!(matches!(r, Err(Error::InvalidConnection(_))));
    let r = serial(gain("a", 1.0), gain("b", 1.0), &[("nope", "u")]);
    assert!(r.is_err());
}

#[test]
fn feedback_over_static_gain_is_a_loop() {
    let r = feedback(gain("g", 0.5), &[("y", "u")]);
    match r {
        Err(Error::AlgebraicLoop(c)) => assert_eq!(c, vec![vec!["g.y".to_string()]]),
        other => panic!("expected loop, got {:?}", other.map(|b| b.name)),
    }
}

#[test]
fn feedback_over_unit_delay_is_accepted() {
    let delay = BlockDef::builder("z")
        .input(SignalSpec::discrete("u", 1, one()))
        .state(SignalSpec::discrete("x", 1, one()), Tensor::vector(vec![1.0]))
        .output(SignalSpec::discrete("y", 1, one()))
        .transition(one(), &[0], |t, e| Ok(vec![t.scale(e.u[0], 2.0)?]))
        .output_map(|_, e| Ok(vec![e.x[0]]))
        .no_feedthrough()
        .build()
        .unwrap();
    let fb = feedback(delay, &[("y", "u")]).unwrap();
    assert!(fb.inputs.is_empty());
    let (_, y) = simulate(&fb, &[], time(3, 1)).unwrap();
    assert_eq!(column(&y, "z.y"), vec![1.0, 2.0, 4.0, 8.0]);
}

#[test]
fn fig2_closed_loop_recursion() {
    let (a, b, kappa) = (1.02, 1.0, 0.3);
    let flat = flatten(&fig2(kappa)).unwrap();
    assert_eq!(flat.name, "fb(((sum ; C) ; P))");
    assert_eq!(flat.inputs.len(), 1);
    assert_eq!(flat.inputs[0].name, "sum.r");
    let (_, y) = simulate(&flat, &[InputSignal::scalar(0.0)], time(10, 1)).unwrap();
    let ys = column(&y, "P.y");
    let mut want = 1.0;
    for v in ys {
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        want *= a - b * kappa;
    }
}

#[test]
fn loop_detection_examples() {
    assert!(detect_algebraic_loops(&fig2(0.3)).unwrap().is_empty());

    let mut ring = Diagram::new();
    ring.add_block("g1", gain("g1", 1.0)).unwrap();
    ring.add_block("g2", gain("g2", 1.0)).unwrap();
    ring.connect("g1.y", "g2.u").unwrap();
    ring.connect("g2.y", "g1.u").unwrap();
    let c = detect_algebraic_loops(&ring).unwrap();
    assert_eq!(c, vec![vec!["g1.y".to_string(), "g2.y".to_string()]]);
    assert!(matches!(flatten(&ring), Err(Error::AlgebraicLoop(_))));

    let mut selfloop = Diagram::new();
    selfloop.add_block("g", gain("g", 1.0)).unwrap();
    selfloop.connect("g.y", "g.u").unwrap();
    assert_eq!(detect_algebraic_loops(&selfloop).unwrap()[0].len(), 1);
}

#[test]
fn single_block_flattens_to_itself() {
    let mut d = Diagram::new();
    d.add_block("g", gain("g", 2.0)).unwrap();
    let f = flatten(&d).unwrap();
    assert!(!f.composite);
    assert_eq!(f.name, "g");
}

#[test]
fn hyperperiod_of_two_rates() {
    let a = BlockDef::builder("a")
        .output(SignalSpec::discrete("y", 1, time(1, 2)))
        .output_map(|t, _| Ok(vec![t.constant(Tensor::vector(vec![1.0]))]))
        .build()
        .unwrap();
    let b = BlockDef::builder("b")
        .input(SignalSpec::discrete("u", 1, time(1, 3)))
        .output(SignalSpec::discrete("y", 1, time(1, 3)))
        .output_map(|_, e| Ok(vec![e.u[0]]))
        .build()
        .unwrap();
    let d = Diagram {
        blocks: vec![a, b],
        connections: vec![],
    };
    let g = compile(&d, one()).unwrap();
    assert_eq!(g.hyperperiod, one());
}

#[test]
fn chain_schedule_counts_and_order() {
    let mut d = Diagram::new();
    d.add_block("P", plant(1.0, 1.0, 0.0)).unwrap();
    d.add_block("g", gain("g", 2.0)).unwrap();
    d.connect("P.y", "g.u").unwrap();
    let g = compile(&d, time(3, 1)).unwrap();
    assert_eq!(g.horizon, 3);
    assert_eq!(g.output_steps(), 2 * 4);
    assert_eq!(g.transition_steps(), 3);
    for k in 0..4 {
        let outs: Vec<usize> = g
            .steps
            .iter()
            .filter(|s| s.k == k)
            .filter_map(|s| match s.kind {
                StepKind::Output { block, .. } => Some(block),
                _ => None,
            })
            .collect();
        assert_eq!(outs, vec![0, 1]);
    }
    assert!(g.dump().contains("k=0 t=0 output P (pass 0)"));
}

#[test]
fn fig2_schedule_is_causal() {
    let d = fig2(0.3);
    let g = compile(&d, time(3, 1)).unwrap();
    let pos = |k: usize, want: StepKind| g.steps.iter().position(|s| s.k == k && s.kind == want).unwrap();
    for k in 0..3 {
        let update = pos(k, StepKind::Transition { block: 2, group: 0 });
        let sum_next = pos(k + 1, StepKind::Output { block: 0, pass: 1 });
        let c_next = pos(k + 1, StepKind::Output { block: 1, pass: 2 });
        assert!(update < sum_next && sum_next < c_next);
    }
}

#[test]
fn interpreter_matches_flatten_on_fig2() {
    let d = fig2(0.4);
    let mut tape = Tape::new();
    let bindings: Vec<Bindings> = d.blocks.iter().map(|b| Bindings::constants(&mut tape, b)).collect();
    let ex = interpret(&mut tape, &d, &bindings, &[InputSignal::scalar(0.5)], time(6, 1)).unwrap();
    let flat = flatten(&d).unwrap();
    let (_, y) = simulate(&flat, &[InputSignal::scalar(0.5)], time(6, 1)).unwrap();
    for (b, blk) in d.blocks.iter().enumerate() {
        let tr = ex.blocks[b].output_trajectory(&tape, blk);
        for s in &tr.signals {
            let got = column(&y, &format!("{}.{}", blk.name, s.name));
            let want: Vec<f64> = s.values.iter().map(|v| v.data()[0]).collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn residuals_follow_composition() {
    let p = plant(1.02, 1.0, 1.0).with_residual(stability_residual(1.02, 1.0, 0.05));
    let c = BlockDef::builder("C")
        .input(SignalSpec::discrete("e", 1, one()))
        .output(SignalSpec::discrete("u", 1, one()))
        .param("kappa", Tensor::scalar(0.3))
        .output_map(|t, e| Ok(vec![t.mul(e.p[0], e.u[0])?]))
        .build()
        .unwrap()
        .with_residual(stability_residual(1.02, 1.0, 0.05));
    let s = serial(c, p, &[("u", "u")]).unwrap();
    assert_eq!(s.residuals.len(), 2);
    assert_eq!(s.residuals[0].ports.params, vec![0]);
    assert_eq!(s.residuals[1].ports.params, vec![1, 2]);
    assert_eq!(s.residuals[1].ports.inputs, vec![crate::contracts::PortRef::Output(0)]);

    let mut tape = Tape::new();
    let bind = Bindings::constants(&mut tape, &s);
    let ex = execute_block(&mut tape, &s, &bind, &[InputSignal::scalar(0.0)], time(2, 1)).unwrap();
    assert_eq!(ex.outputs.len(), 3);
}

#[test]
fn ag_contracts_compose_or_drop() {
    let bounded = |name: &str, lo: f64, hi: f64| {
        let mut g = gain(name, 1.0);
        g.ag = Some(AgContract::new(
            vec![PortBox::uniform("u", 1, -1.0, 1.0).unwrap()],
            vec![PortBox::uniform("y", 1, lo, hi).unwrap()],
        ));
        g
    };
    let ok = serial(bounded("a", -0.5, 0.5), bounded("b", -1.0, 1.0), &[("y", "u")]).unwrap();
    let c = ok.ag.unwrap();
    assert_eq!(c.assume.len(), 1);
    assert_eq!(c.guarantee_outputs.len(), 2);
    let bad = serial(bounded("a", -2.0, 2.0), bounded("b", -1.0, 1.0), &[("y", "u")]).unwrap();
    assert!(bad.ag.is_none());
}

#[test]
fn port_path_parsing() {
    let p: PortPath = "plant.y".parse().unwrap();
    assert_eq!(p, PortPath::new("plant", "y"));
    assert_eq!(p.to_string(), "plant.y");
    assert!("plant".parse::<PortPath>().is_err());
}

#[test]
fn flattened_inputs_follow_diagram_order() {
    // b1 folds before b0 (it drives b0), yet b0's input stays first.
    let mut d = Diagram::new();
    d.add_block("b0", sum()).unwrap();
    d.add_block("b1", gain("g", 2.0)).unwrap();
    d.connect("b1.y", "b0.y").unwrap();
    let names = d.external_input_names().unwrap();
    let flat = flatten(&d).unwrap();
    let flat_names: Vec<String> = flat.inputs.iter().map(|s| s.name.clone()).collect();
    assert_eq!(names, vec!["b0.r", "b1.u"]);
    assert_eq!(flat_names, names);
    let (_, y) = simulate(&flat, &[InputSignal::scalar(1.0), InputSignal::scalar(3.0)], time(1, 1)).unwrap();
    assert_eq!(column(&y, "b0.e"), vec![-5.0, -5.0]);
}

#[test]
fn slow_input_holds_fast_driver() {
    let half = time(1, 2);
    let fast = BlockDef::builder("F")
        .input(SignalSpec::discrete("u", 1, half))
        .output(SignalSpec::discrete("y", 1, half))
        .output_map(|_, e| Ok(vec![e.u[0]]))
        .build()
        .unwrap();
    let mut d = Diagram::new();
    d.add_block("F", fast).unwrap();
    d.add_block("C", gain("C", 2.0)).unwrap();
    d.connect("F.y", "C.u").unwrap();
    let ramp = || InputSignal::function(|t| Tensor::vector(vec![crate::time::to_f64(t)]));
    let tf = time(2, 1);
    let want = [0.0, 0.0, 2.0, 2.0, 4.0];

    let flat = flatten(&d).unwrap();
    assert_eq!(flat.states[0].name, "C.u.hold");
    let (_, y) = simulate(&flat, &[ramp()], tf).unwrap();
    assert_eq!(column(&y, "C.y"), want);

    let mut tape = Tape::new();
    let bindings: Vec<Bindings> = d.blocks.iter().map(|b| Bindings::constants(&mut tape, b)).collect();
    let ex = interpret(&mut tape, &d, &bindings, &[ramp()], tf).unwrap();
    assert_eq!(column(&ex.blocks[1].output_trajectory(&tape, &d.blocks[1]), "y"), want);
}
