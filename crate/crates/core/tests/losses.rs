use depth_dissect_core::bins::BinIndexMap;
use depth_dissect_core::net::{NetConfig, Network};
use depth_dissect_core::scene::{generate_samples, SceneConfig};
use depth_dissect_core::train::{
    assign_bins, assign_loss, batch_responses, effective_bins, fit, reg_loss, BatchResponses,
    TrainConfig, TrainMode,
};
use depth_dissect_core::{Graph, Shape, Tensor};

fn table(g: &mut Graph<f64>, rows: &[&[f64]], present: Vec<bool>) -> BatchResponses {
    let (k, b) = (rows.len(), rows[0].len());
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let t = g
        .leaf(
            Tensor::from_vec(Shape::new(1, 1, k, b), data).unwrap(),
            true,
        )
        .unwrap();
    BatchResponses { table: t, present }
}

fn scalar(g: &Graph<f64>, v: depth_dissect_core::Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn assignment_rule_examples() {
    let d = assign_bins(128, 64);
    assert_eq!((d[0], d[5], d[127]), (0, 2, 63));
    assert_eq!(assign_bins(32, 64), (0..32).collect::<Vec<_>>());
    assert_eq!(effective_bins(32, 64), 32);
    let d = assign_bins(48, 64);
    let mut seen = d.clone();
    seen.dedup();
    assert_eq!(seen, (0..48).collect::<Vec<_>>());
}

#[test]
fn assignment_covers_every_effective_bin() {
    check_assignment_covers_every_effective_bin();
}

pub fn check_assignment_covers_every_effective_bin() {
    for k in 2..200 {
        for nb in [2, 3, 7, 16, 64, 100] {
            let d = assign_bins(k, nb);
            let eff = effective_bins(k, nb);
            assert_eq!(d.len(), k);
            assert!(
                d.windows(2).all(|w| w[0] <= w[1]),
                "K={k} N_b={nb} not monotone"
            );
            let mut covered = vec![false; eff];
            for &b in &d {
                covered[b] = true;
            }
            assert!(
                covered.iter().all(|&c| c),
                "K={k} N_b={nb} leaves a bin empty"
            );
        }
    }
}

#[test]
fn regularizer_worked_example() {
    let mut g = Graph::new();
    let t = table(&mut g, &[&[2.4, 0.8, 0.8, 0.8]], vec![true; 4]);
    let loss = reg_loss(&mut g, &[t], 0.1).unwrap().unwrap();
    assert!((scalar(&g, loss) + 0.05).abs() < 1e-12);
}

#[test]
fn regularizer_bounds() {
    let mut g = Graph::new();
    let one_hot = table(&mut g, &[&[1.0, 0.0, 0.0], &[0.0, 0.0, 3.0]], vec![true; 3]);
    let loss = reg_loss(&mut g, &[one_hot], 0.1).unwrap().unwrap();
    assert!((scalar(&g, loss) + 0.1).abs() < 1e-12);
    let flat = table(&mut g, &[&[2.0, 2.0, 2.0]], vec![true; 3]);
    let loss = reg_loss(&mut g, &[flat], 0.1).unwrap().unwrap();
    assert!(scalar(&g, loss).abs() < 1e-12);
}

#[test]
fn assignment_loss_worked_examples() {
    let mut g = Graph::new();
    let t = table(&mut g, &[&[2.4, 0.8, 0.8, 0.8]], vec![true; 4]);
    let loss = assign_loss(&mut g, &[(t.clone(), &[0][..])], 0.1)
        .unwrap()
        .unwrap();
    assert!((scalar(&g, loss) + 0.05).abs() < 1e-12);
    let loss = assign_loss(&mut g, &[(t, &[1][..])], 0.1).unwrap().unwrap();
    assert!((scalar(&g, loss) - 0.025).abs() < 1e-12);
}

#[test]
fn assignment_loss_averages_layers_and_units() {
    let mut g = Graph::new();
    // Layer A: a perfect unit (+1) and a unit whose bin is absent (ignored).
    let a = table(
        &mut g,
        &[&[1.0, 0.0, 0.0], &[5.0, 5.0, 5.0]],
        vec![true, true, false],
    );
    // Layer B: one indifferent unit (0).
    let b = table(&mut g, &[&[2.0, 2.0, 2.0]], vec![true; 3]);
    let loss = assign_loss(&mut g, &[(a, &[0, 2][..]), (b, &[1][..])], 1.0)
        .unwrap()
        .unwrap();
    assert!((scalar(&g, loss) + 0.5).abs() < 1e-12);
}

/// A unit whose assigned bin is missing from the batch must not be pushed by
/// the assignment term, however its activation looks.
#[test]
fn absent_bin_units_receive_exactly_zero_gradient() {
    check_absent_bin_units_receive_exactly_zero_gradient();
}

pub fn check_absent_bin_units_receive_exactly_zero_gradient() {
    for variant in 0..5 {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..8)
            .map(|i| ((i * 7 + variant * 3) % 11) as f64 * 0.3 - 1.2)
            .collect();
        let act = g
            .leaf(
                Tensor::from_vec(Shape::new(1, 2, 2, 2), data).unwrap(),
                true,
            )
            .unwrap();
        let bins = BinIndexMap {
            n: 1,
            h: 2,
            w: 2,
            n_bins: 4,
            data: vec![0, 0, 1, 1],
        };
        let br = batch_responses(&mut g, act, &bins).unwrap();
        assert_eq!(br.present, vec![true, true, false, false]);
        let loss = assign_loss(&mut g, &[(br, &[1, 3][..])], 0.1)
            .unwrap()
            .unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(act).unwrap().data();
        assert!(
            grad[..4].iter().any(|&v| v != 0.0),
            "assigned unit must be driven"
        );
        assert!(
            grad[4..].iter().all(|&v| v == 0.0),
            "absent-bin unit got {:?}",
            &grad[4..]
        );
    }
}

#[test]
fn absent_bin_units_do_not_change_the_loss() {
    check_absent_bin_units_do_not_change_the_loss();
}

pub fn check_absent_bin_units_do_not_change_the_loss() {
    let value = |second: f64| {
        let mut g = Graph::<f64>::new();
        let data = vec![1.0, 0.5, -0.3, 0.2, second, second * 2.0, -second, 0.1];
        let act = g
            .leaf(
                Tensor::from_vec(Shape::new(1, 2, 2, 2), data).unwrap(),
                false,
            )
            .unwrap();
        let bins = BinIndexMap {
            n: 1,
            h: 2,
            w: 2,
            n_bins: 4,
            data: vec![0, 1, 1, 0],
        };
        let br = batch_responses(&mut g, act, &bins).unwrap();
        let loss = assign_loss(&mut g, &[(br, &[0, 2][..])], 0.1)
            .unwrap()
            .unwrap();
        g.value(loss).data()[0]
    };
    assert_eq!(value(0.3), value(-4.0));
}

#[test]
fn per_unit_terms_stay_in_unit_interval() {
    let mut g = Graph::<f64>::new();
    let rows: [&[f64]; 3] = [&[0.0, 0.0, 9.0], &[9.0, 0.0, 0.0], &[1.0, 1.0, 1.0]];
    let t = table(&mut g, &rows, vec![true; 3]);
    for d in 0..3 {
        let loss = assign_loss(&mut g, &[(t.clone(), &[d, d, d][..])], 1.0)
            .unwrap()
            .unwrap();
        let v = scalar(&g, loss);
        assert!((-1.0..=1.0).contains(&v), "{v}");
    }
}

#[test]
fn zero_lambda_assignment_training_is_baseline_training() {
    let scene = SceneConfig {
        height: 16,
        width: 16,
        ..Default::default()
    };
    let samples = generate_samples(2, 8, &scene).unwrap();
    let base_config = TrainConfig {
        mode: TrainMode::Baseline,
        layers: vec!["d".into()],
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let assign_config = TrainConfig {
        mode: TrainMode::Assign,
        lambda: 0.0,
        ..base_config.clone()
    };
    let mut a = Network::<f32>::build(NetConfig::tiny(16, 16), 3).unwrap();
    let mut b = a.clone();
    fit(&mut a, &samples, &base_config).unwrap();
    fit(&mut b, &samples, &assign_config).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
}

#[test]
fn depth_loss_examples() {
    use depth_dissect_core::train::base_depth_loss;
    let mut g = Graph::<f64>::new();
    let gt = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let valid = Tensor::full(gt.shape(), 1.0);
    let same = g.leaf(gt.clone(), true).unwrap();
    let l = base_depth_loss(&mut g, same, &gt, &valid).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let shifted = g.leaf(gt.map(|v| v + 1.0), true).unwrap();
    let l = base_depth_loss(&mut g, shifted, &gt, &valid).unwrap();
    assert_eq!(scalar(&g, l), 1.0);
    g.backward(l).unwrap();
    assert!(g
        .grad(shifted)
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 0.25).abs() < 1e-15));
}
