use depth_dissect_core::net::{NetConfig, Network};
use depth_dissect_core::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f32> {
    Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Textbook cross-correlation with zero padding.
fn direct_conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: &[f32],
    stride: usize,
    pad: usize,
) -> Tensor<f32> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let mut out = vec![0f32; xs.n * ws.n * oh * ow];
    for n in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for x_ in 0..ow {
                    let mut acc = b[o] as f64;
                    for c in 0..xs.c {
                        for i in 0..k {
                            for j in 0..k {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (x_ * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= xs.h as isize || xx >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, c, yy as usize, xx as usize) as f64
                                    * w.at(o, c, i, j) as f64;
                            }
                        }
                    }
                    out[((n * ws.n + o) * oh + y) * ow + x_] = acc as f32;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(xs.n, ws.n, oh, ow), out).unwrap()
}

fn conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: Option<&Tensor<f32>>,
    stride: usize,
    pad: usize,
) -> Tensor<f32> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false).unwrap();
    let wv = g.leaf(w.clone(), false).unwrap();
    let bv = b.map(|b| g.leaf(b.clone(), false).unwrap());
    let out = g.conv2d(xv, wv, bv, stride, pad).unwrap();
    g.value(out).clone()
}

#[test]
fn convolution_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, Shape::new(1, 2, 5, 5));
    let w = random(&mut rng, Shape::new(3, 2, 3, 3));
    let got = conv(&x, &w, None, 1, 0);
    let want = direct_conv(&x, &w, &[0.0; 3], 1, 0);
    assert_eq!(got.shape(), want.shape());
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    for seed in 1..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k) = (rng.random_range(1..5), rng.random_range(1..5));
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let x = random(&mut rng, Shape::new(2, c, h, w));
        let w = random(&mut rng, Shape::new(k, c, 3, 3));
        let b = random(&mut rng, Shape::new(1, 1, 1, k));
        let got = conv(&x, &w, Some(&b), stride, pad);
        let want = direct_conv(&x, &w, b.data(), stride, pad);
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-5, "seed {seed}: {a} vs {e}");
        }
    }
}

#[test]
fn convolution_is_linear_in_its_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x1, x2) = (
        random(&mut rng, Shape::new(1, 3, 6, 6)),
        random(&mut rng, Shape::new(1, 3, 6, 6)),
    );
    let w = random(&mut rng, Shape::new(4, 3, 3, 3));
    let (a, b) = (0.7f32, -1.3f32);
    let mix = Tensor::from_vec(
        x1.shape(),
        x1.data()
            .iter()
            .zip(x2.data())
            .map(|(p, q)| a * p + b * q)
            .collect(),
    )
    .unwrap();
    let lhs = conv(&mix, &w, None, 1, 1);
    let (y1, y2) = (conv(&x1, &w, None, 1, 1), conv(&x2, &w, None, 1, 1));
    for ((l, p), q) in lhs.data().iter().zip(y1.data()).zip(y2.data()) {
        assert!((l - (a * p + b * q)).abs() < 1e-5);
    }
}

#[test]
fn identity_and_box_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, Shape::new(1, 2, 4, 4));
    let mut id = Tensor::zeros(Shape::new(2, 2, 1, 1));
    id.data_mut()[0] = 1.0;
    id.data_mut()[3] = 1.0;
    assert_eq!(conv(&x, &id, None, 1, 0), x);
    let c = Tensor::full(Shape::new(1, 1, 5, 5), 0.8f32);
    let boxk = Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0);
    let y = conv(&c, &boxk, None, 1, 1);
    assert!((y.at(0, 0, 2, 2) - 0.8).abs() < 1e-6);
}

#[test]
fn activations() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![-1.0, 0.0, -3.0, 3.0]).unwrap(),
            false,
        )
        .unwrap();
    let e = g.elu(x).unwrap();
    let r = g.relu(x).unwrap();
    assert!((g.value(e).data()[0] + 0.63212).abs() < 1e-5);
    assert_eq!(g.value(e).data()[1], 0.0);
    assert_eq!(&g.value(r).data()[2..], &[0.0, 3.0]);
}

#[test]
fn every_parameter_receives_gradient() {
    use depth_dissect_core::scene::{generate_samples, SceneConfig};
    use depth_dissect_core::train::{base_depth_loss, stack_batch};
    for seed in 0..5 {
        let samples = generate_samples(seed, 2, &SceneConfig::default()).unwrap();
        let (image, depth, valid) = stack_batch(&samples, &[0, 1]).unwrap();
        let net = Network::<f32>::build(NetConfig::default(), seed).unwrap();
        let mut g = Graph::new();
        let params = net.param_leaves(&mut g, true).unwrap();
        let x = g.leaf(image, false).unwrap();
        let out = net.forward_graph(&mut g, &params, x, Vec::new()).unwrap();
        let loss = base_depth_loss(&mut g, out.depth, &depth, &valid).unwrap();
        g.backward(loss).unwrap();
        for (i, p) in params.iter().enumerate() {
            let grad = g.grad(*p).unwrap();
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "seed {seed}: parameter {i} has zero gradient"
            );
        }
    }
}

#[test]
fn output_is_positive_and_finite() {
    let net = Network::<f32>::build(NetConfig::default(), 7).unwrap();
    for v in [0.0f32, 1.0] {
        let (pred, _) = net
            .forward(&Tensor::full(Shape::new(1, 3, 64, 64), v), &[])
            .unwrap();
        assert!(pred.data().iter().all(|p| p.is_finite() && *p > 0.0));
    }
}
