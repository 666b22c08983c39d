use hide_core::entropy::{SliceInput, P_MIN};
use hide_core::gradcheck::GradCheck;
use hide_core::graph::bin_probability;
use hide_core::model::rd_loss;
use hide_core::{DType, Graph, Model, ModelConfig, ParamStore, Tensor, Var, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(variant: Variant, s: usize) -> ModelConfig {
    ModelConfig {
        variant,
        m: 8,
        s,
        hyper_channels: 4,
        c_ctx: 8,
        c_d: 8,
        n_g: 4,
        n_d: 4,
        heads: 2,
        backbone_channels: 4,
        precision: DType::F64,
        ..ModelConfig::default()
    }
}

fn model(variant: Variant, s: usize) -> Model<f64> {
    Model::new(config(variant, s)).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn first_slice_aggregates_only_hyper_features() {
    let m = model(Variant::Hide, 4);
    let e = &m.net.entropy;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f_z = rand_tensor(&mut rng, &[1, 16, 3, 3], 1.0);
    let mut g = Graph::inference(&m.store);
    let fv = g.input(f_z);
    let got = e.aggregate(&mut g, 0, fv, &[]).unwrap();
    let s = &e.slices[0];
    let (w1, b1) = (g.param(s.agg_in.weight), g.param(s.agg_in.bias));
    let h = g.conv2d(fv, w1, Some(b1), 1, 0).unwrap();
    let h = g.gelu(h).unwrap();
    let (w2, b2) = (g.param(s.agg_out.weight), g.param(s.agg_out.bias));
    let want = g.conv2d(h, w2, Some(b2), 1, 1).unwrap();
    assert_eq!(g.value(got), g.value(want));
    assert!(e.aggregate(&mut g, 1, fv, &[]).is_err());
}

#[test]
fn later_slices_match_composed_oracle() {
    let m = model(Variant::Baseline, 4);
    let e = &m.net.entropy;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::inference(&m.store);
    let fv = g.input(rand_tensor(&mut rng, &[2, 16, 2, 3], 1.0));
    let prev: Vec<Var> = (0..2).map(|_| g.input(rand_tensor(&mut rng, &[2, 2, 2, 3], 2.0))).collect();
    let got = e.aggregate(&mut g, 2, fv, &prev).unwrap();
    // Oracle: explicit channel concat then naive convolutions.
    let mut parts = vec![g.value(fv).clone()];
    parts.extend(prev.iter().map(|&p| g.value(p).clone()));
    let cin = 20;
    let (b, h, w) = (2, 2, 3);
    let joined: Vec<f64> = (0..b)
        .flat_map(|n| {
            parts
                .iter()
                .flat_map(move |t| {
                    let c = t.shape()[1];
                    t.data()[n * c * h * w..(n + 1) * c * h * w].to_vec()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let conv = |x: &[f64], cin: usize, wt: &[f64], bias: &[f64], cout: usize, k: usize| {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; b * cout * h * w];
        for n in 0..b {
            for o in 0..cout {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = bias[o];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (iy, ix) = (yy as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[((o * cin + c) * k + ky) * k + kx] * x[((n * cin + c) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((n * cout + o) * h + yy) * w + xx] = acc;
                    }
                }
            }
        }
        out
    };
    let s = &e.slices[2];
    let p = |id| m.store.value(id).data().to_vec();
    let hidden: Vec<f64> = conv(&joined, cin, &p(s.agg_in.weight), &p(s.agg_in.bias), 8, 1)
        .into_iter()
        .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
        .collect();
    let want = conv(&hidden, 8, &p(s.agg_out.weight), &p(s.agg_out.bias), 8, 3);
    assert!(max_abs_diff(g.value(got).data(), &want) <= 1e-12);
}

#[test]
fn zero_aggregation_weights_give_bias() {
    let mut m = model(Variant::Hd, 2);
    let s = &m.net.entropy.slices[1];
    let (w_in, w_out, b_out) = (s.agg_in.weight, s.agg_out.weight, s.agg_out.bias);
    m.store.value_mut(w_in).data_mut().fill(0.0);
    m.store.value_mut(w_out).data_mut().fill(0.0);
    m.store.value_mut(b_out).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::inference(&m.store);
    let fv = g.input(rand_tensor(&mut rng, &[1, 16, 2, 2], 1.0));
    let prev = [g.input(rand_tensor(&mut rng, &[1, 4, 2, 2], 1.0))];
    let x = m.net.entropy.aggregate(&mut g, 1, fv, &prev).unwrap();
    for (i, &v) in g.value(x).data().iter().enumerate() {
        assert_eq!(v, (i / 4) as f64);
    }
}

/// Runs slice 0 of `m` with the estimator's μ replaced by `mu`.
fn quantize(m: &Model<f64>, y: f64, mu: f64) -> (f64, f64, f64) {
    let mut g = Graph::inference(&m.store);
    let fv = g.input(Tensor::zeros(vec![1, 16, 1, 1]));
    let mut pred = m.net.entropy.predict(&mut g, 0, fv, &[]).unwrap();
    pred.params.mu = g.input(Tensor::from_fn(vec![1, 4, 1, 1], |_| mu));
    let yv = g.input(Tensor::from_fn(vec![1, 4, 1, 1], |_| y));
    let out = m.net.entropy.complete(&mut g, 0, pred, SliceInput::Latent { y: yv, noise: None }).unwrap();
    (g.value(out.symbols).data()[0], g.value(out.y_hat).data()[0], g.value(out.y_bar).data()[0])
}

#[test]
fn quantization_examples() {
    let m = model(Variant::Hide, 2);
    let (sym, y_hat, _) = quantize(&m, 0.7, 0.7);
    assert_eq!((sym, y_hat), (0.0, 0.7));
    let (sym, y_hat, _) = quantize(&m, 2.3, 0.1);
    assert_eq!(sym, 2.0);
    assert!((y_hat - 2.1).abs() < 1e-15);
    assert_eq!(quantize(&m, 500.0, 0.0).0, 63.0);
    assert_eq!(quantize(&m, -500.0, 0.0).0, -64.0);
}

proptest! {
    #[test]
    fn rounding_error_bounded(mu in -20.0f64..20.0, off in -63.5f64..63.5) {
        let m = model(Variant::Baseline, 2);
        let y = mu + off;
        let (_, y_hat, y_bar) = quantize(&m, y, mu);
        prop_assert!((y - y_hat).abs() <= 0.5 + 1e-12);
        prop_assert!((y_bar - y_hat).abs() <= 0.5);
    }
}

#[test]
fn rate_examples() {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::inference(&store);
    let half = g.input(Tensor::from_fn(vec![8], |_| 0.5));
    let b = g.bits(half).unwrap();
    assert!((g.value(b).data()[0] - 8.0).abs() < 1e-12);
    let one = g.input(Tensor::from_fn(vec![5], |_| 1.0));
    let b = g.bits(one).unwrap();
    assert_eq!(g.value(b).data()[0], 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Tensor::from_fn(vec![2000], |_| rng.gen_range(-6.0..6.0f64).round());
    let sigma = Tensor::from_fn(vec![2000], |_| rng.gen_range(0.04..10.0));
    let (dv, sv) = (g.input(d.clone()), g.input(sigma.clone()));
    let p = g.likelihood(dv, sv).unwrap();
    let p = g.max_const(p, P_MIN).unwrap();
    let bits = g.bits(p).unwrap();
    // Compensated summation oracle.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&dv, &sv) in d.data().iter().zip(sigma.data()) {
        let term = -libm::log2(bin_probability(dv, sv).max(P_MIN)) - comp;
        let t = sum + term;
        comp = (t - sum) - term;
        sum = t;
    }
    let got = g.value(bits).data()[0];
    assert!(((got - sum) / sum).abs() <= 1e-9, "{got} vs {sum}");
}

#[test]
fn single_slice_rate_is_direct_evaluation() {
    let m = model(Variant::Hide, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::inference(&m.store);
    let y = g.input(rand_tensor(&mut rng, &[1, 8, 2, 2], 3.0));
    let fv = g.input(rand_tensor(&mut rng, &[1, 16, 2, 2], 1.0));
    let bundle = m.net.entropy.forward(&mut g, y, fv, None).unwrap();
    let s = &bundle.slices[0];
    let want: f64 = g
        .value(s.symbols)
        .data()
        .iter()
        .zip(g.value(s.params.sigma).data())
        .map(|(&d, &sig)| -libm::log2(bin_probability(d, sig).max(P_MIN)))
        .sum();
    let got = g.value(bundle.bits).data()[0];
    assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    assert_eq!(g.value(bundle.y_hat), g.value(s.y_hat));
}

#[test]
fn slices_are_causal() {
    for variant in Variant::ALL {
        let m = model(variant, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = rand_tensor(&mut rng, &[1, 8, 3, 2], 3.0);
        let f_z = rand_tensor(&mut rng, &[1, 16, 3, 2], 1.0);
        let params = |y: &Tensor<f64>| {
            let mut g = Graph::inference(&m.store);
            let (yv, fv) = (g.input(y.clone()), g.input(f_z.clone()));
            let b = m.net.entropy.forward(&mut g, yv, fv, None).unwrap();
            b.slices.iter().map(|s| (g.value(s.params.mu).clone(), g.value(s.params.sigma).clone())).collect::<Vec<_>>()
        };
        let base = params(&y);
        for j in 0..4 {
            let mut perturbed = y.clone();
            for v in &mut perturbed.data_mut()[2 * j * 6..(2 * j + 2) * 6] {
                *v += 7.25;
            }
            let p = params(&perturbed);
            for i in 0..=j {
                assert_eq!(p[i], base[i], "{variant:?}: slice {i} changed when slice {j} moved");
            }
            if j < 3 {
                assert_ne!(p[j + 1], base[j + 1], "{variant:?}: slice {} ignores slice {j}", j + 1);
            }
        }
    }
}

#[test]
fn total_rate_is_sum_of_slice_rates() {
    let m = model(Variant::Hide, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = rand_tensor(&mut rng, &[2, 8, 2, 2], 4.0);
    let f_z = rand_tensor(&mut rng, &[2, 16, 2, 2], 1.0);
    let mut g = Graph::inference(&m.store);
    let (yv, fv) = (g.input(y.clone()), g.input(f_z.clone()));
    let total = m.net.entropy.forward(&mut g, yv, fv, None).unwrap().bits;
    let total = g.value(total).data()[0];

    let mut g = Graph::inference(&m.store);
    let fv = g.input(f_z);
    let mut prev = Vec::new();
    let mut sum = 0.0;
    for i in 0..4 {
        let yi = g.input(Tensor::from_fn(vec![2, 2, 2, 2], |k| {
            let (n, rest) = (k / 8, k % 8);
            y.data()[n * 32 + i * 8 + rest]
        }));
        let out = m.net.entropy.slice(&mut g, i, fv, &prev, SliceInput::Latent { y: yi, noise: None }).unwrap();
        sum += g.value(out.bits).data()[0];
        prev.push(out.y_bar);
    }
    assert!((total - sum).abs() <= 1e-9 * total);
}

#[test]
fn rd_loss_examples() {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::inference(&store);
    let bpp = g.input(Tensor::from_fn(vec![1], |_| 0.5));
    let d = g.input(Tensor::from_fn(vec![1], |_| 100.0));
    let l = rd_loss(&mut g, bpp, d, 0.0035).unwrap();
    assert!((g.value(l).data()[0] - 0.85).abs() < 1e-12);
    let zero = g.input(Tensor::zeros(vec![1]));
    let l = rd_loss(&mut g, bpp, zero, 0.0035).unwrap();
    assert_eq!(g.value(l).data()[0], 0.5);
}

#[test]
fn identical_reconstruction_loss_is_bpp() {
    let m = model(Variant::Cape, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::inference(&m.store);
    let x = g.input(rand_tensor(&mut rng, &[1, 3, 16, 16], 0.5));
    let out = m.forward(&mut g, x, None).unwrap();
    let bpp = g.value(out.bpp).data()[0];
    let l = rd_loss(&mut g, out.bpp, out.bpp, 0.0).unwrap();
    assert_eq!(g.value(l).data()[0], bpp);
    let want = (g.value(out.rate_y).data()[0] + g.value(out.rate_z).data()[0]) / 256.0;
    assert!((bpp - want).abs() < 1e-12);
}

#[test]
fn init_gradients_are_finite_and_nonzero() {
    for variant in Variant::ALL {
        let m = model(variant, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new(&m.store);
        let x = g.input(Tensor::from_fn(vec![2, 3, 32, 32], |_| rng.gen_range(0.0..1.0)));
        let out = m.forward(&mut g, x, Some(&mut rng)).unwrap();
        let z_hat_zero = g.value(out.prior.z_hat).data().iter().all(|&v| v == 0.0);
        let grads = g.backward(out.loss).unwrap();
        let mut seen = 0;
        for (id, p) in m.store.iter() {
            let gr = grads.param(id).unwrap_or_else(|| panic!("{variant:?}: no gradient for {}", p.name));
            assert!(gr.iter().all(|v| v.is_finite()), "{}", p.name);
            seen += 1;
            // When every hyper-latent rounds to zero the first h_s weight
            // sees a zero input; h_a still gets gradients through rounding.
            if p.name == "h_s.up0.weight" && z_hat_zero {
                continue;
            }
            assert!(gr.iter().any(|&v| v != 0.0), "{variant:?}: zero gradient for {}", p.name);
        }
        assert_eq!(seen, m.store.len());
    }
}

#[test]
fn grad_full_rd_loss() {
    // Rate through the likelihood plus 255²-scaled MSE, w.r.t. the
    // reconstruction, the image, the centered latents and the scales.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let store = ParamStore::<f64>::new(0);
    for &(n, shape) in &[(12, [1, 3, 2, 2]), (30, [1, 3, 5, 2]), (8, [2, 1, 2, 2])] {
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let x_hat = rand_tensor(&mut rng, &shape, 1.0);
        let d = Tensor::from_fn(vec![n], |_| rng.gen_range(-3.0..3.0));
        let sigma = Tensor::from_fn(vec![n], |_| rng.gen_range(0.3..4.0));
        let pixels = (shape[0] * shape[2] * shape[3]) as f64;
        let report = GradCheck::default()
            .run(&store, &[x, x_hat, d, sigma], &[], |g, v| {
                let p = g.likelihood(v[2], v[3])?;
                let p = g.max_const(p, P_MIN)?;
                let bits = g.bits(p)?;
                let bpp = g.scale(bits, 1.0 / pixels)?;
                let diff = g.sub(v[1], v[0])?;
                let sq = g.mul(diff, diff)?;
                let mse = g.mean(sq)?;
                let mse = g.scale(mse, 255.0 * 255.0)?;
                rd_loss(g, bpp, mse, 0.0035)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
