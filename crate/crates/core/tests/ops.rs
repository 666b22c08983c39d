use hide_core::gradcheck::GradCheck;
use hide_core::graph::{bin_probability, Graph};
use hide_core::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn empty() -> ParamStore<f64> {
    ParamStore::new(0)
}

/// Direct nested-loop convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (bn, ci, h, wd) = x.dims4("oracle").unwrap();
    let (co, _, k, _) = w.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bn * co * oh * ow];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                    * x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bn, co, oh, ow], out).unwrap()
}

/// Scatter-add definition of the transposed convolution (no output padding
/// applied; the caller crops or the geometry matches exactly).
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, oh: usize, ow: usize) -> Tensor<f64> {
    let (bn, ci, h, wd) = x.dims4("oracle").unwrap();
    let (_, co, k, _) = w.dims4("oracle").unwrap();
    let mut out = vec![0.0; bn * co * oh * ow];
    for n in 0..bn {
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((n * ci + c) * h + y) * wd + xx];
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                let ox = (xx * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((n * co + o) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.data()[((c * co + o) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bn, co, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_scaling_identity() {
    let s = empty();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = g.input(Tensor::full(vec![1, 1, 1, 1], 2.0));
    let b = g.input(Tensor::zeros(vec![1]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[2.0; 9]);
}

#[test]
fn conv2d_identity_kernel() {
    let s = empty();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut g = Graph::new(&s);
    let x = g.input(xt.clone());
    let w = g.input(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let s = empty();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, k) in &[(1, 5), (2, 5), (1, 3), (2, 3), (1, 7)] {
        let xt = rand_tensor(&mut rng, &[2, 4, 8, 8]);
        let wt = rand_tensor(&mut rng, &[3, 4, k, k]);
        let bt: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new(&s);
        let x = g.input(xt.clone());
        let w = g.input(wt.clone());
        let b = g.input(Tensor::new(vec![3], bt.clone()).unwrap());
        let y = g.conv2d(x, w, Some(b), stride, (k - 1) / 2).unwrap();
        let want = conv_oracle(&xt, &wt, &bt, stride, (k - 1) / 2);
        assert_eq!(g.shape(y), want.shape());
        assert!(max_abs_diff(g.value(y).data(), want.data()) <= 1e-12);
    }
}

#[test]
fn conv2d_reports_offending_dimension() {
    let s = empty();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::zeros(vec![1, 3, 4, 4]));
    let w = g.input(Tensor::zeros(vec![2, 4, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
}

#[test]
fn conv_transpose_identity_and_scatter_oracle() {
    let s = empty();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&mut rng, &[1, 2, 3, 3]);
    let mut g = Graph::new(&s);
    let x = g.input(xt.clone());
    let mut eye = vec![0.0; 4];
    eye[0] = 1.0;
    eye[3] = 1.0;
    let w = g.input(Tensor::new(vec![2, 2, 1, 1], eye).unwrap());
    let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &xt);

    let x2 = Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = Tensor::full(vec![1, 1, 2, 2], 1.0);
    let xv = g.input(x2.clone());
    let wv = g.input(ones.clone());
    let y = g.conv_transpose2d(xv, wv, None, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    let want = conv_transpose_oracle(&x2, &ones, 2, 0, 4, 4);
    assert_eq!(g.value(y).data(), want.data());
    // each input pixel becomes a 2×2 block
    assert_eq!(&g.value(y).data()[..4], &[1.0, 1.0, 2.0, 2.0]);

    // 5×5 kernel, pad 2: output is exactly twice the input size
    let xt = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let wt = rand_tensor(&mut rng, &[3, 2, 5, 5]);
    let xv = g.input(xt.clone());
    let wv = g.input(wt.clone());
    let y = g.conv_transpose2d(xv, wv, None, 2, 2).unwrap();
    let want = conv_transpose_oracle(&xt, &wt, 2, 2, 6, 8);
    assert!(max_abs_diff(g.value(y).data(), want.data()) <= 1e-12);
}

#[test]
fn conv_transpose_rejects_bad_stride() {
    let s = empty();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::zeros(vec![1, 1, 2, 2]));
    let w = g.input(Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(g.conv_transpose2d(x, w, None, 3, 1).is_err());
}

#[test]
fn linear_examples_and_oracle() {
    let s = empty();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap());
    let w = g.input(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.input(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    let y = g.linear(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&mut rng, &[3, 5, 7]);
    let wt = rand_tensor(&mut rng, &[7, 4]);
    let x = g.input(xt.clone());
    let w = g.input(wt.clone());
    let y = g.linear(x, w, None).unwrap();
    assert_eq!(g.shape(y), &[3, 5, 4]);
    let mut want = vec![0.0; 15 * 4];
    for r in 0..15 {
        for j in 0..4 {
            for p in 0..7 {
                want[r * 4 + j] += xt.data()[r * 7 + p] * wt.data()[p * 4 + j];
            }
        }
    }
    assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-12);

    let bad = g.input(Tensor::zeros(vec![3, 4]));
    assert!(g.linear(bad, w, None).is_err());
}

#[test]
fn layernorm_examples() {
    let s = empty();
    let mut g = Graph::new(&s);
    let gain = g.input(Tensor::full(vec![2], 1.0));
    let shift = g.input(Tensor::zeros(vec![2]));
    let c = g.input(Tensor::full(vec![3, 2], 5.0));
    let y = g.layernorm(c, gain, shift, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let x = g.input(Tensor::from_f64(vec![1, 2], &[1.0, 3.0]).unwrap());
    let y = g.layernorm(x, gain, shift, 1e-5).unwrap();
    let want = 0.9999950000374996875; // 1/sqrt(1 + 1e-5)
    assert!((g.value(y).data()[0] + want).abs() < 1e-12);
    assert!((g.value(y).data()[1] - want).abs() < 1e-12);
}

#[test]
fn gelu_values() {
    let s = empty();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::from_f64(vec![2], &[0.0, 3.0]).unwrap());
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.0);
    // 3·Φ(3) from a 40-digit erf evaluation
    assert!((g.value(y).data()[1] - 2.995950305905109716).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let s = empty();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::full(vec![4], 0.7));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let x = g.input(Tensor::from_f64(vec![2], &[0.0, 3f64.ln()]).unwrap());
    let y = g.softmax(x).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    let x = g.input(Tensor::from_f64(vec![3], &[1e4, 0.0, -5.0]).unwrap());
    let y = g.softmax(x).unwrap();
    let v = g.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn backward_of_weighted_sum_is_input() {
    let s = empty();
    let mut g = Graph::new(&s);
    let xt = Tensor::from_f64(vec![3], &[0.5, -2.0, 4.0]).unwrap();
    let w = g.input_grad(Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap());
    let x = g.input(xt.clone());
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), xt.data());
    assert!(grads.wrt(x).is_none());
}

#[test]
fn backward_contract_errors() {
    let s = empty();
    let mut g = Graph::new(&s);
    let w = g.input_grad(Tensor::full(vec![2], 1.0));
    let loss = g.sum(w).unwrap();
    g.backward(loss).unwrap();
    assert!(g.backward(loss).is_err());
    assert!(g.sum(w).is_err(), "ops on a consumed tape must fail");

    let mut g = Graph::new(&s);
    let w = g.input_grad(Tensor::full(vec![2], 1.0));
    assert!(g.backward(w).is_err(), "non-scalar loss");

    let mut g = Graph::inference(&s);
    let w = g.input(Tensor::full(vec![1], 1.0));
    assert!(g.backward(w).is_err());
}

#[test]
fn discretized_gaussian_values() {
    // Φ(0.5) − Φ(−0.5), 40-digit reference
    assert!((bin_probability(0.0f64, 1.0) - 0.38292492254802620727).abs() < 1e-15);
    // σ = 64 at the mean
    assert!((bin_probability(0.0f64, 64.0) - 0.0062334097216851609).abs() < 1e-15);
    for &sigma in &[0.04, 0.3, 1.0, 7.5, 64.0] {
        for &mu in &[0.0, 0.25, -0.49] {
            let total: f64 = (-64..=63).map(|m| bin_probability(m as f64 - mu, sigma)).sum();
            assert!((total - 1.0).abs() < 1e-12, "sigma {sigma} mu {mu} total {total}");
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let s = empty();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new(&s);
        let x = g.input(rand_tensor(&mut rng, &[2, 3, 6, 6]));
        let w = g.input(rand_tensor(&mut rng, &[4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.gelu(y).unwrap();
        let t = g.to_tokens(y).unwrap();
        let s2 = g.softmax(t).unwrap();
        g.value(s2).clone()
    };
    assert_eq!(run().data(), run().data());
}

// ----- gradient suite -------------------------------------------------

const TOL: f64 = 1e-4;

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<'_, f64>, &[hide_core::Var]) -> hide_core::Result<hide_core::Var>) {
    let s = empty();
    let report = GradCheck::default().run(&s, &inputs, &[], f).unwrap();
    assert!(report.checked > 0);
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(shape, cout, k, stride) in &[([1, 2, 5, 5], 3, 3, 1), ([2, 1, 6, 4], 2, 5, 2), ([1, 3, 4, 4], 2, 1, 1)] {
        let x = rand_tensor(&mut rng, &shape);
        let w = rand_tensor(&mut rng, &[cout, shape[1], k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, (k - 1) / 2));
    }
}

#[test]
fn grad_conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(shape, cout, k, stride, pad) in &[([1, 2, 3, 3], 2, 5, 2, 2), ([2, 1, 2, 3], 3, 2, 2, 0), ([1, 2, 3, 2], 1, 3, 1, 1)] {
        let x = rand_tensor(&mut rng, &shape);
        let w = rand_tensor(&mut rng, &[shape[1], cout, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        check(vec![x, w, b], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn grad_linear_and_matmuls() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(rows, din, dout) in &[(1, 3, 2), (4, 5, 3), (6, 2, 7)] {
        let x = rand_tensor(&mut rng, &[rows, din]);
        let w = rand_tensor(&mut rng, &[din, dout]);
        let b = rand_tensor(&mut rng, &[dout]);
        check(vec![x.clone(), w.clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])));
        check(vec![x.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]));
        let wt = rand_tensor(&mut rng, &[dout, din]);
        check(vec![x, wt], |g, v| g.matmul_bt(v[0], v[1]));
    }
}

#[test]
fn grad_layernorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &(rows, c) in &[(1, 2), (3, 5), (4, 8)] {
        let x = rand_tensor(&mut rng, &[rows, c]);
        let gn = rand_tensor(&mut rng, &[c]);
        let sh = rand_tensor(&mut rng, &[c]);
        check(vec![x, gn, sh], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5));
    }
}

#[test]
fn grad_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for shape in [vec![5], vec![2, 3], vec![2, 2, 3]] {
        let x = rand_tensor(&mut rng, &shape);
        check(vec![x.clone()], |g, v| g.gelu(v[0]));
        check(vec![x.clone()], |g, v| g.tanh(v[0]));
        check(vec![x.clone()], |g, v| g.softplus(v[0]));
        check(vec![x.clone()], |g, v| g.exp(v[0]));
        check(vec![x.map(|v| v.abs() + 0.5)], |g, v| g.ln(v[0]));
        check(vec![x.clone()], |g, v| g.softmax(v[0]));
        let y = rand_tensor(&mut rng, &shape);
        check(vec![x.clone(), y.clone()], |g, v| g.mul(v[0], v[1]));
        check(vec![x.clone(), y.clone()], |g, v| {
            let d = g.sub(v[0], v[1])?;
            g.add(d, v[0])
        });
        check(vec![x.clone(), Tensor::scalar(0.7)], |g, v| g.mul_scalar(v[0], v[1]));
    }
}

#[test]
fn grad_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    check(vec![a.clone(), b], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let s = g.slice_channels(c, 1, 2)?;
        let t = g.to_tokens(s)?;
        let t2 = g.gelu(t)?;
        g.from_tokens(t2, 2, 3, 3)
    });
    check(vec![a, rand_tensor(&mut rng, &[2])], |g, v| {
        let bc = g.broadcast_channels(v[1], 2, 3, 3)?;
        let s = g.mul(v[0], bc)?;
        g.crop(s, 2, 1)
    });
    let m = rand_tensor(&mut rng, &[4, 6]);
    check(vec![m], |g, v| {
        let l = g.slice_cols(v[0], 0, 2)?;
        let r = g.slice_cols(v[0], 3, 3)?;
        let rr = g.tanh(r)?;
        g.concat_cols(&[rr, l])
    });
}

#[test]
fn grad_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for n in [3, 8, 20] {
        // keep centered values away from bin boundaries and the folded edges
        let d = Tensor::from_fn(vec![n], |_| {
            let m: f64 = rng.gen_range(-3..=3) as f64;
            m + rng.gen_range(-0.4..0.4)
        });
        let sigma = Tensor::from_fn(vec![n], |_| rng.gen_range(0.3..3.0));
        check(vec![d, sigma], |g, v| g.likelihood(v[0], v[1]));
    }
    // folded tails
    let d = Tensor::from_f64(vec![2], &[-64.2, 63.1]).unwrap();
    let sigma = Tensor::from_f64(vec![2], &[40.0, 50.0]).unwrap();
    check(vec![d, sigma], |g, v| g.likelihood(v[0], v[1]));
}

#[test]
fn grad_conv_gelu_linear_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let lw = rand_tensor(&mut rng, &[3, 2]);
    check(vec![x, w, lw], |g, v| {
        let c = g.conv2d(v[0], v[1], None, 1, 1)?;
        let a = g.gelu(c)?;
        let t = g.to_tokens(a)?;
        let y = g.linear(t, v[2], None)?;
        g.sum(y)
    });
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40), n in 1usize..6) {
        let rows = values.len() / n;
        prop_assume!(rows > 0);
        let s = empty();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::new(vec![rows, n], values[..rows * n].to_vec()).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(n) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
