use hide_core::gradcheck::GradCheck;
use hide_core::hdca::{attention, Dictionary, DictionaryKind, HdcaConfig, SingleAttention, SliceAttention};
use hide_core::{Graph, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn cfg(c_ctx: usize, c_d: usize, heads: usize, n_g: usize, n_d: usize) -> HdcaConfig {
    HdcaConfig { c_ctx, c_d, heads, n_g, n_d, tie_temperatures: false }
}

struct Setup {
    store: ParamStore<f64>,
    att: SliceAttention,
    global: Dictionary,
    detail: Dictionary,
}

fn setup(c: &HdcaConfig, seed: u64) -> Setup {
    let mut store = ParamStore::new(seed);
    let att = SliceAttention::new(&mut store, "s", c).unwrap();
    let global = Dictionary::new(&mut store, "dict_g", DictionaryKind::Global, c.n_g, c.c_d).unwrap();
    let detail = Dictionary::new(&mut store, "dict_d", DictionaryKind::Detail, c.n_d, c.c_d).unwrap();
    Setup { store, att, global, detail }
}

fn set(store: &mut ParamStore<f64>, id: ParamId, f: impl Fn(usize) -> f64) {
    for (i, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

/// Row-major `[r, k] · [k, c]`.
fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = (0..k).map(|t| a[i * k + t] * b[t * c + j]).sum();
        }
    }
    out
}

/// Dense multi-head attention with raw values, naive loops.
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, n: usize, d: usize, heads: usize, tau: f64) -> Vec<f64> {
    let hd = d / heads;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..n).map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / tau).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                out[i * d + h * hd + c] = (0..n).map(|j| e[j] / z * v[j * d + h * hd + c]).sum();
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_entry_is_returned_for_any_query() {
    let c = cfg(6, 4, 2, 1, 1);
    let s = setup(&c, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::inference(&s.store);
    let tokens = g.input(rand_tensor(&mut rng, &[5, 6]));
    let (c_g, _) = s.att.global_retrieve(&mut g, tokens, &s.global).unwrap();
    let entry = s.store.value(s.global.entries).data().to_vec();
    for row in g.value(c_g).data().chunks(4) {
        assert!(max_abs_diff(row, &entry) < 1e-15);
    }
    let x_e = g.input(rand_tensor(&mut rng, &[5, 4]));
    let (c_d, _) = s.att.detail_retrieve(&mut g, x_e, &s.detail).unwrap();
    let entry = s.store.value(s.detail.entries).data().to_vec();
    for row in g.value(c_d).data().chunks(4) {
        assert!(max_abs_diff(row, &entry) < 1e-15);
    }
}

#[test]
fn zero_query_gives_column_mean() {
    let c = cfg(6, 8, 2, 5, 3);
    let mut s = setup(&c, 2);
    set(&mut s.store, s.att.w_q_g.weight, |_| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::inference(&s.store);
    let tokens = g.input(rand_tensor(&mut rng, &[4, 6]));
    let (c_g, a_g) = s.att.global_retrieve(&mut g, tokens, &s.global).unwrap();
    for a in &a_g {
        assert!(g.value(*a).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }
    let dict = s.store.value(s.global.entries).data();
    let mean: Vec<f64> = (0..8).map(|j| (0..5).map(|i| dict[i * 8 + j]).sum::<f64>() / 5.0).collect();
    for row in g.value(c_g).data().chunks(8) {
        assert!(max_abs_diff(row, &mean) < 1e-15);
    }
}

#[test]
fn retrieval_matches_dense_oracle() {
    let c = cfg(6, 8, 2, 8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..3 {
        let mut s = setup(&c, seed);
        set(&mut s.store, s.att.log_tau_g, |_| 0.3);
        set(&mut s.store, s.att.log_tau_d, |_| -0.2);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let x_e = rand_tensor(&mut rng, &[4, 8]);
        let mut g = Graph::inference(&s.store);
        let tokens = g.input(x.clone());
        let (c_g, _) = s.att.global_retrieve(&mut g, tokens, &s.global).unwrap();
        let xe = g.input(x_e.clone());
        let (c_d, _) = s.att.detail_retrieve(&mut g, xe, &s.detail).unwrap();

        let v = |id| s.store.value(id).data().to_vec();
        let dg = v(s.global.entries);
        let q = matmul(x.data(), &v(s.att.w_q_g.weight), 4, 6, 8);
        let k = matmul(&dg, &v(s.att.w_k_g.weight), 8, 8, 8);
        let want = attention_oracle(&q, &k, &dg, 4, 8, 8, 2, 0.3f64.exp());
        assert!(max_abs_diff(g.value(c_g).data(), &want) <= 1e-10);

        let dd = v(s.detail.entries);
        let q = matmul(x_e.data(), &v(s.att.w_q_d.weight), 4, 8, 8);
        let k = matmul(&dd, &v(s.att.w_k_d.weight), 5, 8, 8);
        let want = attention_oracle(&q, &k, &dd, 4, 5, 8, 2, (-0.2f64).exp());
        assert!(max_abs_diff(g.value(c_d).data(), &want) <= 1e-10);
    }
}

#[test]
fn enhance_query_examples() {
    let c = cfg(4, 4, 1, 3, 3);
    let mut s = setup(&c, 4);
    // W_proj = [I; 0]: only the context channels pass.
    set(&mut s.store, s.att.w_proj.weight, |i| {
        let (r, col) = (i / 4, i % 4);
        if r < 4 && r == col { 1.0 } else { 0.0 }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let c_g = rand_tensor(&mut rng, &[3, 4]);
    let mut g = Graph::inference(&s.store);
    let (xv, cv) = (g.input(x.clone()), g.input(c_g));
    let x_e = s.att.enhance_query(&mut g, xv, cv).unwrap();
    for (row, got) in x.data().chunks(4).zip(g.value(x_e).data().chunks(4)) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let want: Vec<f64> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        assert!(max_abs_diff(got, &want) < 1e-12);
    }

    // Constant input rows normalize to zero.
    let mut s = setup(&c, 5);
    set(&mut s.store, s.att.w_proj.weight, |_| 0.25);
    let mut g = Graph::inference(&s.store);
    let xv = g.input(Tensor::from_fn(vec![2, 4], |_| 3.0));
    let cv = g.input(Tensor::from_fn(vec![2, 4], |_| 3.0));
    let x_e = s.att.enhance_query(&mut g, xv, cv).unwrap();
    assert!(g.value(x_e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn enhance_query_matches_composed_oracle() {
    let c = cfg(6, 8, 2, 3, 3);
    let s = setup(&c, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 6]);
    let cg = rand_tensor(&mut rng, &[5, 8]);
    let mut g = Graph::inference(&s.store);
    let (xv, cv) = (g.input(x.clone()), g.input(cg.clone()));
    let got = s.att.enhance_query(&mut g, xv, cv).unwrap();
    let joined: Vec<f64> = (0..5).flat_map(|t| x.data()[t * 6..t * 6 + 6].iter().chain(&cg.data()[t * 8..t * 8 + 8]).copied().collect::<Vec<_>>()).collect();
    let p = matmul(&joined, s.store.value(s.att.w_proj.weight).data(), 5, 14, 8);
    let gain = s.store.value(s.att.norm.gain).data();
    let shift = s.store.value(s.att.norm.shift).data();
    let mut want = Vec::new();
    for row in p.chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        want.extend(row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + shift[j]));
    }
    assert!(max_abs_diff(g.value(got).data(), &want) <= 1e-12);
}

#[test]
fn orthonormal_detail_saturates_to_row() {
    let c = cfg(4, 6, 1, 2, 6);
    let mut s = setup(&c, 7);
    set(&mut s.store, s.detail.entries, |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
    set(&mut s.store, s.att.w_q_d.weight, |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
    set(&mut s.store, s.att.w_k_d.weight, |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
    set(&mut s.store, s.att.log_tau_d, |_| 1e-3f64.ln());
    for j in 0..6 {
        let mut g = Graph::inference(&s.store);
        let q = g.input(Tensor::from_fn(vec![1, 6], |c| if c == j { 10.0 } else { 0.0 }));
        let (c_d, _) = s.att.detail_retrieve(&mut g, q, &s.detail).unwrap();
        let want: Vec<f64> = (0..6).map(|c| if c == j { 1.0 } else { 0.0 }).collect();
        assert!(max_abs_diff(g.value(c_d).data(), &want) < 1e-12);
    }
}

#[test]
fn fuse_residual_identities() {
    let c = cfg(6, 8, 2, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 6, 3, 2]);

    // W_2 = 0: the full pass returns its input bit for bit.
    let mut s = setup(&c, 8);
    set(&mut s.store, s.att.w_2.weight, |_| 0.0);
    let mut g = Graph::inference(&s.store);
    let xv = g.input(x.clone());
    let ctx = s.att.forward(&mut g, xv, &s.global, &s.detail).unwrap();
    assert_eq!(g.value(ctx.f_dict), &x);

    // Zero contexts contribute GELU(0)·W_2 = 0.
    let s = setup(&c, 9);
    let mut g = Graph::inference(&s.store);
    let tokens = g.input(rand_tensor(&mut rng, &[5, 6]));
    let zero = g.input(Tensor::zeros(vec![5, 8]));
    let f = s.att.fuse(&mut g, tokens, zero, zero).unwrap();
    assert_eq!(g.value(f), g.value(tokens));

    // Single-level attention keeps the same residual contract.
    let mut store = ParamStore::new(3);
    let single = SingleAttention::new(&mut store, "b", &c).unwrap();
    let dict = Dictionary::new(&mut store, "dict", DictionaryKind::Global, 8, 8).unwrap();
    set(&mut store, single.w_2.weight, |_| 0.0);
    let mut g = Graph::inference(&store);
    let xv = g.input(x.clone());
    let ctx = single.forward(&mut g, xv, &dict).unwrap();
    assert_eq!(g.value(ctx.f_dict), &x);
}

#[test]
fn fuse_matches_composed_oracle() {
    let c = cfg(6, 8, 2, 4, 4);
    let s = setup(&c, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (x, cg, cd) = (rand_tensor(&mut rng, &[3, 6]), rand_tensor(&mut rng, &[3, 8]), rand_tensor(&mut rng, &[3, 8]));
    let mut g = Graph::inference(&s.store);
    let (xv, gv, dv) = (g.input(x.clone()), g.input(cg.clone()), g.input(cd.clone()));
    let got = s.att.fuse(&mut g, xv, gv, dv).unwrap();
    let joined: Vec<f64> = (0..3).flat_map(|t| cg.data()[t * 8..t * 8 + 8].iter().chain(&cd.data()[t * 8..t * 8 + 8]).copied().collect::<Vec<_>>()).collect();
    let h = matmul(&joined, s.store.value(s.att.w_1.weight).data(), 3, 16, 8);
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let h: Vec<f64> = h.into_iter().map(gelu).collect();
    let o = matmul(&h, s.store.value(s.att.w_2.weight).data(), 3, 8, 6);
    let want: Vec<f64> = o.iter().zip(x.data()).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(g.value(got).data(), &want) <= 1e-12);

    let bad = g.input(Tensor::zeros(vec![3, 5]));
    assert!(s.att.fuse(&mut g, bad, gv, dv).is_err());
}

#[test]
fn attention_rows_sum_to_one() {
    let c = cfg(8, 16, 4, 16, 12);
    let s = setup(&c, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::inference(&s.store);
    let x = g.input(Tensor::from_fn(vec![2, 8, 3, 3], |_| rng.gen_range(-4.0..4.0)));
    let ctx = s.att.forward(&mut g, x, &s.global, &s.detail).unwrap();
    assert_eq!(ctx.a_g.len(), 4);
    assert_eq!(ctx.a_d.len(), 4);
    for a in ctx.a_g.iter().chain(&ctx.a_d) {
        let t = g.value(*a);
        let n = t.shape()[1];
        assert_eq!(t.shape()[0], 18);
        for row in t.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
    assert_eq!(g.shape(ctx.f_dict), &[2, 8, 3, 3]);
}

#[test]
fn dictionary_permutation_leaves_contexts_unchanged() {
    let c = cfg(6, 8, 2, 7, 5);
    let s = setup(&c, 12);
    let mut permuted = setup(&c, 12);
    let perm = |n: usize, r: usize| (r * 3 + 1) % n;
    for (dict, n) in [(s.global.entries, 7), (s.detail.entries, 5)] {
        let src = s.store.value(dict).data().to_vec();
        set(&mut permuted.store, dict, |i| src[perm(n, i / 8) * 8 + i % 8]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[1, 6, 2, 3]);
    let run = |s: &Setup| {
        let mut g = Graph::inference(&s.store);
        let xv = g.input(x.clone());
        let ctx = s.att.forward(&mut g, xv, &s.global, &s.detail).unwrap();
        (g.value(ctx.c_g).clone(), g.value(ctx.c_d.unwrap()).clone())
    };
    let (a, b) = (run(&s), run(&permuted));
    assert!(max_abs_diff(a.0.data(), b.0.data()) <= 1e-12);
    assert!(max_abs_diff(a.1.data(), b.1.data()) <= 1e-12);
}

#[test]
fn lower_temperature_sharpens_attention() {
    let mut store = ParamStore::<f64>::new(0);
    let tau_id = store.add("tau", &[1], hide_core::param::Init::Zeros).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = rand_tensor(&mut rng, &[1, 4]);
    let k = rand_tensor(&mut rng, &[6, 4]);
    let mut last = 0.0;
    for tau in [4.0, 2.0, 1.0, 0.5, 0.25, 0.1] {
        set(&mut store, tau_id, |_| f64::ln(tau));
        let mut g = Graph::inference(&store);
        let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
        let t = g.param(tau_id);
        let (_, maps) = attention(&mut g, qv, kv, kv, t, 1).unwrap();
        let max = g.value(maps[0]).data().iter().cloned().fold(0.0, f64::max);
        assert!(max > last, "τ={tau}: {max} ≤ {last}");
        last = max;
    }
}

#[test]
fn gradients_reach_both_dictionaries() {
    let c = cfg(6, 8, 2, 4, 4);
    let s = setup(&c, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut g = Graph::new(&s.store);
    let x = g.input(rand_tensor(&mut rng, &[1, 6, 3, 3]));
    let ctx = s.att.forward(&mut g, x, &s.global, &s.detail).unwrap();
    let sq = g.mul(ctx.f_dict, ctx.f_dict).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in [s.global.entries, s.detail.entries, s.att.log_tau_g, s.att.log_tau_d] {
        let norm: f64 = grads.param(id).unwrap().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }
}

#[test]
fn grad_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::<f64>::new(0);
    let tau = store.add("tau", &[1], hide_core::param::Init::Const(0.2)).unwrap();
    for &(t, n, d, dv, heads) in &[(3, 4, 4, 6, 2), (5, 2, 6, 6, 3), (2, 7, 4, 4, 1)] {
        let inputs = vec![rand_tensor(&mut rng, &[t, d]), rand_tensor(&mut rng, &[n, d]), rand_tensor(&mut rng, &[n, dv])];
        let report = GradCheck::default()
            .run(&store, &inputs, &[tau], |g, v| {
                let tv = g.param(tau);
                attention(g, v[0], v[1], v[2], tv, heads).map(|(o, _)| o)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn grad_full_hdca() {
    for (i, &(c_ctx, c_d, heads, n_g, n_d, shape)) in
        [(4, 4, 2, 3, 2, [1, 4, 2, 2]), (6, 8, 2, 4, 3, [2, 6, 1, 2]), (3, 6, 3, 2, 5, [1, 3, 3, 1])].iter().enumerate()
    {
        let c = HdcaConfig { tie_temperatures: i == 1, ..cfg(c_ctx, c_d, heads, n_g, n_d) };
        let s = setup(&c, 20 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + i as u64);
        let params: Vec<ParamId> = s.store.iter().map(|(id, _)| id).collect();
        let report = GradCheck::default()
            .run(&s.store, &[rand_tensor(&mut rng, &shape)], &params, |g, v| {
                s.att.forward(g, v[0], &s.global, &s.detail).map(|ctx| ctx.f_dict)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn grad_single_attention() {
    let c = cfg(4, 6, 2, 5, 1);
    let mut store = ParamStore::new(30);
    let att = SingleAttention::new(&mut store, "b", &c).unwrap();
    let dict = Dictionary::new(&mut store, "dict", DictionaryKind::Global, 5, 6).unwrap();
    let params: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let report = GradCheck::default()
        .run(&store, &[rand_tensor(&mut rng, &[1, 4, 2, 3])], &params, |g, v| att.forward(g, v[0], &dict).map(|ctx| ctx.f_dict))
        .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
