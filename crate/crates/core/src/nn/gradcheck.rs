//! Central finite-difference checks for every differentiable op.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Checks d(loss)/d(param) for every parameter in `store`, where `build`
/// constructs the scalar loss from the store.
fn check<B>(store: &mut ParameterStore<f64>, build: B)
where
    B: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    store.zero_grad();
    store.accumulate(&grads, 1.0).unwrap();
    let h = 1e-6;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for j in 0..store.value(id).numel() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let mut g1 = Graph::new();
            let l = build(&mut g1, store);
            let plus = g1.value(l).item();
            store.value_mut(id).data_mut()[j] = orig - h;
            let mut g2 = Graph::new();
            let l = build(&mut g2, store);
            let minus = g2.value(l).item();
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = store.grad(id).data()[j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(
                err < 1e-6,
                "{}[{j}]: analytic {an} vs numeric {fd}",
                store.name(id)
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.value(x).shape());
    let w = g.input(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn sum_gradient_is_ones() {
    let mut s = ParameterStore::<f64>::new();
    let x = s.add("x", Tensor::full(&[3, 2], 0.3)).unwrap();
    let mut g = Graph::new();
    let v = g.param(&s, x);
    let l = g.sum(v);
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(v).unwrap().data().iter().all(|&d| d == 1.0));
}

#[test]
fn zero_times_f_has_zero_gradient() {
    let mut s = ParameterStore::<f64>::new();
    let x = s.add("x", Tensor::full(&[4], 0.7)).unwrap();
    let mut g = Graph::new();
    let v = g.param(&s, x);
    let f = g.gelu(v);
    let z = g.scale(f, 0.0);
    let l = g.sum(z);
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(v).unwrap().data().iter().all(|&d| d == 0.0));
}

#[test]
fn matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParameterStore::new();
    s.add("a", rand_tensor(&mut rng, &[3, 4])).unwrap();
    s.add("b", rand_tensor(&mut rng, &[4, 5])).unwrap();
    s.add("c", rand_tensor(&mut rng, &[2, 4])).unwrap();
    s.add("bias", rand_tensor(&mut rng, &[5])).unwrap();
    check(&mut s, |g, s| {
        let a = g.param_by_name(s, "a").unwrap();
        let b = g.param_by_name(s, "b").unwrap();
        let c = g.param_by_name(s, "c").unwrap();
        let bias = g.param_by_name(s, "bias").unwrap();
        let ab = g.linear(a, b, bias).unwrap();
        let cat = g.matmul_bt(ab, b).unwrap(); // [3, 4]
        let cc = g.matmul_bt(cat, c).unwrap(); // [3, 2]
        project(g, cc, 7)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParameterStore::new();
    s.add("x", rand_tensor(&mut rng, &[3, 3])).unwrap();
    s.add("y", rand_tensor(&mut rng, &[3, 3])).unwrap();
    check(&mut s, |g, s| {
        let x = g.param_by_name(s, "x").unwrap();
        let y = g.param_by_name(s, "y").unwrap();
        let a = g.add(x, y).unwrap();
        let m = g.mul(a, x).unwrap();
        let ge = g.gelu(m);
        let sc = g.scale(ge, -1.7);
        project(g, sc, 3)
    });
}

#[test]
fn layer_norm_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParameterStore::new();
    s.add("x", rand_tensor(&mut rng, &[4, 6])).unwrap();
    s.add("g", rand_tensor(&mut rng, &[6])).unwrap();
    s.add("b", rand_tensor(&mut rng, &[6])).unwrap();
    check(&mut s, |g, s| {
        let x = g.param_by_name(s, "x").unwrap();
        let ga = g.param_by_name(s, "g").unwrap();
        let b = g.param_by_name(s, "b").unwrap();
        let y = g.layer_norm(x, ga, b).unwrap();
        project(g, y, 4)
    });
}

#[test]
fn softmax_and_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParameterStore::new();
    s.add("x", rand_tensor(&mut rng, &[3, 5])).unwrap();
    check(&mut s, |g, s| {
        let x = g.param_by_name(s, "x").unwrap();
        let y = g.softmax(x).unwrap();
        project(g, y, 5)
    });
    check(&mut s, |g, s| {
        let x = g.param_by_name(s, "x").unwrap();
        let y = g.log_softmax(x, Some(2)).unwrap();
        let terms = vec![
            NllTerm {
                row: 0,
                target: 1,
                weight: 0.7,
            },
            NllTerm {
                row: 2,
                target: 4,
                weight: 1.3,
            },
            NllTerm {
                row: 1,
                target: 0,
                weight: 0.2,
            },
        ];
        g.nll(y, terms, 0.1, vec![0, 1, 3, 4]).unwrap()
    });
}

#[test]
fn embedding_gather_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParameterStore::new();
    s.add("table", rand_tensor(&mut rng, &[5, 3])).unwrap();
    check(&mut s, |g, s| {
        let t = g.param_by_name(s, "table").unwrap();
        let e = g.embedding(t, &[0, 3, 3, 1, 4]).unwrap();
        let r = g.gather_rows(e, &[4, 1, 2]).unwrap();
        let p = g.mean_pool(r, &[(0, 2), (1, 2)]).unwrap();
        project(g, p, 6)
    });
}

#[test]
fn attention_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParameterStore::new();
    s.add("q", rand_tensor(&mut rng, &[7, 4])).unwrap();
    s.add("k", rand_tensor(&mut rng, &[7, 4])).unwrap();
    s.add("v", rand_tensor(&mut rng, &[7, 4])).unwrap();
    let mut layout = AttnLayout::packed(&[3, 4]);
    layout.key_valid[6] = false;
    let layout = Arc::new(layout);
    check(&mut s, move |g, s| {
        let q = g.param_by_name(s, "q").unwrap();
        let k = g.param_by_name(s, "k").unwrap();
        let v = g.param_by_name(s, "v").unwrap();
        let o = g.attention(q, k, v, 2, layout.clone()).unwrap();
        project(g, o, 8)
    });
}
