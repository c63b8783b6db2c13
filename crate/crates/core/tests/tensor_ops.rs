use proptest::prelude::*;
use varcast::tensor::{finite_diff_check, Graph, RngStream, Tensor, Var};
use varcast::Result;

/// Weighted sum so that a plain sum's structural zeros (e.g. softmax) do not
/// hide errors.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = RngStream::new(seed ^ 0xabcd).uniform_tensor(&shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check(seed: u64, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    finite_diff_check(
        |g, v| {
            let y = f(g, v)?;
            weighted(g, y, seed)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
    .max_elem_rel_err
}

fn rand(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    RngStream::new(seed).uniform_tensor(shape, lo, hi)
}

/// Values bounded away from zero in magnitude, for ops with a kink at 0.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut t = rand(seed, shape, 0.2, 1.5);
    for (i, x) in t.data_mut().iter_mut().enumerate() {
        if i % 3 == 0 {
            *x = -*x;
        }
    }
    t
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn binary_ops_pass_gradcheck(seed in 0u64..1_000_000) {
        let a = rand(seed, &[2, 3, 4], -1.0, 1.0);
        let b = rand(seed + 1, &[3, 1], 0.5, 2.0);
        prop_assert!(check(seed, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])) < TOL);
        prop_assert!(check(seed, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])) < TOL);
        prop_assert!(check(seed, vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])) < TOL);
        prop_assert!(check(seed, vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1])) < TOL);
    }

    #[test]
    fn matmul_passes_gradcheck(seed in 0u64..1_000_000) {
        let a = rand(seed, &[2, 3, 4], -1.0, 1.0);
        let b = rand(seed + 1, &[4, 5], -1.0, 1.0);
        let c = rand(seed + 2, &[2, 4, 2], -1.0, 1.0);
        prop_assert!(check(seed, vec![a.clone(), b], |g, v| g.matmul(v[0], v[1])) < TOL);
        prop_assert!(check(seed, vec![a, c], |g, v| g.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn unary_ops_pass_gradcheck(seed in 0u64..1_000_000) {
        let x = rand(seed, &[3, 4], -1.5, 1.5);
        let pos = rand(seed + 7, &[3, 4], 0.3, 2.0);
        let off = away_from_zero(seed + 9, &[3, 4]);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.exp(v[0])) < TOL);
        prop_assert!(check(seed, vec![pos.clone()], |g, v| g.log(v[0])) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.sigmoid(v[0])) < TOL);
        prop_assert!(check(seed, vec![off], |g, v| g.abs(v[0])) < TOL);
        prop_assert!(check(seed, vec![pos.clone()], |g, v| g.powf(v[0], 1.7)) < TOL);
        prop_assert!(check(seed, vec![pos], |g, v| g.powf(v[0], -1.0)) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.gelu(v[0])) < TOL);
        prop_assert!(check(seed, vec![x], |g, v| g.softmax_lastdim(v[0])) < TOL);
    }

    #[test]
    fn reductions_and_layout_pass_gradcheck(seed in 0u64..1_000_000) {
        let x = rand(seed, &[2, 3, 4], -1.0, 1.0);
        let y = rand(seed + 3, &[2, 2, 4], -1.0, 1.0);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.sum_axis(v[0], 1, false)) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.mean_axis(v[0], 2, true)) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1])) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.transpose(v[0])) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.reshape(v[0], &[6, 4])) < TOL);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.slice(v[0], 1, 1, 3)) < TOL);
        prop_assert!(check(seed, vec![x, y], |g, v| g.concat(&[v[0], v[1]], 1)) < TOL);
    }

    #[test]
    fn norms_and_rotary_pass_gradcheck(seed in 0u64..1_000_000) {
        let x = rand(seed, &[3, 4], -1.0, 1.0);
        let gain = rand(seed + 1, &[4], 0.5, 1.5);
        let bias = rand(seed + 2, &[4], -0.5, 0.5);
        prop_assert!(check(seed, vec![x.clone(), gain.clone()], |g, v| g.rmsnorm(v[0], v[1], 1e-8)) < TOL);
        prop_assert!(check(seed, vec![x.clone(), gain, bias], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5)) < TOL);
        let r = rand(seed + 4, &[2, 3, 4], -1.0, 1.0);
        prop_assert!(check(seed, vec![r], |g, v| g.rotary(v[0], &[0, 1, 2], 10_000.0)) < TOL);
    }

    #[test]
    fn attention_primitives_pass_gradcheck(seed in 0u64..1_000_000) {
        let scores = rand(seed, &[2, 2, 4, 4], -1.0, 1.0);
        let mask = Tensor::from_fn(&[2, 4, 4], |i| if i[2] <= i[1] { 1.0 } else { 0.0 });
        let soft = rand(seed + 5, &[2, 4, 4], 0.2, 1.0);
        let hard = check(seed, vec![scores.clone()], |g, v| {
            let m = g.constant(mask.clone());
            g.masked_softmax(v[0], m, 2.0)
        });
        prop_assert!(hard < TOL);
        // soft (fractional) masks are differentiable in both arguments
        prop_assert!(check(seed, vec![scores, soft], |g, v| g.masked_softmax(v[0], v[1], 2.0)) < TOL);
        let gm = rand(seed + 6, &[2, 2, 2], 0.0, 1.0);
        let t = Tensor::from_fn(&[3, 3], |i| if i[1] <= i[0] { 1.0 } else { 0.0 });
        prop_assert!(check(seed, vec![gm], |g, v| g.kron_mask(v[0], &t)) < TOL);
    }

    #[test]
    fn row_routing_ops_pass_gradcheck(seed in 0u64..1_000_000) {
        let x = rand(seed, &[4, 3], -1.0, 1.0);
        prop_assert!(check(seed, vec![x.clone()], |g, v| g.index_select(v[0], &[2, 0, 2])) < TOL);
        let y = rand(seed + 1, &[3, 3], -1.0, 1.0);
        prop_assert!(check(seed, vec![y], |g, v| g.scatter_rows(v[0], &[1, 3, 1], 5)) < TOL);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1_000_000) {
        let x = rand(seed, &[5, 7], -30.0, 30.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_lastdim(v).unwrap();
        for row in g.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let p = g.matmul(a, i).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let s = g.softmax_lastdim(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let one = g.constant(Tensor::ones(&[2]));
    let r = g.rmsnorm(x, one, 1e-8).unwrap();
    let denom = (12.5f64 + 1e-8).sqrt();
    let got = g.value(r).data();
    assert!((got[0] - 3.0 / denom).abs() < 1e-15);
    assert!((got[1] - 4.0 / denom).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let s = g.sigmoid(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.25);

    // softmax → weighted sum, composite
    let r = finite_diff_check(
        |g, v| {
            let s = g.softmax_lastdim(v[0])?;
            let w = g.constant(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
            let p = g.mul(s, w)?;
            g.sum_all(p)
        },
        &[Tensor::from_vec(vec![0.1, -0.4, 0.9])],
        1e-5,
    )
    .unwrap();
    assert!(r.max_elem_rel_err < 1e-6);
}

#[test]
fn errors_are_descriptive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(varcast::Error::Shape { .. })));
    assert!(matches!(g.log(a), Err(varcast::Error::Domain { .. })));
    assert!(matches!(g.div(a, b), Err(varcast::Error::Domain { .. })));
    assert!(g.log_eps(a, 1e-8).is_ok());
    let big = g.constant(Tensor::from_vec(vec![800.0]));
    assert!(matches!(g.exp(big), Err(varcast::Error::NonFinite { .. })));
    // non-scalar loss
    assert!(matches!(g.backward(a), Err(varcast::Error::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let x = g.param(Tensor::from_vec(vec![3.0, 4.0]));
    let unused = g.param(Tensor::from_vec(vec![5.0]));
    let p = g.mul(w, x).unwrap();
    let l = g.sum_all(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get_or_zero(unused).data(), &[0.0]);
}

#[test]
fn straight_through_passes_soft_gradient() {
    let mut g = Graph::new();
    let soft = g.param(Tensor::from_vec(vec![0.3, 0.8]));
    let st = g
        .straight_through(soft, Tensor::from_vec(vec![0.0, 1.0]))
        .unwrap();
    assert_eq!(g.value(st).data(), &[0.0, 1.0]);
    let w = g.constant(Tensor::from_vec(vec![2.0, -1.0]));
    let p = g.mul(st, w).unwrap();
    let l = g.sum_all(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(soft).unwrap().data(), &[2.0, -1.0]);
}
