use std::sync::Arc;

use askd::numkernel::{finite_diff_check, sgd_step, Graph, Param, Tensor, Var};
use askd::Result;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// Contracts an output with fixed pseudo-random weights so that no
/// gradient coordinate is structurally zero.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| 0.5 + ((i * 37 + 11) % 17) as f64 / 16.0).collect();
    let w = g.constant(Tensor::new(shape, w)?)?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    finite_diff_check(
        |g, v| {
            let y = f(g, v)?;
            project(g, y)
        },
        x,
        STEP,
    )
    .unwrap()
}

macro_rules! fd {
    ($x:expr, $f:expr) => {{
        let e = check($x, $f);
        prop_assert!(e <= TOL, "rel. err {:e}", e);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives_match_finite_differences(x in tensor(3, 4)) {
        fd!(&x, |g, v| g.exp(v));
        fd!(&x, |g, v| g.sigmoid(v));
        fd!(&x, |g, v| g.scale(v, -1.7));
        fd!(&x, |g, v| g.add_scalar(v, 0.3));
        fd!(&x, |g, v| g.transpose(v));
        fd!(&x, |g, v| g.sum_rows(v));
        fd!(&x, |g, v| g.max_rows(v));
        fd!(&x, |g, v| g.slice_cols(v, 1, 3));
        fd!(&x, |g, v| g.softmax_rows(v));
        fd!(&x, |g, v| g.swish(v));
        fd!(&x, |g, v| {
            let e = g.exp(v)?;
            g.log(e)
        });
        fd!(&x, |g, v| {
            let r = g.sum_rows(v)?;
            g.repeat_cols(r, 5)
        });
        let mask = Arc::new((0..12).map(|i| i % 3 == 0).collect::<Vec<_>>());
        fd!(&x, |g, v| g.mask_fill(v, mask.clone(), -5.0));
    }

    #[test]
    fn binary_primitives_match_finite_differences(x in tensor(3, 4), w in tensor(4, 2), z in tensor(3, 4)) {
        fd!(&x, |g, v| { let c = g.constant(w.clone())?; g.matmul(v, c) });
        fd!(&w, |g, v| { let c = g.constant(x.clone())?; g.matmul(c, v) });
        fd!(&x, |g, v| { let c = g.constant(z.clone())?; g.matmul_nt(v, c) });
        fd!(&x, |g, v| { let c = g.constant(z.clone())?; g.matmul_nt(c, v) });
        fd!(&x, |g, v| { let c = g.constant(z.clone())?; g.add(v, c) });
        fd!(&x, |g, v| { let c = g.constant(z.clone())?; g.mul(v, c) });
        fd!(&x, |g, v| g.mul(v, v));
        fd!(&x, |g, v| { let c = g.constant(z.clone())?; g.concat(&[v, c, v]) });
    }

    #[test]
    fn fused_primitives_match_finite_differences(x in tensor(3, 6), t in tensor(3, 6), gb in tensor(2, 6)) {
        let gain = Tensor::new(vec![1, 6], gb.row(0).to_vec()).unwrap();
        let bias = Tensor::new(vec![1, 6], gb.row(1).to_vec()).unwrap();
        fd!(&x, |g, v| {
            let a = g.constant(gain.clone())?;
            let b = g.constant(bias.clone())?;
            g.layer_norm(v, a, b)
        });
        fd!(&gain, |g, v| {
            let xs = g.constant(x.clone())?;
            let b = g.constant(bias.clone())?;
            g.layer_norm(xs, v, b)
        });
        fd!(&x, |g, v| g.gather(v, &[2, 0, 2, 1]));
        let mut target = t.clone();
        for r in 0..3 {
            let row: Vec<f64> = target.row(r).iter().map(|v| v.exp()).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.iter().enumerate() {
                target.data_mut()[r * 6 + c] = v / s;
            }
        }
        let target = Arc::new(target);
        for tau in [1.0, 2.0, 0.7] {
            fd!(&x, |g, v| g.soft_target_xent(v, target.clone(), tau));
        }
    }

    #[test]
    fn evaluation_is_bit_deterministic(x in tensor(4, 4)) {
        let run = || {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true).unwrap();
            let s = g.softmax_rows(v).unwrap();
            let m = g.matmul(s, v).unwrap();
            let l = g.sum_all(m).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().to_bits(), g.grad(v).unwrap())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a, b);
        prop_assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn sgd_reference_values() {
    let mut p = vec![Param::new(Tensor::scalar(1.0))];
    p[0].accumulate_grad(vec![2.0]);
    sgd_step(&mut p, 0.1).unwrap();
    assert!((p[0].value.item() - 0.8).abs() < 1e-15);
    assert!(p[0].grad.is_none());

    p[0].accumulate_grad(vec![f64::NAN]);
    assert!(sgd_step(&mut p, 0.1).is_err());
    assert!((p[0].value.item() - 0.8).abs() < 1e-15);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}
