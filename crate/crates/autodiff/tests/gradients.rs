use autodiff::gradcheck::{check_gradients, run_primitive_suite};
use autodiff::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    let reports = run_primitive_suite(50, 7, 1e-5).unwrap();
    assert!(reports.len() >= 20);
    for r in &reports {
        assert!(
            r.max_relative_error <= 1e-5,
            "{}: relative error {:e}",
            r.name,
            r.max_relative_error
        );
    }
}

#[test]
fn composite_transformer_block_gradient() {
    // Attention + MLP stack as used by the language model, checked end to end.
    let inputs = vec![
        Tensor::matrix(3, 4, vec![0.1, -0.2, 0.3, 0.5, 0.7, 0.1, -0.4, 0.2, -0.3, 0.6, 0.2, -0.1])
            .unwrap(),
        Tensor::matrix(4, 4, (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect())
            .unwrap(),
        Tensor::vector(vec![1.0, 0.9, 1.1, 1.0]),
        Tensor::vector(vec![0.0, 0.1, -0.1, 0.05]),
    ];
    let errs = check_gradients(
        &inputs,
        |g, v| {
            let ln = g.layer_norm(v[0], v[2], v[3], 1e-5)?;
            let q = g.matmul(ln, v[1])?;
            let w = g.causal_attention(q, ln, 0.5)?;
            let mixed = g.matmul(w, q)?;
            let act = g.gelu(mixed)?;
            let lp = g.log_softmax(act)?;
            let picked = g.gather(lp, &[0, 3, 1])?;
            g.mean(picked)
        },
        1e-5,
    )
    .unwrap();
    for e in errs {
        assert!(e <= 1e-5, "{e:e}");
    }
}

fn build_and_grad(x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.param(Tensor::matrix(1, x.len(), x.to_vec()).unwrap());
    let s = g.softmax(v).unwrap();
    let t = g.tanh(s).unwrap();
    let l = g.sum(t).unwrap();
    g.backward(l).unwrap().get(v).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one(x in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(1, x.len(), x.clone()).unwrap());
        let s = g.softmax(v).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn log_softmax_is_log_of_softmax(x in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(1, x.len(), x.clone()).unwrap());
        let s = g.softmax(v).unwrap();
        let ls = g.log_softmax(v).unwrap();
        for (p, lp) in g.value(s).data().iter().zip(g.value(ls).data()) {
            prop_assert!((p.ln() - lp).abs() <= 1e-9);
        }
    }

    #[test]
    fn backward_is_deterministic(x in proptest::collection::vec(-3.0f64..3.0, 2..20)) {
        prop_assert_eq!(build_and_grad(&x), build_and_grad(&x));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_identity(
        raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)
    ) {
        let sp: f64 = raw.iter().map(|r| r.0).sum::<f64>() + 1e-9;
        let sq: f64 = raw.iter().map(|r| r.1).sum::<f64>() + 1e-9;
        let p: Vec<f64> = raw.iter().map(|r| (r.0 + 1e-9 / raw.len() as f64) / sp).collect();
        let q: Vec<f64> = raw.iter().map(|r| (r.1 + 1e-9 / raw.len() as f64) / sq).collect();
        let kl = autodiff::kl_categorical(&p, &q).unwrap().value;
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(autodiff::kl_categorical(&p, &p).unwrap().value, 0.0);
    }
}
