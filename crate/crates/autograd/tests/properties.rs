use proptest::prelude::*;
use usfnet_autograd::{Conv2dOpts, Graph, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-3.0..3.0f64, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1..4usize, 1..6usize, 1..6usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in dims().prop_flat_map(|(b, r, c)| tensor(vec![b, r, c]))) {
        let g = Graph::new();
        let y = g.constant(x.clone()).softmax_last().value();
        let c = x.dim(2);
        for row in y.data().chunks(c) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_matches_naive_product(
        (a, b) in (1..3usize, 1..5usize, 1..5usize, 1..5usize)
            .prop_flat_map(|(n, i, k, j)| (tensor(vec![n, i, k]), tensor(vec![n, k, j])))
    ) {
        let g = Graph::new();
        let y = g.constant(a.clone()).bmm(g.constant(b.clone()), false, false).unwrap().value();
        let (n, i, k, j) = (a.dim(0), a.dim(1), a.dim(2), b.dim(2));
        for bn in 0..n {
            for r in 0..i {
                for c in 0..j {
                    let s: f64 = (0..k).map(|q| a.at(&[bn, r, q]) * b.at(&[bn, q, c])).sum();
                    prop_assert!((y.at(&[bn, r, c]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chunk_then_concat_is_identity(x in (1..4usize, 1..4usize, 1..5usize).prop_flat_map(|(a, n, b)| tensor(vec![a, 2 * n, b]))) {
        let g = Graph::new();
        let parts = g.constant(x.clone()).chunk(2, 1).unwrap();
        let back = usfnet_autograd::Var::concat(&parts, 1).unwrap().value();
        prop_assert_eq!(&*back, &x);
    }

    #[test]
    fn conv_is_linear_in_input(
        (x1, x2, w) in (1..3usize, 5..9usize).prop_flat_map(|(c, s)| (tensor(vec![1, c, s, s]), tensor(vec![1, c, s, s]), tensor(vec![2, c, 3, 3]))),
        alpha in -2.0..2.0f64,
        dilation in 1..3usize,
    ) {
        let opts = Conv2dOpts { padding: dilation, dilation, ..Default::default() };
        let conv = |x: &Tensor| {
            let g = Graph::new();
            (*g.constant(x.clone()).conv2d(g.constant(w.clone()), None, opts).unwrap().value()).clone()
        };
        let mut mix = x2.scale(alpha);
        mix.add_assign(&x1);
        let mut expect = conv(&x2).scale(alpha);
        expect.add_assign(&conv(&x1));
        prop_assert!(conv(&mix).max_abs_diff(&expect) < 1e-10);
        let (out, shape) = (conv(&x1), x1.shape().to_vec());
        prop_assert_eq!(out.shape(), &[shape[0], 2, shape[2], shape[3]][..]);
    }

    #[test]
    fn adaptive_pool_preserves_mean_when_bins_divide(
        x in (1..3usize, 1..4usize).prop_flat_map(|(bins, f)| tensor(vec![1, 2, bins * f, bins * f]).prop_map(move |t| (t, bins))),
    ) {
        let (x, bins) = x;
        let g = Graph::new();
        let p = g.constant(x.clone()).adaptive_avg_pool2d(bins, bins).unwrap().value();
        prop_assert!((p.mean() - x.mean()).abs() < 1e-12);
    }
}
