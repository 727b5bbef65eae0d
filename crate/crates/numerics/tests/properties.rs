use proptest::prelude::*;
use roicae_numerics::kernels;
use roicae_numerics::{grad_global_norm, Gradients, ParamId, Rng, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape(h in 4usize..24, w in 4usize..24, k in 1usize..5, s in 1usize..3, p in 0usize..2, seed in 0u64..1000) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let x = random(&[1, 2, h, w], seed);
        let kern = random(&[3, 2, k, k], seed + 1);
        let y = kernels::conv2d(&x, &kern, &Tensor::zeros(&[3]), s, p).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1][..]);
    }

    #[test]
    fn transposed_conv_inverts_the_strided_shape(h in 1usize..16, w in 1usize..16, seed in 0u64..1000) {
        let x = random(&[1, 2, h, w], seed);
        let kern = random(&[2, 3, 4, 4], seed + 1);
        let y = kernels::conv_transpose2d(&x, &kern, &Tensor::zeros(&[3]), 2, 1).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, 2 * h, 2 * w][..]);
    }

    #[test]
    fn avg_pool_preserves_the_mean(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let x = random(&[1, 1, 2 * h, 2 * w], seed);
        let y = kernels::avg_pool2(&x).unwrap();
        prop_assert!((y.sum() / y.len() as f64 - x.sum() / x.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn replicate_pad_backward_is_its_adjoint(h in 1usize..10, w in 1usize..10, p in 1usize..4, seed in 0u64..1000) {
        let x = random(&[1, 1, h, w], seed);
        let y = kernels::replicate_pad(&x, p).unwrap();
        let g = random(y.shape(), seed + 1);
        let back = kernels::replicate_pad_backward(&g, p, x.shape()).unwrap();
        prop_assert!((y.dot(&g) - x.dot(&back)).abs() < 1e-10);
    }

    #[test]
    fn separable_filter_backward_is_its_adjoint(h in 5usize..16, w in 5usize..16, seed in 0u64..1000) {
        let taps = kernels::gaussian_taps(5, 1.5);
        let x = random(&[1, 1, h, w], seed);
        let y = kernels::separable_filter_valid(&x, &taps).unwrap();
        let g = random(y.shape(), seed + 1);
        let back = kernels::separable_filter_valid_backward(&g, &taps, x.shape()).unwrap();
        prop_assert!((y.dot(&g) - x.dot(&back)).abs() < 1e-10);
    }

    #[test]
    fn global_norm_is_absolutely_homogeneous(n in 1usize..20, c in -5.0f64..5.0, seed in 0u64..1000) {
        let (a, b) = (random(&[n], seed), random(&[n + 1], seed + 1));
        let mut grads = Gradients::default();
        grads.insert(ParamId(0), a.clone());
        grads.insert(ParamId(1), b.clone());
        let mut scaled = Gradients::default();
        scaled.insert(ParamId(0), a.map(|v| c * v));
        scaled.insert(ParamId(1), b.map(|v| c * v));
        let ids = [ParamId(0), ParamId(1)];
        let (base, s) = (grad_global_norm(&grads, &ids).unwrap(), grad_global_norm(&scaled, &ids).unwrap());
        prop_assert!((s - c.abs() * base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn sigmoid_stays_in_the_open_interval(x in -30.0f64..30.0) {
        let s = kernels::sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!((s + kernels::sigmoid(-x) - 1.0).abs() < 1e-12);
    }
}
