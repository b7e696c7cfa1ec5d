use handcue_tensor::{
    Adam, AdamConfig, Conv2d, Conv2dSpec, Graph, Linear, Params, Rng, Stream, Tensor, TensorError,
};
use proptest::prelude::*;

fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(shape)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape(n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..12, w in 3usize..12,
                         k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut g = Graph::inference();
        let x = g.input(ones(&[n, c, h, w])).unwrap();
        let wt = g.input(ones(&[o, c, k, k])).unwrap();
        let b = g.input(Tensor::zeros(&[o])).unwrap();
        let y = g.conv2d(x, wt, b, Conv2dSpec { stride, pad }).unwrap();
        let expect = [n, o, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1];
        prop_assert_eq!(g.shape(y), &expect[..]);
    }

    #[test]
    fn pool_upsample_gap_shapes(n in 1usize..3, c in 1usize..5, h in 2usize..10, w in 2usize..10, k in 1usize..3) {
        let mut g = Graph::inference();
        let x = g.input(ones(&[n, c, h, w])).unwrap();
        let p = g.maxpool(x, k).unwrap();
        prop_assert_eq!(g.shape(p), &[n, c, h / k, w / k][..]);
        let u = g.upsample_nearest(x, k).unwrap();
        prop_assert_eq!(g.shape(u), &[n, c, h * k, w * k][..]);
        let a = g.global_avg_pool(x).unwrap();
        prop_assert_eq!(g.shape(a), &[n, c][..]);
    }

    #[test]
    fn concat_hadamard_linear_shapes(n in 1usize..4, c1 in 1usize..4, c2 in 1usize..4, h in 1usize..6,
                                     din in 1usize..8, dout in 1usize..8) {
        let mut g = Graph::inference();
        let a = g.input(ones(&[n, c1, h, h])).unwrap();
        let b = g.input(ones(&[n, c2, h, h])).unwrap();
        let cat = g.concat_channels(a, b).unwrap();
        prop_assert_eq!(g.shape(cat), &[n, c1 + c2, h, h][..]);
        let had = g.hadamard(a, a).unwrap();
        prop_assert_eq!(g.shape(had), &[n, c1, h, h][..]);
        let x = g.input(ones(&[n, din])).unwrap();
        let w = g.input(ones(&[dout, din])).unwrap();
        let bias = g.input(Tensor::zeros(&[dout])).unwrap();
        let y = g.linear(x, w, bias).unwrap();
        prop_assert_eq!(g.shape(y), &[n, dout][..]);
        let s = g.softmax(y).unwrap();
        prop_assert_eq!(g.shape(s), &[n, dout][..]);
        let sig = g.sigmoid(y).unwrap();
        prop_assert_eq!(g.shape(sig), &[n, dout][..]);
    }

    #[test]
    fn mismatched_hadamard_names_both_shapes(a in 1usize..5, b in 1usize..5) {
        prop_assume!(a != b);
        let mut g = Graph::inference();
        let x = g.input(ones(&[1, a])).unwrap();
        let y = g.input(ones(&[1, b])).unwrap();
        match g.hadamard(x, y) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                prop_assert_eq!(left, vec![1, a]);
                prop_assert_eq!(right, vec![1, b]);
            }
            other => prop_assert!(false, "unexpected {other:?}"),
        }
    }
}

fn train_tiny(seed: u64, steps: usize) -> String {
    let mut rng = Rng::new(seed, Stream::Weights);
    let mut params = Params::new();
    let conv = Conv2d::same(&mut params, "conv", 2, 4, 3, &mut rng);
    let head = Linear::new(&mut params, "head", 4, 1, &mut rng);
    let mut adam = Adam::new(&params, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    let mut data = Rng::new(seed, Stream::Noise);
    for _ in 0..steps {
        let x = Tensor::from_fn(&[4, 2, 6, 6], |_| data.normal_f32());
        let t = Tensor::from_fn(&[4, 1], |i| (i % 2) as f32);
        let mut g = Graph::new();
        let xv = g.input(x).unwrap();
        let h = conv.forward_relu(&mut g, &params, xv).unwrap();
        let h = g.global_avg_pool(h).unwrap();
        let y = head.forward(&mut g, &params, h).unwrap();
        let loss = g.bce_with_logits(y, t).unwrap();
        let grads = g.backward(loss).unwrap();
        adam.step(&mut params, &grads).unwrap();
    }
    params.checksum()
}

#[test]
fn seeded_training_runs_are_bitwise_identical() {
    let a = train_tiny(42, 100);
    let b = train_tiny(42, 100);
    assert_eq!(a, b);
    assert_ne!(a, train_tiny(43, 100));
}
