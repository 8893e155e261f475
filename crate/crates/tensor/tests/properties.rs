use proptest::prelude::*;
use regionedit_tensor::fault::inject_sign_flip;
use regionedit_tensor::{Graph, OpKind, Tensor};

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..9, seed in prop::collection::vec(-1e4f64..1e4, 36)) {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([rows, cols], |i| seed[i % seed.len()]));
        let y = g.value(g.softmax_rows(x).unwrap());
        for row in y.data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_f32(vals in prop::collection::vec(-1e4f32..1e4, 1..16)) {
        let g = Graph::<f32>::new();
        let n = vals.len();
        let x = g.constant(Tensor::new([1, n], vals).unwrap());
        let y = g.value(g.softmax_rows(x).unwrap());
        let total: f64 = y.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn concat_then_slice_round_trips(a in 1usize..4, b in 1usize..4, inner in 1usize..4, axis in 0usize..2,
                                     vals in prop::collection::vec(any::<f32>(), 48)) {
        let g = Graph::<f32>::new();
        let (sa, sb) = if axis == 0 { ([a, inner], [b, inner]) } else { ([inner, a], [inner, b]) };
        let ta = Tensor::from_fn(sa, |i| vals[i % 48]);
        let tb = Tensor::from_fn(sb, |i| vals[(i + 17) % 48]);
        let va = g.constant(ta.clone());
        let vb = g.constant(tb.clone());
        let c = g.concat(&[va, vb], axis).unwrap();
        let back_a = g.value(g.slice(c, axis, 0, a).unwrap());
        let back_b = g.value(g.slice(c, axis, a, a + b).unwrap());
        prop_assert!(back_a.bit_eq(&ta));
        prop_assert!(back_b.bit_eq(&tb));
    }
}

fn forward_once(seed: u64) -> Tensor<f32> {
    let g = Graph::<f32>::new();
    let mut state = seed;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) * 4.0 - 2.0
    };
    let x = g.constant(Tensor::from_fn([7, 16], |_| next()));
    let w = g.constant(Tensor::from_fn([16, 16], |_| next()));
    let h = g.matmul(x, w).unwrap();
    let h = g.layer_norm(h, None, None, 1e-5).unwrap();
    let h = g.gelu(h);
    g.value(g.softmax_rows(h).unwrap())
}

#[test]
fn forward_is_bit_deterministic() {
    assert!(forward_once(3).bit_eq(&forward_once(3)));
}

#[test]
fn sign_flip_fault_corrupts_only_the_chosen_rule() {
    let run = || {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        g.grad(x).unwrap().into_data()
    };
    assert_eq!(run(), vec![2.0, 4.0]);
    {
        let _fault = inject_sign_flip(OpKind::Mul);
        // only the first input of the product is negated: 2x - x... = 0 net
        assert_eq!(run(), vec![0.0, 0.0]);
    }
    {
        let _fault = inject_sign_flip(OpKind::Softmax);
        assert_eq!(run(), vec![2.0, 4.0]);
    }
    assert_eq!(run(), vec![2.0, 4.0]);
}
