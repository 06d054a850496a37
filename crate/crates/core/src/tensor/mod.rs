//! Dense `f64` tensors and the reverse-mode tape the model is built on.

mod array;
mod gradcheck;
mod rng;
mod tape;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_many, GRAD_CHECK_FLOOR};
pub use rng::{RngState, RNG_ALGORITHM};
pub use tape::{ConvSpec, Padding, Tape, Unary, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(&t2(&[&[1.0, 2.0]]));
        let b = tape.constant(&t2(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);

        let z = tape.constant(&Tensor::zeros(&[2, 3]));
        let any = tape.constant(&random_tensor(&[3, 4], 1));
        let zc = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(zc), &[2, 4]);
        assert!(tape.value(zc).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(
            msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2,
            "{msg}"
        );
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(&Tensor::new(&[1, 1, 1], vec![2.0]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, Some(b), ConvSpec::valid()).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0]);

        let w = tape.constant(&Tensor::new(&[1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
        let y = tape.conv1d(x, w, Some(b), ConvSpec::same()).unwrap();
        assert_eq!(tape.value(y), &[-2.0, -2.0, 2.0]);

        let xr = tape.constant(&random_tensor(&[2, 7], 4));
        let w0 = tape.constant(&Tensor::zeros(&[3, 2, 3]));
        let b5 = tape.constant(&Tensor::full(&[3], 5.0));
        let y = tape.conv1d(xr, w0, Some(b5), ConvSpec::same()).unwrap();
        assert_eq!(tape.shape(y), &[3, 7]);
        assert!(tape.value(y).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv1d_output_length_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&random_tensor(&[4, 20], 2));
        let w = tape.constant(&random_tensor(&[4, 1, 5], 3));
        let y = tape
            .conv1d(x, w, None, ConvSpec::same().stride(4).groups(4))
            .unwrap();
        assert_eq!(tape.shape(y), &[4, 5]);
        let y = tape
            .conv1d(x, w, None, ConvSpec::valid().stride(3).groups(4))
            .unwrap();
        assert_eq!(tape.shape(y), &[4, (20 - 5) / 3 + 1]);

        let long = tape.constant(&random_tensor(&[4, 1, 30], 3));
        assert!(matches!(
            tape.conv1d(x, long, None, ConvSpec::valid().groups(4)),
            Err(Error::Shape(_))
        ));
        let w3 = tape.constant(&random_tensor(&[3, 1, 3], 3));
        assert!(matches!(
            tape.conv1d(x, w3, None, ConvSpec::same().groups(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let xt = random_tensor(&[5, 9], 8);
        let x = tape.constant(&xt);
        let w = tape.constant(&Tensor::ones(&[5, 1, 1]));
        let y = tape.conv1d(x, w, None, ConvSpec::same().groups(5)).unwrap();
        assert_eq!(tape.value(y), xt.data());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(&Tensor::from_vec(vec![0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.value(s)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(s)[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(&Tensor::from_vec(vec![1000.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.value(s)[0] - 1.0).abs() < 1e-15);
        assert!(tape.value(s)[1] >= 0.0 && tape.value(s)[1] < 1e-300);
    }

    #[test]
    fn unary_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.scalar(s), 0.5);
        let x = tape.constant(&Tensor::from_vec(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0]);
        let l3 = tape.constant(&Tensor::scalar(3f64.ln()));
        let s = tape.sigmoid(l3).unwrap();
        assert!((tape.scalar(s) - 0.75).abs() < 1e-15);
        let bad = tape.constant(&Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(tape.log(bad), Err(Error::Domain(_))));
    }

    #[test]
    fn mean_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(&[&[1.0, 2.0, 3.0]]));
        let m = tape.mean_pool_time(x).unwrap();
        assert_eq!(tape.value(m), &[2.0]);
        let c = tape.constant(&Tensor::full(&[3, 4], 2.5));
        let m = tape.mean_pool_time(c).unwrap();
        assert_eq!(tape.value(m), &[2.5, 2.5, 2.5]);
        let x = tape.constant(&t2(&[&[1.0, 3.0], &[0.0, 0.0]]));
        let m = tape.mean_pool_time(x).unwrap();
        assert_eq!(tape.value(m), &[2.0, 0.0]);
        let v = tape.constant(&Tensor::from_vec(vec![1.0]));
        assert!(matches!(tape.mean_pool_time(v), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_examples() {
        let xt = random_tensor(&[100, 100], 5);
        let mut tape = Tape::new();
        let x = tape.constant(&xt);
        let mut rng = RngState::new(1);
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, &mut rng, true),
            Err(Error::Config(_))
        ));

        let ones = tape.constant(&Tensor::ones(&[100, 100]));
        let d1 = tape
            .dropout(ones, 0.5, &mut RngState::new(9), true)
            .unwrap();
        let d2 = tape
            .dropout(ones, 0.5, &mut RngState::new(9), true)
            .unwrap();
        assert_eq!(tape.value(d1), tape.value(d2));
        let mean: f64 = tape.value(d1).iter().sum::<f64>() / 1e4;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!(tape.value(d1).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&random_tensor(&[2, 3], 1).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let y = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0]).with_grad());
        let yd = tape.detach(y);
        let p = tape.mul(x, yd).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(y).is_none());

        assert!(matches!(tape.backward(p), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_check_examples() {
        let x = random_tensor(&[3, 4], 11);
        let e = grad_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
        assert!(e < 1e-10, "{e}");
        let e = grad_check(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");

        let w = random_tensor(&[2, 3, 3], 12);
        let probe = random_tensor(&[2, 4], 13);
        let e = grad_check_many(
            |t, v| {
                let c = t.conv1d(v[0], v[1], None, ConvSpec::same())?;
                let s = t.softmax(c, 1)?;
                let p = t.constant(&probe);
                let m = t.mul(s, p)?;
                t.sum(m)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(800.0));
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    fn check(f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>, xs: &[Tensor]) {
        let e = grad_check_many(f, xs, 1e-5).unwrap();
        assert!(e < 1e-5, "relative error {e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_matches_finite_differences(seed in 0u64..10_000) {
            let a = random_tensor(&[3, 4], seed);
            let b = random_tensor(&[4, 5], seed + 1);
            let c = random_tensor(&[3, 4], seed + 2);
            let probe = random_tensor(&[3, 5], seed + 3);
            let rowv = random_tensor(&[3], seed + 4);
            // Weighted sums keep the scalar loss sensitive to every output entry.
            let weigh = move |t: &mut Tape, v: Var, probe: &Tensor| -> crate::Result<Var> {
                let p = t.constant(probe);
                let m = t.mul(v, p)?;
                t.sum(m)
            };

            check(|t, v| { let m = t.matmul(v[0], v[1])?; weigh(t, m, &probe) }, &[a.clone(), b.clone()]);
            check(|t, v| { let m = t.transpose(v[0])?; weigh(t, m, &random_tensor(&[4, 3], seed + 5)) }, std::slice::from_ref(&a));
            check(|t, v| { let s = t.add(v[0], v[1])?; let m = t.mul(s, v[1])?; let d = t.sub(m, v[0])?; t.sum(d) }, &[a.clone(), c.clone()]);
            check(|t, v| { let s = t.scale(v[0], -1.7)?; weigh(t, s, &c) }, std::slice::from_ref(&a));
            check(|t, v| { let s = t.add_row_bias(v[0], v[1])?; weigh(t, s, &c) }, &[a.clone(), rowv.clone()]);
            check(|t, v| { let s = t.scale_rows(v[0], v[1])?; weigh(t, s, &c) }, &[a.clone(), rowv.clone()]);
            for axis in 0..2 {
                check(|t, v| { let s = t.softmax(v[0], axis)?; weigh(t, s, &c) }, std::slice::from_ref(&a));
                check(|t, v| { let s = t.log_softmax(v[0], axis)?; weigh(t, s, &c) }, std::slice::from_ref(&a));
            }
            for kind in [Unary::Sigmoid, Unary::Elu, Unary::Exp] {
                check(|t, v| { let s = t.unary(v[0], kind)?; weigh(t, s, &c) }, std::slice::from_ref(&a));
            }
            let pos = Tensor::new(&[3, 4], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
            check(|t, v| { let s = t.log(v[0])?; weigh(t, s, &c) }, &[pos]);
            check(|t, v| { let m = t.mean_pool_time(v[0])?; weigh(t, m, &rowv) }, std::slice::from_ref(&a));
            check(|t, v| { let n = t.narrow(v[0], 1, 1, 2)?; weigh(t, n, &random_tensor(&[3, 2], seed + 6)) }, std::slice::from_ref(&a));
            check(|t, v| { let n = t.concat(&[v[0], v[1]], 0)?; weigh(t, n, &random_tensor(&[6, 4], seed + 7)) }, &[a.clone(), c.clone()]);
            check(|t, v| { let n = t.concat(&[v[0], v[1]], 1)?; weigh(t, n, &random_tensor(&[3, 8], seed + 8)) }, &[a.clone(), c.clone()]);
            check(|t, v| { let r = t.reshape(v[0], &[4, 3])?; weigh(t, r, &random_tensor(&[4, 3], seed + 9)) }, std::slice::from_ref(&a));
            check(|t, v| { let s = t.softmax(v[0], 1)?; t.select(s, 5) }, std::slice::from_ref(&a));
            let mut rng = RngState::new(seed);
            let drop_seed = rng.below(1 << 30) as u64;
            check(move |t, v| { let d = t.dropout(v[0], 0.3, &mut RngState::new(drop_seed), true)?; weigh(t, d, &c) }, std::slice::from_ref(&a));

            let x = random_tensor(&[4, 11], seed + 10);
            let w = random_tensor(&[6, 2, 3], seed + 11);
            let bias = random_tensor(&[6], seed + 12);
            for spec in [ConvSpec::same(), ConvSpec::valid(), ConvSpec::same().stride(2).groups(2), ConvSpec::valid().stride(3).groups(2)] {
                let spec = if spec.groups == 1 { spec.groups(2) } else { spec };
                let out_len = {
                    let mut t = Tape::new();
                    let (xv, wv) = (t.constant(&x), t.constant(&w));
                    let o = t.conv1d(xv, wv, None, spec).unwrap();
                    t.shape(o)[1]
                };
                let probe = random_tensor(&[6, out_len], seed + 13);
                check(|t, v| { let y = t.conv1d(v[0], v[1], Some(v[2]), spec)?; weigh(t, y, &probe) }, &[x.clone(), w.clone(), bias.clone()]);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..10_000, scale in 0.1f64..50.0) {
            let x = random_tensor(&[5, 7], seed);
            let mut tape = Tape::new();
            let xs = tape.constant(&x);
            let xs = tape.scale(xs, scale).unwrap();
            let s = tape.softmax(xs, 1).unwrap();
            for r in tape.value(s).chunks(7) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.iter().all(|&v| v > 0.0));
            }
        }
    }
}
