use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check, grad_check_abs};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// `Σ w ⊙ out` with fixed random weights so every output coordinate matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

const SEEDS: u64 = 10;
const EPS: f64 = 1e-5;

#[test]
fn dense_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
    let b = tape.constant(t(&[1], &[0.5]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[5.5]);
}

#[test]
fn dense_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 4]));
    let w = tape.constant(Tensor::zeros(&[5, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.dense(x, w, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
}

#[test]
fn dense_gradient_of_sum() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
        ];
        let err = grad_check(
            |tape, v| {
                let y = tape.dense(v[0], v[1], v[2])?;
                Ok(tape.sum_all(y))
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let mut tape32 = Tape::<f32>::new();
    let x = tape32.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = tape32.softmax(x, 0).unwrap();
    let v = tape32.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f32>::new();
    let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-1e4..1e4)).collect();
    let x = tape.constant(Tensor::new(vec![8, 8], data).unwrap());
    for axis in 0..2 {
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y).data();
        for i in 0..8 {
            let s: f32 = (0..8)
                .map(|j| if axis == 1 { v[i * 8 + j] } else { v[j * 8 + i] })
                .sum();
            assert!((s - 1.0).abs() <= 1e-6, "{s}");
        }
    }
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4, 2])];
        for axis in 0..3 {
            let err = grad_check(
                |tape, v| {
                    let y = tape.softmax(v[0], axis)?;
                    project(tape, y, seed)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed} axis {axis}: {err}");
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(t(&[3], &[1.0; 3]));
    let o = tape.constant(t(&[3], &[0.0; 3]));
    let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
    let y = tape.layer_norm(x, g, o).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let g = tape.constant(t(&[2], &[1.0; 2]));
    let o = tape.constant(t(&[2], &[0.0; 2]));
    let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = tape.layer_norm(x, g, o).unwrap();
    for (a, b) in tape.value(y).data().iter().zip([1.0, -1.0]) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_statistics_and_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
        ];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(inputs[0].clone());
        let one = tape.constant(Tensor::full(&[6], 1.0));
        let zero = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, one, zero).unwrap();
        for row in tape.value(y).data().chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
        let err = grad_check(
            |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2])?;
                project(tape, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[4, 5, 2]);
    let mut k = Tensor::zeros(&[1, 1, 2, 2]);
    k.data_mut()[0] = 1.0;
    k.data_mut()[3] = 1.0;
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let y = tape.conv2d(xv, kv, None, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_averaging_keeps_constant_interior() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[6, 6, 1], 0.7));
    let k = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0));
    let y = tape.conv2d(x, k, None, 1).unwrap();
    let v = tape.value(y).data();
    for r in 1..5 {
        for c in 1..5 {
            assert!((v[r * 6 + c] - 0.7).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_rejects_unsupported_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[4, 4, 1]));
    let k = tape.constant(Tensor::zeros(&[7, 7, 1, 1]));
    assert!(matches!(tape.conv2d(x, k, None, 1), Err(Error::Config(_))));
}

#[test]
fn conv2d_output_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[64, 64, 3]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 3, 8]));
    let y = tape.conv2d(x, k, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[32, 32, 8]);
}

#[test]
fn conv2d_gradient() {
    for seed in 0..SEEDS {
        for (ksize, stride) in [(1, 1), (3, 1), (3, 2), (5, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                rand_tensor(&mut rng, &[5, 5, 2]),
                rand_tensor(&mut rng, &[ksize, ksize, 2, 3]),
                rand_tensor(&mut rng, &[3]),
            ];
            let err = grad_check(
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], Some(v[2]), stride)?;
                    project(tape, y, seed)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed} k{ksize} s{stride}: {err}");
        }
    }
}

#[test]
fn broadcast_conv_matches_explicit_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = rand_tensor(&mut rng, &[3]);
    let k = rand_tensor(&mut rng, &[5, 5, 3, 4]);
    let mut tape = Tape::<f64>::new();
    let vv = tape.constant(v.clone());
    let kv = tape.constant(k);
    let fast = tape.broadcast_conv2d(vv, kv, 6, 7).unwrap();
    let mut full = Vec::new();
    for _ in 0..42 {
        full.extend_from_slice(v.data());
    }
    let map = tape.constant(t(&[6, 7, 3], &full));
    let slow = tape.conv2d(map, kv, None, 1).unwrap();
    assert!(tape.value(fast).max_abs_diff(tape.value(slow)) < 1e-12);
}

#[test]
fn broadcast_conv_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[5, 5, 3, 2])];
        let err = grad_check(
            |tape, v| {
                let y = tape.broadcast_conv2d(v[0], v[1], 6, 4)?;
                project(tape, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn depthwise_conv1d_examples() {
    let mut tape = Tape::<f64>::new();
    let seq: Vec<f64> = [0.0, 3.0, 0.0, 3.0, 0.0, 3.0]
        .iter()
        .flat_map(|v| [*v, *v])
        .collect();
    let x = tape.constant(t(&[6, 2], &seq));
    let delta = tape.constant(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
    let y = tape.depthwise_conv1d(x, delta).unwrap();
    assert_eq!(tape.value(y).data(), &seq[..]);

    let avg = tape.constant(Tensor::full(&[3, 2], 1.0 / 3.0));
    let y = tape.depthwise_conv1d(x, avg).unwrap();
    let v = tape.value(y).data();
    // 3-tap average of 0,3,0 is 1 and of 3,0,3 is 2.
    let expect = [1.0, 2.0, 1.0, 2.0];
    for (i, step) in (1..5).enumerate() {
        assert!((v[step * 2] - expect[i]).abs() < 1e-12, "{:?}", v);
    }
}

#[test]
fn depthwise_conv1d_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let k = tape.constant(Tensor::zeros(&[5, 2]));
    assert!(matches!(tape.depthwise_conv1d(x, k), Err(Error::Config(_))));
    let k = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.depthwise_conv1d(x, k), Err(Error::Config(_))));
}

#[test]
fn depthwise_conv1d_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_tensor(&mut rng, &[3, 7, 2]), rand_tensor(&mut rng, &[5, 2])];
        let err = grad_check(
            |tape, v| {
                let y = tape.depthwise_conv1d(v[0], v[1])?;
                project(tape, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_and_structural_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[4, 3]),
        ];
        let err = grad_check(
            |tape, v| {
                let a = tape.mul(v[0], v[1])?;
                let b = tape.sub(a, v[1])?;
                let c = tape.add_row(b, v[2])?;
                let d = tape.mul_row(c, v[2])?;
                let e = tape.sigmoid(d);
                let f = tape.tanh(e);
                let g = tape.affine(f, -2.0, 1.0);
                let h = tape.add(g, v[0])?;
                let i = tape.matmul(h, v[3])?;
                let j = tape.matmul_nt(i, v[3])?;
                let k = tape.concat_last(j, v[1])?;
                let m = tape.mean_rows(k);
                let n = tape.reshape(m, &[8, 1])?;
                let rows = tape.gather_rows(n, &[0, 3, 3, 7])?;
                let r = tape.relu(rows);
                project(tape, r, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn time_stacking_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[2, 3]),
        ];
        let err = grad_check(
            |tape, v| {
                let s = tape.stack_time(v)?;
                let a = tape.select_time(s, 1)?;
                let b = tape.select_time(s, 2)?;
                let c = tape.mul(a, b)?;
                let d = project(tape, s, seed)?;
                let e = project(tape, c, seed + 1)?;
                tape.weighted_sum(&[(d, 1.0), (e, 0.5)])
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn query_pool_gradient_and_weights() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 5, 4]),
            rand_tensor(&mut rng, &[3, 5, 6]),
            rand_tensor(&mut rng, &[2, 2]),
        ];
        let alpha = query_pool_weights(inputs[0].data(), inputs[2].data(), 3, 5, 2, 2);
        for row in alpha.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let err = grad_check(
            |tape, v| {
                let y = tape.query_pool(v[0], v[1], v[2])?;
                project(tape, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn upsample_identity_constant_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4, 2]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.upsample_bilinear(xv, 1).unwrap();
    assert_eq!(tape.value(y), &x);
    let c = tape.constant(Tensor::full(&[3, 3, 2], 0.25));
    let y = tape.upsample_bilinear(c, 4).unwrap();
    assert_eq!(tape.shape(y), &[12, 12, 2]);
    assert!(tape.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-12));

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_tensor(&mut rng, &[3, 2, 2])];
        let err = grad_check(
            |tape, v| {
                let y = tape.upsample_bilinear(v[0], 3)?;
                project(tape, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_linear_and_constant_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![rand_tensor(&mut rng, &[7])];
    let err = grad_check(|tape, v| Ok(tape.sum_all(v[0])), &inputs, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
    let abs = grad_check_abs(
        |tape, v| {
            let s = tape.softmax(v[0], 0)?;
            Ok(tape.sum_all(s))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(abs < 1e-8, "{abs}");
}

#[test]
fn grad_check_rejects_non_finite_values() {
    let inputs = vec![t(&[1], &[f64::NAN])];
    let err = grad_check(|tape, v| Ok(tape.sum_all(v[0])), &inputs, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Evaluation(_)));
}

#[test]
fn three_op_chain_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4]),
        ];
        let err = grad_check(
            |tape, v| {
                let d = tape.dense(v[0], v[1], v[2])?;
                let s = tape.softmax(d, 1)?;
                let one = tape.constant(Tensor::full(&[4], 1.0));
                let zero = tape.constant(Tensor::zeros(&[4]));
                let n = tape.layer_norm(s, one, zero)?;
                project(tape, n, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}
