//! Op-level oracle tests: hand-computed values, closed forms, and
//! central-finite-difference gradient checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_with_logits, concat, Tensor};
use crate::gradcheck::{check_all, check_gradients, DEFAULT_STEP};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::leaf(shape, data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {i}: {x} vs {y} (tol {tol})"
        );
    }
}

// ── matmul ───────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = i2.matmul(&i2).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn matmul_hand_sum() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    assert!(a.matmul(&b).is_err());
}

#[test]
fn matmul_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, &[5, 7]);
    let b = randn(&mut rng, &[7, 3]);
    // Random projection so all output elements influence the loss unequally.
    let proj = randn(&mut rng, &[5, 3]);
    let proj_c = Tensor::new(&[5, 3], proj.to_vec()).unwrap();
    let report = check_all(&[a, b], &|ins| {
        ins[0].matmul(&ins[1])?.mul(&proj_c)?.sum().mul_scalar(1.0).pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
}

// Small helper so closures can end with Ok(tensor).
trait PipeOk {
    fn pipe_ok(self) -> crate::error::Result<Tensor<f64>>;
}
impl PipeOk for Tensor<f64> {
    fn pipe_ok(self) -> crate::error::Result<Tensor<f64>> {
        Ok(self)
    }
}

// ── softmax ──────────────────────────────────────────────────────────

#[test]
fn softmax_symmetry() {
    let x = Tensor::new(&[1, 3], vec![4.2, 4.2, 4.2]).unwrap();
    let y = x.softmax_rows().unwrap();
    assert_close(&y.to_vec(), &[1.0 / 3.0; 3], 1e-12);
}

#[test]
fn softmax_closed_form() {
    let x = Tensor::new(&[1, 2], vec![0.0, (2.0f64).ln()]).unwrap();
    let y = x.softmax_rows().unwrap();
    assert_close(&y.to_vec(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
}

#[test]
fn softmax_large_logits_stable() {
    let x = Tensor::<f64>::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
    let y = x.softmax_rows().unwrap().to_vec();
    assert!(y[0] > 0.999_999 && y[0] <= 1.0);
    assert!(y[1] >= 0.0 && y[1] < 1e-6);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_rows_sum_to_one_up_to_1e3() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let x = Tensor::new(&[4, 6], data).unwrap();
        let y = x.softmax_rows().unwrap();
        for row in y.to_vec().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
    }
}

#[test]
fn softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[3, 5]);
    let proj = Tensor::new(&[3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let report = check_all(&[x], &|ins| ins[0].softmax_rows()?.mul(&proj)?.sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
}

// ── gelu / sigmoid ───────────────────────────────────────────────────

#[test]
fn gelu_values() {
    let x = Tensor::<f64>::new(&[3], vec![0.0, 10.0, 1.0]).unwrap();
    let y = x.gelu().to_vec();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 10.0).abs() < 1e-6); // saturates to identity
    assert!((y[2] - 0.841345).abs() <= 1e-5); // x·Φ(x) at x=1
}

#[test]
fn gelu_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(&mut rng, &[4, 4]);
    let report = check_all(&[x], &|ins| ins[0].gelu().sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

#[test]
fn sigmoid_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = randn(&mut rng, &[6]);
    let report = check_all(&[x], &|ins| ins[0].sigmoid().sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

// ── layer norm ───────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_is_zero() {
    let x = Tensor::new(&[1, 4], vec![2.5; 4]).unwrap();
    let gain = Tensor::full(&[4], 1.0);
    let bias = Tensor::zeros(&[4]);
    let y = x.layer_norm(&gain, &bias, 1e-6).unwrap();
    assert_close(&y.to_vec(), &[0.0; 4], 1e-3);
}

#[test]
fn layer_norm_two_point_standardization() {
    let x = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
    let gain = Tensor::full(&[2], 1.0);
    let bias = Tensor::zeros(&[2]);
    let y = x.layer_norm(&gain, &bias, 1e-12).unwrap();
    assert_close(&y.to_vec(), &[-1.0, 1.0], 1e-5);
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, &[4, 8]);
    let gain = Tensor::full(&[8], 1.0);
    let bias = Tensor::zeros(&[8]);
    let y = x.layer_norm(&gain, &bias, 1e-10).unwrap();
    for row in y.to_vec().chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6, "row mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "row var {var}");
    }
}

#[test]
fn layer_norm_zero_width_errors() {
    let x = Tensor::<f64>::zeros(&[2, 0]);
    let gain = Tensor::<f64>::zeros(&[0]);
    let bias = Tensor::<f64>::zeros(&[0]);
    assert!(x.layer_norm(&gain, &bias, 1e-6).is_err());
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = randn(&mut rng, &[3, 6]);
    let gain = randn(&mut rng, &[6]);
    let bias = randn(&mut rng, &[6]);
    let proj = Tensor::new(&[3, 6], (0..18).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
    let report = check_all(&[x, gain, bias], &|ins| {
        ins[0].layer_norm(&ins[1], &ins[2], 1e-5)?.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
}

// ── batch norm ───────────────────────────────────────────────────────

#[test]
fn batch_norm_constant_channel_zeros() {
    let x = Tensor::new(&[2, 1, 2, 2], vec![3.0; 8]).unwrap();
    let gain = Tensor::full(&[1], 1.0);
    let bias = Tensor::zeros(&[1]);
    let (y, mean, var) = x.batch_norm_train(&gain, &bias, 1e-5).unwrap();
    assert_close(&y.to_vec(), &[0.0; 8], 1e-9);
    assert_close(&mean, &[3.0], 1e-12);
    assert_close(&var, &[0.0], 1e-12);
}

#[test]
fn batch_norm_eval_matches_hand_formula() {
    let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let gain = Tensor::new(&[2], vec![2.0, 0.5]).unwrap();
    let bias = Tensor::new(&[2], vec![0.1, -0.1]).unwrap();
    let mu = [0.5, 1.0];
    let var = [4.0, 0.25];
    let eps = 1e-5;
    let y = x.batch_norm_eval(&gain, &bias, &mu, &var, eps).unwrap().to_vec();
    let expect: Vec<f64> = vec![
        2.0 * (1.0 - 0.5) / (4.0f64 + eps).sqrt() + 0.1,
        2.0 * (2.0 - 0.5) / (4.0f64 + eps).sqrt() + 0.1,
        0.5 * (3.0 - 1.0) / (0.25f64 + eps).sqrt() - 0.1,
        0.5 * (4.0 - 1.0) / (0.25f64 + eps).sqrt() - 0.1,
    ];
    assert_close(&y, &expect, 1e-12);
}

#[test]
fn batch_norm_train_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let gain = randn(&mut rng, &[3]);
    let bias = randn(&mut rng, &[3]);
    let proj = Tensor::new(&[2, 3, 4, 4], (0..96).map(|i| (i as f64 * 0.17).sin()).collect()).unwrap();
    let report = check_all(&[x, gain, bias], &|ins| {
        let (y, _, _) = ins[0].batch_norm_train(&ins[1], &ins[2], 1e-5)?;
        y.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
}

#[test]
fn batch_norm_train_needs_two_samples() {
    let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
    let gain = Tensor::full(&[2], 1.0);
    let bias = Tensor::zeros(&[2]);
    assert!(x.batch_norm_train(&gain, &bias, 1e-5).is_err());
}

// ── conv2d ───────────────────────────────────────────────────────────

#[test]
fn conv2d_1x1_is_channel_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = randn(&mut rng, &[1, 3, 4, 4]);
    let w = randn(&mut rng, &[2, 3, 1, 1]);
    let y = x.conv2d(&w, 1, 0).unwrap();
    // Compare against per-pixel matmul over channels.
    let xd = x.to_vec();
    let wd = w.to_vec();
    let yd = y.to_vec();
    for p in 0..16 {
        for co in 0..2 {
            let mut expect = 0.0;
            for ci in 0..3 {
                expect += wd[co * 3 + ci] * xd[ci * 16 + p];
            }
            assert!((yd[co * 16 + p] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_box_sum_on_constant_image() {
    let c = 0.7;
    let cin = 2;
    let x = Tensor::new(&[1, cin, 5, 5], vec![c; cin * 25]).unwrap();
    let w = Tensor::new(&[1, cin, 3, 3], vec![1.0; cin * 9]).unwrap();
    let y = x.conv2d(&w, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    for &v in &y.to_vec() {
        assert!((v - 9.0 * c * cin as f64).abs() < 1e-12);
    }
}

#[test]
fn conv2d_kernel_larger_than_input_errors() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
    assert!(x.conv2d(&w, 1, 0).is_err());
}

#[test]
fn conv2d_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = randn(&mut rng, &[1, 2, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let proj = Tensor::new(&[1, 3, 5, 5], (0..75).map(|i| (i as f64 * 0.23).cos()).collect()).unwrap();
    let report = check_all(&[x, w], &|ins| {
        ins[0].conv2d(&ins[1], 1, 1)?.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
}

#[test]
fn conv2d_strided_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = randn(&mut rng, &[2, 2, 6, 6]);
    let w = randn(&mut rng, &[2, 2, 3, 3]);
    let report = check_all(&[x, w], &|ins| {
        ins[0].conv2d(&ins[1], 2, 1)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
}

// ── resize ───────────────────────────────────────────────────────────

#[test]
fn resize_same_size_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let x = randn(&mut rng, &[1, 2, 3, 5]);
    let y = x.resize_bilinear(3, 5).unwrap();
    assert_eq!(x.to_vec(), y.to_vec());
}

#[test]
fn resize_2x2_to_center_mean() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = x.resize_bilinear(1, 1).unwrap();
    assert_close(&y.to_vec(), &[1.5], 1e-12);
}

#[test]
fn resize_down_up_preserves_constants() {
    let x = Tensor::<f64>::new(&[1, 1, 8, 8], vec![0.4; 64]).unwrap();
    let y = x.resize_bilinear(3, 3).unwrap().resize_bilinear(8, 8).unwrap();
    for &v in &y.to_vec() {
        assert!((v - 0.4).abs() <= 1e-6);
    }
}

#[test]
fn resize_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let x = randn(&mut rng, &[1, 2, 4, 4]);
    let proj = Tensor::new(&[1, 2, 7, 5], (0..70).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
    let report = check_all(&[x], &|ins| {
        ins[0].resize_bilinear(7, 5)?.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

// ── pooling ──────────────────────────────────────────────────────────

#[test]
fn avg_pool_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let x = randn(&mut rng, &[1, 2, 6, 6]);
    let report = check_all(&[x], &|ins| ins[0].avg_pool2d(2, 2)?.sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

#[test]
fn max_pool_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = randn(&mut rng, &[1, 2, 6, 6]);
    let proj = Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| 1.0 + (i as f64 * 0.47).sin()).collect()).unwrap();
    let report = check_all(&[x], &|ins| {
        ins[0].max_pool2d(2, 2)?.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

#[test]
fn adaptive_avg_pool_uniform_regions() {
    let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
    let y = x.adaptive_avg_pool2d(2, 2).unwrap();
    // Quadrant means of 0..15 laid out row-major.
    assert_close(&y.to_vec(), &[2.5, 4.5, 10.5, 12.5], 1e-12);
}

#[test]
fn adaptive_avg_pool_gradcheck_non_divisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let x = randn(&mut rng, &[1, 1, 5, 7]);
    let report = check_all(&[x], &|ins| ins[0].adaptive_avg_pool2d(2, 3)?.sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

// ── shape ops ────────────────────────────────────────────────────────

#[test]
fn reshape_transpose_roundtrip_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = randn(&mut rng, &[3, 4, 5]);
    let r = x.reshape(&[4, 15]).unwrap().reshape(&[3, 4, 5]).unwrap();
    assert_eq!(x.to_vec(), r.to_vec());
    let p = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
    assert_eq!(x.to_vec(), p.to_vec());
    let m = randn(&mut rng, &[4, 6]);
    let t = m.transpose().unwrap().transpose().unwrap();
    assert_eq!(m.to_vec(), t.to_vec());
}

#[test]
fn permute_moves_elements_correctly() {
    let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = x.permute(&[1, 0]).unwrap();
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}

#[test]
fn permute_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let x = randn(&mut rng, &[2, 3, 4]);
    let proj = Tensor::new(&[4, 2, 3], (0..24).map(|i| (i as f64 * 0.19).cos()).collect()).unwrap();
    let report = check_all(&[x], &|ins| {
        ins[0].permute(&[2, 0, 1])?.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-10, "rel err {}", report.max_rel_err);
}

#[test]
fn concat_axis1_and_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let a = randn(&mut rng, &[2, 2, 2, 2]);
    let b = randn(&mut rng, &[2, 3, 2, 2]);
    let y = concat(&[a.clone(), b.clone()], 1).unwrap();
    assert_eq!(y.shape(), &[2, 5, 2, 2]);
    let proj = Tensor::new(&[2, 5, 2, 2], (0..40).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap();
    let report = check_all(&[a, b], &|ins| {
        concat(&[ins[0].clone(), ins[1].clone()], 1)?.mul(&proj)?.sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-10, "rel err {}", report.max_rel_err);
}

// ── elementwise & reductions ─────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f64>::leaf(&[2, 3], vec![0.5; 6]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_sum_square_is_2x() {
    let x = Tensor::<f64>::leaf(&[4], vec![1.0, -2.0, 3.0, 0.25]).unwrap();
    let y = x.mul(&x).unwrap().sum();
    y.backward().unwrap();
    assert_close(&x.grad().unwrap(), &[2.0, -4.0, 6.0, 0.5], 1e-12);
}

#[test]
fn backward_accumulation_is_linear() {
    // backward(l1 + l2) == backward(l1) then backward(l2), accumulated
    let build = || Tensor::<f64>::leaf(&[3], vec![0.3, -0.8, 1.2]).unwrap();
    let x1 = build();
    let l1 = x1.mul(&x1).unwrap().sum();
    let l2 = x1.gelu().sum();
    l1.add(&l2).unwrap().backward().unwrap();
    let combined = x1.grad().unwrap();

    let x2 = build();
    x2.mul(&x2).unwrap().sum().backward().unwrap();
    x2.gelu().sum().backward().unwrap();
    let separate = x2.grad().unwrap();
    assert_close(&combined, &separate, 1e-14);
}

#[test]
fn elementwise_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    for shape in [&[5][..], &[2, 3][..], &[2, 2, 2][..]] {
        let a = randn(&mut rng, shape);
        let b = randn(&mut rng, shape);
        // keep b away from zero for div
        b.update_data(|d| {
            for v in d.iter_mut() {
                if v.abs() < 0.2 {
                    *v = 0.2_f64.copysign(*v);
                }
            }
        });
        for op in 0..4 {
            let report = check_all(&[a.clone(), b.clone()], &|ins| match op {
                0 => ins[0].add(&ins[1])?.mul(&ins[0])?.sum().pipe_ok(),
                1 => ins[0].sub(&ins[1])?.mul(&ins[1])?.sum().pipe_ok(),
                2 => ins[0].mul(&ins[1])?.sum().pipe_ok(),
                _ => ins[0].div(&ins[1])?.sum().pipe_ok(),
            })
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-6,
                "op {op} shape {shape:?}: rel err {}",
                report.max_rel_err
            );
        }
    }
}

#[test]
fn broadcast_and_bias_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let x = randn(&mut rng, &[2, 3, 4]);
    let suffix = randn(&mut rng, &[3, 4]);
    let report = check_all(&[x, suffix], &|ins| {
        ins[0].add_suffix(&ins[1])?.gelu().sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);

    let x = randn(&mut rng, &[2, 3, 2, 2]);
    let bias = randn(&mut rng, &[3]);
    let report = check_all(&[x, bias], &|ins| {
        ins[0].add_channel_bias(&ins[1])?.sigmoid().sum().pipe_ok()
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn bmm_matches_per_slice_matmul_and_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let a = randn(&mut rng, &[3, 2, 4]);
    let b = randn(&mut rng, &[3, 4, 5]);
    let y = a.bmm(&b).unwrap();
    for g in 0..3 {
        let a_slice = Tensor::new(&[2, 4], a.to_vec()[g * 8..(g + 1) * 8].to_vec()).unwrap();
        let b_slice = Tensor::new(&[4, 5], b.to_vec()[g * 20..(g + 1) * 20].to_vec()).unwrap();
        let y_slice = a_slice.matmul(&b_slice).unwrap();
        assert_close(
            &y.to_vec()[g * 10..(g + 1) * 10],
            &y_slice.to_vec(),
            1e-12,
        );
    }
    let report = check_all(&[a, b], &|ins| ins[0].bmm(&ins[1])?.sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn mean_lastdim_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = randn(&mut rng, &[2, 3, 4]);
    let report = check_all(&[x], &|ins| ins[0].mean_lastdim()?.gelu().sum().pipe_ok()).unwrap();
    assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
}

// ── composite chain (backward example from the op contracts) ─────────

#[test]
fn composite_chain_gradcheck() {
    // conv → batch norm → GELU → linear read-out, checked end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = randn(&mut rng, &[2, 2, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let gain = randn(&mut rng, &[3]);
    let bias = randn(&mut rng, &[3]);
    let lin = randn(&mut rng, &[3 * 25, 2]);
    let report = check_gradients(
        &[x, w, gain, bias, lin],
        &|ins| {
            let y = ins[0].conv2d(&ins[1], 1, 1)?;
            let (y, _, _) = y.batch_norm_train(&ins[2], &ins[3], 1e-5)?;
            let y = y.gelu();
            let y = y.reshape(&[2, 75])?.matmul(&ins[4])?;
            Ok(y.sum())
        },
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
}

// ── bce primitive ────────────────────────────────────────────────────

#[test]
fn bce_rejects_bad_targets() {
    let z = Tensor::<f64>::zeros(&[2]);
    let t = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
    assert!(bce_with_logits(&z, &t, None).is_err());
}

#[test]
fn bce_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let z = randn(&mut rng, &[3, 3]);
    let t = Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let w = Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
    let report = check_all(&[z], &|ins| bce_with_logits(&ins[0], &t, Some(&w))).unwrap();
    assert!(report.max_rel_err <= 1e-7, "rel err {}", report.max_rel_err);
}

// ── property: three shapes per differentiable op (spec invariant) ────

#[test]
fn gradcheck_three_shapes_per_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let shapes: [&[usize]; 3] = [&[1, 2, 4, 4], &[2, 1, 5, 5], &[1, 3, 6, 4]];
    for shape in shapes {
        let x = randn(&mut rng, shape);
        for op in 0..4 {
            let report = check_all(&[x.clone()], &|ins| match op {
                0 => ins[0].gelu().sum().pipe_ok(),
                1 => ins[0].sigmoid().sum().pipe_ok(),
                2 => ins[0].resize_bilinear(3, 3)?.sum().pipe_ok(),
                _ => ins[0].softmax_rows()?.mul(&ins[0])?.sum().pipe_ok(),
            })
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "op {op} shape {shape:?}: rel err {}",
                report.max_rel_err
            );
        }
    }
}
