use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Tape = super::Tape<f32>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn primitive_settings(seed: u64) -> GradCheckSettings {
    GradCheckSettings {
        step: 1e-3,
        rel_tol: 1e-3,
        abs_floor: 1e-6,
        probes_per_tensor: 10,
        seed,
    }
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    for seed in 0..10u64 {
        let report = check_gradients(inputs, |t, v| f(t, v), primitive_settings(seed)).unwrap();
        assert!(
            report.passed(),
            "rel errors {:?} {:?}",
            report.rel_errors,
            report.probes
        );
    }
}

#[test]
fn pow_scalar_example() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![0.25]));
    let y = tape.pow(a, 0.5).unwrap();
    assert!((tape.value(y).data()[0] - 0.5).abs() < 1e-7);
}

#[test]
fn mul_by_one_is_identity_and_add_works() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.1, -2.0, 3.5]));
    let y = tape.mul(x, 1.0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
}

#[test]
fn elementwise_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    let neg = tape.constant(Tensor::from_vec(vec![-0.5]));
    assert!(matches!(tape.pow(neg, 2.0), Err(Error::NegativeBase(_))));
    assert!(matches!(tape.div(a, 0.0), Err(Error::DivisionByZero)));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 3], 0.2, 1.0);
    let b = rand_tensor(&mut rng, &[4, 3], 0.5, 1.5);
    let s = rand_tensor(&mut rng, &[1], 0.5, 1.5);
    for kind in [
        BinaryKind::Add,
        BinaryKind::Sub,
        BinaryKind::Mul,
        BinaryKind::Div,
        BinaryKind::Pow,
    ] {
        check(&[a.clone(), b.clone()], |t, v| t.binary(kind, v[0], v[1]));
        check(&[a.clone(), s.clone()], |t, v| t.binary(kind, v[0], v[1]));
        check(std::slice::from_ref(&a), |t, v| t.binary(kind, v[0], 1.7));
    }
    // Separated operands so no probe straddles the max/abs/clamp kinks.
    let lo = rand_tensor(&mut rng, &[6], 0.0, 0.4);
    let hi = rand_tensor(&mut rng, &[6], 0.6, 1.0);
    check(&[lo.clone(), hi.clone()], |t, v| t.max(v[0], v[1]));
    check(std::slice::from_ref(&hi), |t, v| t.clamp(v[0], 0.0, 0.8));
    let mixed = Tensor::from_vec(vec![-0.7, 0.4, -0.2, 0.9, 0.3, -0.5]);
    check(std::slice::from_ref(&mixed), |t, v| t.abs(v[0]));
    check(std::slice::from_ref(&mixed), |t, v| t.relu(v[0]));
    check(std::slice::from_ref(&hi), |t, v| t.recip(v[0]));
}

#[test]
fn clamp_and_max_boundary_subgradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![0.0, 0.5, 1.0]));
    let c = tape.clamp(x, 0.0, 1.0).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.backward(s).unwrap().get(&tape, x).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1e-8, 0.5]));
    let m = tape.max(x, 1e-8).unwrap();
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap().get(&tape, x).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0]);
}

#[test]
fn matmul3_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
    let eye =
        tape.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let y = tape.matmul3(x, eye).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let r = tape.constant(Tensor::new(vec![1, 3], vec![1., 0., 0.]).unwrap());
    let d =
        tape.constant(Tensor::new(vec![3, 3], vec![2., 0., 0., 0., 3., 0., 0., 0., 4.]).unwrap());
    let y = tape.matmul3(r, d).unwrap();
    assert_eq!(tape.value(y).data(), &[2., 0., 0.]);

    let bad = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(tape.matmul3(x, bad).is_err());
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let m = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    for seed in 0..10 {
        let report = check_gradients(
            &[x.clone(), m.clone()],
            |t, v| {
                let y = t.matmul3(v[0], v[1])?;
                t.sum(y)
            },
            primitive_settings(seed),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.rel_errors);
    }
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = rand_tensor(&mut rng, &[4, 5, 3], 0.0, 1.0);
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let w = tape.constant(k);
    let b = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.conv2d(x, w, b, 1).unwrap();
    assert!(tape.value(y).max_abs_diff(&img).unwrap() < 1e-7);
}

#[test]
fn conv_constant_input_with_ones_kernel() {
    let img = Tensor::image_from_fn(5, 5, 2, |_, _, c| if c == 0 { 0.25 } else { 0.5 });
    let mut tape = Tape::new();
    let x = tape.constant(img);
    let w = tape.constant(Tensor::full(vec![3, 3, 2, 1], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, w, b, 1).unwrap();
    // Interior pixel: 9 taps × channel sum 0.75.
    assert!((tape.value(y).at(2, 2, 0) - 6.75).abs() < 1e-5);
}

#[test]
fn conv_rejects_bad_arguments() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![4, 4, 2]));
    let w = tape.constant(Tensor::zeros(vec![3, 3, 3, 1]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    assert!(matches!(
        tape.conv2d(x, w, b, 1),
        Err(Error::ShapeMismatch { .. })
    ));
    let w5 = tape.constant(Tensor::zeros(vec![5, 5, 2, 1]));
    assert!(tape.conv2d(x, w5, b, 1).is_err());
    let w3 = tape.constant(Tensor::zeros(vec![3, 3, 2, 1]));
    assert!(tape.conv2d(x, w3, b, 3).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[5, 5, 2], 0.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[3], -0.1, 0.1);
    for stride in [1, 2] {
        check(&[x.clone(), w.clone(), b.clone()], |t, v| {
            t.conv2d(v[0], v[1], v[2], stride)
        });
    }
}

#[test]
fn softmax_pool_relu_affine_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(vec![5]));
    let s = tape.softmax(z).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 0.2).abs() < 1e-7);
    }
    let img = tape.constant(Tensor::full(vec![3, 4, 2], 0.7));
    let g = tape.global_avg_pool(img).unwrap();
    assert!(tape.value(g).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    let r = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = tape.relu(r).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let v = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let w = tape.constant(Tensor::new(vec![2, 3], vec![1., 0., 1., 0., 1., 1.]).unwrap());
    let b = tape.constant(Tensor::from_vec(vec![0.5, 0.5, 0.5]));
    let a = tape.affine(v, w, b).unwrap();
    assert_eq!(tape.value(a).data(), &[1.5, 2.5, 3.5]);
}

#[test]
fn softmax_pool_affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, &[5], -2.0, 2.0);
    check(&[logits], |t, v| t.softmax(v[0]));
    let img = rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    check(&[img], |t, v| t.global_avg_pool(v[0]));
    let v = rand_tensor(&mut rng, &[6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    check(&[v, w, b], |t, v| t.affine(v[0], v[1], v[2]));
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check(&[a.clone(), b], |t, v| t.concat(&[v[0], v[1]]));
    check(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[6, 2]));
    check(std::slice::from_ref(&a), |t, v| t.row(v[0], 1));
    let w = rand_tensor(&mut rng, &[5], 0.0, 1.0);
    let cands = rand_tensor(&mut rng, &[5, 2, 3], -1.0, 1.0);
    check(&[w, cands], |t, v| t.mix(v[0], v[1]));
}

#[test]
fn matrix_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = rand_tensor(&mut rng, &[3, 3], 0.1, 1.0);
    check(std::slice::from_ref(&m), |t, v| t.column_normalize(v[0]));
    let mut well = m.clone();
    for i in 0..3 {
        well.data_mut()[i * 4] += 2.0;
    }
    check(&[well], |t, v| t.inverse3(v[0]));
}

#[test]
fn inverse3_rejects_singular() {
    let mut tape = Tape::new();
    let m =
        tape.constant(Tensor::new(vec![3, 3], vec![1., 2., 3., 2., 4., 6., 0., 1., 0.]).unwrap());
    assert!(matches!(tape.inverse3(m), Err(Error::SingularMatrix(_))));
}

#[test]
fn gain_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = rand_tensor(&mut rng, &[3, 3, 3], 0.0, 0.8);
    let gains = rand_tensor(&mut rng, &[3], 1.0, 2.0);
    let scalar = rand_tensor(&mut rng, &[1], 1.0, 2.0);
    check(&[img.clone(), gains.clone()], |t, v| {
        t.mul_channels(v[0], v[1])
    });
    check(&[img.clone(), scalar.clone()], |t, v| {
        t.mul_channels(v[0], v[1])
    });
    // Bright pixels exercise the highlight mask branch.
    let bright = rand_tensor(&mut rng, &[3, 3, 3], 0.92, 1.0);
    for x in [img, bright] {
        check(&[x.clone(), gains.clone()], |t, v| {
            t.safe_inverse_gain(v[0], v[1])
        });
        check(&[x.clone(), scalar.clone()], |t, v| {
            t.safe_inverse_gain(v[0], v[1])
        });
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(0.7));
    let two_w = tape.mul(w, 2.0).unwrap();
    let loss = tape.sum(two_w).unwrap();
    let g = tape.backward(loss).unwrap().get(&tape, w).unwrap();
    assert_eq!(g.data(), &[2.0]);

    let mut tape = Tape::new();
    let a = tape.param(Tensor::from_vec(vec![1.0, 0.0, 2.0, -1.0]));
    let b = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 1.0, 1.0]));
    let loss = tape.l1(a, b).unwrap();
    let g = tape.backward(loss).unwrap().get(&tape, a).unwrap();
    assert_eq!(g.data(), &[0.25, -0.25, 0.25, -0.25]);
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::from_vec(vec![3.0]));
    let loss = tape.sum(used).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(&tape, unused).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_foreign_or_vector_loss() {
    let mut other = Tape::new();
    let foreign = other.param(Tensor::scalar(1.0));
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(foreign), Err(Error::NotOnTape)));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shared_subexpressions_accumulate() {
    // loss = sum(u * u) with u = 3x reused; compare with a duplicated graph.
    let x0 = Tensor::from_vec(vec![0.3, -0.8, 1.1]);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let u = tape.mul(x, 3.0).unwrap();
    let p = tape.mul(u, u).unwrap();
    let loss = tape.sum(p).unwrap();
    let shared = tape.backward(loss).unwrap().get(&tape, x).unwrap();

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let u1 = tape.mul(x, 3.0).unwrap();
    let u2 = tape.mul(x, 3.0).unwrap();
    let p = tape.mul(u1, u2).unwrap();
    let loss = tape.sum(p).unwrap();
    let dup = tape.backward(loss).unwrap().get(&tape, x).unwrap();
    assert!(shared.max_abs_diff(&dup).unwrap() < 1e-6);
    let expected: Vec<f32> = x0.data().iter().map(|v| 18.0 * v).collect();
    assert!(shared.max_abs_diff(&Tensor::from_vec(expected)).unwrap() < 1e-5);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-5.0f32..5.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(v));
            let s = tape.softmax(x).unwrap();
            let p = tape.value(s).data();
            let total: f32 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0 || p.len() == 1));
        }
    }
}

#[test]
fn probes_across_a_kink_are_excluded() {
    let x = Tensor::from_vec(vec![1e-4, 0.5, -0.5, 0.7]);
    let report = check_gradients(&[x], |t, v| t.relu(v[0]), primitive_settings(0)).unwrap();
    let straddling: Vec<usize> = report
        .probes
        .iter()
        .filter(|p| p.straddles_kink)
        .map(|p| p.index)
        .collect();
    assert_eq!(straddling, vec![0]);
    assert!(report.passed(), "{:?}", report.rel_errors);

    let near = Tensor::from_vec(vec![1e-4, -1e-4]);
    let report = check_gradients(&[near], |t, v| t.abs(v[0]), primitive_settings(0)).unwrap();
    assert_eq!(report.straddled(), 2);
    assert!(
        !report.passed(),
        "a check left without valid probes must fail"
    );
}

#[test]
fn branch_pattern_tracks_every_kinked_op() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-0.5, 0.2, 0.95]));
    let r = tape.relu(x).unwrap();
    let c = tape.clamp(x, 0.0, 0.9).unwrap();
    let m = tape.max(x, 0.1).unwrap();
    let a = tape.abs(x).unwrap();
    let _ = (r, c, m, a);
    assert_eq!(
        tape.branch_pattern(),
        vec![0, 1, 1, 0, 1, 2, 0, 1, 1, 0, 1, 1]
    );
}
