use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check(params: &[Tensor], seed: u64, f: impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> crate::Result<Var>) {
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let err = grad_check(f, params, &cfg).unwrap();
    assert!(err < 1e-4, "relative error {err} (seed {seed})");
}

/// Projects an arbitrary tensor onto a scalar with fixed random weights so that
/// every output coordinate contributes a distinct gradient.
fn project<'g>(g: &mut Graph<'g>, x: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn every_op_passes_grad_check_over_twenty_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        check(&[a.clone(), b.clone()], seed, |g, p| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, seed)
        });
        let a3 = random(&mut rng, &[2, m, k]);
        let b3 = random(&mut rng, &[2, k, n]);
        let bt = random(&mut rng, &[2, n, k]);
        check(&[a3.clone(), b3], seed, |g, p| {
            let y = g.batch_matmul(p[0], p[1], false)?;
            project(g, y, seed)
        });
        check(&[a3, bt], seed, |g, p| {
            let y = g.batch_matmul(p[0], p[1], true)?;
            project(g, y, seed)
        });
        let bias = random(&mut rng, &[k]);
        check(&[a.clone(), bias.clone()], seed, |g, p| {
            let y = g.add(p[0], p[1])?;
            let z = g.mul(y, p[1])?;
            project(g, z, seed)
        });
        check(&[a.clone()], seed, |g, p| {
            let s = g.sigmoid(p[0])?;
            let t = g.tanh(s)?;
            let r = g.affine(t, 2.0, 0.5)?;
            let u = g.one_minus(r)?;
            project(g, u, seed)
        });
        // keep relu inputs away from the kink
        let away: Vec<f64> = a.data().iter().map(|v| if v.abs() < 0.05 { 0.3 } else { *v }).collect();
        let away = Tensor::new(a.shape().to_vec(), away).unwrap();
        check(&[away], seed, |g, p| {
            let y = g.relu(p[0])?;
            project(g, y, seed)
        });
        let wide = random(&mut rng, &[m, k + 2]);
        check(&[wide.clone(), a.clone()], seed, |g, p| {
            let c = g.concat(&[p[0], p[1]], 1)?;
            let s = g.slice(c, 1, 1, 2 * k + 1)?;
            let r = g.reshape(s, &[m * (2 * k), 1])?;
            project(g, r, seed)
        });
        check(&[wide.clone()], seed, |g, p| {
            let s = g.softmax(p[0])?;
            let l = g.log_softmax(p[0])?;
            let y = g.add(s, l)?;
            project(g, y, seed)
        });
        let gain = random(&mut rng, &[k + 2]);
        let lbias = random(&mut rng, &[k + 2]);
        check(&[wide.clone(), gain, lbias], seed, |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2])?;
            project(g, y, seed)
        });
        let table = random(&mut rng, &[5, 3]);
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        check(&[table], seed, |g, p| {
            let y = g.embedding(p[0], &ids)?;
            project(g, y, seed)
        });
        let targets: Vec<Option<usize>> = (0..m)
            .map(|i| if i == 1 { None } else { Some(rng.gen_range(0..k + 2)) })
            .collect();
        check(&[wide.clone()], seed, |g, p| g.cross_entropy(p[0], &targets, 0.1));
        let seq = random(&mut rng, &[2, 4, 3]);
        check(&[seq.clone()], seed, |g, p| {
            let y = g.cumulative_mean(p[0])?;
            let q = g.permute(y, &[2, 0, 1])?;
            project(g, q, seed)
        });
        let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k + 2)).collect();
        check(&[wide], seed, |g, p| {
            let y = g.pick(p[0], &idx)?;
            let sel = g.select_rows(y, &[0, 0])?;
            let s = g.segment_sum(y, &[m])?;
            let both = g.concat(&[sel, s], 0)?;
            project(g, both, seed)
        });
    }
}

#[test]
fn identity_matmul_and_softmax_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[2, 2]);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);

    let x = g.constant(random(&mut rng, &[6, 9]));
    let s = g.softmax(x).unwrap();
    for r in 0..6 {
        let total: f64 = g.value(s).row(r).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_standardises_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[5, 16]));
    let gain = g.constant(Tensor::filled(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cumulative_mean_is_running_average() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 3.0, 5.0]).unwrap());
    let y = g.cumulative_mean(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn closed_form_gradients() {
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let sq = g.mul(xv, xv).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(xv).unwrap().data(), &[1.0, -3.0, 4.0]);

    let z = Tensor::new(vec![1, 4], vec![0.1, 0.7, -0.3, 0.2]).unwrap();
    let mut g = Graph::new();
    let zv = g.param(&z);
    let loss = g.cross_entropy(zv, &[Some(2)], 0.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let lse = log_sum_exp(z.data());
    for (j, d) in grads.get(zv).unwrap().data().iter().enumerate() {
        let p = (z.data()[j] - lse).exp();
        let expected = p - if j == 2 { 1.0 } else { 0.0 };
        assert!((d - expected).abs() < 1e-15);
    }
}

#[test]
fn sum_of_squares_grad_check_is_tight() {
    let x = Tensor::vector(vec![0.3, -0.7, 1.1, 2.0]);
    let err = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            g.sum(sq)
        },
        &[x],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn backward_requires_scalar_loss_and_shapes_are_checked() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let mut g = Graph::new();
    let v = g.param(&x);
    assert!(matches!(g.backward(v), Err(crate::Error::Shape(_))));
    let m = g.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(g.matmul(v, m), Err(crate::Error::Shape(_))));
    let t = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.embedding(t, &[4]), Err(crate::Error::Vocab { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1e308, 1e308]));
    let y = g.constant(Tensor::vector(vec![1e308, 1e308]));
    assert!(matches!(g.add(x, y), Err(crate::Error::Numeric(_))));
}

#[test]
fn apply_dispatches_by_kind() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = g.apply(OpKind::Add, &[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    let d = g.apply(OpKind::Concat { axis: 0 }, &[a, b]).unwrap();
    assert_eq!(g.value(d).data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(g.apply(OpKind::Mul, &[a]).is_err());
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = random(&mut rng, &[4, 6]);
        let x = random(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let wv = g.param(&w);
        let xv = g.constant(x);
        let h = g.matmul(xv, wv).unwrap();
        let t = g.tanh(h).unwrap();
        let loss = g.cross_entropy(t, &[Some(1), Some(5), Some(0)], 0.1).unwrap();
        let grads = g.backward(loss).unwrap();
        grads.get(wv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}
