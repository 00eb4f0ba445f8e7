//! Finite-difference checks for every differentiable tape operation.

use flr_core::numerics::{check_gradients, Rng, Tape, Tensor, Var, MASKED};
use flr_core::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.gaussian(shape, 1.0).unwrap()
}

fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = check_gradients(inputs, H, f).unwrap();
    assert!(
        report.passes(TOL),
        "{name}: rel err {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Rng::new(seed).gaussian(&v.shape(), 1.0)?;
    v.mul(tape.constant(w)).map(|p| p.sum())
}

#[test]
fn matmul_variants() {
    let mut rng = Rng::new(1);
    for trial in 0..5 {
        let (m, k, n) = (2 + trial % 3, 3, 2 + trial % 2);
        let a = rand(&mut rng, &[m, k]);
        let b = rand(&mut rng, &[k, n]);
        check("matmul", &[a.clone(), b.clone()], |t, v| project(t, v[0].matmul(v[1])?, 9));
        let bt = rand(&mut rng, &[n, k]);
        check("matmul_t", &[a, bt], |t, v| project(t, v[0].matmul_t(v[1])?, 9));
    }
}

#[test]
fn matmul_chain_4x4() {
    let mut rng = Rng::new(2);
    let xs: Vec<_> = (0..3).map(|_| rand(&mut rng, &[4, 4])).collect();
    check("chain", &xs, |t, v| {
        let y = v[0].matmul(v[1])?.matmul(v[2])?;
        project(t, y, 3)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(3);
    let a = rand(&mut rng, &[3, 4]);
    let b = rand(&mut rng, &[3, 4]);
    check("add", &[a.clone(), b.clone()], |t, v| project(t, v[0].add(v[1])?, 1));
    check("sub", &[a.clone(), b.clone()], |t, v| project(t, v[0].sub(v[1])?, 1));
    check("mul", &[a.clone(), b.clone()], |t, v| project(t, v[0].mul(v[1])?, 1));
    check("min", &[a.clone(), b.clone()], |t, v| project(t, v[0].minimum(v[1])?, 1));
    check("scale", &[a.clone()], |t, v| project(t, v[0].scale(-2.5).add_scalar(1.0), 1));
    check("exp", &[a.clone()], |t, v| project(t, v[0].exp(), 1));
    check("gelu", &[a.clone()], |t, v| project(t, v[0].gelu(), 1));
    check("clamp", &[a.clone()], |t, v| project(t, v[0].clamp(-0.5, 0.7), 1));
    let pos = a.map(|x| x.abs() + 0.5);
    check("ln", &[pos], |t, v| project(t, v[0].ln(), 1));
    let bias = rand(&mut rng, &[4]);
    check("add_bias", &[a.clone(), bias], |t, v| project(t, v[0].add_bias(v[1])?, 1));
    check("transpose", &[a.clone()], |t, v| project(t, v[0].transpose()?, 1));
    check("reshape", &[a], |t, v| project(t, v[0].reshape(&[4, 3])?, 1));
}

#[test]
fn softmax_family() {
    let mut rng = Rng::new(4);
    let a = rand(&mut rng, &[3, 5]);
    check("softmax", &[a.clone()], |t, v| project(t, v[0].softmax()?, 2));
    let mut mask = Tensor::zeros(&[3, 5]);
    mask.data_mut()[1] = MASKED;
    mask.data_mut()[7] = MASKED;
    mask.data_mut()[14] = MASKED;
    check("masked_softmax", &[a.clone()], |t, v| project(t, v[0].masked_softmax(&mask)?, 2));
    check("log_softmax", &[a], |t, v| project(t, v[0].log_softmax(), 2));
}

#[test]
fn normalization_ops() {
    let mut rng = Rng::new(5);
    let a = rand(&mut rng, &[3, 6]);
    let g = rand(&mut rng, &[6]);
    check("rms_norm", &[a.clone(), g], |t, v| project(t, v[0].rms_norm(v[1], 1e-6)?, 4));
    check("normalize_rows", &[a], |t, v| project(t, v[0].normalize_rows()?, 4));
}

#[test]
fn indexing_ops() {
    let mut rng = Rng::new(6);
    let a = rand(&mut rng, &[4, 6]);
    let r = rand(&mut rng, &[6]);
    check("rope", &[a.clone()], |t, v| project(t, v[0].rope(&[0, 3, 5, 9], 100.0)?, 5));
    check("slice_cols", &[a.clone()], |t, v| project(t, v[0].slice_cols(2, 3)?, 5));
    check("concat_cols", &[a.clone(), a.clone()], |t, v| {
        project(t, Var::concat_cols(&[v[0], v[1].slice_cols(0, 2)?])?, 5)
    });
    check("concat_rows", &[a.clone(), r.clone()], |t, v| {
        project(t, Var::concat_rows(&[v[0], v[1].reshape(&[1, 6])?])?, 5)
    });
    check("gather_rows", &[a.clone()], |t, v| project(t, v[0].gather_rows(&[3, 0, 3])?, 5));
    check("replace_row", &[a.clone(), r], |t, v| project(t, v[0].replace_row(2, v[1])?, 5));
    check("pick", &[a], |t, v| project(t, v[0].pick(&[5, 0, 2, 2])?, 5));
}
