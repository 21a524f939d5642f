//! Every differentiable op against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinil_tensor::gradcheck::check_gradients;
use vinil_tensor::{Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Random values kept away from zero, for relu kinks and divisors.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting, so every
/// output entry contributes a distinct cotangent.
fn weigh(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = random(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn run(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, graph: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let inputs = make(&mut rng);
        let res = check_gradients(
            move |t: &mut Tape, v: &[Var]| {
                let out = graph(t, v)?;
                weigh(t, out, trial)
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(res.max_rel_err < TOL, "{name} trial {trial}: rel err {}", res.max_rel_err);
    }
}

#[test]
fn affine() {
    run("affine", |r| vec![random(r, &[3, 4]), random(r, &[5, 4]), random(r, &[5])], |t, v| t.affine(v[0], v[1], v[2]));
}

#[test]
fn matmul_and_transpose() {
    run("matmul", |r| vec![random(r, &[3, 4]), random(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
    run("transpose", |r| vec![random(r, &[3, 4])], |t, v| t.transpose(v[0]));
}

#[test]
fn conv2d_variants() {
    run("conv_s1_p0", |r| vec![random(r, &[2, 2, 5, 5]), random(r, &[3, 2, 3, 3]), random(r, &[3])], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 0)
    });
    run("conv_s2_p1", |r| vec![random(r, &[1, 3, 6, 6]), random(r, &[2, 3, 3, 3]), random(r, &[2])], |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 1)
    });
}

#[test]
fn elementwise() {
    let two = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4]), random(r, &[3, 4])];
    run("add", two, |t, v| t.add(v[0], v[1]));
    run("sub", two, |t, v| t.sub(v[0], v[1]));
    run("mul", two, |t, v| t.mul(v[0], v[1]));
    run("scale", |r| vec![random(r, &[4])], |t, v| t.scale(v[0], -2.5));
    run("relu", |r| vec![random_off_zero(r, &[3, 5])], |t, v| t.relu(v[0]));
}

#[test]
fn reductions() {
    run("sum", |r| vec![random(r, &[2, 3, 2])], |t, v| t.sum(v[0]));
    run("mean", |r| vec![random(r, &[2, 3, 2])], |t, v| t.mean(v[0]));
    run("batch_mean", |r| vec![random(r, &[5, 3])], |t, v| t.batch_mean(v[0]));
    run("batch_std", |r| vec![random(r, &[6, 3])], |t, v| t.batch_std(v[0], 1e-5));
    run("mean_pool", |r| vec![random(r, &[2, 3, 4, 4])], |t, v| t.mean_pool(v[0]));
}

#[test]
fn row_broadcasts() {
    run("sub_rows", |r| vec![random(r, &[4, 3]), random(r, &[3])], |t, v| t.sub_rows(v[0], v[1]));
    run("div_rows", |r| vec![random(r, &[4, 3]), random_off_zero(r, &[3])], |t, v| t.div_rows(v[0], v[1]));
}

#[test]
fn log_softmax() {
    run("log_softmax", |r| vec![random(r, &[4, 5])], |t, v| t.log_softmax(v[0]));
}

#[test]
fn shape_ops() {
    run("reshape", |r| vec![random(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]));
    run("flatten", |r| vec![random(r, &[2, 2, 3])], |t, v| t.flatten(v[0]));
    run("narrow_rows", |r| vec![random(r, &[5, 2])], |t, v| t.narrow_rows(v[0], 3));
}

#[test]
fn composed_network() {
    // conv -> relu -> pool -> affine -> standardize -> log-softmax
    run(
        "composed",
        |r| {
            vec![
                random(r, &[4, 2, 5, 5]),
                random(r, &[3, 2, 3, 3]),
                random(r, &[3]),
                random(r, &[4, 3]),
                random(r, &[4]),
            ]
        },
        |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let c = t.relu(c)?;
            let p = t.mean_pool(c)?;
            let h = t.affine(p, v[3], v[4])?;
            let m = t.batch_mean(h)?;
            let s = t.batch_std(h, 1e-5)?;
            let centered = t.sub_rows(h, m)?;
            let z = t.div_rows(centered, s)?;
            t.log_softmax(z)
        },
    );
}

#[test]
fn determinism() {
    let graph = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let h = t.affine(v[0], v[1], v[2])?;
        let h = t.relu(h)?;
        let l = t.log_softmax(h)?;
        t.mean(l)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&mut rng, &[6, 8]), random(&mut rng, &[4, 8]), random(&mut rng, &[4])];
    let once = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = graph(&mut tape, &vars).unwrap();
        let loss = tape.value(out).item().unwrap().to_bits();
        let grads = tape.backward(out).unwrap();
        let g: Vec<u64> = grads.get(vars[1]).unwrap().data().iter().map(|x| x.to_bits()).collect();
        (loss, g)
    };
    assert_eq!(once(), once());
}
