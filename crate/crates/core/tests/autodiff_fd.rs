//! Every tape operation against central finite differences on random inputs.

use diprl_core::autodiff::{BlockId, ParamSet, Tape, Var};
use diprl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Relative error with an absolute floor, so gradients near zero are
/// judged on the scale of finite-difference roundoff.
fn error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Scalar objective: vector outputs are contracted with fixed weights.
fn objective(ps: &ParamSet, build: &Build, weights: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..ps.blocks().len()).map(|i| tape.param(ps, BlockId(i))).collect();
    let out = build(&mut tape, &vars).unwrap();
    let n = tape.value(out).len();
    let out = if n == 1 {
        out
    } else {
        let w = tape.constant(&weights[..n]);
        tape.dot(out, w).unwrap()
    };
    let value = tape.scalar_value(out);
    let mut grads = ps.zeros_like();
    tape.backward(out).unwrap().accumulate_into(&mut grads);
    (value, grads.flatten())
}

fn check(name: &str, sizes: &[usize], sample: impl Fn(&mut ChaCha8Rng, usize) -> Vec<Vec<f64>>, build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let inputs = sample(&mut rng, case);
        let mut ps = ParamSet::new();
        for (i, (data, &n)) in inputs.iter().zip(sizes).enumerate() {
            assert_eq!(data.len(), n);
            ps.push(format!("x{i}"), vec![n], data.clone());
        }
        let weights: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, analytic) = objective(&ps, build, &weights);
        let base = ps.flatten();
        for (j, &g) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[j] += H;
            let mut minus = base.clone();
            minus[j] -= H;
            ps.unflatten(&plus).unwrap();
            let fp = objective(&ps, build, &weights).0;
            ps.unflatten(&minus).unwrap();
            let fm = objective(&ps, build, &weights).0;
            ps.unflatten(&base).unwrap();
            let numeric = (fp - fm) / (2.0 * H);
            worst = worst.max(error(g, numeric));
        }
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn two(lo: f64, hi: f64, n: usize) -> impl Fn(&mut ChaCha8Rng, usize) -> Vec<Vec<f64>> {
    move |rng, _| vec![uniform(rng, n, lo, hi), uniform(rng, n, lo, hi)]
}

fn one(lo: f64, hi: f64, n: usize) -> impl Fn(&mut ChaCha8Rng, usize) -> Vec<Vec<f64>> {
    move |rng, _| vec![uniform(rng, n, lo, hi)]
}

#[test]
fn binary_elementwise_ops() {
    check("add", &[4, 4], two(-2.0, 2.0, 4), &|t, v| t.add(v[0], v[1]));
    check("sub", &[4, 4], two(-2.0, 2.0, 4), &|t, v| t.sub(v[0], v[1]));
    check("mul", &[4, 4], two(-2.0, 2.0, 4), &|t, v| t.mul(v[0], v[1]));
    check("div", &[4, 4], two(0.5, 3.0, 4), &|t, v| t.div(v[0], v[1]));
    check("logaddexp", &[4, 4], two(-30.0, 30.0, 4), &|t, v| t.logaddexp(v[0], v[1]));
}

#[test]
fn minimum_away_from_ties() {
    let sample = |rng: &mut ChaCha8Rng, _| {
        let a = uniform(rng, 5, -2.0, 2.0);
        let b = a
            .iter()
            .map(|x| x + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.01..1.0))
            .collect();
        vec![a, b]
    };
    check("minimum", &[5, 5], sample, &|t, v| t.minimum(v[0], v[1]));
}

#[test]
fn unary_ops() {
    check("neg", &[3], one(-2.0, 2.0, 3), &|t, v| t.neg(v[0]));
    check("exp", &[3], one(-3.0, 3.0, 3), &|t, v| t.exp(v[0]));
    check("log", &[3], one(0.1, 5.0, 3), &|t, v| t.log(v[0]));
    check("tanh", &[3], one(-3.0, 3.0, 3), &|t, v| t.tanh(v[0]));
    check("sigmoid", &[3], one(-8.0, 8.0, 3), &|t, v| t.sigmoid(v[0]));
    check("log_sigmoid", &[3], one(-40.0, 40.0, 3), &|t, v| t.log_sigmoid(v[0]));
    check("square", &[3], one(-3.0, 3.0, 3), &|t, v| t.square(v[0]));
}

#[test]
fn clamp_away_from_bounds() {
    let sample = |rng: &mut ChaCha8Rng, _| {
        let x = (0..6)
            .map(|_| loop {
                let x: f64 = rng.random_range(-2.0..2.0);
                if (x + 1.0).abs() > 1e-3 && (x - 0.5).abs() > 1e-3 {
                    break x;
                }
            })
            .collect();
        vec![x]
    };
    check("clamp", &[6], sample, &|t, v| t.clamp(v[0], -1.0, 0.5));
}

#[test]
fn reductions_and_normalizers() {
    check("dot", &[5, 5], two(-2.0, 2.0, 5), &|t, v| t.dot(v[0], v[1]));
    check("sum", &[5], one(-2.0, 2.0, 5), &|t, v| t.sum(v[0]));
    check("softmax", &[5], one(-5.0, 5.0, 5), &|t, v| t.softmax(v[0]));
    check("log_softmax", &[5], one(-5.0, 5.0, 5), &|t, v| t.log_softmax(v[0]));
    check("logsumexp", &[5], one(-50.0, 50.0, 5), &|t, v| t.logsumexp(v[0]));
}

#[test]
fn structural_ops() {
    let mv = |rng: &mut ChaCha8Rng, _| vec![uniform(rng, 12, -1.0, 1.0), uniform(rng, 4, -1.0, 1.0)];
    check("matvec", &[12, 4], mv, &|t, v| t.matvec(v[0], v[1], 3));
    check("index", &[4], one(-2.0, 2.0, 4), &|t, v| {
        let a = t.index(v[0], 2)?;
        let b = t.index(v[0], 0)?;
        t.mul(a, b)
    });
    check("concat", &[2, 3], |rng, _| vec![uniform(rng, 2, -1.0, 1.0), uniform(rng, 3, -1.0, 1.0)], &|t, v| {
        let c = t.concat(&[v[1], v[0], v[1]])?;
        t.softmax(c)
    });
}

#[test]
fn composite_expression_reuses_nodes() {
    // The same node feeds several consumers, so adjoints must accumulate.
    check("composite", &[4, 4], two(-1.5, 1.5, 4), &|t, v| {
        let s = t.sigmoid(v[0])?;
        let p = t.mul(s, v[1])?;
        let q = t.tanh(p)?;
        let r = t.add(q, s)?;
        let ls = t.log_softmax(r)?;
        let e = t.exp(ls)?;
        let m = t.mul(e, r)?;
        t.sum(m)
    });
}
