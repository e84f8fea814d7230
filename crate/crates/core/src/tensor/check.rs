use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`; gradients that are both below the floor
/// compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    let y = tape.value(out);
    if y.numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    let y = y.item();
    if !y.is_finite() {
        return Err(Error::Eval(format!("f(x) = {y}")));
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Eval(format!("f(x) = {}", tape.value(out).item())));
    }
    let analytic = tape.backward(out)?.wrt(xv);

    let mut numeric = x.clone();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * step);
    }

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, DEFAULT_ABS_FLOOR))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_has_exact_gradient() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let r = grad_check(|t, x| Ok({ let s = t.square(x); t.sum(s) }), &x, DEFAULT_STEP, DEFAULT_TOL)
            .unwrap();
        assert_eq!(r.analytic.data(), &[2.0, 4.0]);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert!(r.passed);
    }

    #[test]
    fn constant_function_passes_on_floor() {
        let x = Tensor::row(vec![0.5, -0.5, 3.0]);
        let r = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0);
                let s = t.sum(z);
                Ok(t.add_const(s, 4.0))
            },
            &x,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.analytic.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_value_is_an_eval_error() {
        let x = Tensor::row(vec![1.0]);
        let r = grad_check(
            |t, x| {
                let z = t.scale(x, f64::INFINITY);
                Ok(t.sum(z))
            },
            &x,
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(matches!(r, Err(Error::Eval(_))));
    }

    type Build = fn(&mut Tape, Var, &[Var]) -> Result<Var>;

    /// Every primitive, checked on random shapes up to 8x8.
    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |t, x, o| t.matmul(x, o[0])),
            ("matmul_nt", |t, x, o| t.matmul_nt(x, o[1])),
            ("add", |t, x, o| t.add(x, o[2])),
            ("sub", |t, x, o| t.sub(o[2], x)),
            ("mul", |t, x, o| t.mul(x, o[2])),
            ("add_row", |t, x, o| {
                let r = t_row(t, x)?;
                t.add_row(o[2], r)
            }),
            ("mul_row", |t, x, o| {
                let r = t_row(t, x)?;
                t.mul_row(o[2], r)
            }),
            ("scale", |t, x, _| Ok(t.scale(x, -1.7))),
            ("add_const", |t, x, _| Ok(t.add_const(x, 0.3))),
            ("gelu", |t, x, _| Ok(t.gelu(x))),
            ("softmax", |t, x, _| {
                let (r, c) = t.dims(x);
                let m = Mask::from_fn(r, c, |i, j| (i + j) % 3 != 1 || j == 0);
                t.masked_softmax(x, &m)
            }),
            ("layer_norm", |t, x, _| Ok(t.layer_norm(x, 1e-5))),
            ("slice_cols", |t, x, _| {
                let c = t.dims(x).1;
                t.slice_cols(x, c / 2, c - c / 2)
            }),
            ("concat_cols", |t, x, o| t.concat_cols(&[o[2], x, x])),
            ("slice_rows", |t, x, _| {
                let r = t.dims(x).0;
                t.slice_rows(x, r / 2, r - r / 2)
            }),
            ("concat_rows", |t, x, o| t.concat_rows(&[x, o[2]])),
            ("select_rows", |t, x, _| {
                let r = t.dims(x).0;
                t.select_rows(x, &[r - 1, 0, r - 1])
            }),
            ("transpose", |t, x, _| Ok(t.transpose(x))),
            ("mean", |t, x, _| Ok(t.mean(x))),
            ("abs", |t, x, _| Ok(t.abs(x))),
            ("square", |t, x, _| Ok(t.square(x))),
        ];
        for trial in 0..4 {
            let r = rng.random_range(1..=8);
            let c = rng.random_range(1..=8);
            let x = Tensor::randn(r, c, 1.0, &mut rng);
            let others = [
                Tensor::randn(c, rng.random_range(1..=8), 1.0, &mut rng),
                Tensor::randn(rng.random_range(1..=8), c, 1.0, &mut rng),
                Tensor::randn(r, c, 1.0, &mut rng),
            ];
            for (name, build) in &cases {
                let weights = others.clone();
                let report = grad_check(
                    |t, x| {
                        let o: Vec<Var> = weights.iter().map(|w| t.constant(w.clone())).collect();
                        let y = build(t, x, &o)?;
                        // random projection so every output element matters
                        let (yr, yc) = t.dims(y);
                        let proj = Tensor::matrix(
                            yr,
                            yc,
                            (0..yr * yc).map(|k| ((k * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect(),
                        );
                        let p = t.constant(proj);
                        let z = t.mul(y, p)?;
                        Ok(t.sum(z))
                    },
                    &x,
                    DEFAULT_STEP,
                    DEFAULT_TOL,
                )
                .unwrap();
                assert!(
                    report.passed,
                    "{name} trial {trial} ({r}x{c}): max rel err {}",
                    report.max_rel_error
                );
            }
        }
    }

    fn t_row(t: &mut Tape, x: Var) -> Result<Var> {
        t.slice_rows(x, 0, 1)
    }
}
