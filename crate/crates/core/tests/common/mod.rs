#![allow(dead_code)]

use std::io::Write;

use gprompt::{Result, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// |a - n| / max(|a|, |n|, 1e-6), so that entries where both sides vanish
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between backprop gradients of `f` and central
/// differences, over every entry of every tensor in `params`.
pub fn grad_check(params: &[Tensor], f: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let mut worst = 0.0_f64;
    for (p, grad) in params.iter().zip(&analytic) {
        for (i, g) in grad.iter().enumerate() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + FD_STEP;
            let plus = f()?.item();
            p.data_mut()[i] = orig - FD_STEP;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*g, numeric));
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}

/// Deterministic pseudo-random values in [-1, 1] bounded away from zero by
/// `min_abs`, so kinks of relu-style primitives are not straddled.
pub fn values(n: usize, salt: u64, min_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = ((i as f64 + 1.0) * 12.9898 + salt as f64 * 78.233).sin() * 43758.5453;
            let u = 2.0 * (t - t.floor()) - 1.0;
            let mag = min_abs + (1.0 - min_abs) * u.abs();
            if u < 0.0 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

pub fn param(rows: usize, cols: usize, salt: u64) -> Tensor {
    Tensor::param(rows, cols, values(rows * cols, salt, 0.1)).unwrap()
}

/// Weighted sum with fixed weights, turning any tensor into a scalar with a
/// non-trivial upstream gradient.
pub fn probe(t: &Tensor) -> Result<Tensor> {
    let w = Tensor::new(t.rows(), t.cols(), values(t.len(), 999, 0.2))?;
    t.mul(&w)?.sum()
}

pub type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&[Tensor]) -> Result<Tensor>>,
);

/// One scalar-valued probe per differentiable primitive.
pub fn primitive_cases() -> Vec<Case> {
    let positive = |r, c, salt| {
        let v: Vec<f64> = values(r * c, salt, 0.1)
            .iter()
            .map(|x| x.abs() + 0.2)
            .collect();
        Tensor::param(r, c, v).unwrap()
    };
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    vec![
        (
            "matmul",
            vec![param(3, 4, 1), param(4, 2, 2)],
            Box::new(|p| probe(&p[0].matmul(&p[1])?)),
        ),
        (
            "transpose",
            vec![param(3, 4, 3)],
            Box::new(|p| probe(&p[0].transpose())),
        ),
        (
            "add",
            vec![param(3, 4, 4), param(3, 4, 5)],
            Box::new(|p| probe(&p[0].add(&p[1])?)),
        ),
        (
            "add_row_broadcast",
            vec![param(3, 4, 6), param(1, 4, 7)],
            Box::new(|p| probe(&p[0].add(&p[1])?)),
        ),
        (
            "sub",
            vec![param(3, 4, 8), param(3, 4, 9)],
            Box::new(|p| probe(&p[0].sub(&p[1])?)),
        ),
        (
            "sub_row_broadcast",
            vec![param(3, 4, 10), param(1, 4, 11)],
            Box::new(|p| probe(&p[0].sub(&p[1])?)),
        ),
        (
            "mul",
            vec![param(3, 4, 12), param(3, 4, 13)],
            Box::new(|p| probe(&p[0].mul(&p[1])?)),
        ),
        (
            "mul_row_broadcast",
            vec![param(3, 4, 14), param(1, 4, 15)],
            Box::new(|p| probe(&p[0].mul(&p[1])?)),
        ),
        (
            "scale",
            vec![param(3, 4, 16)],
            Box::new(|p| probe(&p[0].scale(-1.7))),
        ),
        (
            "neg",
            vec![param(3, 4, 17)],
            Box::new(|p| probe(&p[0].neg())),
        ),
        (
            "add_scalar",
            vec![param(3, 4, 18)],
            Box::new(|p| probe(&p[0].add_scalar(0.3))),
        ),
        (
            "relu",
            vec![param(3, 4, 19)],
            Box::new(|p| probe(&p[0].relu())),
        ),
        (
            "leaky_relu",
            vec![param(3, 4, 20)],
            Box::new(|p| probe(&p[0].leaky_relu(0.2))),
        ),
        (
            "sigmoid",
            vec![param(3, 4, 21)],
            Box::new(|p| probe(&p[0].sigmoid())),
        ),
        (
            "log_sigmoid",
            vec![param(3, 4, 22)],
            Box::new(|p| probe(&p[0].log_sigmoid())),
        ),
        (
            "exp",
            vec![param(3, 4, 23)],
            Box::new(|p| probe(&p[0].exp())),
        ),
        (
            "log",
            vec![positive(3, 4, 24)],
            Box::new(|p| probe(&p[0].log()?)),
        ),
        (
            "log_eps",
            vec![positive(3, 4, 25)],
            Box::new(|p| probe(&p[0].log_eps(1e-3)?)),
        ),
        (
            "sum",
            vec![param(3, 4, 26)],
            Box::new(|p| Ok(p[0].sum()?.scale(0.7))),
        ),
        (
            "mean",
            vec![param(3, 4, 27)],
            Box::new(|p| Ok(p[0].mean()?.scale(0.7))),
        ),
        (
            "row_mean",
            vec![param(3, 4, 28)],
            Box::new(|p| probe(&p[0].row_mean()?)),
        ),
        (
            "col_mean",
            vec![param(3, 4, 29)],
            Box::new(|p| probe(&p[0].col_mean()?)),
        ),
        (
            "softmax_rows",
            vec![param(3, 4, 30)],
            Box::new(|p| probe(&p[0].softmax_rows()?)),
        ),
        (
            "softmax_rows_masked",
            vec![param(3, 4, 31)],
            Box::new(move |p| probe(&p[0].softmax_rows_masked(Some(&mask))?)),
        ),
        (
            "concat_rows",
            vec![param(2, 3, 32), param(3, 3, 33)],
            Box::new(|p| probe(&Tensor::concat_rows(&[p[0].clone(), p[1].clone()])?)),
        ),
        (
            "slice_rows",
            vec![param(5, 3, 34)],
            Box::new(|p| probe(&p[0].slice_rows(1, 4)?)),
        ),
    ]
}

/// Exact one-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses,
/// 1/2). Ties are dropped before calling.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let choose = |n: usize, k: usize| -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    };
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

/// Writes straight to the process stdout so the line shows up even when the
/// test harness captures output.
pub fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
