use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::gradcheck;

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn assert_gradcheck<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = gradcheck::check(inputs, gradcheck::STEP, f).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "{name}: rel err {} (analytic {}, numeric {})",
        report.max_rel_err,
        report.analytic,
        report.numeric
    );
}
