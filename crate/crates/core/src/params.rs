use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Matrix;

/// A named collection of trainable tensors.
///
/// Names are global across the model and double as tape keys, gradient keys
/// and checkpoint keys.
pub trait Parameters {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}
