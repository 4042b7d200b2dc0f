use rand::Rng;
use rand_distr::StandardNormal;

use super::{Result, Tensor, TensorError};

/// `rows x cols` matrix with i.i.d. `N(0, (rows^-gamma)^2)` entries, `rows`
/// being the input dimension. Larger `gamma` means a smaller initialization.
pub fn init_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(TensorError::Invalid(format!(
            "initialization rate must be >= 0, got {gamma}"
        )));
    }
    if rows == 0 {
        return Err(TensorError::Invalid(
            "initialization needs rows >= 1".into(),
        ));
    }
    let std = (rows as f64).powf(-gamma);
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data)
}
