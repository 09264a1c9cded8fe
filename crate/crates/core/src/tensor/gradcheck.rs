use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Tensor};
use crate::error::{Error, Result};

/// Coordinates probed per tensor; smaller tensors are checked exhaustively.
pub const GRAD_CHECK_MAX_COORDS: usize = 256;

/// Compares a layer's analytic gradients against central finite differences.
///
/// The probe is the scalar `L = sum(forward(x) * R)` for a fixed pseudo-random
/// projection `R`, evaluated entirely in `f64`. Returns the maximum over all
/// probed input and parameter coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(layer: &mut dyn Layer<f64>, input: &Tensor<f64>, epsilon: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(
            "grad_check",
            format!("epsilon {epsilon} outside [1e-6, 1e-3]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e_c4ec);
    let out = layer.forward(input)?;
    let projection = Tensor::new(
        out.shape(),
        (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let probe = |layer: &dyn Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let y = layer.forward(x)?;
        Ok(y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };
    let analytic = layer.backward(input, &projection)?;

    let mut worst = 0.0f64;
    let mut x = input.clone();
    for i in coords(&mut rng, x.len()) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let plus = probe(layer, &x)?;
        x.data_mut()[i] = orig - epsilon;
        let minus = probe(layer, &x)?;
        x.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.input_grad.data()[i], (plus - minus) / (2.0 * epsilon)));
    }

    let n_params = layer.params().len();
    for p in 0..n_params {
        let len = layer.params()[p].len();
        for i in coords(&mut rng, len) {
            let orig = layer.params()[p].data()[i];
            layer.params_mut()[p].data_mut()[i] = orig + epsilon;
            let plus = probe(layer, input)?;
            layer.params_mut()[p].data_mut()[i] = orig - epsilon;
            let minus = probe(layer, input)?;
            layer.params_mut()[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.param_grads[p].data()[i], numeric));
        }
    }
    Ok(worst)
}

fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= GRAD_CHECK_MAX_COORDS {
        (0..len).collect()
    } else {
        let mut picked = sample(rng, len, GRAD_CHECK_MAX_COORDS).into_vec();
        picked.sort_unstable();
        picked
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
