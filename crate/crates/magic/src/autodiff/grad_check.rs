use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::util::derive_seed;

use super::tape::{Tape, ValueId};
use super::tensor::Parameter;

/// Worst-case relative error between analytic gradients and central finite
/// differences, across parameter elements.
///
/// `build_loss` must construct the same scalar loss from the given
/// parameters every time it is called (64-bit mode). When
/// `sample_per_param` is set, at most that many elements of each parameter
/// are probed (deterministically chosen from `sample_seed`); otherwise
/// every element is probed.
pub fn finite_diff_check<F>(
    params: &mut [Parameter<f64>],
    eps: f64,
    sample_per_param: Option<usize>,
    sample_seed: u64,
    build_loss: &F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Parameter<f64>]) -> Result<ValueId>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let loss_id = build_loss(&mut tape, params)?;
    let grads = tape.backward_grads(loss_id)?;
    let mut analytic: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    for (pidx, g) in grads {
        for (dst, src) in analytic[pidx].iter_mut().zip(&g) {
            *dst += *src;
        }
    }

    let eval = |params: &[Parameter<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss_id = build_loss(&mut tape, params)?;
        Ok(tape.value(loss_id).data()[0])
    };

    let mut worst = 0.0f64;
    for pidx in 0..params.len() {
        if !params[pidx].trainable {
            continue;
        }
        let n = params[pidx].numel();
        let indices: Vec<usize> = match sample_per_param {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, pidx as u64));
                sample(&mut rng, n, k).into_vec()
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = params[pidx].tensor.data()[i];
            params[pidx].tensor.data_mut()[i] = orig + eps;
            let plus = eval(params)?;
            params[pidx].tensor.data_mut()[i] = orig - eps;
            let minus = eval(params)?;
            params[pidx].tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pidx][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
