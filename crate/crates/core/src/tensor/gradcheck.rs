use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` maps the inputs to a tensor of any shape; it is reduced to a scalar by
/// a fixed random projection so that no output element can cancel another.
/// Returns `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
/// concatenation of all input gradients.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    let probe = f(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let proj = Tensor::uniform(probe.shape(), 0.5, 1.5, &mut rng);
    let project = |t: Tensor| -> Result<f64> { t.mul(&proj)?.sum_all().item() };

    let loss = probe.mul(&proj)?.sum_all();
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradcheck"));
    }
    let grads = loss.backward()?;

    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.get_slice(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        for j in 0..p.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let shifted: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k != i {
                            return Ok(t.clone());
                        }
                        let mut d = t.to_vec();
                        d[j] += delta;
                        Tensor::new(d, t.shape())
                    })
                    .collect::<Result<_>>()?;
                project(f(&shifted)?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            diff2 += (analytic[j] - numeric).powi(2);
            an2 += analytic[j].powi(2);
            nu2 += numeric.powi(2);
        }
    }
    let denom = an2.sqrt().max(nu2.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom })
}
