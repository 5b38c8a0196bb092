use rand::seq::index::sample;
use rand::Rng;

use super::ParamStore;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffProbe {
    /// Flat index into the tensor.
    pub index: usize,
    pub numeric: f64,
}

/// Central-difference estimates of `∂loss/∂w` at `probe_count` randomly
/// sampled coordinates of tensor `slot` (all coordinates if the tensor is
/// smaller than that).
pub fn finite_diff_grad<F, R>(
    mut loss: F,
    params: &ParamStore,
    slot: usize,
    probe_count: usize,
    step: f64,
    rng: &mut R,
) -> Vec<FiniteDiffProbe>
where
    F: FnMut(&ParamStore) -> f64,
    R: Rng + ?Sized,
{
    assert!(probe_count >= 1, "probe_count must be at least 1");
    let numel = params[slot].len();
    let mut indices = sample(rng, numel, probe_count.min(numel)).into_vec();
    indices.sort_unstable();
    let mut work = params.clone();
    indices
        .into_iter()
        .map(|index| {
            let orig = work[slot].data[index];
            work[slot].data[index] = orig + step;
            let plus = loss(&work);
            work[slot].data[index] = orig - step;
            let minus = loss(&work);
            work[slot].data[index] = orig;
            FiniteDiffProbe {
                index,
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}
