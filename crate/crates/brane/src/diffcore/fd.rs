//! Central finite differences, the independent oracle for reverse-mode
//! gradients. Deliberately recomputes the full forward pass per coordinate;
//! used only in tests and verification paths.

use crate::diffcore::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at the store's current parameters,
/// restricted to `coords` (indices into the flat parameter vector). Returns
/// one estimate per requested coordinate, in order.
pub fn fd_gradient<F>(store: &ParamStore, coords: &[usize], mut f: F) -> Vec<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * FD_STEP));
    }
    out
}
