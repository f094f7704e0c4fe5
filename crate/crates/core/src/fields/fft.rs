use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn transform(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(data.len(), h * w, "fft2 buffer does not match {h}x{w}");
    let row = plan(w, inverse);
    for chunk in data.chunks_exact_mut(w) {
        row.process(chunk);
    }
    let col = plan(h, inverse);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// Unnormalised forward 2D DFT of a row-major `h x w` grid, in place.
pub fn fft2(data: &mut [Complex64], h: usize, w: usize) {
    transform(data, h, w, false);
}

/// Inverse 2D DFT normalised by `1/(h w)`, in place.
pub fn ifft2(data: &mut [Complex64], h: usize, w: usize) {
    transform(data, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// Signed frequency of DFT index `i` on an axis of length `n`, with the
/// Nyquist index mapped to `-n/2` (the `fftshift` convention).
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
