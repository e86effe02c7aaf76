//! Unitary 2-d FFT on row-major complex buffers.
//!
//! Both directions carry the 1/sqrt(h*w) factor, so the forward transform is
//! unitary and its inverse equals its adjoint.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = plans.lock().expect("fft plan cache poisoned");
    guard
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// In-place unitary 2-d FFT of an `h x w` row-major buffer.
pub fn fft2_unitary(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(data.len(), h * w, "buffer does not match h*w");
    let row_fft = plan(w, inverse);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}
