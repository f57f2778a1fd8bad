//! Power spectra via `rustfft`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Reusable forward transform of a fixed size.
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl PowerSpectrum {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            buf: vec![Complex::default(); n],
            scratch,
        }
    }

    /// `|X_k|^2` for `k = 0..=n/2` of a real frame zero-padded to `n`.
    pub fn compute(&mut self, frame: &[f64]) -> Vec<f64> {
        let n = self.buf.len();
        assert!(frame.len() <= n, "frame of {} exceeds fft size {n}", frame.len());
        for (i, c) in self.buf.iter_mut().enumerate() {
            *c = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        self.buf[..=n / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}
