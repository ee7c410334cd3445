//! In-process backends that need no model weights.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{BackendResult, SoundEventBackend};
use crate::audio_seg::{cosine_similarity, AudioClip};

/// Change-point detector over short-time magnitude spectra: a boundary is
/// placed wherever consecutive frames' spectra fall below `threshold`
/// cosine similarity.
#[derive(Debug, Clone)]
pub struct SpectralChangeSed {
    pub frame_secs: f64,
    pub threshold: f64,
    /// RMS below which a frame counts as silent.
    pub silence_rms: f32,
}

impl Default for SpectralChangeSed {
    fn default() -> Self {
        SpectralChangeSed {
            frame_secs: 0.1,
            threshold: 0.6,
            silence_rms: 1e-3,
        }
    }
}

impl SpectralChangeSed {
    fn spectra(&self, audio: &AudioClip) -> Vec<Option<Vec<f32>>> {
        let len = ((self.frame_secs * f64::from(audio.sample_rate())).round() as usize).max(2);
        let fft = FftPlanner::<f32>::new().plan_fft_forward(len);
        audio
            .samples()
            .chunks_exact(len)
            .map(|frame| {
                let rms = (frame.iter().map(|s| s * s).sum::<f32>() / len as f32).sqrt();
                if rms < self.silence_rms {
                    return None;
                }
                // Hann window
                let mut buf: Vec<Complex<f32>> = frame
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let w = 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / (len - 1) as f32).cos();
                        Complex::new(s * w, 0.0)
                    })
                    .collect();
                fft.process(&mut buf);
                Some(buf[..len / 2 + 1].iter().map(|c| c.norm()).collect())
            })
            .collect()
    }
}

impl SoundEventBackend for SpectralChangeSed {
    fn boundaries(&self, audio: &AudioClip) -> BackendResult<Vec<f64>> {
        let spectra = self.spectra(audio);
        let frame = (self.frame_secs * f64::from(audio.sample_rate())).round().max(2.0) / f64::from(audio.sample_rate());
        let mut out = Vec::new();
        for (i, pair) in spectra.windows(2).enumerate() {
            let similar = match (&pair[0], &pair[1]) {
                (None, None) => true,
                (Some(a), Some(b)) => cosine_similarity(a, b) >= self.threshold,
                _ => false,
            };
            if !similar {
                out.push((i + 1) as f64 * frame);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f32, secs: f32, rate: u32) -> Vec<f32> {
        let n = (secs * rate as f32) as usize;
        (0..n)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * freq * i as f32 / rate as f32).sin())
            .collect()
    }

    #[test]
    fn constant_tone_has_no_boundaries() {
        let audio = AudioClip::new(tone(440.0, 3.0, 8000), 8000).unwrap();
        assert!(SpectralChangeSed::default().boundaries(&audio).unwrap().is_empty());
    }

    #[test]
    fn pitch_change_and_silence_are_detected() {
        let mut samples = tone(300.0, 2.0, 8000);
        samples.extend(tone(2000.0, 2.0, 8000));
        samples.extend(vec![0.0; 8000]);
        let audio = AudioClip::new(samples, 8000).unwrap();
        let b = SpectralChangeSed::default().boundaries(&audio).unwrap();
        assert_eq!(b.len(), 2, "{b:?}");
        assert!((b[0] - 2.0).abs() < 1e-9 && (b[1] - 4.0).abs() < 1e-9, "{b:?}");
    }
}
