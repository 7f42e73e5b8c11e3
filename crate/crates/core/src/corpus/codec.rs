//! Fixed, untrained codecs: an orthonormal latent framing for the diffusion
//! backbone and a dominant-pitch tokenizer for the autoregressive one.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use crate::error::{LabError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::generate::{CLIP_SAMPLES, SAMPLE_RATE};

pub const LATENT_SHAPE: [usize; 3] = [8, 16, 32];
/// Clips are box-filtered down by this factor before latent framing.
pub const LATENT_DECIMATION: usize = 4;
pub const LATENT_SAMPLES: usize = CLIP_SAMPLES / LATENT_DECIMATION;
const LATENT_SEED: u64 = 0x1a7e_47c0_dec0_0001;

pub const VOCAB_SIZE: usize = 64;
pub const TOKEN_FRAME: usize = 256;
pub const TOKENS_PER_CLIP: usize = CLIP_SAMPLES / TOKEN_FRAME;
/// Zero-padded analysis length: bins are 8 Hz apart at 8192 Hz.
const TOKEN_DFT: usize = 1024;
/// Token `t` stands for DFT bin `TOKEN_BASE_BIN + t`.
const TOKEN_BASE_BIN: usize = 8;
pub const TOKEN_AMPLITUDE: f64 = 0.3;
/// Harmonic amplitudes of the tone a token renders as, a voice-like timbre.
/// A bare sinusoid sits far from every corpus instrument in spectral
/// features, which would make scores of generated audio mostly measure the
/// codec.
pub const TOKEN_HARMONICS: [f64; 4] = [1.0, 0.5, 0.3, 0.2];

pub fn token_frequency(token: usize) -> f64 {
    (TOKEN_BASE_BIN + token) as f64 * SAMPLE_RATE as f64 / TOKEN_DFT as f64
}

/// Seeded orthonormal C×C mixing matrix (Gram-Schmidt on Gaussian rows).
fn latent_basis() -> &'static Vec<f64> {
    static Q: OnceLock<Vec<f64>> = OnceLock::new();
    Q.get_or_init(|| orthonormal(LATENT_SHAPE[0], LATENT_SEED))
}

pub(crate) fn orthonormal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngState::new(seed);
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        // two passes keep the basis orthogonal to machine precision
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| row[k] * q[j * n + k]).sum();
                for k in 0..n {
                    row[k] -= dot * q[j * n + k];
                }
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..n {
            q[i * n + k] = row[k] / norm;
        }
    }
    q
}

/// Frames of C consecutive samples become the channel vectors of successive
/// latent positions (row-major over H×W), mixed by the fixed basis.
pub fn encode_latent(waveform: &[f64]) -> Result<Tensor> {
    let [c, h, w] = LATENT_SHAPE;
    if waveform.len() != c * h * w {
        return Err(LabError::Framing(format!(
            "latent framing needs {} samples, got {}",
            c * h * w,
            waveform.len()
        )));
    }
    let q = latent_basis();
    let mut out = vec![0.0; c * h * w];
    for n in 0..h * w {
        let frame = &waveform[n * c..(n + 1) * c];
        for i in 0..c {
            out[i * h * w + n] = (0..c).map(|k| q[i * c + k] * frame[k]).sum();
        }
    }
    Tensor::new(&LATENT_SHAPE, out)
}

pub fn decode_latent(latent: &Tensor) -> Result<Vec<f64>> {
    let [c, h, w] = LATENT_SHAPE;
    if latent.shape() != LATENT_SHAPE {
        return Err(LabError::Framing(format!(
            "latent must be {:?}, got {:?}",
            LATENT_SHAPE,
            latent.shape()
        )));
    }
    let q = latent_basis();
    let z = latent.data();
    let mut out = vec![0.0; c * h * w];
    for n in 0..h * w {
        for k in 0..c {
            out[n * c + k] = (0..c).map(|i| q[i * c + k] * z[i * h * w + n]).sum();
        }
    }
    Ok(out)
}

/// Box-filter decimation to the latent sample rate.
pub fn decimate(waveform: &[f64]) -> Vec<f64> {
    waveform
        .chunks(LATENT_DECIMATION)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Linear interpolation back to the clip sample rate.
pub fn interpolate(low: &[f64]) -> Vec<f64> {
    let r = LATENT_DECIMATION;
    let mut out = Vec::with_capacity(low.len() * r);
    for i in 0..low.len() {
        let a = low[i];
        let b = low.get(i + 1).copied().unwrap_or(a);
        for j in 0..r {
            out.push(a + (b - a) * j as f64 / r as f64);
        }
    }
    out
}

/// Round trip through the diffusion backbone's audio representation.
pub fn latent_round_trip(waveform: &[f64]) -> Vec<f64> {
    interpolate(&decimate(waveform))
}

struct DftTables {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

fn dft_tables() -> &'static DftTables {
    static T: OnceLock<DftTables> = OnceLock::new();
    T.get_or_init(|| {
        let mut cos = vec![0.0; VOCAB_SIZE * TOKEN_FRAME];
        let mut sin = vec![0.0; VOCAB_SIZE * TOKEN_FRAME];
        for t in 0..VOCAB_SIZE {
            let bin = (TOKEN_BASE_BIN + t) as f64;
            for n in 0..TOKEN_FRAME {
                // Hann window: keeps harmonic sidelobes off neighbouring bins
                let w = 0.5 - 0.5 * (TAU * n as f64 / TOKEN_FRAME as f64).cos();
                let a = TAU * bin * n as f64 / TOKEN_DFT as f64;
                cos[t * TOKEN_FRAME + n] = w * a.cos();
                sin[t * TOKEN_FRAME + n] = w * a.sin();
            }
        }
        DftTables { cos, sin }
    })
}

/// One token per 256-sample frame: the strongest of the 64 tracked pitch
/// bins in the windowed frame. A trailing partial frame is dropped.
pub fn tokenize(waveform: &[f64]) -> Vec<usize> {
    let tab = dft_tables();
    waveform
        .chunks_exact(TOKEN_FRAME)
        .map(|frame| {
            let mut best = (0, f64::NEG_INFINITY);
            for t in 0..VOCAB_SIZE {
                let row = t * TOKEN_FRAME..(t + 1) * TOKEN_FRAME;
                let re: f64 = tab.cos[row.clone()].iter().zip(frame).map(|(c, x)| c * x).sum();
                let im: f64 = tab.sin[row].iter().zip(frame).map(|(s, x)| s * x).sum();
                let p = re * re + im * im;
                if p > best.1 {
                    best = (t, p);
                }
            }
            best.0
        })
        .collect()
}

/// Phase-continuous harmonic tone with its fundamental at each token's
/// bin-centre frequency. Every harmonic stays below Nyquist.
pub fn detokenize(tokens: &[usize]) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out = Vec::with_capacity(tokens.len() * TOKEN_FRAME);
    let mut phase: f64 = 0.0;
    for &t in tokens {
        let step = TAU * token_frequency(t.min(VOCAB_SIZE - 1)) / sr;
        for _ in 0..TOKEN_FRAME {
            let s: f64 = TOKEN_HARMONICS
                .iter()
                .enumerate()
                .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                .sum();
            out.push(TOKEN_AMPLITUDE * s);
            phase = (phase + step) % TAU;
        }
    }
    out
}

/// Round trip through the autoregressive backbone's audio representation.
pub fn token_round_trip(waveform: &[f64]) -> Vec<f64> {
    detokenize(&tokenize(waveform))
}

pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let n = reference.len().min(estimate.len());
    let signal: f64 = reference[..n].iter().map(|x| x * x).sum();
    let noise: f64 = reference[..n]
        .iter()
        .zip(&estimate[..n])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}
