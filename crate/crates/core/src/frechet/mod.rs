//! Spectral clip embedder and Fréchet distances between Gaussian fits.

mod linalg;

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::checkpoint;
use crate::corpus::codec::orthonormal;
use crate::error::{LabError, Result};
use crate::tensor::kernels::gemm;
use crate::tensor::Tensor;

pub use linalg::{matrix_sqrt_psd, sym_eigen};

pub const EXTRACTOR_ID: &str = "spectral-mel64-v1";
pub const FRAME: usize = 256;
pub const HOP: usize = 128;
pub const MEL_BANDS: usize = 64;
pub const POOLED_DIM: usize = 2 * MEL_BANDS;
pub const EMBED_DIM: usize = 128;
const PROJECTION_SEED: u64 = 0x0fad_5eed;
/// Projected features are squashed by tanh(z / EMBED_SCALE).
const EMBED_SCALE: f64 = 8.0;
const SAMPLE_RATE: f64 = crate::corpus::SAMPLE_RATE as f64;

/// Clamp threshold for tiny negative eigenvalues and distances.
pub const NEGATIVE_FLOOR: f64 = 1e-8;

fn fft() -> &'static Arc<dyn Fft<f64>> {
    static F: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    F.get_or_init(|| FftPlanner::new().plan_fft_forward(FRAME))
}

fn hann() -> &'static Vec<f64> {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..FRAME)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / FRAME as f64).cos())
            .collect()
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular bands evenly spaced in mel over 0..Nyquist, stored densely
/// as [band][bin]. Each half of a triangle spans at least one bin so that
/// narrow low bands still see energy.
fn filterbank() -> &'static Vec<f64> {
    static FB: OnceLock<Vec<f64>> = OnceLock::new();
    FB.get_or_init(|| {
        let bins = FRAME / 2 + 1;
        let bin_hz = SAMPLE_RATE / FRAME as f64;
        let top = hz_to_mel(SAMPLE_RATE / 2.0);
        let edges: Vec<f64> = (0..MEL_BANDS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (MEL_BANDS + 1) as f64) / bin_hz)
            .collect();
        let mut fb = vec![0.0; MEL_BANDS * bins];
        for b in 0..MEL_BANDS {
            let c = edges[b + 1];
            let left = (c - edges[b]).max(1.0);
            let right = (edges[b + 2] - c).max(1.0);
            for k in 0..bins {
                let x = k as f64;
                let w = if x <= c { 1.0 - (c - x) / left } else { 1.0 - (x - c) / right };
                fb[b * bins + k] = w.max(0.0);
            }
        }
        fb
    })
}

fn projection() -> &'static Vec<f64> {
    static P: OnceLock<Vec<f64>> = OnceLock::new();
    P.get_or_init(|| orthonormal(EMBED_DIM, PROJECTION_SEED))
}

/// Log-mel frame statistics: per-band mean then per-band std over frames.
pub fn pooled_features(waveform: &[f64]) -> Result<Vec<f64>> {
    if waveform.len() < FRAME {
        return Err(LabError::Framing(format!(
            "need at least {FRAME} samples, got {}",
            waveform.len()
        )));
    }
    let frames = 1 + (waveform.len() - FRAME) / HOP;
    let bins = FRAME / 2 + 1;
    let (fft, win, fb) = (fft(), hann(), filterbank());
    let mut buf = vec![Complex::new(0.0, 0.0); FRAME];
    let mut sum = vec![0.0; MEL_BANDS];
    let mut sq = vec![0.0; MEL_BANDS];
    let mut mag = vec![0.0; bins];
    for f in 0..frames {
        let x = &waveform[f * HOP..f * HOP + FRAME];
        for n in 0..FRAME {
            buf[n] = Complex::new(x[n] * win[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            mag[k] = buf[k].norm();
        }
        for b in 0..MEL_BANDS {
            let e: f64 = fb[b * bins..(b + 1) * bins].iter().zip(&mag).map(|(w, m)| w * m).sum();
            let v = e.ln_1p();
            sum[b] += v;
            sq[b] += v * v;
        }
    }
    let nf = frames as f64;
    let mut out = Vec::with_capacity(POOLED_DIM);
    out.extend(sum.iter().map(|s| s / nf));
    out.extend(
        sum.iter()
            .zip(&sq)
            .map(|(s, q)| (q / nf - (s / nf) * (s / nf)).max(0.0).sqrt()),
    );
    Ok(out)
}

/// Maps pooled features to the FAD embedding space.
pub fn project(pooled: &[f64]) -> Vec<f64> {
    let p = projection();
    (0..EMBED_DIM)
        .map(|i| {
            let z: f64 = (0..POOLED_DIM).map(|k| p[i * POOLED_DIM + k] * pooled[k]).sum();
            (z / EMBED_SCALE).tanh()
        })
        .collect()
}

pub fn embed_clip(waveform: &[f64]) -> Result<Vec<f64>> {
    Ok(project(&pooled_features(waveform)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        EmbeddingSet {
            vectors,
            extractor_id: EXTRACTOR_ID.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Too few vectors for a full-rank covariance.
    pub fn is_degenerate(&self) -> bool {
        self.len() < self.dim() + 1
    }
}

/// Mean and row-major covariance of a fitted Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub degenerate: bool,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianStats> {
    let n = set.len();
    if n < 2 {
        return Err(LabError::Data(format!("need at least 2 vectors to fit a Gaussian, got {n}")));
    }
    let d = set.dim();
    if set.vectors.iter().any(|v| v.len() != d) {
        return Err(LabError::Data("embedding vectors have mixed lengths".into()));
    }
    let degenerate = set.is_degenerate();
    if degenerate {
        log::debug!("covariance from {n} vectors in {d} dimensions is rank deficient");
    }
    let mut mean = vec![0.0; d];
    for v in &set.vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    // centred data as an n×d matrix, then Xᵀ X / (n-1)
    let mut xc = Vec::with_capacity(n * d);
    for v in &set.vectors {
        xc.extend(v.iter().zip(&mean).map(|(x, m)| x - m));
    }
    let xt = Tensor::new(&[n, d], xc)?;
    let mut cov = vec![0.0; d * d];
    gemm(d, n, d, xt.data(), true, xt.data(), false, 0.0, &mut cov);
    let k = 1.0 / (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]) * k;
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    Ok(GaussianStats { mean, cov, degenerate })
}

pub fn frechet_distance(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    let d = g1.dim();
    if g2.dim() != d || g1.cov.len() != d * d || g2.cov.len() != d * d {
        return Err(LabError::Dimension {
            op: "frechet_distance",
            lhs: vec![g1.dim()],
            rhs: vec![g2.dim()],
        });
    }
    let finite = |g: &GaussianStats| g.mean.iter().chain(&g.cov).all(|x| x.is_finite());
    if !finite(g1) || !finite(g2) {
        return Err(LabError::Data("non-finite values in Gaussian statistics".into()));
    }
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let s1 = matrix_sqrt_psd(&g1.cov, d)?;
    let mut tmp = vec![0.0; d * d];
    let mut m = vec![0.0; d * d];
    gemm(d, d, d, &s1, false, &g2.cov, false, 0.0, &mut tmp);
    gemm(d, d, d, &tmp, false, &s1, false, 0.0, &mut m);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let (eig, _) = sym_eigen(&m, d, false)?;
    let tr_sqrt: f64 = linalg::clamped_roots(&eig, d)?.iter().sum();
    let tr1: f64 = (0..d).map(|i| g1.cov[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| g2.cov[i * d + i]).sum();
    let dist = mean_term + tr1 + tr2 - 2.0 * tr_sqrt;
    if dist < 0.0 {
        if dist < -NEGATIVE_FLOOR * (1.0 + tr1 + tr2) {
            return Err(LabError::Data(format!("Fréchet distance is negative ({dist:e})")));
        }
        return Ok(0.0);
    }
    Ok(dist)
}

/// Pooled features and embeddings for a set of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub pooled: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ClipFeatures {
    pub fn from_pooled(pooled: Vec<Vec<f64>>) -> Self {
        let embeddings = pooled.iter().map(|p| project(p)).collect();
        ClipFeatures { pooled, embeddings }
    }

    pub fn extract<W: AsRef<[f64]>>(clips: &[W]) -> Result<Self> {
        let pooled = clips
            .iter()
            .map(|c| pooled_features(c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pooled(pooled))
    }

    pub fn len(&self) -> usize {
        self.pooled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        ClipFeatures {
            pooled: idx.iter().map(|&i| self.pooled[i].clone()).collect(),
            embeddings: idx.iter().map(|&i| self.embeddings[i].clone()).collect(),
        }
    }

    /// Writes the pooled features to a sidecar keyed by the extractor id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let flat: Vec<f64> = self.pooled.iter().flatten().copied().collect();
        let mut m = std::collections::BTreeMap::new();
        m.insert(format!("{EXTRACTOR_ID}/pooled"), Tensor::new(&[n, POOLED_DIM], flat)?);
        checkpoint::save(path, &[n as u64], &m)
    }

    /// Loads a sidecar, or `None` if it was written by another extractor.
    pub fn load(path: &Path) -> Result<Option<Self>> {
        let ck = checkpoint::load(path)?;
        let Some(t) = ck.tensors.get(&format!("{EXTRACTOR_ID}/pooled")) else {
            return Ok(None);
        };
        if t.shape().len() != 2 || t.shape()[1] != POOLED_DIM {
            return Err(LabError::Format {
                path: path.to_path_buf(),
                reason: format!("pooled features have shape {:?}", t.shape()),
            });
        }
        Ok(Some(Self::from_pooled(
            t.data().chunks(POOLED_DIM).map(<[f64]>::to_vec).collect(),
        )))
    }

    /// Loads the sidecar if present and valid for `expected` clips, otherwise
    /// extracts and writes it.
    pub fn cached<W: AsRef<[f64]>>(path: &Path, clips: &[W]) -> Result<Self> {
        if path.exists() {
            if let Ok(Some(f)) = Self::load(path) {
                if f.len() == clips.len() {
                    return Ok(f);
                }
            }
        }
        let f = Self::extract(clips)?;
        f.save(path)?;
        Ok(f)
    }
}

fn distance_between(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::Data("Fréchet distance needs two nonempty sets".into()));
    }
    let ga = fit_gaussian(&EmbeddingSet::new(a.to_vec()))?;
    let gb = fit_gaussian(&EmbeddingSet::new(b.to_vec()))?;
    frechet_distance(&ga, &gb)
}

/// FAD over embeddings of raw waveforms.
pub fn fad<W: AsRef<[f64]>>(reference: &[W], candidate: &[W]) -> Result<f64> {
    let r = ClipFeatures::extract(reference)?;
    let c = ClipFeatures::extract(candidate)?;
    fad_features(&r, &c)
}

pub fn fad_features(reference: &ClipFeatures, candidate: &ClipFeatures) -> Result<f64> {
    distance_between(&reference.embeddings, &candidate.embeddings)
}

/// FD over pooled (pre-projection) features.
pub fn fd(reference_pooled: &[Vec<f64>], candidate_pooled: &[Vec<f64>]) -> Result<f64> {
    distance_between(reference_pooled, candidate_pooled)
}

pub fn fd_features(reference: &ClipFeatures, candidate: &ClipFeatures) -> Result<f64> {
    fd(&reference.pooled, &candidate.pooled)
}
