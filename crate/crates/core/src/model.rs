//! Synthetic stand-in for a trained decoder: a frequency-sorted vocabulary,
//! an output embedding matrix, and a one-layer tanh recurrence.
//!
//! Generation schedule for [`SynthModel::generate`], all entries drawn with
//! [`SeededRng::gaussian`] unless noted, `s = 1 / sqrt(d)`:
//!
//! | stream | content |
//! |--------|---------|
//! | 0 | cluster centroids, `C x d`, entries `N(0,1) * s` |
//! | 1 | cluster of each word, `below(C)` per word in id order |
//! | 2 | embedding noise, `E[j] = centroid[cluster(j)] + noise * N(0,1) * s` |
//! | 3 | successor permutation of clusters (forward Fisher-Yates) |
//! | 4 | recurrent weights `W_h`, `d x d`, entries `N(0,1) * recurrent_gain * s` |
//!
//! The input side is one-hot: token `j` activates input feature
//! `successor(cluster(j))`, and column `c` of the input weights is the unit
//! centroid of cluster `c` scaled by `transition_gain * sqrt(d)`. Emitting a
//! word therefore pushes the hidden state toward the next cluster in the
//! chain. The initial hidden state is zero.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::SeededRng;

pub const EMB_MAGIC: &[u8; 7] = b"WTAEMB1";
pub const EMB_VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab: usize,
    pub dim: usize,
    pub seed: u64,
    /// Frequency bias spread; defaults to `0.75 * sqrt(dim)` so it stays
    /// comparable to the hidden-state logits across dimensions.
    pub bias_strength: f32,
    /// Number of embedding clusters; 0 picks `max(1, vocab / 100)`.
    pub clusters: usize,
    pub cluster_noise: f32,
    pub transition_gain: f32,
    pub recurrent_gain: f32,
}

impl SynthConfig {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        Self {
            vocab,
            dim,
            seed,
            bias_strength: 0.75 * (dim as f32).sqrt(),
            clusters: 0,
            cluster_noise: 1.2,
            transition_gain: 1.2,
            recurrent_gain: 0.7,
        }
    }

    pub fn with_bias(mut self, bias_strength: f32) -> Self {
        self.bias_strength = bias_strength;
        self
    }

    pub fn cluster_count(&self) -> usize {
        if self.clusters == 0 {
            (self.vocab / 100).max(1)
        } else {
            self.clusters
        }
    }
}

/// Input-side token representation.
#[derive(Debug, Clone, PartialEq)]
pub enum InputEmbeddings {
    /// `|V| x d_in` dense rows.
    Dense(Matrix),
    /// Token `j` is the unit vector at feature `features[j]`.
    OneHot { features: Vec<u32>, dim: usize },
}

impl InputEmbeddings {
    pub fn dim(&self) -> usize {
        match self {
            InputEmbeddings::Dense(m) => m.cols(),
            InputEmbeddings::OneHot { dim, .. } => *dim,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            InputEmbeddings::Dense(m) => m.rows(),
            InputEmbeddings::OneHot { features, .. } => features.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    embeddings: Matrix,
    w_hidden: Matrix,
    // d_in x d, row c is the input weight column for feature c
    w_input_t: Matrix,
    inputs: InputEmbeddings,
    initial_hidden: Vec<f32>,
    frequency_bias: Vec<f32>,
    eos: u32,
}

/// `strength * (1 / (1 + j) - mean)` over `j in [0, vocab)`.
pub fn frequency_bias(vocab: usize, strength: f32) -> Vec<f32> {
    let raw: Vec<f64> = (0..vocab).map(|j| 1.0 / (1.0 + j as f64)).collect();
    let mean = raw.iter().sum::<f64>() / vocab.max(1) as f64;
    raw.iter()
        .map(|r| (f64::from(strength) * (r - mean)) as f32)
        .collect()
}

fn gaussian_fill(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.gaussian() * scale) as f32).collect()
}

impl SynthModel {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let (v, d) = (cfg.vocab, cfg.dim);
        if v < 2 {
            return Err(Error::InvalidParams(format!("vocabulary must be >= 2, got {v}")));
        }
        if d < 1 {
            return Err(Error::InvalidParams("dimension must be >= 1".into()));
        }
        let c = cfg.cluster_count();
        let s = 1.0 / (d as f64).sqrt();

        let centroids = gaussian_fill(&mut SeededRng::stream(cfg.seed, 0), c * d, s);
        let mut assign_rng = SeededRng::stream(cfg.seed, 1);
        let cluster: Vec<u32> = (0..v).map(|_| assign_rng.below(c as u64) as u32).collect();

        let mut noise_rng = SeededRng::stream(cfg.seed, 2);
        let mut emb = Vec::with_capacity(v * d);
        let noise = f64::from(cfg.cluster_noise);
        for &k in &cluster {
            let centroid = &centroids[k as usize * d..(k as usize + 1) * d];
            for &x in centroid {
                emb.push((f64::from(x) + noise_rng.gaussian() * noise * s) as f32);
            }
        }

        let mut perm_rng = SeededRng::stream(cfg.seed, 3);
        let mut successor: Vec<u32> = (0..c as u32).collect();
        for i in 0..c.saturating_sub(1) {
            let j = i + perm_rng.below((c - i) as u64) as usize;
            successor.swap(i, j);
        }

        let w_hidden = gaussian_fill(
            &mut SeededRng::stream(cfg.seed, 4),
            d * d,
            f64::from(cfg.recurrent_gain) * s,
        );

        let gain = f64::from(cfg.transition_gain) * (d as f64).sqrt();
        let mut w_input_t = Vec::with_capacity(c * d);
        for k in 0..c {
            let centroid = &centroids[k * d..(k + 1) * d];
            let norm = centroid.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { gain / norm } else { 0.0 };
            w_input_t.extend(centroid.iter().map(|&x| (f64::from(x) * scale) as f32));
        }
        let features = cluster.iter().map(|&k| successor[k as usize]).collect();

        Ok(Self {
            embeddings: Matrix::from_vec(v, d, emb)?,
            w_hidden: Matrix::from_vec(d, d, w_hidden)?,
            w_input_t: Matrix::from_vec(c, d, w_input_t)?,
            inputs: InputEmbeddings::OneHot { features, dim: c },
            initial_hidden: vec![0.0; d],
            frequency_bias: frequency_bias(v, cfg.bias_strength),
            eos: (v - 1) as u32,
        })
    }

    /// Assembles a model from explicit weights. `w_input` is `d x d_in`.
    pub fn from_parts(
        embeddings: Matrix,
        w_hidden: Matrix,
        w_input: &Matrix,
        inputs: InputEmbeddings,
        initial_hidden: Vec<f32>,
        frequency_bias: Vec<f32>,
        eos: u32,
    ) -> Result<Self> {
        let (v, d) = (embeddings.rows(), embeddings.cols());
        if w_hidden.rows() != d || w_hidden.cols() != d {
            return Err(Error::shape(format!("{d}x{d} recurrent weights"), format!("{}x{}", w_hidden.rows(), w_hidden.cols())));
        }
        if w_input.rows() != d || w_input.cols() != inputs.dim() {
            return Err(Error::shape(
                format!("{d}x{} input weights", inputs.dim()),
                format!("{}x{}", w_input.rows(), w_input.cols()),
            ));
        }
        if inputs.len() != v || frequency_bias.len() != v || initial_hidden.len() != d {
            return Err(Error::shape("per-word tables of vocabulary length", "mismatched lengths"));
        }
        if eos as usize >= v {
            return Err(Error::InvalidParams(format!("EOS id {eos} out of range")));
        }
        if let InputEmbeddings::OneHot { features, dim } = &inputs {
            if features.iter().any(|&f| f as usize >= *dim) {
                return Err(Error::InvalidParams("one-hot feature out of range".into()));
            }
        }
        let mut w_input_t = Matrix::zeros(w_input.cols(), d);
        for i in 0..d {
            for c in 0..w_input.cols() {
                w_input_t.row_mut(c)[i] = w_input.get(i, c);
            }
        }
        Ok(Self {
            embeddings,
            w_hidden,
            w_input_t,
            inputs,
            initial_hidden,
            frequency_bias,
            eos,
        })
    }

    /// Replaces the output embeddings, keeping vocabulary and dimension.
    pub fn with_embeddings(mut self, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() != self.embeddings.rows() || embeddings.cols() != self.embeddings.cols() {
            return Err(Error::shape(
                format!("{}x{} embeddings", self.embeddings.rows(), self.embeddings.cols()),
                format!("{}x{}", embeddings.rows(), embeddings.cols()),
            ));
        }
        self.embeddings = embeddings;
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn frequency_bias(&self) -> &[f32] {
        &self.frequency_bias
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn initial_hidden(&self) -> &[f32] {
        &self.initial_hidden
    }

    /// `tanh(W_h h + W_in x_token)`.
    pub fn step_hidden(&self, h: &[f32], token: u32) -> Result<Vec<f32>> {
        let d = self.dim();
        if h.len() != d {
            return Err(Error::shape(format!("hidden of length {d}"), h.len()));
        }
        if token as usize >= self.vocab_size() {
            return Err(Error::InvalidInput(format!(
                "token {token} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let mut pre: Vec<f32> = self.w_hidden.row_iter().map(|row| dot(row, h)).collect();
        match &self.inputs {
            InputEmbeddings::OneHot { features, .. } => {
                let col = self.w_input_t.row(features[token as usize] as usize);
                for (p, w) in pre.iter_mut().zip(col) {
                    *p += w;
                }
            }
            InputEmbeddings::Dense(x) => {
                for (c, &xc) in x.row(token as usize).iter().enumerate() {
                    if xc != 0.0 {
                        for (p, w) in pre.iter_mut().zip(self.w_input_t.row(c)) {
                            *p += w * xc;
                        }
                    }
                }
            }
        }
        Ok(pre.into_iter().map(f32::tanh).collect())
    }
}

pub fn embeddings_to_bytes(e: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + e.as_slice().len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.push(EMB_VERSION);
    put_u32(&mut out, to_u32(e.rows(), "row count")?);
    put_u32(&mut out, to_u32(e.cols(), "column count")?);
    for x in e.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn embeddings_from_bytes(buf: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(buf);
    let magic = r.take(EMB_MAGIC.len()).map_err(|_| Error::Format("missing embedding magic".into()))?;
    if magic != EMB_MAGIC {
        return Err(Error::Format("bad embedding magic".into()));
    }
    let version = r.u8()?;
    if version != EMB_VERSION {
        return Err(Error::Format(format!("unsupported embedding version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("declared size overflows".into()))?;
    let header = buf.len() - r.remaining();
    if r.remaining() < n {
        return Err(Error::Truncated {
            expected: header + n,
            found: buf.len(),
        });
    }
    if r.remaining() > n {
        return Err(Error::Format(format!(
            "header declares {rows}x{cols} but payload holds {} extra bytes",
            r.remaining() - n
        )));
    }
    let data = r
        .take(n)?
        .par_chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save_embeddings(e: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, embeddings_to_bytes(e)?)?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    embeddings_from_bytes(&fs::read(path)?)
}
