//! Runtime vocabulary construction: threshold the hit matrix, merge the
//! top-`T` frequent words and the special tokens, gather the embedding rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::band_index::HitMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

// columns per compaction chunk
const SCAN_CHUNK: usize = 4096;

/// Shared candidate vocabulary, strictly ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    word_ids: Vec<u32>,
    /// Words admitted by the hit threshold.
    pub from_threshold: usize,
    /// Words added by the top-`T` merge that were not already present.
    pub from_top: usize,
    /// Special tokens added that were in neither of the above.
    pub from_specials: usize,
}

impl CandidateSet {
    /// Builds a set from arbitrary ids; they are sorted and deduplicated.
    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut word_ids: Vec<u32> = ids.into_iter().collect();
        word_ids.sort_unstable();
        word_ids.dedup();
        Self {
            from_threshold: word_ids.len(),
            word_ids,
            from_top: 0,
            from_specials: 0,
        }
    }

    pub fn full(vocab: usize) -> Self {
        Self::from_ids(0..vocab as u32)
    }

    pub fn ids(&self) -> &[u32] {
        &self.word_ids
    }

    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.word_ids.binary_search(&id).is_ok()
    }
}

/// Decode hyperparameters `{B, T, t}` plus the step cap and special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    pub top_t: usize,
    pub threshold: u32,
    pub max_len: usize,
    pub specials: Vec<u32>,
}

impl DecodeConfig {
    pub fn validate(&self, vocab: usize, bands: Option<usize>) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        if self.top_t > vocab {
            return Err(Error::Config(format!(
                "T = {} exceeds vocabulary size {vocab}",
                self.top_t
            )));
        }
        if let Some(w) = bands {
            if self.threshold as usize > w {
                return Err(Error::Config(format!(
                    "threshold t = {} exceeds band count W = {w}",
                    self.threshold
                )));
            }
        }
        if let Some(&s) = self.specials.iter().find(|&&s| s as usize >= vocab) {
            return Err(Error::Config(format!("special token {s} out of range")));
        }
        Ok(())
    }
}

/// Words with at least `t` hits in some beam row, shared across all rows.
///
/// Columns are scanned in independent chunks; each chunk filters locally and
/// the survivors are concatenated in chunk order.
pub fn select_candidates(hits: &HitMatrix, t: u32) -> CandidateSet {
    let vocab = hits.vocab_size();
    let beams = hits.beams();
    if t == 0 {
        return CandidateSet::full(vocab);
    }
    if t > u32::from(u16::MAX) {
        return CandidateSet::default();
    }
    let t = t as u16;
    let chunks: Vec<Vec<u32>> = (0..vocab.div_ceil(SCAN_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * SCAN_CHUNK;
            let hi = (lo + SCAN_CHUNK).min(vocab);
            let mut keep = vec![false; hi - lo];
            for i in 0..beams {
                let row = &hits.row(i)[lo..hi];
                for (k, &count) in keep.iter_mut().zip(row) {
                    *k |= count >= t;
                }
            }
            keep.iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(j, _)| (lo + j) as u32)
                .collect()
        })
        .collect();
    let word_ids = chunks.concat();
    CandidateSet {
        from_threshold: word_ids.len(),
        word_ids,
        from_top: 0,
        from_specials: 0,
    }
}

fn union_sorted(a: &[u32], b: &[u32]) -> (Vec<u32>, usize) {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j, mut added) = (0, 0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            out.push(b[j]);
            j += 1;
            added += 1;
        } else {
            out.push(a[i]);
            i += 1;
            j += 1;
        }
    }
    (out, added)
}

/// Union with the `T` most frequent ids `[0, T)` and the special tokens.
pub fn merge_top_frequent(
    cands: &CandidateSet,
    top_t: usize,
    specials: &[u32],
    vocab: usize,
) -> Result<CandidateSet> {
    if top_t > vocab {
        return Err(Error::Config(format!(
            "T = {top_t} exceeds vocabulary size {vocab}"
        )));
    }
    if let Some(&s) = specials.iter().find(|&&s| s as usize >= vocab) {
        return Err(Error::Config(format!("special token {s} out of range")));
    }
    let top: Vec<u32> = (0..top_t as u32).collect();
    let (merged, from_top) = union_sorted(&cands.word_ids, &top);
    let mut sp = specials.to_vec();
    sp.sort_unstable();
    sp.dedup();
    let (word_ids, from_specials) = union_sorted(&merged, &sp);
    Ok(CandidateSet {
        word_ids,
        from_threshold: cands.from_threshold,
        from_top: cands.from_top + from_top,
        from_specials: cands.from_specials + from_specials,
    })
}

/// Copies the candidate rows of `embeddings` into a dense submatrix. The
/// returned id map translates local row `r` to global word id.
pub fn gather_embeddings(embeddings: &Matrix, cands: &CandidateSet) -> Result<(Matrix, Vec<u32>)> {
    let d = embeddings.cols();
    if let Some(&bad) = cands.ids().last().filter(|&&j| j as usize >= embeddings.rows()) {
        return Err(Error::InvalidInput(format!(
            "candidate {bad} outside vocabulary of {}",
            embeddings.rows()
        )));
    }
    let mut out = Matrix::zeros(cands.len(), d);
    if d > 0 {
        out.as_mut_slice()
            .par_chunks_mut(d)
            .zip(cands.ids().par_iter())
            .with_min_len(64)
            .for_each(|(dst, &j)| dst.copy_from_slice(embeddings.row(j as usize)));
    }
    Ok((out, cands.ids().to_vec()))
}
