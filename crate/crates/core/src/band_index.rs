//! Per-band inverted index over the embedding band codes, and the hit
//! matrix computed from it.
//!
//! For each band `w` the word ids are laid out in one flat array, grouped by
//! band code with ascending ids inside each group. A cuckoo table maps each
//! distinct code to its `(start, length)` span in that array.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{put_u32, put_u32_slice, put_u64, to_u32, Reader};
use crate::cuckoo::{CuckooTable, Span};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::derive_seed;
use crate::wta::{BandMatrix, WtaHasher, WtaParams};

pub const INDEX_MAGIC: &[u8; 7] = b"WTAIDX1";

// stream offset separating cuckoo seeds from permutation seeds
const CUCKOO_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandIndex {
    params: WtaParams,
    dim: usize,
    vocab: usize,
    // W x |V| word ids, flat
    words: Vec<u32>,
    tables: Vec<CuckooTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandStats {
    pub distinct_codes: usize,
    pub max_span: usize,
}

impl BandIndex {
    /// Hashes `embeddings` (one row per word) and indexes the result.
    pub fn build(embeddings: &Matrix, params: WtaParams) -> Result<Self> {
        let hasher = WtaHasher::new(embeddings.cols(), params)?;
        let codes = hasher.hash_matrix(embeddings)?;
        Self::from_band_codes(&codes, params, embeddings.cols())
    }

    /// Indexes a precomputed `|V| x W` band-code matrix.
    pub fn from_band_codes(codes: &BandMatrix, params: WtaParams, dim: usize) -> Result<Self> {
        let w = params.w() as usize;
        if codes.width() != w {
            return Err(Error::shape(format!("{w} bands"), codes.width()));
        }
        let vocab = codes.rows();
        to_u32(vocab, "vocabulary size")?;
        let per_band: Vec<(Vec<u32>, CuckooTable)> = (0..w)
            .into_par_iter()
            .map(|band| {
                let mut pairs: Vec<(u32, u32)> =
                    (0..vocab).map(|j| (codes.get(j, band), j as u32)).collect();
                pairs.sort_unstable();
                let mut entries = Vec::new();
                let mut start = 0usize;
                while start < pairs.len() {
                    let code = pairs[start].0;
                    let mut end = start + 1;
                    while end < pairs.len() && pairs[end].0 == code {
                        end += 1;
                    }
                    entries.push((
                        code,
                        Span {
                            start: start as u32,
                            length: (end - start) as u32,
                        },
                    ));
                    start = end;
                }
                let words = pairs.into_iter().map(|(_, j)| j).collect();
                let table =
                    CuckooTable::build(&entries, derive_seed(params.seed(), CUCKOO_STREAM + band as u64))?;
                Ok((words, table))
            })
            .collect::<Result<_>>()?;
        let mut words = Vec::with_capacity(w * vocab);
        let mut tables = Vec::with_capacity(w);
        for (ws, t) in per_band {
            words.extend_from_slice(&ws);
            tables.push(t);
        }
        Ok(Self {
            params,
            dim,
            vocab,
            words,
            tables,
        })
    }

    pub fn params(&self) -> &WtaParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn bands(&self) -> usize {
        self.tables.len()
    }

    pub fn band_words(&self, band: usize) -> &[u32] {
        &self.words[band * self.vocab..(band + 1) * self.vocab]
    }

    pub fn table(&self, band: usize) -> &CuckooTable {
        &self.tables[band]
    }

    /// Word ids whose band-`band` code equals `code`, ascending.
    pub fn span(&self, band: usize, code: u32) -> &[u32] {
        match self.tables[band].lookup(code) {
            Some(s) => &self.band_words(band)[s.start as usize..(s.start + s.length) as usize],
            None => &[],
        }
    }

    pub fn band_stats(&self) -> Vec<BandStats> {
        self.tables
            .iter()
            .map(|t| BandStats {
                distinct_codes: t.len(),
                max_span: t.entries().map(|(_, s)| s.length as usize).max().unwrap_or(0),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.words.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        put_u32(&mut out, self.vocab as u32);
        put_u32(&mut out, self.params.w());
        put_u32(&mut out, self.params.k());
        put_u32(&mut out, self.params.u());
        put_u32(&mut out, self.params.bits_per_index());
        put_u32(&mut out, self.dim as u32);
        put_u64(&mut out, self.params.seed());
        for band in 0..self.bands() {
            put_u32_slice(&mut out, self.band_words(band));
            self.tables[band].write_to(&mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(INDEX_MAGIC.len())? != INDEX_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let vocab = r.u32()? as usize;
        let w = r.u32()?;
        let k = r.u32()?;
        let u = r.u32()?;
        let bits = r.u32()?;
        let dim = r.u32()? as usize;
        let seed = r.u64()?;
        let params = WtaParams::new(k, u, w, seed)?;
        if bits != params.bits_per_index() {
            return Err(Error::Format(format!(
                "bits_per_index {bits} inconsistent with K = {k}"
            )));
        }
        let mut words = Vec::with_capacity(w as usize * vocab);
        let mut tables = Vec::with_capacity(w as usize);
        for _ in 0..w {
            let band = r.u32_vec(vocab)?;
            if band.iter().any(|&j| j as usize >= vocab) {
                return Err(Error::Format("word id out of range".into()));
            }
            words.extend_from_slice(&band);
            tables.push(CuckooTable::read_from(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            params,
            dim,
            vocab,
            words,
            tables,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per (beam, word) count of colliding bands, `B x |V|` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HitMatrix {
    beams: usize,
    vocab: usize,
    counts: Vec<u16>,
}

impl HitMatrix {
    pub fn zeros(beams: usize, vocab: usize) -> Self {
        Self {
            beams,
            vocab,
            counts: vec![0; beams * vocab],
        }
    }

    pub fn from_rows(rows: &[Vec<u16>]) -> Result<Self> {
        let vocab = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::shape("rows of equal length", "ragged rows"));
        }
        Ok(Self {
            beams: rows.len(),
            vocab,
            counts: rows.concat(),
        })
    }

    /// Resizes to `beams x vocab` and clears every counter.
    pub fn reset(&mut self, beams: usize, vocab: usize) {
        self.beams = beams;
        self.vocab = vocab;
        self.counts.clear();
        self.counts.resize(beams * vocab, 0);
    }

    pub fn beams(&self) -> usize {
        self.beams
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.counts[i * self.vocab + j]
    }

    pub fn row(&self, i: usize) -> &[u16] {
        &self.counts[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.counts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LookupStats {
    pub lookups: u64,
    pub probes: u64,
    pub max_probes: u32,
    pub increments: u64,
}

impl LookupStats {
    fn merge(mut self, o: Self) -> Self {
        self.lookups += o.lookups;
        self.probes += o.probes;
        self.max_probes = self.max_probes.max(o.max_probes);
        self.increments += o.increments;
        self
    }
}

fn check_query(index: &BandIndex, query: &BandMatrix) -> Result<()> {
    if query.width() != index.bands() {
        return Err(Error::shape(
            format!("{} query bands", index.bands()),
            query.width(),
        ));
    }
    Ok(())
}

fn accumulate_row(index: &BandIndex, codes: &[u32], row: &mut [u16]) -> LookupStats {
    let mut stats = LookupStats::default();
    for (band, &code) in codes.iter().enumerate() {
        let (span, probes) = index.tables[band].lookup_counted(code);
        stats.lookups += 1;
        stats.probes += u64::from(probes);
        stats.max_probes = stats.max_probes.max(probes);
        if let Some(s) = span {
            let words = &index.band_words(band)[s.start as usize..(s.start + s.length) as usize];
            for &j in words {
                row[j as usize] += 1;
            }
            stats.increments += words.len() as u64;
        }
    }
    stats
}

/// Fills `out` with the hit counts of every query row against the index.
///
/// Each beam row is owned by exactly one worker, which walks all `W` bands
/// for that row, so counters are never shared between workers.
pub fn lookup_hits_into(
    index: &BandIndex,
    query: &BandMatrix,
    out: &mut HitMatrix,
) -> Result<LookupStats> {
    check_query(index, query)?;
    out.reset(query.rows(), index.vocab);
    if index.vocab == 0 {
        return Ok(LookupStats::default());
    }
    let stats = out
        .counts
        .par_chunks_mut(index.vocab)
        .enumerate()
        .map(|(i, row)| accumulate_row(index, query.row(i), row))
        .reduce(LookupStats::default, LookupStats::merge);
    Ok(stats)
}

pub fn lookup_hits(index: &BandIndex, query: &BandMatrix) -> Result<HitMatrix> {
    let mut out = HitMatrix::zeros(0, 0);
    lookup_hits_into(index, query, &mut out)?;
    Ok(out)
}
