//! Beam search with a restricted softmax.
//!
//! Each step builds one candidate vocabulary shared by every live
//! hypothesis, multiplies the hidden states against the gathered candidate
//! embeddings in a single batch, renormalizes over the candidates only, and
//! keeps the global top-`B` continuations.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::band_index::{lookup_hits_into, BandIndex, HitMatrix};
use crate::candidates::{gather_embeddings, merge_top_frequent, select_candidates, CandidateSet, DecodeConfig};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::model::SynthModel;
use crate::oracle::{exact_topb, recall_at_b};
use crate::rng::SeededRng;
use crate::wta::WtaHasher;

// E rows per multiply task
const MATMUL_CHUNK: usize = 128;

/// `Logit[i, r] = H[i] . E_sub[r]`, as a `B x n` matrix.
pub fn compute_logits(h: &Matrix, e_sub: &Matrix) -> Result<Matrix> {
    logits_with_bias(h, e_sub, None)
}

/// Like [`compute_logits`], adding `bias[r]` to every entry of column `r`.
pub fn logits_with_bias(h: &Matrix, e_sub: &Matrix, bias: Option<&[f32]>) -> Result<Matrix> {
    if h.cols() != e_sub.cols() {
        return Err(Error::shape(
            format!("hidden width {}", e_sub.cols()),
            h.cols(),
        ));
    }
    let (b, n) = (h.rows(), e_sub.rows());
    if let Some(bias) = bias {
        if bias.len() != n {
            return Err(Error::shape(format!("{n} bias values"), bias.len()));
        }
    }
    if b == 0 || n == 0 {
        return Ok(Matrix::zeros(b, n));
    }
    // column-major scratch: n rows of b logits, each E row read once
    let mut scratch = vec![0.0f32; n * b];
    scratch
        .par_chunks_mut(MATMUL_CHUNK * b)
        .enumerate()
        .for_each(|(c, block)| {
            let r0 = c * MATMUL_CHUNK;
            for (local, out) in block.chunks_exact_mut(b).enumerate() {
                let r = r0 + local;
                let e = e_sub.row(r);
                let add = bias.map_or(0.0, |bs| bs[r]);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(h.row(i), e) + add;
                }
            }
        });
    let mut out = Matrix::zeros(b, n);
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for (r, x) in row.iter_mut().enumerate() {
                *x = scratch[r * b + i];
            }
        });
    Ok(out)
}

fn row_log_normalizer(row: &[f32]) -> Result<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY || row.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !max.is_finite() || row.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let sum: f64 = row.iter().map(|&x| f64::from((x - max).exp())).sum();
    Ok(max + sum.ln() as f32)
}

/// Row-wise softmax with max subtraction. The denominator runs over the
/// columns present, i.e. over the candidate set only.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    let n = logits.cols();
    for i in 0..logits.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY || n == 0 {
            return Err(Error::EmptyCandidates);
        }
        if !max.is_finite() || row.iter().any(|x| x.is_nan()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        let mut sum = 0.0f64;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += f64::from(*x);
        }
        for x in row.iter_mut() {
            *x = (f64::from(*x) / sum) as f32;
        }
    }
    Ok(out)
}

/// In-place log-softmax over each row.
pub fn log_softmax_in_place(logits: &mut Matrix) -> Result<()> {
    let n = logits.cols();
    if logits.rows() == 0 {
        return Ok(());
    }
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    logits
        .as_mut_slice()
        .par_chunks_mut(n)
        .try_for_each(|row| {
            let lse = row_log_normalizer(row)?;
            for x in row.iter_mut() {
                *x -= lse;
            }
            Ok(())
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative log-probability.
    pub score: f64,
    /// Log-probability of each emitted token.
    pub step_scores: Vec<f64>,
    #[serde(skip)]
    pub hidden: Vec<f32>,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub hypotheses: Vec<Hypothesis>,
    pub step: usize,
}

impl BeamState {
    pub fn start(hidden: Vec<f32>) -> Self {
        Self {
            hypotheses: vec![Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
                step_scores: Vec::new(),
                hidden,
                finished: false,
            }],
            step: 0,
        }
    }

    pub fn all_finished(&self) -> bool {
        self.hypotheses.iter().all(|h| h.finished)
    }
}

/// One surviving continuation: hypothesis `beam` extended with `word`, or
/// carried over unchanged when `word` is `None` (finished hypothesis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub beam: usize,
    pub word: Option<u32>,
    pub log_prob: f64,
    pub score: f64,
}

impl Choice {
    fn key(&self) -> (usize, u32) {
        (self.beam, self.word.unwrap_or(u32::MAX))
    }
}

/// Higher score first, then smaller `(beam, word)`.
fn rank(a: &Choice, b: &Choice) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.key().cmp(&b.key()))
}

fn push_bounded(best: &mut Vec<Choice>, c: Choice, limit: usize) {
    if best.len() == limit {
        match best.last() {
            Some(worst) if rank(&c, worst) == Ordering::Less => {
                best.pop();
            }
            _ => return,
        }
    }
    let pos = best.partition_point(|x| rank(x, &c) == Ordering::Less);
    best.insert(pos, c);
}

/// Global top-`beam` continuations.
///
/// `log_probs` has one row per entry of `rows`, which names the hypothesis
/// each row extends; columns map to word ids through `id_map`. Finished
/// hypotheses compete with their frozen score.
pub fn expand_beams(
    log_probs: &Matrix,
    rows: &[usize],
    hypotheses: &[Hypothesis],
    beam: usize,
    id_map: &[u32],
) -> Result<Vec<Choice>> {
    if rows.len() != log_probs.rows() {
        return Err(Error::shape(format!("{} rows", rows.len()), log_probs.rows()));
    }
    if log_probs.cols() != id_map.len() {
        return Err(Error::shape(format!("{} columns", id_map.len()), log_probs.cols()));
    }
    let per_row: Vec<Vec<Choice>> = rows
        .par_iter()
        .enumerate()
        .map(|(a, &hyp)| {
            let base = hypotheses[hyp].score;
            let mut best = Vec::with_capacity(beam + 1);
            for (r, &lp) in log_probs.row(a).iter().enumerate() {
                let lp = f64::from(lp);
                let c = Choice {
                    beam: hyp,
                    word: Some(id_map[r]),
                    log_prob: lp,
                    score: base + lp,
                };
                push_bounded(&mut best, c, beam);
            }
            best
        })
        .collect();
    let mut all: Vec<Choice> = per_row.into_iter().flatten().collect();
    for (i, h) in hypotheses.iter().enumerate() {
        if h.finished {
            all.push(Choice {
                beam: i,
                word: None,
                log_prob: 0.0,
                score: h.score,
            });
        }
    }
    all.sort_by(rank);
    all.truncate(beam);
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Full,
    Lsh,
    #[serde(rename = "top")]
    TopOnly,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Full => "full",
            DecodeMode::Lsh => "lsh",
            DecodeMode::TopOnly => "top",
        }
    }
}

/// Wall time per pipeline stage, accumulated over steps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub wta_hash: Duration,
    pub cuckoo_lookup: Duration,
    pub construct_candidate_list: Duration,
    pub construct_e_lsh: Duration,
    pub matrix_multiply: Duration,
    pub normalization: Duration,
    pub beam_expansion: Duration,
    pub hidden_update: Duration,
}

impl StageTimings {
    /// Stage names in report order; the first six form the softmax path.
    pub const NAMES: [&'static str; 8] = [
        "WTA-hash",
        "Cuckoo lookup",
        "Construct candidate list",
        "Construct E_LSH",
        "Matrix multiply",
        "Normalization",
        "Beam expansion",
        "Hidden state update",
    ];

    pub fn as_array(&self) -> [Duration; 8] {
        [
            self.wta_hash,
            self.cuckoo_lookup,
            self.construct_candidate_list,
            self.construct_e_lsh,
            self.matrix_multiply,
            self.normalization,
            self.beam_expansion,
            self.hidden_update,
        ]
    }

    pub fn lsh_overhead(&self) -> Duration {
        self.wta_hash + self.cuckoo_lookup + self.construct_candidate_list + self.construct_e_lsh
    }

    pub fn softmax_path(&self) -> Duration {
        self.lsh_overhead() + self.matrix_multiply + self.normalization
    }

    pub fn add(&mut self, o: &StageTimings) {
        self.wta_hash += o.wta_hash;
        self.cuckoo_lookup += o.cuckoo_lookup;
        self.construct_candidate_list += o.construct_candidate_list;
        self.construct_e_lsh += o.construct_e_lsh;
        self.matrix_multiply += o.matrix_multiply;
        self.normalization += o.normalization;
        self.beam_expansion += o.beam_expansion;
        self.hidden_update += o.hidden_update;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub active: usize,
    pub vocab_size: usize,
    pub from_threshold: usize,
    pub from_top: usize,
    pub from_specials: usize,
    /// Mean recall of the exact top-`B` over live rows, when requested.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub start_token: u32,
    pub hypotheses: Vec<Hypothesis>,
    pub steps: Vec<StepMetrics>,
    pub timings: StageTimings,
}

impl DecodeOutput {
    pub fn mean_vocab_size(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.vocab_size as f64))
    }

    pub fn mean_recall(&self) -> Option<f64> {
        let rs: Vec<f64> = self.steps.iter().filter_map(|s| s.recall).collect();
        (!rs.is_empty()).then(|| mean(rs.into_iter()))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Seeds the start token.
    pub seed: u64,
    /// Measure recall against the exact full-softmax top-`B` every step.
    pub oracle: bool,
}

/// Start token drawn for a decode seed.
pub fn start_token(seed: u64, vocab: usize) -> u32 {
    SeededRng::stream(seed, 0).below(vocab as u64) as u32
}

/// Decoding session over a shared model and, for the LSH mode, a shared
/// hasher and band index. Cheap to create; all inputs are borrowed
/// immutably, so sessions may run concurrently.
pub struct Decoder<'a> {
    model: &'a SynthModel,
    lsh: Option<(&'a WtaHasher, &'a BandIndex)>,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a SynthModel) -> Self {
        Self { model, lsh: None }
    }

    pub fn with_lsh(model: &'a SynthModel, hasher: &'a WtaHasher, index: &'a BandIndex) -> Result<Self> {
        if index.vocab_size() != model.vocab_size() {
            return Err(Error::shape(
                format!("index over {} words", model.vocab_size()),
                index.vocab_size(),
            ));
        }
        if hasher.dim() != model.dim() || index.dim() != model.dim() {
            return Err(Error::shape(format!("dimension {}", model.dim()), hasher.dim()));
        }
        if hasher.params() != index.params() {
            return Err(Error::InvalidParams("hasher and index parameters differ".into()));
        }
        Ok(Self {
            model,
            lsh: Some((hasher, index)),
        })
    }

    pub fn model(&self) -> &SynthModel {
        self.model
    }

    pub fn decode(&self, cfg: &DecodeConfig, mode: DecodeMode, opts: DecodeOptions) -> Result<DecodeOutput> {
        let model = self.model;
        let vocab = model.vocab_size();
        let bands = self.lsh.map(|(_, idx)| idx.bands());
        cfg.validate(vocab, if mode == DecodeMode::Lsh { bands } else { None })?;
        if mode == DecodeMode::Lsh && self.lsh.is_none() {
            return Err(Error::Config("LSH mode needs a band index".into()));
        }

        let start = start_token(opts.seed, vocab);
        let h0 = model.step_hidden(model.initial_hidden(), start)?;
        let mut state = BeamState::start(h0);
        let mut timings = StageTimings::default();
        let mut steps = Vec::new();
        let mut hits = HitMatrix::zeros(0, 0);
        let full_ids: Vec<u32> = (0..vocab as u32).collect();

        while state.step < cfg.max_len && !state.all_finished() {
            let rows: Vec<usize> = (0..state.hypotheses.len())
                .filter(|&i| !state.hypotheses[i].finished)
                .collect();
            let hidden = Matrix::from_rows(
                &rows.iter().map(|&i| state.hypotheses[i].hidden.as_slice()).collect::<Vec<_>>(),
            )?;

            let mut t = StageTimings::default();
            let gathered: Option<(Matrix, Vec<u32>)>;
            let cands: CandidateSet;
            match mode {
                DecodeMode::Full => {
                    cands = CandidateSet::full(vocab);
                    gathered = None;
                }
                DecodeMode::Lsh => {
                    let (hasher, index) = self.lsh.expect("checked above");
                    let clock = Instant::now();
                    let codes = hasher.hash_matrix(&hidden)?;
                    t.wta_hash = clock.elapsed();

                    let clock = Instant::now();
                    lookup_hits_into(index, &codes, &mut hits)?;
                    t.cuckoo_lookup = clock.elapsed();

                    let clock = Instant::now();
                    let selected = select_candidates(&hits, cfg.threshold);
                    cands = merge_top_frequent(&selected, cfg.top_t, &cfg.specials, vocab)?;
                    t.construct_candidate_list = clock.elapsed();

                    let clock = Instant::now();
                    gathered = Some(gather_embeddings(model.embeddings(), &cands)?);
                    t.construct_e_lsh = clock.elapsed();
                }
                DecodeMode::TopOnly => {
                    let clock = Instant::now();
                    cands = merge_top_frequent(&CandidateSet::default(), cfg.top_t, &cfg.specials, vocab)?;
                    t.construct_candidate_list = clock.elapsed();

                    let clock = Instant::now();
                    gathered = Some(gather_embeddings(model.embeddings(), &cands)?);
                    t.construct_e_lsh = clock.elapsed();
                }
            }
            if cands.is_empty() {
                return Err(Error::EmptyCandidates);
            }

            let clock = Instant::now();
            let (mut logits, id_map): (Matrix, &[u32]) = match &gathered {
                None => (
                    logits_with_bias(&hidden, model.embeddings(), Some(model.frequency_bias()))?,
                    &full_ids,
                ),
                Some((e_sub, ids)) => {
                    let bias: Vec<f32> = ids.iter().map(|&j| model.frequency_bias()[j as usize]).collect();
                    (logits_with_bias(&hidden, e_sub, Some(&bias))?, ids.as_slice())
                }
            };
            t.matrix_multiply = clock.elapsed();

            let clock = Instant::now();
            log_softmax_in_place(&mut logits)?;
            t.normalization = clock.elapsed();

            let recall = if opts.oracle {
                let exact = exact_topb(&hidden, model.embeddings(), Some(model.frequency_bias()), cfg.beam.min(vocab))?;
                Some(recall_at_b(&cands, &exact).mean)
            } else {
                None
            };

            let clock = Instant::now();
            let choices = expand_beams(&logits, &rows, &state.hypotheses, cfg.beam, id_map)?;
            t.beam_expansion = clock.elapsed();

            let clock = Instant::now();
            let next: Vec<Hypothesis> = choices
                .par_iter()
                .map(|c| {
                    let parent = &state.hypotheses[c.beam];
                    match c.word {
                        None => Ok(parent.clone()),
                        Some(word) => {
                            let mut tokens = parent.tokens.clone();
                            tokens.push(word);
                            let mut step_scores = parent.step_scores.clone();
                            step_scores.push(c.log_prob);
                            let finished = word == model.eos();
                            let hidden = if finished {
                                parent.hidden.clone()
                            } else {
                                model.step_hidden(&parent.hidden, word)?
                            };
                            Ok(Hypothesis {
                                tokens,
                                score: c.score,
                                step_scores,
                                hidden,
                                finished,
                            })
                        }
                    }
                })
                .collect::<Result<_>>()?;
            t.hidden_update = clock.elapsed();

            steps.push(StepMetrics {
                step: state.step,
                active: rows.len(),
                vocab_size: cands.len(),
                from_threshold: cands.from_threshold,
                from_top: cands.from_top,
                from_specials: cands.from_specials,
                recall,
            });
            timings.add(&t);
            state = BeamState {
                hypotheses: next,
                step: state.step + 1,
            };
        }

        Ok(DecodeOutput {
            start_token: start,
            hypotheses: state.hypotheses,
            steps,
            timings,
        })
    }
}
