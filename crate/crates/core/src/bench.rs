//! Benchmark aggregation: repeated seeded decodes, report records, and the
//! hyperparameter grid.
//!
//! Report schema (version 1). Everything outside `timing` is deterministic
//! for fixed flags and any worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::band_index::BandIndex;
use crate::candidates::DecodeConfig;
use crate::decoder::{DecodeMode, DecodeOptions, Decoder, StageTimings};
use crate::error::{Error, Result};
use crate::model::SynthModel;
use crate::rng::derive_seed;
use crate::wta::{WtaHasher, WtaParams};

pub const REPORT_VERSION: u32 = 1;

// keeps decode seeds apart from model streams
const DECODE_STREAM: u64 = 1 << 20;

/// Seeds for `n` decodes under base seed `seed`.
pub fn decode_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, DECODE_STREAM + i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub seed: u64,
    pub start_token: u32,
    pub steps: usize,
    pub hypotheses: Vec<HypothesisRecord>,
}

/// Milliseconds per stage plus softmax-path totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages_ms: BTreeMap<String, f64>,
    pub softmax_path_ms: f64,
    pub softmax_path_ms_per_step: f64,
    pub lsh_overhead_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl TimingReport {
    pub fn new(t: &StageTimings, steps: usize) -> Self {
        let stages_ms = StageTimings::NAMES
            .iter()
            .zip(t.as_array())
            .map(|(n, d)| (n.to_string(), ms(d)))
            .collect();
        let total = ms(t.softmax_path());
        Self {
            stages_ms,
            softmax_path_ms: total,
            softmax_path_ms_per_step: if steps == 0 { 0.0 } else { total / steps as f64 },
            lsh_overhead_ms: ms(t.lsh_overhead()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSummary {
    pub records: Vec<DecodeRecord>,
    pub total_steps: usize,
    pub mean_vocab_size: f64,
    pub mean_recall: Option<f64>,
    pub timings: StageTimings,
}

impl DecodeSummary {
    pub fn softmax_ms_per_step(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            ms(self.timings.softmax_path()) / self.total_steps as f64
        }
    }
}

/// Runs one decode per seed and aggregates step metrics over all of them.
pub fn run_decodes(
    decoder: &Decoder<'_>,
    cfg: &DecodeConfig,
    mode: DecodeMode,
    seeds: &[u64],
    oracle: bool,
) -> Result<DecodeSummary> {
    let mut records = Vec::with_capacity(seeds.len());
    let mut timings = StageTimings::default();
    let (mut steps, mut vocab_sum) = (0usize, 0.0f64);
    let (mut recall_sum, mut recall_n) = (0.0f64, 0usize);
    for &seed in seeds {
        let out = decoder.decode(cfg, mode, DecodeOptions { seed, oracle })?;
        timings.add(&out.timings);
        steps += out.steps.len();
        for s in &out.steps {
            vocab_sum += s.vocab_size as f64;
            if let Some(r) = s.recall {
                recall_sum += r;
                recall_n += 1;
            }
        }
        records.push(DecodeRecord {
            seed,
            start_token: out.start_token,
            steps: out.steps.len(),
            hypotheses: out
                .hypotheses
                .iter()
                .map(|h| HypothesisRecord {
                    tokens: h.tokens.clone(),
                    score: h.score,
                    finished: h.finished,
                })
                .collect(),
        });
    }
    Ok(DecodeSummary {
        records,
        total_steps: steps,
        mean_vocab_size: if steps == 0 { 0.0 } else { vocab_sum / steps as f64 },
        mean_recall: (recall_n > 0).then(|| recall_sum / recall_n as f64),
        timings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LshParamsRecord {
    #[serde(rename = "K")]
    pub k: u32,
    pub u: u32,
    #[serde(rename = "W")]
    pub w: u32,
    pub hash_seed: u64,
}

impl From<&WtaParams> for LshParamsRecord {
    fn from(p: &WtaParams) -> Self {
        Self {
            k: p.k(),
            u: p.u(),
            w: p.w(),
            hash_seed: p.seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub version: u32,
    pub mode: DecodeMode,
    pub vocab: usize,
    pub dim: usize,
    pub seed: u64,
    pub lsh: Option<LshParamsRecord>,
    #[serde(rename = "T")]
    pub top_t: usize,
    #[serde(rename = "t")]
    pub threshold: u32,
    pub beam: usize,
    pub max_steps: usize,
    pub decodes: usize,
    pub total_steps: usize,
    pub mean_vocab_size: f64,
    pub vocab_reduction: f64,
    pub mean_recall: Option<f64>,
    /// Set when the run was compared against a full-vocabulary decode.
    pub matches_full: Option<bool>,
    pub outputs: Vec<DecodeRecord>,
    pub timing: TimingReport,
}

impl DecodeReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &SynthModel,
        seed: u64,
        params: Option<&WtaParams>,
        cfg: &DecodeConfig,
        mode: DecodeMode,
        summary: DecodeSummary,
    ) -> Self {
        let vocab = model.vocab_size();
        Self {
            version: REPORT_VERSION,
            mode,
            vocab,
            dim: model.dim(),
            seed,
            lsh: params.filter(|_| mode == DecodeMode::Lsh).map(LshParamsRecord::from),
            top_t: cfg.top_t,
            threshold: cfg.threshold,
            beam: cfg.beam,
            max_steps: cfg.max_len,
            decodes: summary.records.len(),
            total_steps: summary.total_steps,
            mean_vocab_size: summary.mean_vocab_size,
            vocab_reduction: if summary.mean_vocab_size > 0.0 {
                vocab as f64 / summary.mean_vocab_size
            } else {
                0.0
            },
            mean_recall: summary.mean_recall,
            matches_full: None,
            timing: TimingReport::new(&summary.timings, summary.total_steps),
            outputs: summary.records,
        }
    }

    /// Aligned human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode                {}", self.mode.as_str());
        let _ = writeln!(s, "vocab x dim         {} x {}", self.vocab, self.dim);
        if let Some(p) = &self.lsh {
            let _ = writeln!(s, "{{K,u,W}}             {{{},{},{}}}", p.k, p.u, p.w);
        }
        let _ = writeln!(s, "{{B,T,t}}             {{{},{},{}}}", self.beam, self.top_t, self.threshold);
        let _ = writeln!(s, "decodes / steps     {} / {}", self.decodes, self.total_steps);
        let _ = writeln!(
            s,
            "runtime vocab size  {:.1} ({:.2}x reduction)",
            self.mean_vocab_size, self.vocab_reduction
        );
        if let Some(r) = self.mean_recall {
            let _ = writeln!(s, "mean recall@{:<7} {:.4}", self.beam, r);
        }
        if let Some(m) = self.matches_full {
            let _ = writeln!(s, "matches full mode   {}", if m { "yes" } else { "no" });
        }
        let total = self.timing.softmax_path_ms.max(f64::MIN_POSITIVE);
        let _ = writeln!(s, "\n{:<26} {:>12} {:>8}", "stage", "ms", "percent");
        for name in StageTimings::NAMES {
            let v = self.timing.stages_ms.get(name).copied().unwrap_or(0.0);
            let pct = if StageTimings::NAMES[..6].contains(&name) {
                format!("{:.1} %", 100.0 * v / total)
            } else {
                "-".into()
            };
            let _ = writeln!(s, "{name:<26} {v:>12.3} {pct:>8}");
        }
        let _ = writeln!(s, "{:<26} {:>12.3} {:>8}", "Softmax path", self.timing.softmax_path_ms, "100.0 %");
        for rec in &self.outputs {
            let best = rec.hypotheses.first();
            if let Some(h) = best {
                let _ = writeln!(
                    s,
                    "seed {:>20}  start {:>6}  score {:>10.4}  tokens {:?}",
                    rec.seed, rec.start_token, h.score, h.tokens
                );
            }
        }
        s
    }
}

/// Lists of values for each grid axis. Rows are enumerated
/// lexicographically in the order K, u, W, T, t, B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ks: Vec<u32>,
    pub us: Vec<u32>,
    pub ws: Vec<u32>,
    pub tops: Vec<usize>,
    pub thresholds: Vec<u32>,
    pub beams: Vec<usize>,
    pub hash_seed: u64,
    pub max_len: usize,
    pub decodes: usize,
    pub seed: u64,
}

impl GridSpec {
    pub fn size(&self) -> usize {
        self.ks.len() * self.us.len() * self.ws.len() * self.tops.len() * self.thresholds.len() * self.beams.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub kind: String,
    #[serde(rename = "K")]
    pub k: Option<u32>,
    pub u: Option<u32>,
    #[serde(rename = "W")]
    pub w: Option<u32>,
    #[serde(rename = "T")]
    pub top_t: Option<usize>,
    #[serde(rename = "t")]
    pub threshold: Option<u32>,
    #[serde(rename = "B")]
    pub beam: usize,
    pub mean_vocab_size: f64,
    pub recall: f64,
    pub softmax_ms_per_step: f64,
    pub speedup: f64,
}

/// Runs the grid. One full-softmax baseline per beam size comes first,
/// followed by one row per configuration.
pub fn run_grid(model: &SynthModel, spec: &GridSpec, specials: &[u32]) -> Result<Vec<GridRow>> {
    if spec.size() == 0 {
        return Err(Error::Config("empty grid".into()));
    }
    let seeds = decode_seeds(spec.seed, spec.decodes);
    let mut rows = Vec::new();
    let mut baseline_ms = BTreeMap::new();
    let full = Decoder::new(model);
    for &beam in &spec.beams {
        if baseline_ms.contains_key(&beam) {
            continue;
        }
        let cfg = DecodeConfig {
            beam,
            top_t: 0,
            threshold: 0,
            max_len: spec.max_len,
            specials: specials.to_vec(),
        };
        let summary = run_decodes(&full, &cfg, DecodeMode::Full, &seeds, true)?;
        let per_step = summary.softmax_ms_per_step();
        baseline_ms.insert(beam, per_step);
        rows.push(GridRow {
            kind: "baseline".into(),
            k: None,
            u: None,
            w: None,
            top_t: None,
            threshold: None,
            beam,
            mean_vocab_size: summary.mean_vocab_size,
            recall: summary.mean_recall.unwrap_or(1.0),
            softmax_ms_per_step: per_step,
            speedup: 1.0,
        });
    }
    for &k in &spec.ks {
        for &u in &spec.us {
            for &w in &spec.ws {
                let params = WtaParams::new(k, u, w, spec.hash_seed)?;
                let hasher = WtaHasher::new(model.dim(), params)?;
                let index = BandIndex::build(model.embeddings(), params)?;
                let decoder = Decoder::with_lsh(model, &hasher, &index)?;
                for &top_t in &spec.tops {
                    for &threshold in &spec.thresholds {
                        for &beam in &spec.beams {
                            let cfg = DecodeConfig {
                                beam,
                                top_t,
                                threshold,
                                max_len: spec.max_len,
                                specials: specials.to_vec(),
                            };
                            let summary = run_decodes(&decoder, &cfg, DecodeMode::Lsh, &seeds, true)?;
                            let per_step = summary.softmax_ms_per_step();
                            let base = baseline_ms[&beam];
                            rows.push(GridRow {
                                kind: "lsh".into(),
                                k: Some(k),
                                u: Some(u),
                                w: Some(w),
                                top_t: Some(top_t),
                                threshold: Some(threshold),
                                beam,
                                mean_vocab_size: summary.mean_vocab_size,
                                recall: summary.mean_recall.unwrap_or(1.0),
                                softmax_ms_per_step: per_step,
                                speedup: if per_step > 0.0 { base / per_step } else { 0.0 },
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}
