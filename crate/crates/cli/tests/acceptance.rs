//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and share the grid result between the vocabulary-reduction,
//! speedup, batch-size and top-T checks.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use wta_lsh::band_index::lookup_hits;
use wta_lsh::bench::{decode_seeds, run_decodes, run_grid, GridRow, GridSpec};
use wta_lsh::cuckoo::{CuckooTable, Span};
use wta_lsh::rng::SeededRng;
use wta_lsh::wta::{BandMatrix, EMPTY_CODE};
use wta_lsh::{BandIndex, DecodeConfig, DecodeMode, Decoder, SynthConfig, SynthModel, WtaHasher, WtaParams};

// pinned tolerances and sizes
const SCORE_TOL: f64 = 1e-5;
const RECALL_MIN: f64 = 0.9;
const SPEEDUP_MIN: f64 = 1.5;
const BEAM_RATIO_MIN: f64 = 0.9;
const MULTI_WORKERS: usize = 4;
const TIMING_REPS: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(n: usize, name: &str, elapsed: Duration, limit: Duration, out: Outcome) -> bool {
    let pass = out.pass && elapsed <= limit;
    println!(
        "{} criterion {n} {name}: {} [{:.1}s, limit {}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

fn oracle_equivalence() -> Outcome {
    let model = SynthModel::generate(&SynthConfig::new(2000, 64, 11)).unwrap();
    let params = WtaParams::new(8, 3, 100, 11).unwrap();
    let hasher = WtaHasher::new(64, params).unwrap();
    let index = BandIndex::build(model.embeddings(), params).unwrap();
    let lsh = Decoder::with_lsh(&model, &hasher, &index).unwrap();
    let full = Decoder::new(&model);
    let seeds = decode_seeds(11, 100);
    let base = DecodeConfig {
        beam: 12,
        top_t: 0,
        threshold: 0,
        max_len: 30,
        specials: vec![model.eos()],
    };
    let reference = run_decodes(&full, &base, DecodeMode::Full, &seeds, false).unwrap();
    let variants = [
        ("t=0", DecodeConfig { threshold: 0, top_t: 0, ..base.clone() }),
        ("T=|V|", DecodeConfig { threshold: 3, top_t: 2000, ..base.clone() }),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg) in variants {
        let got = run_decodes(&lsh, &cfg, DecodeMode::Lsh, &seeds, false).unwrap();
        let (mut token_mismatch, mut max_diff) = (0usize, 0.0f64);
        for (a, b) in got.records.iter().zip(&reference.records) {
            if a.hypotheses.len() != b.hypotheses.len() {
                token_mismatch += 1;
                continue;
            }
            for (x, y) in a.hypotheses.iter().zip(&b.hypotheses) {
                if x.tokens != y.tokens || x.finished != y.finished {
                    token_mismatch += 1;
                }
                max_diff = max_diff.max((x.score - y.score).abs());
            }
        }
        let ok = token_mismatch == 0 && max_diff <= SCORE_TOL && got.mean_vocab_size == 2000.0;
        pass &= ok;
        parts.push(format!(
            "{name}: {token_mismatch} token mismatches, max score diff {max_diff:.2e}, mean |V_LSH| {:.0}",
            got.mean_vocab_size
        ));
    }
    Outcome::new(pass, format!("100 decodes; {}", parts.join("; ")))
}

fn cuckoo_correctness() -> Outcome {
    const KEYS: usize = 4096;
    const SEEDS: u64 = 100;
    const LOOKUPS_PER_SEED: usize = 1000;
    let (mut mismatches, mut max_probes, mut lookups, mut max_attempts) = (0usize, 0u32, 0usize, 0usize);
    let mut failed_builds = 0usize;
    let mut min_load = f64::INFINITY;
    for seed in 0..SEEDS {
        let mut rng = SeededRng::stream(0xC0C0, seed);
        let mut keys = HashSet::with_capacity(KEYS);
        while keys.len() < KEYS {
            keys.insert(rng.below(u64::from(EMPTY_CODE)) as u32);
        }
        let entries: Vec<(u32, Span)> = keys
            .iter()
            .copied()
            .enumerate()
            .map(|(i, k)| (k, Span { start: i as u32, length: 1 + (k % 7) }))
            .collect();
        let table = match CuckooTable::build(&entries, seed) {
            Ok(t) => t,
            Err(_) => {
                failed_builds += 1;
                continue;
            }
        };
        max_attempts = max_attempts.max(table.attempts());
        min_load = min_load.min(table.load_factor());
        for q in 0..LOOKUPS_PER_SEED {
            let key = if q % 2 == 0 {
                entries[rng.below(KEYS as u64) as usize].0
            } else {
                rng.below(u64::from(EMPTY_CODE)) as u32
            };
            let expected = entries.iter().find(|e| e.0 == key).map(|e| e.1);
            let (got, probes) = table.lookup_counted(key);
            if got != expected {
                mismatches += 1;
            }
            max_probes = max_probes.max(probes);
            lookups += 1;
        }
    }
    let pass = mismatches == 0 && max_probes <= 2 && failed_builds == 0 && max_attempts <= 9 && min_load >= 0.5;
    Outcome::new(
        pass,
        format!(
            "{lookups} lookups, {mismatches} mismatches, max probes {max_probes}; \
             {SEEDS} builds of {KEYS} keys at load {min_load:.2}: {failed_builds} failed, max attempts {max_attempts}"
        ),
    )
}

fn hit_matrix_exactness() -> Outcome {
    let mut rng = SeededRng::new(0x417);
    let mut mismatched = 0usize;
    for _ in 0..200 {
        let vocab = 1 + rng.below(200) as usize;
        let w = 1 + rng.below(16) as usize;
        let beams = 1 + rng.below(8) as usize;
        let k = [2u32, 4, 8, 16][rng.below(4) as usize];
        let u = 1 + rng.below(3) as u32;
        let params = WtaParams::new(k, u, w as u32, rng.next_u64()).unwrap();
        // a small alphabet forces frequent collisions
        let alphabet = 1 + rng.below(6.min(1u64 << params.band_bits()));
        let codes: Vec<u32> = (0..vocab * w).map(|_| rng.below(alphabet) as u32).collect();
        let query: Vec<u32> = (0..beams * w).map(|_| rng.below(alphabet + 1) as u32).collect();
        let emb = BandMatrix::from_vec(vocab, w, codes.clone()).unwrap();
        let q = BandMatrix::from_vec(beams, w, query.clone()).unwrap();
        let index = BandIndex::from_band_codes(&emb, params, 16).unwrap();
        let hits = lookup_hits(&index, &q).unwrap();
        let ok = (0..beams).all(|i| {
            (0..vocab).all(|j| {
                let brute = (0..w).filter(|&b| query[i * w + b] == codes[j * w + b]).count();
                usize::from(hits.get(i, j)) == brute
            })
        });
        mismatched += usize::from(!ok);
    }
    Outcome::new(mismatched == 0, format!("200 instances, {mismatched} differ from brute force"))
}

fn unit(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn rank_correlation() -> Outcome {
    const D: usize = 128;
    let params = WtaParams::new(16, 3, 500, 0x5EED).unwrap();
    let hasher = WtaHasher::new(D, params).unwrap();
    let mut rng = SeededRng::new(0xC05);
    let (mut hi, mut lo) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let mut a: Vec<f32> = (0..D).map(|_| rng.gaussian() as f32).collect();
        unit(&mut a);
        let mut r: Vec<f32> = (0..D).map(|_| rng.gaussian() as f32).collect();
        let proj: f32 = r.iter().zip(&a).map(|(x, y)| x * y).sum();
        r.iter_mut().zip(&a).for_each(|(x, y)| *x -= proj * y);
        unit(&mut r);
        let c = rng.uniform_open() as f32;
        let s = (1.0 - c * c).sqrt();
        let b: Vec<f32> = a.iter().zip(&r).map(|(x, y)| c * x + s * y).collect();
        let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let ca = hasher.hash_vector(&a).unwrap();
        let cb = hasher.hash_vector(&b).unwrap();
        let matches = ca.0.iter().zip(&cb.0).filter(|(x, y)| x == y).count() as f64;
        if cos >= 0.8 {
            hi.push(matches);
        } else if cos <= 0.2 {
            lo.push(matches);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (mh, ml) = (mean(&hi), mean(&lo));
    Outcome::new(
        !hi.is_empty() && !lo.is_empty() && mh - ml > 0.0,
        format!(
            "mean band matches {mh:.2} over {} pairs with cos >= 0.8 vs {ml:.2} over {} pairs with cos <= 0.2",
            hi.len(),
            lo.len()
        ),
    )
}

const BENCH_VOCAB: usize = 50_000;
const BENCH_DIM: usize = 256;
const BENCH_SEED: u64 = 1;
const BENCH_STEPS: usize = 30;
const BENCH_DECODES: usize = 3;

fn bench_spec() -> GridSpec {
    GridSpec {
        ks: vec![8, 16],
        us: vec![3],
        ws: vec![500],
        // T = 0 and 0.5%, 1%, 2% of |V|
        tops: vec![0, BENCH_VOCAB / 200, BENCH_VOCAB / 100, BENCH_VOCAB / 50],
        thresholds: vec![1, 2, 3, 4, 6],
        beams: vec![12],
        hash_seed: BENCH_SEED,
        max_len: BENCH_STEPS,
        decodes: BENCH_DECODES,
        seed: BENCH_SEED,
    }
}

fn fmt_row(r: &GridRow) -> String {
    format!(
        "K={} u={} W={} T={} t={}: |V_LSH| {:.0}, recall {:.4}",
        r.k.unwrap_or(0),
        r.u.unwrap_or(0),
        r.w.unwrap_or(0),
        r.top_t.unwrap_or(0),
        r.threshold.unwrap_or(0),
        r.mean_vocab_size,
        r.recall
    )
}

fn vocab_reduction(rows: &[GridRow]) -> (Outcome, Option<GridRow>) {
    let limit = BENCH_VOCAB as f64 / 4.0;
    let chosen = rows
        .iter()
        .filter(|r| r.kind == "lsh" && r.top_t.unwrap_or(0) > 0)
        .filter(|r| r.mean_vocab_size <= limit && r.recall >= RECALL_MIN)
        .min_by(|a, b| a.mean_vocab_size.total_cmp(&b.mean_vocab_size))
        .cloned();
    let out = match &chosen {
        Some(r) => Outcome::new(
            true,
            format!(
                "{} (|V|/{:.2}); {} configurations searched",
                fmt_row(r),
                BENCH_VOCAB as f64 / r.mean_vocab_size,
                rows.len() - 1
            ),
        ),
        None => Outcome::new(false, format!("no configuration with |V_LSH| <= {limit} and recall >= {RECALL_MIN}")),
    };
    (out, chosen)
}

fn config_of(row: &GridRow, beam: usize, specials: &[u32]) -> (WtaParams, DecodeConfig) {
    let params = WtaParams::new(row.k.unwrap(), row.u.unwrap(), row.w.unwrap(), BENCH_SEED).unwrap();
    let cfg = DecodeConfig {
        beam,
        top_t: row.top_t.unwrap(),
        threshold: row.threshold.unwrap(),
        max_len: BENCH_STEPS,
        specials: specials.to_vec(),
    };
    (params, cfg)
}

/// Softmax-path time of the full and the LSH decoder over the same seeds,
/// each the minimum over interleaved repetitions.
fn softmax_times(model: &SynthModel, lsh: &Decoder<'_>, cfg: &DecodeConfig) -> (f64, f64) {
    let full = Decoder::new(model);
    let seeds = decode_seeds(BENCH_SEED, BENCH_DECODES);
    let (mut base, mut fast) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..TIMING_REPS {
        let b = run_decodes(&full, cfg, DecodeMode::Full, &seeds, false).unwrap();
        base = base.min(b.softmax_ms_per_step());
        let l = run_decodes(lsh, cfg, DecodeMode::Lsh, &seeds, false).unwrap();
        fast = fast.min(l.softmax_ms_per_step());
    }
    (base, fast)
}

fn speedup(model: &SynthModel, row: &GridRow) -> Outcome {
    let (params, cfg) = config_of(row, 12, &[model.eos()]);
    let hasher = WtaHasher::new(model.dim(), params).unwrap();
    let index = BandIndex::build(model.embeddings(), params).unwrap();
    let lsh = Decoder::with_lsh(model, &hasher, &index).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for workers in [1, MULTI_WORKERS] {
        let (base, fast) = pool(workers).install(|| softmax_times(model, &lsh, &cfg));
        let s = base / fast;
        pass &= s >= SPEEDUP_MIN;
        parts.push(format!("{workers} worker(s): full {base:.2} ms/step, lsh {fast:.2} ms/step, {s:.2}x"));
    }
    Outcome::new(pass, format!("{}; need >= {SPEEDUP_MIN}x", parts.join("; ")))
}

fn beam_robustness(model: &SynthModel, row: &GridRow) -> Outcome {
    let mut speedups = Vec::new();
    let mut parts = Vec::new();
    for beam in [12, 48] {
        let (params, cfg) = config_of(row, beam, &[model.eos()]);
        let hasher = WtaHasher::new(model.dim(), params).unwrap();
        let index = BandIndex::build(model.embeddings(), params).unwrap();
        let lsh = Decoder::with_lsh(model, &hasher, &index).unwrap();
        let (base, fast) = pool(1).install(|| softmax_times(model, &lsh, &cfg));
        speedups.push(base / fast);
        parts.push(format!("B={beam}: {:.2}x", base / fast));
    }
    Outcome::new(
        speedups[1] >= speedups[0] * BEAM_RATIO_MIN,
        format!("{}; need B=48 >= {BEAM_RATIO_MIN} x B=12", parts.join(", ")),
    )
}

fn top_t_effect(rows: &[GridRow]) -> Outcome {
    let limit = BENCH_VOCAB as f64 / 4.0;
    let best = |t: usize| {
        rows.iter()
            .filter(|r| r.kind == "lsh" && r.top_t == Some(t) && r.mean_vocab_size <= limit)
            .max_by(|a, b| a.recall.total_cmp(&b.recall).then(b.mean_vocab_size.total_cmp(&a.mean_vocab_size)))
    };
    match (best(0), best(BENCH_VOCAB / 100)) {
        (Some(zero), Some(one)) => Outcome::new(
            zero.recall < one.recall,
            format!("best at T=0: {}; best at T=1%: {}", fmt_row(zero), fmt_row(one)),
        ),
        _ => Outcome::new(false, "no T=0 or T=1% configuration within |V|/4"),
    }
}

fn run_cli(args: &[&str]) -> (bool, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_wta-bench"))
        .args(args)
        .output()
        .expect("spawn wta-bench");
    (out.status.success(), out.stdout)
}

fn strip_timing(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    v
}

fn strip_grid_timing(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            // trailing softmax_ms_per_step and speedup columns are timing
            cols[..cols.len() - 2].join(",")
        })
        .collect()
}

fn determinism(dir: &Path) -> Outcome {
    let mut decode_runs: HashMap<usize, Vec<serde_json::Value>> = HashMap::new();
    let mut grid_runs: HashMap<usize, Vec<Vec<String>>> = HashMap::new();
    let mut failures = Vec::new();
    for workers in [1usize, 4, 8] {
        for rep in 0..2 {
            let json = dir.join(format!("decode_{workers}_{rep}.json"));
            let w = workers.to_string();
            let (ok, _) = run_cli(&[
                "decode", "--synth", "3000,64,5", "--K", "8", "--u", "3", "--W", "100", "--T", "1%", "--t", "2",
                "--beam", "12", "--steps", "20", "--decodes", "3", "--oracle", "--workers", &w, "--out",
                json.to_str().unwrap(),
            ]);
            if !ok {
                failures.push(format!("decode workers={workers} failed"));
                continue;
            }
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
            decode_runs.entry(workers).or_default().push(strip_timing(v));

            let (ok, stdout) = run_cli(&[
                "grid", "--synth", "3000,64,5", "--K", "8,16", "--u", "3", "--W", "100", "--T", "0,1%", "--t",
                "2,3", "--beam", "4,12", "--steps", "10", "--decodes", "2", "--workers", &w,
            ]);
            if !ok {
                failures.push(format!("grid workers={workers} failed"));
                continue;
            }
            grid_runs
                .entry(workers)
                .or_default()
                .push(strip_grid_timing(&String::from_utf8(stdout).unwrap()));
        }
    }
    let all_decodes: Vec<&serde_json::Value> = decode_runs.values().flatten().collect();
    let all_grids: Vec<&Vec<String>> = grid_runs.values().flatten().collect();
    let decode_same = all_decodes.len() == 6 && all_decodes.windows(2).all(|p| p[0] == p[1]);
    let grid_same = all_grids.len() == 6 && all_grids.windows(2).all(|p| p[0] == p[1]);
    let grid_rows = all_grids.first().map_or(0, |g| g.len().saturating_sub(1));
    let pass = failures.is_empty() && decode_same && grid_same;
    Outcome::new(
        pass,
        format!(
            "workers 1/4/8 x 2 runs: decode reports identical = {decode_same}, \
             grid CSV ({grid_rows} rows) identical = {grid_same}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let clock = Instant::now();
    let out = f();
    (out, clock.elapsed())
}

fn main() -> ExitCode {
    let minute = Duration::from_secs(60);
    let mut all = true;

    let (o, t) = timed(oracle_equivalence);
    all &= report(1, "oracle equivalence", t, minute, o);
    let (o, t) = timed(cuckoo_correctness);
    all &= report(2, "cuckoo correctness", t, minute, o);
    let (o, t) = timed(hit_matrix_exactness);
    all &= report(3, "hit-matrix exactness", t, minute, o);
    let (o, t) = timed(rank_correlation);
    all &= report(4, "WTA rank correlation", t, minute, o);

    let model = SynthModel::generate(&SynthConfig::new(BENCH_VOCAB, BENCH_DIM, BENCH_SEED)).unwrap();
    let ((rows, (o, chosen)), t) = timed(|| {
        let rows = pool(1).install(|| run_grid(&model, &bench_spec(), &[model.eos()])).unwrap();
        let found = vocab_reduction(&rows);
        (rows, found)
    });
    all &= report(5, "vocab reduction with recall", t, 30 * minute, o);

    match &chosen {
        Some(row) => {
            let (o, t) = timed(|| speedup(&model, row));
            all &= report(6, "softmax-path speedup", t, 10 * minute, o);
            let (o, t) = timed(|| beam_robustness(&model, row));
            all &= report(7, "beam-size robustness", t, 10 * minute, o);
        }
        None => {
            let none = || Outcome::new(false, "no configuration from criterion 5");
            all &= report(6, "softmax-path speedup", Duration::ZERO, minute, none());
            all &= report(7, "beam-size robustness", Duration::ZERO, minute, none());
        }
    }
    let (o, t) = timed(|| top_t_effect(&rows));
    all &= report(8, "top-T effect", t, minute, o);

    let dir = tempfile::tempdir().expect("tempdir");
    let (o, t) = timed(|| determinism(dir.path()));
    all &= report(9, "determinism", t, 10 * minute, o);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
