use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wta_lsh::bench::{decode_seeds, run_decodes, run_grid, DecodeReport, GridSpec};
use wta_lsh::model::load_embeddings;
use wta_lsh::{BandIndex, DecodeConfig, DecodeMode, Decoder, Error, SynthConfig, SynthModel, WtaHasher, WtaParams};

#[derive(Parser, Debug)]
#[command(name = "wta-bench", version, about = "WTA-LSH restricted-softmax beam search benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a band index over the output embeddings and write it to disk.
    Build(BuildArgs),
    /// Run seeded beam-search decodes and report stage timings and recall.
    Decode(DecodeArgs),
    /// Sweep {K,u,W,T,t,B} and write one CSV row per configuration.
    Grid(GridArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Synthetic vocabulary size.
    #[arg(long, default_value_t = 50_000)]
    vocab: usize,
    /// Hidden / embedding dimension.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Base seed for the model and the decode start tokens.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Shorthand for `--vocab V --dim D --seed S`.
    #[arg(long, value_name = "V,D,SEED")]
    synth: Option<SynthSpec>,
    /// Output embeddings file (WTAEMB1); replaces the synthetic embeddings.
    #[arg(long, value_name = "PATH")]
    emb: Option<PathBuf>,
    /// Thread count for data-parallel stages.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Clone)]
struct HashArgs {
    #[arg(long = "K", default_value_t = 16)]
    k: u32,
    #[arg(long, default_value_t = 3)]
    u: u32,
    #[arg(long = "W", default_value_t = 500)]
    w: u32,
    /// Seed for the WTA permutations; defaults to the model seed.
    #[arg(long)]
    hash_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hash: HashArgs,
    /// Index output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Full,
    Lsh,
    Top,
}

impl From<Mode> for DecodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => DecodeMode::Full,
            Mode::Lsh => DecodeMode::Lsh,
            Mode::Top => DecodeMode::TopOnly,
        }
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hash: HashArgs,
    /// Prebuilt index; built in memory from the hash flags when absent.
    #[arg(long, value_name = "PATH")]
    index: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Lsh)]
    mode: Mode,
    /// Number of most frequent words merged into every candidate list
    /// (count, or percentage of the vocabulary such as `1%`).
    #[arg(long = "T", default_value = "1%")]
    top_t: TopT,
    /// Minimum band hits for a word to become a candidate.
    #[arg(long = "t", default_value_t = 2)]
    threshold: u32,
    #[arg(long, default_value_t = 12)]
    beam: usize,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    /// Number of seeded decodes.
    #[arg(long, default_value_t = 1)]
    decodes: usize,
    /// Compute recall@B against the exact top-B at every step.
    #[arg(long)]
    oracle: bool,
    /// Also run a full-softmax decode and report whether outputs match.
    #[arg(long)]
    compare_full: bool,
    /// JSON report path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "K", value_delimiter = ',', default_value = "8,16")]
    k: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    u: Vec<u32>,
    #[arg(long = "W", value_delimiter = ',', default_value = "500")]
    w: Vec<u32>,
    #[arg(long = "T", value_delimiter = ',', default_value = "0.5%,1%,2%")]
    top_t: Vec<TopT>,
    #[arg(long = "t", value_delimiter = ',', default_value = "1,2,3,4")]
    threshold: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "12")]
    beam: Vec<usize>,
    #[arg(long)]
    hash_seed: Option<u64>,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    decodes: usize,
    /// CSV output path; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
struct SynthSpec {
    vocab: usize,
    dim: usize,
    seed: u64,
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [v, d, seed] = parts.as_slice() else {
            return Err(format!("expected V,D,SEED, got `{s}`"));
        };
        Ok(Self {
            vocab: v.parse().map_err(|e| format!("vocab: {e}"))?,
            dim: d.parse().map_err(|e| format!("dim: {e}"))?,
            seed: seed.parse().map_err(|e| format!("seed: {e}"))?,
        })
    }
}

/// Top-T as an absolute count or a percentage of the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq)]
enum TopT {
    Count(usize),
    Percent(f64),
}

impl TopT {
    fn resolve(self, vocab: usize) -> usize {
        match self {
            TopT::Count(n) => n,
            TopT::Percent(p) => ((vocab as f64) * p / 100.0).round() as usize,
        }
    }
}

impl FromStr for TopT {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.strip_suffix('%') {
            Some(p) => {
                let p: f64 = p.parse().map_err(|e| format!("T percentage `{s}`: {e}"))?;
                if !(0.0..=100.0).contains(&p) {
                    return Err(format!("T percentage `{s}` outside [0, 100]"));
                }
                Ok(TopT::Percent(p))
            }
            None => s.parse().map(TopT::Count).map_err(|e| format!("T `{s}`: {e}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(
                Error::InvalidParams(_) | Error::PackingOverflow { .. } | Error::DimensionTooSmall { .. } | Error::Config(_),
            ) => 2,
            CliError::Lib(Error::Io(e)) | CliError::Io { source: e, .. } if e.kind() == io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        context: format!("cannot read {}", path.display()),
        source,
    })
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        context: format!("cannot write {}", path.display()),
        source,
    })
}

impl ModelArgs {
    fn load(&self) -> CliResult<SynthModel> {
        let (mut vocab, mut dim, mut seed) = (self.vocab, self.dim, self.seed);
        if let Some(s) = self.synth {
            (vocab, dim, seed) = (s.vocab, s.dim, s.seed);
        }
        let emb = match &self.emb {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::Usage(format!("embeddings file {} not found", path.display())));
                }
                let e = load_embeddings(path)?;
                (vocab, dim) = (e.rows(), e.cols());
                Some(e)
            }
            None => None,
        };
        if vocab < 2 || dim < 1 {
            return Err(CliError::Usage(format!("model needs vocab >= 2 and dim >= 1, got {vocab}x{dim}")));
        }
        let model = SynthModel::generate(&SynthConfig::new(vocab, dim, seed))?;
        Ok(match emb {
            Some(e) => model.with_embeddings(e)?,
            None => model,
        })
    }

    fn seed(&self) -> u64 {
        self.synth.map_or(self.seed, |s| s.seed)
    }

    fn pool(&self) -> CliResult<rayon::ThreadPool> {
        if self.workers == 0 {
            return Err(CliError::Usage("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CliError::Other(format!("thread pool: {e}")))
    }
}

impl HashArgs {
    fn params(&self, model_seed: u64) -> CliResult<WtaParams> {
        Ok(WtaParams::new(self.k, self.u, self.w, self.hash_seed.unwrap_or(model_seed))?)
    }
}

fn cmd_build(args: &BuildArgs) -> CliResult<()> {
    let params = args.hash.params(args.model.seed())?;
    args.model.pool()?.install(|| {
        let model = args.model.load()?;
        let index = BandIndex::build(model.embeddings(), params)?;
        write_output(&args.out, &index.to_bytes())?;
        println!(
            "index {}  |V|={} d={} K={} u={} W={}",
            args.out.display(),
            index.vocab_size(),
            index.dim(),
            params.k(),
            params.u(),
            params.w()
        );
        println!("{:>6} {:>14} {:>10}", "band", "distinct_codes", "max_span");
        for (b, s) in index.band_stats().iter().enumerate() {
            println!("{b:>6} {:>14} {:>10}", s.distinct_codes, s.max_span);
        }
        Ok(())
    })
}

fn load_index(path: &Path) -> CliResult<BandIndex> {
    let bytes = read_input(path)?;
    Ok(BandIndex::from_bytes(&bytes)?)
}

fn cmd_decode(args: &DecodeArgs) -> CliResult<()> {
    args.model.pool()?.install(|| {
        let model = args.model.load()?;
        let seed = args.model.seed();
        let mode = DecodeMode::from(args.mode);
        let cfg = DecodeConfig {
            beam: args.beam,
            top_t: args.top_t.resolve(model.vocab_size()),
            threshold: args.threshold,
            max_len: args.steps,
            specials: vec![model.eos()],
        };
        let seeds = decode_seeds(seed, args.decodes);

        let lsh = if mode == DecodeMode::Lsh {
            let index = match &args.index {
                Some(path) => load_index(path)?,
                None => BandIndex::build(model.embeddings(), args.hash.params(seed)?)?,
            };
            let hasher = WtaHasher::new(model.dim(), *index.params())?;
            Some((hasher, index))
        } else {
            None
        };
        let decoder = match &lsh {
            Some((hasher, index)) => Decoder::with_lsh(&model, hasher, index)?,
            None => Decoder::new(&model),
        };
        let summary = run_decodes(&decoder, &cfg, mode, &seeds, args.oracle)?;
        let params = lsh.as_ref().map(|(h, _)| *h.params());
        let mut report = DecodeReport::new(&model, seed, params.as_ref(), &cfg, mode, summary);

        if args.compare_full {
            let full = run_decodes(&Decoder::new(&model), &cfg, DecodeMode::Full, &seeds, false)?;
            let same = report.outputs.iter().zip(&full.records).all(|(a, b)| {
                a.hypotheses.len() == b.hypotheses.len()
                    && a.hypotheses.iter().zip(&b.hypotheses).all(|(x, y)| {
                        x.tokens == y.tokens && x.finished == y.finished && (x.score - y.score).abs() <= 1e-5
                    })
            });
            report.matches_full = Some(same);
        }

        if let Some(path) = &args.out {
            let json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
            write_output(path, &json)?;
        }
        print!("{}", report.to_text());
        Ok(())
    })
}

fn cmd_grid(args: &GridArgs) -> CliResult<()> {
    args.model.pool()?.install(|| {
        let model = args.model.load()?;
        let vocab = model.vocab_size();
        let seed = args.model.seed();
        let spec = GridSpec {
            ks: args.k.clone(),
            us: args.u.clone(),
            ws: args.w.clone(),
            tops: args.top_t.iter().map(|t| t.resolve(vocab)).collect(),
            thresholds: args.threshold.clone(),
            beams: args.beam.clone(),
            hash_seed: args.hash_seed.unwrap_or(seed),
            max_len: args.steps,
            decodes: args.decodes,
            seed,
        };
        for &k in &spec.ks {
            for &u in &spec.us {
                for &w in &spec.ws {
                    WtaParams::new(k, u, w, spec.hash_seed)?;
                }
            }
        }
        let rows = run_grid(&model, &spec, &[model.eos()])?;
        let sink: Box<dyn io::Write> = match &args.out {
            Some(path) => Box::new(fs::File::create(path).map_err(|source| CliError::Io {
                context: format!("cannot write {}", path.display()),
                source,
            })?),
            None => Box::new(io::stdout().lock()),
        };
        let mut w = csv::Writer::from_writer(sink);
        for row in &rows {
            w.serialize(row).map_err(|e| CliError::Other(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| CliError::Other(format!("csv: {e}")))?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
