mod commands;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sincxv::models::Architecture;

const FORMATS: &str = "\
FILE FORMATS (all text is UTF-8, lines end in LF)

manifest.tsv
  Optional first line `# split: dev` or `# split: test` (default dev), then one
  line per utterance: `utterance_id<TAB>speaker_id<TAB>audio_path`. Audio paths
  are relative to the manifest's directory. A dev manifest needs at least two
  utterances per speaker.

audio
  RIFF/WAVE, PCM, 16-bit, mono. Synthesized corpora use 16000 Hz.

trials
  One line per trial: `enroll_id<TAB>test_id<TAB>label`, label `same` or
  `different`. Blank lines and lines starting with `#` are skipped.

embeddings, text
  One line per utterance: the id, then the values, all separated by single
  spaces. Values print as the shortest decimal that reads back to the same f32.

embeddings, binary (.bin)
  Header line `N DIM`, then N lines each holding one utterance id, then N*DIM
  little-endian IEEE-754 f32 values, record by record.

scores
  One line per trial: `enroll_id<TAB>test_id<TAB>label<TAB>score`, score a
  cosine similarity printed as the shortest round-trip f64 decimal.

det.csv
  Header `threshold,far,frr`, then one row per threshold in increasing order.
  A trial is accepted when its score is >= threshold. far and frr are fractions.

config
  `key = value` lines; blank lines and `#` comments are skipped; unknown keys
  are rejected. List values are comma separated; `xvector.contexts` separates
  layers with `;` (e.g. `-2,-1,0,1,2;-2,0,2;-3,0,3;0;0`). Precedence, lowest
  first: --preset, --config file, --set overrides, dedicated flags such as
  --arch and --epochs. The resolved config is written to `config.txt` in the
  output directory.

history.csv
  Header `epoch,train_loss,frame_error,eer`, then one row per epoch; eer is
  empty on epochs without evaluation.

checkpoint
  Text header lines: `SINCXV-CHECKPOINT 1`, `arch NAME`, `epoch E`,
  `speakers S` followed by S speaker ids, `rng SEEDHEX STREAM WORDPOS`,
  `adam LR BETA1 BETA2 EPSILON STEP`, `config C` followed by C config lines,
  `history H` followed by H history.csv lines, `xvector_classes N` (or `-`),
  `port_table B` followed by B bytes of a binary embedding file. Then
  `params P` and P tensor records, `moments M` and 2*M tensor records (first
  moments m0.., then second moments v0..), and a final `end` line. A tensor
  record is a line `name rows cols` followed by rows*cols little-endian f32.

filter response CSV
  Header `bin,freq_hz,filter_0,...,filter_{K-1}`, then one row per DFT bin
  0..=n_fft/2 holding the magnitude response of every filter.

EXIT CODES
  0 success, 1 usage error, 2 data or validation error, 3 numerical failure
  (non-finite training loss).";

/// Speaker recognition with learnable sinc filters, x-vectors and their fusion.
#[derive(Parser, Debug)]
#[command(name = "sincxv", version, after_long_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-speaker corpus and its manifest.tsv.
    Synth(SynthArgs),
    /// Train one architecture; writes checkpoint.ckpt, history.csv, config.txt and the held-out trials.tsv.
    Train(TrainArgs),
    /// Extract one embedding per manifest utterance.
    Embed(EmbedArgs),
    /// Validate an externally produced embedding file and store it.
    ImportEmbeddings(ImportArgs),
    /// Cosine-score a trial list.
    Score(ScoreArgs),
    /// Report the equal error rate of a score file and write its DET curve.
    Eer(EerArgs),
    /// Print the learned band edges and write the filters' magnitude responses.
    InspectFilters(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    speakers: u64,
    /// Utterances per speaker.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    utts: u64,
    /// Utterance duration in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    /// Full-size model dimensions.
    Full,
    /// Reduced dimensions for desk-scale corpora.
    Small,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EmbeddingFormat {
    Text,
    Binary,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dev manifest; its last `eval.holdout` utterances per speaker form the test set unless --test-manifest is given.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// sincnet, xvector or fusion.
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fusion only: trained x-vector checkpoint feeding the embedding port.
    #[arg(long, conflicts_with = "port_embeddings")]
    xvector: Option<PathBuf>,
    /// Fusion only: precomputed embeddings (text, or binary with .bin) feeding the embedding port.
    #[arg(long)]
    port_embeddings: Option<PathBuf>,
    /// Fusion only: copy the sinc branch from a sincnet or fusion checkpoint before training.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Continue from checkpoint.ckpt in the output directory; --epochs may raise the target.
    #[arg(long, conflicts_with_all = ["arch", "config", "overrides", "warm_start", "xvector", "port_embeddings"])]
    resume: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output file; binary when it ends in .bin unless --format says otherwise.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<EmbeddingFormat>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Input format; inferred from a .bin extension when omitted.
    #[arg(long, value_enum)]
    format: Option<EmbeddingFormat>,
    /// Validated store; binary when it ends in .bin.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EerArgs {
    #[arg(long)]
    scores: PathBuf,
    /// DET curve output; defaults to the score file with extension det.csv.
    #[arg(long)]
    det: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    response: PathBuf,
    /// DFT size for the responses; a power of two no shorter than the kernel.
    #[arg(long, default_value_t = 1024)]
    n_fft: usize,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse::<Architecture>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::ImportEmbeddings(a) => commands::import_embeddings(a),
        Command::Score(a) => commands::score(a),
        Command::Eer(a) => commands::eer(a),
        Command::InspectFilters(a) => commands::inspect_filters(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                sincxv::Error::NonFinite { .. } => 3,
                _ => 2,
            })
        }
    }
}
