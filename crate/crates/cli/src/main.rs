//! One binary exposing the whole pipeline as subcommands: SMF ingestion,
//! bar-similarity statistics, structure-bar selection, attention-layout
//! inspection, training, sampling, and the two objective metrics.
//!
//! Exit codes: 0 success, 1 user error (bad flags or inputs), 2 internal
//! error. All outputs are deterministic for fixed inputs, flags, and seeds;
//! plots are emitted as CSV for external rendering.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use museformer::layout::{
    blocksparsify, combined_layout, export, layout_stats, Arrangement, BoolLayout, LayoutCache,
    LayoutSpec, Layouts,
};
use museformer::midi::{
    self, ingest_bytes, parse_beats, FilterRules, ManifestRecord, RejectReason, Role, RoleMapping,
    TrackSet,
};
use museformer::model::sample::{generate, GenerationConfig};
use museformer::model::{self, checkpoint, ModelConfig, ModelError, ModelParams};
use museformer::similarity::{
    self, select_structure_bars, similarity_distribution, similarity_error,
    similarity_error_common, BarSelection, DistOptions,
};
use museformer::synth::SynthSpec;
use museformer::tokenize::{self, io as corpus_io, Token, TokenSeq};
use museformer::train::{self, StopReason, TrainConfig};

#[derive(Parser)]
#[command(name = "museformer", version, about = "Bar-structured symbolic music modeling")]
struct Cli {
    /// Worker threads for parallel per-file work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a directory of .mid files, filter, tokenize, and write a corpus.
    Ingest(IngestArgs),
    /// Bar-similarity distribution L_t of a corpus, as CSV.
    Stats(StatsArgs),
    /// Pick structure-related bar offsets from a distribution CSV.
    SelectBars(SelectBarsArgs),
    /// Build and export the attention layouts of one song.
    Layout(LayoutArgs),
    /// Train a model on a token corpus.
    Train(TrainArgs),
    /// Sample continuations from a checkpoint.
    Generate(GenerateArgs),
    /// Perplexity of a corpus under a checkpoint, pooled per prefix length.
    EvalPpl(EvalPplArgs),
    /// Similarity Error between a generated and a reference corpus.
    EvalSe(EvalSeArgs),
    /// Allowed-pair counts and wall time vs sequence length.
    BenchScaling(BenchScalingArgs),
}

enum Failure {
    User(String),
    Internal(String),
}

type CliResult<T = ()> = Result<T, Failure>;

fn user(e: impl Display) -> Failure {
    Failure::User(e.to_string())
}

fn internal(e: impl Display) -> Failure {
    Failure::Internal(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Stats(a) => cmd_stats(a),
        Command::SelectBars(a) => cmd_select_bars(a),
        Command::Layout(a) => cmd_layout(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::EvalPpl(a) => cmd_eval_ppl(a),
        Command::EvalSe(a) => cmd_eval_se(a),
        Command::BenchScaling(a) => cmd_bench_scaling(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------- helpers

fn parse_role(s: &str) -> Result<Role, String> {
    match s.to_ascii_lowercase().as_str() {
        "melody" => Ok(Role::Melody),
        "piano" => Ok(Role::Piano),
        "guitar" => Ok(Role::Guitar),
        "string" => Ok(Role::String),
        "bass" => Ok(Role::Bass),
        "drum" => Ok(Role::Drum),
        other => Err(format!(
            "unknown track {other:?} (expected melody, piano, guitar, string, bass, or drum)"
        )),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| user(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| user(format!("cannot read {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path)
        .map_err(|e| user(format!("cannot create {}: {e}", path.display())))
}

/// Read a token corpus, rejecting one tokenized under a different vocabulary.
fn read_corpus_checked(path: &Path) -> CliResult<Vec<TokenSeq>> {
    let songs = corpus_io::read_corpus(path)
        .map_err(|e| user(format!("corpus {}: {e}", path.display())))?;
    let meta_path = corpus_io::meta_path(path);
    if meta_path.exists() {
        let meta = corpus_io::read_meta(path)
            .map_err(|e| user(format!("corpus metadata {}: {e}", meta_path.display())))?;
        let ours = tokenize::vocab::vocab_sha256();
        if meta.vocab_sha256 != ours {
            return Err(user(format!(
                "corpus {} was tokenized with vocabulary {} but this binary uses {}",
                path.display(),
                meta.vocab_sha256,
                ours
            )));
        }
    }
    Ok(songs)
}

fn decode_corpus(songs: &[TokenSeq], path: &Path) -> CliResult<Vec<TrackSet>> {
    songs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            tokenize::decode(seq)
                .map_err(|e| user(format!("corpus {} song {i}: {e}", path.display())))
        })
        .collect()
}

/// Truncate songs that exceed the model's bar capacity, warning once.
fn fit_corpus(songs: Vec<TokenSeq>, max_bars: usize) -> Vec<TokenSeq> {
    let over = songs.iter().filter(|s| s.bar_count() > max_bars).count();
    if over > 0 {
        eprintln!("warning: truncating {over} song(s) to {max_bars} bars");
    }
    songs.into_iter().map(|s| s.truncate_bars(max_bars)).collect()
}

fn load_checkpoint(path: &Path) -> CliResult<ModelParams> {
    checkpoint::load(path).map_err(|e| user(format!("checkpoint {}: {e}", path.display())))
}

fn parse_usize_list(s: &str, what: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| user(format!("bad {what} entry {tok:?}")))
        })
        .collect()
}

// ----------------------------------------------------------------- ingest

#[derive(Args)]
struct IngestArgs {
    /// Directory scanned recursively for .mid/.midi files.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for corpus.tokens, sidecars, and manifest.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Filter rules as JSON (defaults when omitted).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Program→role mapping overrides as JSON.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Quantization grid in beats.
    #[arg(long, default_value = "1/4")]
    grid: String,
}

fn collect_midi_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult {
    let entries =
        fs::read_dir(dir).map_err(|e| user(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| user(format!("cannot read {}: {e}", dir.display())))?;
        let path = entry.path();
        if path.is_dir() {
            collect_midi_files(&path, out)?;
        } else {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext.eq_ignore_ascii_case("mid") || ext.eq_ignore_ascii_case("midi") {
                out.push(path);
            }
        }
    }
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> CliResult {
    let rules: FilterRules = match &args.rules {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| user(format!("rules {}: {e}", path.display())))?,
        None => FilterRules::default(),
    };
    rules.validate().map_err(user)?;
    let mapping = match &args.mapping {
        Some(path) => RoleMapping::from_json_str(&read_text(path)?).map_err(user)?,
        None => RoleMapping::default(),
    };
    let grid = parse_beats(&args.grid).map_err(user)?;

    let mut files = Vec::new();
    collect_midi_files(&args.input, &mut files)?;
    files.sort();

    // Per-file work in parallel; everything order-dependent (duplicate
    // detection, corpus assembly) happens in a sequential pass over the
    // path-sorted results.
    struct FileResult {
        record: ManifestRecord,
        track_set: Option<TrackSet>,
        unclosed: usize,
    }
    let results: Vec<FileResult> = files
        .par_iter()
        .map(|path| {
            let rel = path.display().to_string();
            let io_reject = |record_path: String| FileResult {
                record: ManifestRecord {
                    path: record_path,
                    bars: 0,
                    notes: 0,
                    fingerprint: String::new(),
                    reject: Some(RejectReason::Io),
                },
                track_set: None,
                unclosed: 0,
            };
            let bytes = match fs::read(path) {
                Ok(b) => b,
                Err(_) => return io_reject(rel),
            };
            match ingest_bytes(&bytes, &mapping, grid, &rules) {
                Ok(res) => FileResult {
                    record: ManifestRecord {
                        path: rel,
                        bars: res.track_set.bars.len(),
                        notes: res.track_set.note_count(),
                        fingerprint: midi::fingerprint(&res.track_set),
                        reject: res.reject,
                    },
                    track_set: res.reject.is_none().then_some(res.track_set),
                    unclosed: res.unclosed_note_ons,
                },
                Err(_) => io_reject(rel),
            }
        })
        .collect();

    create_dir(&args.out_dir)?;
    let mut songs = Vec::new();
    let mut manifest = String::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut unclosed = 0usize;
    for mut res in results {
        unclosed += res.unclosed;
        if res.record.reject.is_none() && !seen.insert(res.record.fingerprint.clone()) {
            res.record.reject = Some(RejectReason::Duplicate);
            res.track_set = None;
        }
        if let Some(ts) = res.track_set {
            match tokenize::encode(&ts) {
                Ok(seq) => songs.push(seq),
                Err(e) => {
                    eprintln!("warning: {}: {e}", res.record.path);
                    res.record.reject = Some(RejectReason::Encode);
                }
            }
        }
        manifest.push_str(&res.record.to_line());
        manifest.push('\n');
    }
    if unclosed > 0 {
        eprintln!("warning: {unclosed} unclosed note-on event(s) dropped");
    }

    write_text(&args.out_dir.join("manifest.jsonl"), &manifest)?;
    let tokens_path = args.out_dir.join("corpus.tokens");
    corpus_io::write_corpus(&tokens_path, &songs)
        .map_err(|e| user(format!("cannot write {}: {e}", tokens_path.display())))?;
    println!(
        "ingested {} file(s): {} accepted, {} rejected -> {}",
        files.len(),
        songs.len(),
        files.len() - songs.len(),
        tokens_path.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ stats

#[derive(Args)]
struct StatsArgs {
    /// Token corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Output CSV (t, L_t, count).
    #[arg(long)]
    out: PathBuf,
    /// Track whose bars are compared.
    #[arg(long, default_value = "melody", value_parser = parse_role)]
    track: Role,
    /// Largest bar interval t.
    #[arg(long, default_value_t = 40)]
    horizon: usize,
    /// Average per song first, then across songs (default pools all pairs).
    #[arg(long)]
    per_song_mean: bool,
    /// Count two empty bars as similarity 1 (default excludes those pairs).
    #[arg(long)]
    count_both_empty: bool,
}

fn dist_options(track: Role, horizon: usize, per_song: bool, both_empty: bool) -> DistOptions {
    DistOptions {
        horizon,
        scope: track,
        both_empty: if both_empty {
            similarity::BothEmpty::CountAsOne
        } else {
            similarity::BothEmpty::Exclude
        },
        weighting: if per_song {
            similarity::Weighting::PerSongMean
        } else {
            similarity::Weighting::PooledPairs
        },
    }
}

fn cmd_stats(args: StatsArgs) -> CliResult {
    let songs = read_corpus_checked(&args.corpus)?;
    let corpus = decode_corpus(&songs, &args.corpus)?;
    let opts = dist_options(args.track, args.horizon, args.per_song_mean, args.count_both_empty);
    let dist = similarity_distribution(&corpus, &opts).map_err(user)?;
    if dist.defined_intervals().is_empty() {
        return Err(user(format!(
            "no bar pair at any interval 1..={}; are all songs shorter than 2 bars?",
            args.horizon
        )));
    }
    let mut csv = Vec::new();
    similarity::write_distribution_csv(&mut csv, &dist).map_err(internal)?;
    write_text(&args.out, &String::from_utf8(csv).map_err(internal)?)?;
    println!(
        "wrote {} ({} of {} intervals defined)",
        args.out.display(),
        dist.defined_intervals().len(),
        args.horizon
    );
    Ok(())
}

// ------------------------------------------------------------ select-bars

#[derive(Args)]
struct SelectBarsArgs {
    /// Distribution CSV from `stats`.
    #[arg(long, required_unless_present = "use_default")]
    dist: Option<PathBuf>,
    /// Number of offsets to select.
    #[arg(long, required_unless_present = "use_default")]
    k: Option<usize>,
    /// Largest candidate offset (defaults to the distribution horizon).
    #[arg(long)]
    max_offset: Option<usize>,
    /// Ignore the distribution and take the reference selection
    /// {1,2,4,8,12,16,24,32}.
    #[arg(long, conflicts_with_all = ["dist", "k", "max_offset"])]
    use_default: bool,
    /// Also write the offsets to a file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_select_bars(args: SelectBarsArgs) -> CliResult {
    let selection = if args.use_default {
        BarSelection::reference_default()
    } else {
        let path = args.dist.expect("clap requires --dist");
        let text = read_text(&path)?;
        let dist = similarity::read_distribution_csv(text.as_bytes(), Role::Melody)
            .map_err(|e| user(format!("distribution {}: {e}", path.display())))?;
        let k = args.k.expect("clap requires --k");
        let max_offset = args.max_offset.unwrap_or(dist.horizon());
        select_structure_bars(&dist, k, max_offset).map_err(user)?
    };
    let line = selection
        .offsets()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    println!("{line}");
    if let Some(out) = &args.out {
        write_text(out, &format!("{line}\n"))?;
    }
    Ok(())
}

// ----------------------------------------------------------------- layout

#[derive(Args)]
struct LayoutArgs {
    /// Token corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Song index within the corpus.
    #[arg(long, default_value_t = 0)]
    song: usize,
    /// Output directory for PBM masks, block lists, and stats.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Structure-related bar offsets.
    #[arg(long, default_value = "1,2,4,8,12,16,24,32")]
    selection: String,
    /// Block side length for block-sparsification.
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    /// Let music tokens also attend the summaries of selected bars.
    #[arg(long)]
    include_selected_summaries: bool,
    /// Drop all summary attention sources (fine-grained only).
    #[arg(long)]
    no_coarse: bool,
    /// Place each summary right after its bar instead of summaries-first.
    #[arg(long)]
    interleaved: bool,
    /// Print the combined mask to stdout as '#'/'.' art.
    #[arg(long)]
    dump: bool,
}

fn pbm_to_file(path: &Path, layout: &BoolLayout) -> CliResult {
    let mut bytes = Vec::new();
    export::write_pbm(&mut bytes, layout).map_err(internal)?;
    fs::write(path, bytes).map_err(|e| user(format!("cannot write {}: {e}", path.display())))
}

fn stats_row(name: &str, layout: &BoolLayout, block_size: usize) -> String {
    let stats = layout_stats(layout);
    let blocks = blocksparsify(layout, block_size);
    let cells = (layout.rows() * layout.cols()).max(1);
    format!(
        "{name},{},{},{},{},{},{block_size},{},{}\n",
        layout.rows(),
        layout.cols(),
        stats.allowed_pairs,
        stats.per_query_max,
        stats.allowed_pairs as f64 / cells as f64,
        blocks.kept_blocks.len(),
        blocks.density(),
    )
}

fn cmd_layout(args: LayoutArgs) -> CliResult {
    if args.block_size == 0 {
        return Err(user("--block-size must be at least 1"));
    }
    let songs = read_corpus_checked(&args.corpus)?;
    let seq = songs.get(args.song).ok_or_else(|| {
        user(format!("song index {} out of range ({} songs)", args.song, songs.len()))
    })?;
    let selection = BarSelection::parse(&args.selection).map_err(user)?;
    let mut spec = LayoutSpec::from_token_seq(seq, selection);
    if args.interleaved {
        spec = spec.with_arrangement(Arrangement::Interleaved);
    }
    spec.include_selected_summaries = args.include_selected_summaries;
    spec.coarse_enabled = !args.no_coarse;

    let layouts = Layouts::build(&spec);
    let combined = combined_layout(&spec);
    create_dir(&args.out_dir)?;
    pbm_to_file(&args.out_dir.join("summary.pbm"), &layouts.summary)?;
    pbm_to_file(&args.out_dir.join("aggregation.pbm"), &layouts.aggregation)?;
    pbm_to_file(&args.out_dir.join("combined.pbm"), &combined)?;

    for (name, layout) in [("aggregation", &layouts.aggregation), ("combined", &combined)] {
        let mut bytes = Vec::new();
        export::write_block_list(&mut bytes, &blocksparsify(layout, args.block_size))
            .map_err(internal)?;
        let path = args.out_dir.join(format!("{name}.blocks"));
        fs::write(&path, bytes)
            .map_err(|e| user(format!("cannot write {}: {e}", path.display())))?;
    }

    let mut csv = String::from(
        "matrix,rows,cols,allowed_pairs,per_query_max,density,block_size,kept_blocks,block_density\n",
    );
    csv.push_str(&stats_row("summary", &layouts.summary, args.block_size));
    csv.push_str(&stats_row("aggregation", &layouts.aggregation, args.block_size));
    csv.push_str(&stats_row("combined", &combined, args.block_size));
    write_text(&args.out_dir.join("stats.csv"), &csv)?;

    if args.dump {
        let mut art = String::with_capacity((combined.cols() + 1) * combined.rows());
        for r in 0..combined.rows() {
            for c in 0..combined.cols() {
                art.push(if combined.get(r, c) { '#' } else { '.' });
            }
            art.push('\n');
        }
        print!("{art}");
    }
    println!(
        "wrote layouts for song {} ({} tokens, {} bars) to {}",
        args.song,
        combined.rows(),
        seq.bar_count(),
        args.out_dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ train

/// On-disk config: two optional sections, each filled from defaults.
#[derive(Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// Training token corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for model.mfck, train_log.csv, and config.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Held-out corpus for validation (overrides --valid-frac).
    #[arg(long)]
    valid_corpus: Option<PathBuf>,
    /// Fraction of songs held out for validation: every round(1/frac)-th
    /// song by corpus order. 0 disables validation.
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    /// JSON config file with optional "model" and "train" sections;
    /// flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_songs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    valid_every: Option<usize>,
    /// Validations without improvement before stopping (0 disables).
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Add L2 to the loss instead of decoupled weight decay.
    #[arg(long)]
    l2_in_loss: bool,

    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    max_bars: Option<usize>,
    /// Structure-related bar offsets, e.g. "1,2,4,8".
    #[arg(long)]
    selection: Option<String>,
    /// Drop coarse-grained (summary) attention sources.
    #[arg(long)]
    no_coarse: bool,
    /// Let music tokens also attend the summaries of selected bars.
    #[arg(long)]
    include_selected_summaries: bool,
    /// Residual placement: LayerNorm after each sublayer.
    #[arg(long)]
    post_norm: bool,
    /// Skip the feed-forward sublayer on summary rows.
    #[arg(long)]
    no_ffn_on_summaries: bool,
}

fn resolve_train_config(args: &TrainArgs) -> CliResult<(ModelConfig, TrainConfig)> {
    let mut file = match &args.config {
        Some(path) => serde_json::from_str::<FileConfig>(&read_text(path)?)
            .map_err(|e| user(format!("config {}: {e}", path.display())))?,
        None => FileConfig::default(),
    };
    let m = &mut file.model;
    let t = &mut file.train;
    macro_rules! set {
        ($target:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $target = v;
            }
        };
    }
    set!(t.max_steps, args.max_steps);
    set!(t.peak_lr, args.peak_lr);
    set!(t.warmup_steps, args.warmup);
    set!(t.batch_songs, args.batch_songs);
    set!(t.seed, args.seed);
    set!(t.valid_every, args.valid_every);
    set!(t.patience, args.patience);
    set!(t.weight_decay, args.weight_decay);
    if args.l2_in_loss {
        t.l2_in_loss = true;
    }
    set!(m.n_layers, args.layers);
    set!(m.d_model, args.d_model);
    set!(m.n_heads, args.heads);
    set!(m.ffn_hidden, args.ffn);
    set!(m.max_bars, args.max_bars);
    if let Some(sel) = &args.selection {
        m.selection = BarSelection::parse(sel).map_err(user)?.offsets().to_vec();
    }
    if args.no_coarse {
        m.coarse_enabled = false;
    }
    if args.include_selected_summaries {
        m.include_selected_summaries = true;
    }
    if args.post_norm {
        m.pre_norm = false;
    }
    if args.no_ffn_on_summaries {
        m.ffn_on_summaries = false;
    }
    m.validate().map_err(|e| user(format!("model config: {e}")))?;
    t.validate().map_err(|e| user(format!("train config: {e}")))?;
    Ok((file.model, file.train))
}

fn stop_reason_line(stop: &StopReason) -> String {
    match stop {
        StopReason::MaxSteps => "stopped at max steps".into(),
        StopReason::EarlyStopped { at_step } => {
            format!("early-stopped at step {at_step} (validation stalled)")
        }
        StopReason::Diverged { step, nll, initial } => format!(
            "diverged at step {step}: loss {nll:.3} exceeds 10x the initial {initial:.3}"
        ),
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let (mcfg, tcfg) = resolve_train_config(&args)?;
    let songs = read_corpus_checked(&args.corpus)?;

    let (train_songs, valid_songs) = match &args.valid_corpus {
        Some(path) => (songs, read_corpus_checked(path)?),
        None if args.valid_frac > 0.0 => {
            if args.valid_frac >= 1.0 {
                return Err(user("--valid-frac must be below 1"));
            }
            let stride = (1.0 / args.valid_frac).round().max(2.0) as usize;
            let mut tr = Vec::new();
            let mut va = Vec::new();
            for (i, s) in songs.into_iter().enumerate() {
                if i % stride == stride - 1 {
                    va.push(s);
                } else {
                    tr.push(s);
                }
            }
            (tr, va)
        }
        None => (songs, Vec::new()),
    };
    if valid_songs.is_empty() {
        eprintln!("warning: no validation songs; keeping the final parameters");
    }

    create_dir(&args.out_dir)?;
    let result = train::train(&train_songs, &valid_songs, mcfg.clone(), &tcfg).map_err(|e| {
        match e {
            train::TrainError::EmptyCorpus => user("training corpus has no songs"),
            other => internal(other),
        }
    })?;

    write_text(&args.out_dir.join("train_log.csv"), &result.log.to_csv())?;
    let resolved = FileConfig { model: mcfg, train: tcfg };
    write_text(
        &args.out_dir.join("config.json"),
        &format!("{}\n", serde_json::to_string_pretty(&resolved).map_err(internal)?),
    )?;
    let model_path = args.out_dir.join("model.mfck");
    checkpoint::save(&result.best, &model_path)
        .map_err(|e| user(format!("cannot write {}: {e}", model_path.display())))?;

    println!(
        "trained {} step(s) in {:.1}s; {}",
        result.log.steps.len(),
        result.log.wall_secs,
        stop_reason_line(&result.stop)
    );
    if result.best_valid_nll.is_finite() {
        println!(
            "best validation: nll {} (ppl {})",
            result.best_valid_nll,
            result.best_valid_nll.exp()
        );
    }
    println!("wrote {}", model_path.display());
    if let StopReason::Diverged { .. } = result.stop {
        return Err(internal("training diverged; artifacts were still written"));
    }
    Ok(())
}

// --------------------------------------------------------------- generate

#[derive(Args)]
struct GenerateArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output token corpus file.
    #[arg(long)]
    out: PathBuf,
    /// Prompt corpus; omitted means generation from scratch.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Song index within the prompt corpus.
    #[arg(long, default_value_t = 0)]
    prompt_index: usize,
    /// Keep only the first N bars of the prompt.
    #[arg(long)]
    prompt_bars: Option<usize>,
    /// Number of songs to sample.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    top_k: usize,
    /// Token budget per song, prompt included.
    #[arg(long, default_value_t = 2048)]
    max_len: usize,
    /// EOS is masked while a song is shorter than this.
    #[arg(long, default_value_t = 0)]
    min_len: usize,
    /// Base seed; song i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write one .mid per song into this directory.
    #[arg(long)]
    midi_dir: Option<PathBuf>,
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    if args.n == 0 {
        return Err(user("--n must be at least 1"));
    }
    let params = load_checkpoint(&args.checkpoint)?;
    let prompt = match &args.prompt {
        Some(path) => {
            let songs = read_corpus_checked(path)?;
            let seq = songs.get(args.prompt_index).ok_or_else(|| {
                user(format!(
                    "prompt index {} out of range ({} songs)",
                    args.prompt_index,
                    songs.len()
                ))
            })?;
            match args.prompt_bars {
                Some(bars) => seq.truncate_bars(bars),
                None => seq.clone(),
            }
        }
        None => TokenSeq::from_ids(&[Token::Bos.id(), Token::Eos.id()]).expect("empty song"),
    };

    let outputs: Vec<(TokenSeq, TrackSet, bool)> = (0..args.n)
        .into_par_iter()
        .map(|i| -> CliResult<(TokenSeq, TrackSet, bool)> {
            let gcfg = GenerationConfig {
                top_k: args.top_k,
                max_len: args.max_len,
                min_len: args.min_len,
                seed: args.seed + i as u64,
            };
            let raw = generate(&prompt, &gcfg, &params).map_err(|e| match e {
                ModelError::Config(_) | ModelError::TooManyBars { .. } | ModelError::Empty => {
                    user(e)
                }
                other => internal(other),
            })?;
            // Re-encode through the decoder so the stored sequence is
            // canonical and always parses back; ill-formed tails are dropped.
            let lossy = tokenize::decode_lossy(&raw.ids());
            let seq = tokenize::encode(&lossy.track_set)
                .map_err(|e| internal(format!("re-encoding song {i}: {e}")))?;
            Ok((seq, lossy.track_set, lossy.error.is_some()))
        })
        .collect::<CliResult<_>>()?;

    let songs: Vec<TokenSeq> = outputs.iter().map(|(s, _, _)| s.clone()).collect();
    corpus_io::write_corpus(&args.out, &songs)
        .map_err(|e| user(format!("cannot write {}: {e}", args.out.display())))?;
    if let Some(dir) = &args.midi_dir {
        create_dir(dir)?;
        for (i, (_, ts, _)) in outputs.iter().enumerate() {
            let path = dir.join(format!("gen_{i:03}.mid"));
            fs::write(&path, midi::write_smf(ts))
                .map_err(|e| user(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    let repaired = outputs.iter().filter(|(_, _, r)| *r).count();
    println!(
        "generated {} song(s) -> {} ({repaired} repaired)",
        songs.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- eval-ppl

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Prefix lengths (tokens) pooled into one perplexity each.
    #[arg(long, default_value = "1024")]
    prefixes: String,
    /// Output CSV (prefix, ppl); the last row pools every position.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_eval_ppl(args: EvalPplArgs) -> CliResult {
    let params = load_checkpoint(&args.checkpoint)?;
    let songs = read_corpus_checked(&args.corpus)?;
    if songs.is_empty() {
        return Err(user(format!("corpus {} has no songs", args.corpus.display())));
    }
    let songs = fit_corpus(songs, params.config.max_bars);
    let mut prefixes = parse_usize_list(&args.prefixes, "prefix")?;
    prefixes.sort_unstable();
    prefixes.dedup();
    if prefixes.iter().any(|&p| p == 0) {
        return Err(user("prefix lengths must be positive"));
    }

    let cache = LayoutCache::new();
    let per_prefix =
        model::perplexity_at_prefix(&songs, &prefixes, &params, &cache).map_err(internal)?;
    let overall = train::corpus_nll(&songs, &params, &cache).map_err(internal)?.exp();

    let mut csv = String::from("prefix,ppl\n");
    for (p, ppl) in prefixes.iter().zip(&per_prefix) {
        csv.push_str(&format!("{p},{ppl}\n"));
    }
    csv.push_str(&format!("all,{overall}\n"));
    write_text(&args.out, &csv)?;
    println!("ppl {overall} over {} song(s) -> {}", songs.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval-se

#[derive(Args)]
struct EvalSeArgs {
    /// Generated token corpus.
    #[arg(long)]
    generated: PathBuf,
    /// Reference token corpus.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 40)]
    horizon: usize,
    #[arg(long, default_value = "melody", value_parser = parse_role)]
    track: Role,
    /// Require every interval to be defined in both corpora (default
    /// restricts to the common defined intervals).
    #[arg(long)]
    strict: bool,
    /// Also write per-interval values as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval_se(args: EvalSeArgs) -> CliResult {
    let opts = dist_options(args.track, args.horizon, false, false);
    let mut dists = Vec::new();
    for path in [&args.generated, &args.reference] {
        let songs = read_corpus_checked(path)?;
        let corpus = decode_corpus(&songs, path)?;
        dists.push(similarity_distribution(&corpus, &opts).map_err(user)?);
    }
    let (gen_dist, ref_dist) = (&dists[0], &dists[1]);
    let (se, n) = if args.strict {
        (similarity_error(gen_dist, ref_dist).map_err(user)?, args.horizon)
    } else {
        similarity_error_common(gen_dist, ref_dist).map_err(user)?
    };

    if let Some(out) = &args.out {
        let mut csv = String::from("t,l_generated,l_reference,abs_diff\n");
        for t in 1..=args.horizon {
            if let (Some(a), Some(b)) = (gen_dist.l(t), ref_dist.l(t)) {
                csv.push_str(&format!("{t},{a},{b},{}\n", (a - b).abs()));
            }
        }
        csv.push_str(&format!("se,,,{se}\n"));
        write_text(out, &csv)?;
    }
    eprintln!("similarity error over {n} interval(s)");
    println!("{se}");
    Ok(())
}

// ------------------------------------------------------------ bench-scaling

#[derive(Args)]
struct BenchScalingArgs {
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Song lengths in bars.
    #[arg(long, default_value = "32,64,128,256")]
    bars: String,
    /// Notes per bar (token width per interior bar is 2 + 3*notes).
    #[arg(long, default_value_t = 10)]
    notes_per_bar: usize,
    #[arg(long, default_value = "1,2,4,8")]
    selection: String,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Also measure wall time (timing columns are not byte-reproducible).
    #[arg(long)]
    time: bool,
    /// Largest bar count timed through the dense reference.
    #[arg(long, default_value_t = 128)]
    dense_up_to: usize,
    /// Timing repetitions; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

/// Full causal attention over n rows at the given width: the dense-compute
/// reference the sparse path is compared against.
fn dense_causal_attention_secs(n: usize, d_model: usize, n_heads: usize) -> f64 {
    let d_head = d_model / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let vec = |i: usize| -> Vec<f64> {
        (0..d_model).map(|j| ((i * d_model + j) as f64 * 0.618).sin()).collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(vec).collect();
    let k = q.clone();
    let v: Vec<Vec<f64>> = (0..n).map(|i| vec(i + n)).collect();
    let mut sink = 0.0;
    let started = std::time::Instant::now();
    let mut scores = vec![0.0f64; n];
    let mut out = vec![0.0f64; d_model];
    for i in 0..n {
        out.iter_mut().for_each(|o| *o = 0.0);
        for h in 0..n_heads {
            let lo = h * d_head;
            let hi = lo + d_head;
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s: f64 =
                    q[i][lo..hi].iter().zip(&k[j][lo..hi]).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for j in 0..=i {
                scores[j] = (scores[j] - max).exp();
                z += scores[j];
            }
            for j in 0..=i {
                let w = scores[j] / z;
                for (o, x) in out[lo..hi].iter_mut().zip(&v[j][lo..hi]) {
                    *o += w * x;
                }
            }
        }
        sink += out[0];
    }
    let secs = started.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    secs
}

fn cmd_bench_scaling(args: BenchScalingArgs) -> CliResult {
    if args.repeats == 0 {
        return Err(user("--repeats must be at least 1"));
    }
    let bars = parse_usize_list(&args.bars, "bars")?;
    if bars.is_empty() || bars.iter().any(|&b| b == 0) {
        return Err(user("--bars needs positive entries"));
    }
    let selection = BarSelection::parse(&args.selection).map_err(user)?;
    let mcfg = ModelConfig {
        d_model: args.d_model,
        n_heads: args.heads,
        ffn_hidden: 2 * args.d_model,
        max_bars: *bars.iter().max().expect("nonempty") + 1,
        selection: selection.offsets().to_vec(),
        ..ModelConfig::default()
    };
    mcfg.validate().map_err(user)?;
    let params = ModelParams::init(mcfg, 0).map_err(internal)?;
    let cache = LayoutCache::new();

    let mut csv = String::from(if args.time {
        "bars,tokens,music_tokens,allowed_pairs,pair_fraction,sparse_secs,dense_secs\n"
    } else {
        "bars,tokens,music_tokens,allowed_pairs,pair_fraction\n"
    });
    for &b in &bars {
        let spec = SynthSpec {
            songs: 1,
            bars: b,
            notes_per_bar: args.notes_per_bar,
            ..SynthSpec::default()
        };
        let seq = museformer::synth::periodic_token_corpus(&spec).remove(0);
        let lspec = LayoutSpec::from_token_seq(&seq, selection.clone());
        let layouts = Layouts::build(&lspec);
        let pairs = layouts.aggregation.count_ones() + layouts.summary.count_ones();
        let music = seq.len() - b; // summaries excluded
        let total = seq.len();
        let fraction = pairs as f64 / (total * total) as f64;
        if args.time {
            model::forward(&seq, &params, &cache).map_err(internal)?; // warm the layout cache
            let mut sparse = f64::INFINITY;
            for _ in 0..args.repeats {
                let started = std::time::Instant::now();
                model::forward(&seq, &params, &cache).map_err(internal)?;
                sparse = sparse.min(started.elapsed().as_secs_f64());
            }
            let dense = if b <= args.dense_up_to {
                let mut best = f64::INFINITY;
                for _ in 0..args.repeats {
                    best = best.min(dense_causal_attention_secs(total, args.d_model, args.heads));
                }
                format!("{best}")
            } else {
                String::new()
            };
            csv.push_str(&format!("{b},{total},{music},{pairs},{fraction},{sparse},{dense}\n"));
        } else {
            csv.push_str(&format!("{b},{total},{music},{pairs},{fraction}\n"));
        }
    }
    write_text(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
