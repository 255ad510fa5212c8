use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use miasrec::error::Error;
use miasrec::evaluation::{aggregate_seeds, evaluate, validation_mrr_r20};
use miasrec::model::{load_checkpoint, save_checkpoint, IntentMode};
use miasrec::runconfig::RunConfig;
use miasrec::sessions::{
    chronological_split, expand_prefixes, load_events, preprocess, SessionCorpus,
};
use miasrec::training::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "miasrec", about = "Multi-intent session-based recommender")]
struct Cli {
    /// declarative run configuration (TOML); flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    raw_log: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_path: Option<PathBuf>,
    /// train/evaluate with these seeds (repeatable)
    #[arg(long, global = true)]
    seed: Vec<u64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    epoch_cap: Option<usize>,
    /// drop the position embedding term (ablation)
    #[arg(long, global = true)]
    no_position_embedding: bool,
    /// drop the frequency embedding term (ablation)
    #[arg(long, global = true)]
    no_frequency_embedding: bool,
    /// entmax | mean | last:k
    #[arg(long, global = true)]
    intent_mode: Option<String>,
    /// ranking cutoffs, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    cutoffs: Vec<usize>,
    /// length buckets, comma separated (N, N-M, >=N)
    #[arg(long, global = true, value_delimiter = ',')]
    buckets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the raw log, split 8:1:1, and write corpus files
    Preprocess,
    /// Train one model per seed with early stopping on validation MRR@20
    Train {
        /// continue from the last checkpoint of each seed
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate each seed's best checkpoint on the test corpus
    Evaluate,
    /// Grid search (tau, dropout) with a beta sweep over each trained model
    Sweep,
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<(), Error> {
    if let Some(p) = &o.raw_log {
        cfg.raw_log = Some(p.clone());
    }
    if let Some(p) = &o.corpus_dir {
        cfg.corpus_dir = p.clone();
    }
    if let Some(p) = &o.checkpoint_dir {
        cfg.checkpoint_dir = p.clone();
    }
    if let Some(p) = &o.report_path {
        cfg.report_path = p.clone();
    }
    if !o.seed.is_empty() {
        cfg.seeds = o.seed.clone();
    }
    if let Some(v) = o.beta {
        cfg.beta = v;
    }
    if let Some(v) = o.tau {
        cfg.tau = v;
    }
    if let Some(v) = o.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = o.epoch_cap {
        cfg.epoch_cap = v;
    }
    if o.no_position_embedding {
        cfg.use_position_embedding = false;
    }
    if o.no_frequency_embedding {
        cfg.use_frequency_embedding = false;
    }
    if let Some(mode) = &o.intent_mode {
        cfg.intent_mode = mode.parse::<IntentMode>()?;
    }
    if !o.cutoffs.is_empty() {
        cfg.cutoffs = o.cutoffs.clone();
    }
    if !o.buckets.is_empty() {
        cfg.buckets = o.buckets.clone();
    }
    Ok(())
}

fn corpus_paths(cfg: &RunConfig) -> (PathBuf, PathBuf, PathBuf) {
    (
        cfg.corpus_dir.join("train.json"),
        cfg.corpus_dir.join("val.json"),
        cfg.corpus_dir.join("test.json"),
    )
}

fn checkpoint_paths(cfg: &RunConfig, seed: u64) -> (PathBuf, PathBuf, PathBuf) {
    (
        cfg.checkpoint_dir.join(format!("best_seed{seed}.json")),
        cfg.checkpoint_dir.join(format!("last_seed{seed}.json")),
        cfg.checkpoint_dir.join(format!("history_seed{seed}.jsonl")),
    )
}

fn fingerprint(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<(), Error> {
    let raw = cfg
        .raw_log
        .as_ref()
        .ok_or_else(|| Error::Config("preprocess requires raw_log".into()))?;
    let log = load_events(raw, &cfg.log_format()?)?;
    let mut corpus = preprocess(&log, cfg.min_item_support, cfg.min_session_len)?;
    corpus.config_echo = Some(serde_json::to_value(cfg).expect("config serializes"));
    let (train_c, val_c, test_c) = chronological_split(&corpus)?;

    std::fs::create_dir_all(&cfg.corpus_dir).map_err(|source| Error::Io {
        path: cfg.corpus_dir.clone(),
        source,
    })?;
    let (train_p, val_p, test_p) = corpus_paths(cfg);
    train_c.save(&train_p)?;
    val_c.save(&val_p)?;
    test_c.save(&test_p)?;

    println!(
        "# Interacts: {}  # Sessions: {}  # Items: {}  AvgLen: {:.2}",
        corpus.interaction_count(),
        corpus.sessions.len(),
        corpus.item_count(),
        corpus.average_length()
    );
    println!(
        "split sizes (sessions): train {}  val {}  test {}",
        train_c.sessions.len(),
        val_c.sessions.len(),
        test_c.sessions.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(), Error> {
    let (train_p, val_p, _) = corpus_paths(cfg);
    let train_c = SessionCorpus::load(&train_p)?;
    let val_c = SessionCorpus::load(&val_p)?;
    let model_config = cfg.model_config();
    model_config.validate()?;

    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(|source| Error::Io {
        path: cfg.checkpoint_dir.clone(),
        source,
    })?;
    for &seed in &cfg.seeds {
        let (best, last, history) = checkpoint_paths(cfg, seed);
        if !resume && history.exists() {
            std::fs::remove_file(&history).ok();
        }
        let options = TrainOptions {
            best_checkpoint: Some(best.clone()),
            last_checkpoint: Some(last),
            history_path: Some(history),
            resume,
            ..cfg.train_options()
        };
        let outcome = train(&train_c, &val_c, &model_config, seed, &options)?;
        // make sure the best checkpoint exists even if validation never improved
        if !best.exists() {
            save_checkpoint(&best, &model_config, &outcome.best_params, None)?;
        }
        println!(
            "seed {seed}: {} epochs, best epoch {} (val MRR@20 {:.4})",
            outcome.history.len() + outcome.history.first().map_or(0, |h| h.epoch - 1),
            outcome.best_epoch,
            outcome.best_val_mrr
        );
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), Error> {
    let (_, _, test_p) = corpus_paths(cfg);
    let test_c = SessionCorpus::load(&test_p)?;
    let buckets = cfg.length_buckets()?;
    let echo = serde_json::to_value(cfg).expect("config serializes");
    let corpus_fp = fingerprint(&test_p)?;

    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let (best, _, _) = checkpoint_paths(cfg, seed);
        let (ckpt_config, params, _) = load_checkpoint(&best)?;
        if params.item_count() != test_c.item_count() {
            return Err(Error::VocabularyMismatch {
                checkpoint_items: params.item_count(),
                corpus_items: test_c.item_count(),
            });
        }
        let mut eval_config = ckpt_config.clone();
        eval_config.beta = cfg.beta;
        eval_config.dropout = 0.0;
        let mut report = evaluate(&params, &eval_config, &test_c, &cfg.cutoffs, &buckets)?;
        report.seeds = vec![seed];
        report.config_echo = Some(echo.clone());
        report.corpus_fingerprint = Some(corpus_fp.clone());
        let seed_path = cfg
            .report_path
            .with_extension(format!("seed{seed}.json"));
        write_json(&seed_path, &report)?;
        let r20 = report.overall.iter().find(|m| m.k == 20);
        if let Some(m) = r20 {
            println!("seed {seed}: R@20 {:.4}  M@20 {:.4}", m.recall, m.mrr);
        }
        per_seed.push((seed, report));
    }
    let mut aggregated = aggregate_seeds(&per_seed)?;
    aggregated.config_echo = Some(echo);
    aggregated.corpus_fingerprint = Some(corpus_fp);
    write_json(&cfg.report_path, &aggregated)?;
    println!("wrote {}", cfg.report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    tau: f64,
    dropout: f64,
    val_mrr20: f64,
    val_r20: f64,
}

#[derive(Serialize)]
struct SweepOutput {
    rows: Vec<SweepRow>,
    best: SweepRow,
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), Error> {
    if cfg.beta_grid.is_empty() || cfg.tau_grid.is_empty() || cfg.dropout_grid.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let (train_p, val_p, _) = corpus_paths(cfg);
    let train_c = SessionCorpus::load(&train_p)?;
    let val_c = SessionCorpus::load(&val_p)?;
    let seed = *cfg.seeds.first().unwrap_or(&17);
    let val_examples = expand_prefixes(&val_c, cfg.max_len);

    let mut rows: Vec<SweepRow> = Vec::new();
    for &tau in &cfg.tau_grid {
        for &dropout in &cfg.dropout_grid {
            let mut model_config = cfg.model_config();
            model_config.tau = tau;
            model_config.dropout = dropout;
            model_config.validate()?;
            // beta only acts at aggregation time: one trained model serves
            // the whole beta sweep for this (tau, dropout) point
            let outcome = train(&train_c, &val_c, &model_config, seed, &cfg.train_options())?;
            for &beta in &cfg.beta_grid {
                let mut eval_config = model_config.clone();
                eval_config.beta = beta;
                eval_config.dropout = 0.0;
                let (mrr, r20) =
                    validation_mrr_r20(&outcome.best_params, &eval_config, &val_examples)?;
                println!(
                    "beta {beta:.1} tau {tau} dropout {dropout}: val MRR@20 {mrr:.4} R@20 {r20:.4}"
                );
                rows.push(SweepRow {
                    beta,
                    tau,
                    dropout,
                    val_mrr20: mrr,
                    val_r20: r20,
                });
            }
        }
    }
    let best_idx = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.val_mrr20.partial_cmp(&b.1.val_mrr20).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let best = SweepRow {
        beta: rows[best_idx].beta,
        tau: rows[best_idx].tau,
        dropout: rows[best_idx].dropout,
        val_mrr20: rows[best_idx].val_mrr20,
        val_r20: rows[best_idx].val_r20,
    };
    println!(
        "best: beta {} tau {} dropout {} (val MRR@20 {:.4})",
        best.beta, best.tau, best.dropout, best.val_mrr20
    );
    let out_path = cfg.report_path.with_extension("sweep.json");
    write_json(&out_path, &SweepOutput { rows, best })?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Artifact { .. } => 1,
        Error::NonFiniteLoss { .. } | Error::Entmax(_) | Error::Model(_) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides)?;
    match &cli.command {
        Command::Preprocess => cmd_preprocess(&cfg),
        Command::Train { resume } => cmd_train(&cfg, *resume),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
