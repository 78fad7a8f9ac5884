//! `dmark` command line: generate paired corpora, score them, calibrate
//! thresholds, attack corpora, sweep parameters, and render report tables.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dmark_core::harness::corpus::{attack_corpus, Corpus};
use dmark_core::harness::records::{
    mean_z_of, read_records, write_records, CalibrationFile, RunRecord,
};
use dmark_core::harness::sweep::write_sweep_jsonl;
use dmark_core::harness::{
    detect_corpus, generate_pair, render_calibration, render_sweep_table, run_sweep, HarnessError,
    QualityScorer, RunConfig, SweepGrid,
};
use dmark_core::{
    calibrate_scores, AttackKind, AttackSpec, GreenLookup, KeyedPartition, StrategyKind, ToyLm,
    TprTable,
};

const DEFAULT_FPRS: [f64; 3] = [0.005, 0.01, 0.05];

#[derive(Parser)]
#[command(
    name = "dmark",
    about = "Watermarking harness for masked-denoising text generation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config-file path plus the flag overrides shared by most subcommands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `name = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    backward_weight: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Watermark key seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        take!(
            vocab_size,
            model_seed,
            backward_weight,
            n,
            steps,
            block_size,
            temperature,
            strategy,
            seed,
            gamma,
            delta,
            samples,
            prompt_len,
            corpus_seed,
            out_dir
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired watermarked and baseline corpora from one config.
    Generate(GenerateCmd),
    /// Score a corpus against the watermark key.
    Detect(DetectCmd),
    /// Calibrate detection thresholds from a null (baseline) report file.
    Calibrate(CalibrateCmd),
    /// Apply a token-level attack to a corpus.
    Attack(AttackCmd),
    /// Run a (strategy, gamma, delta, n) cross-product sweep.
    Sweep(SweepCmd),
    /// Render a TPR table from report records and a calibration file.
    Report(ReportCmd),
}

#[derive(Args)]
struct GenerateCmd {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DetectCmd {
    /// Corpus JSONL produced by `generate` or `attack`.
    #[arg(long)]
    corpus: PathBuf,
    /// Key source; defaults to the config embedded in the corpus header.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Calibration JSON; when given, a full run record (reports, TPR table,
    /// NLL, timing) is written next to the reports.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output report JSONL (default: alongside the corpus).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateCmd {
    /// Null report JSONL (scored baseline corpus).
    #[arg(long)]
    reports: PathBuf,
    /// Comma-separated false positive rates.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FPRS)]
    fprs: Vec<f64>,
    /// Output calibration JSON (default: alongside the reports).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// Attack kind: delete, insert, swap, or substitute.
    #[arg(long)]
    attack: AttackKind,
    /// Edit rate in [0, 1).
    #[arg(long)]
    rate: f64,
    /// Attack RNG seed.
    #[arg(long, default_value_t = 9)]
    attack_seed: u64,
    /// Output corpus JSONL (default: alongside the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated gamma values (default 0.25,0.5,0.75).
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    /// Comma-separated delta values (default 1,2,5,10).
    #[arg(long, value_delimiter = ',')]
    deltas: Vec<f64>,
    /// Comma-separated strategies (default: the config's strategy).
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<StrategyKind>,
    /// Comma-separated sequence lengths (default: the config's n).
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FPRS)]
    fprs: Vec<f64>,
}

#[derive(Args)]
struct ReportCmd {
    /// Report JSONL files (watermarked or attacked).
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Calibration JSON from `calibrate`.
    #[arg(long)]
    calibration: PathBuf,
    /// Matching corpus files; adds an NLL quality column (same order and
    /// count as --reports).
    #[arg(long, num_args = 1..)]
    corpora: Vec<PathBuf>,
    /// Optional rendered-table output path (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(cmd) => cmd_generate(cmd),
        Command::Detect(cmd) => cmd_detect(cmd),
        Command::Calibrate(cmd) => cmd_calibrate(cmd),
        Command::Attack(cmd) => cmd_attack(cmd),
        Command::Sweep(cmd) => cmd_sweep(cmd),
        Command::Report(cmd) => cmd_report(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dmark: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                HarnessError::Data(_) => ExitCode::from(3),
            }
        }
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), HarnessError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        HarnessError::config(format!("cannot create {}: {e}", cfg.out_dir.display()))
    })
}

fn cmd_generate(cmd: GenerateCmd) -> Result<(), HarnessError> {
    let cfg = cmd.config.resolve()?;
    ensure_out_dir(&cfg)?;
    let started = Instant::now();
    let (wm, base, stats) = generate_pair(&cfg)?;
    let wall_ms = started.elapsed().as_millis() as u64;
    wm.write_jsonl(&cfg.out_dir.join("watermarked.jsonl"))?;
    base.write_jsonl(&cfg.out_dir.join("baseline.jsonl"))?;
    cfg.write_file(&cfg.out_dir.join("config.txt"))?;
    let meta = serde_json::json!({
        "kind": "generate-meta",
        "config": cfg,
        "stats": stats,
        "wall_ms": wall_ms,
        "tokens_per_second":
            (2 * cfg.samples * cfg.n) as f64 / (wall_ms.max(1) as f64 / 1000.0),
    });
    std::fs::write(
        cfg.out_dir.join("generate_meta.json"),
        serde_json::to_string_pretty(&meta)
            .map_err(|e| HarnessError::data(format!("serialize failed: {e}")))?
            + "\n",
    )
    .map_err(|e| HarnessError::data(format!("write failed: {e}")))?;
    println!(
        "generated {} watermarked + {} baseline samples (n={}, strategy {}) in {:.1}s",
        cfg.samples,
        cfg.samples,
        cfg.n,
        cfg.strategy,
        wall_ms as f64 / 1000.0
    );
    println!(
        "context availability {:.1}%, out-of-order {:.1}%",
        100.0 * stats.context_available_frac,
        100.0 * stats.out_of_order_frac
    );
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

/// Key and green-list structure for a corpus, checked against an optional
/// explicit config.
fn detector_for(
    corpus: &Corpus,
    config: Option<&PathBuf>,
) -> Result<(dmark_core::WatermarkKey, Box<dyn GreenLookup>), HarnessError> {
    let cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => corpus.header.config.clone(),
    };
    let key = cfg
        .watermark_key()
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let partition = KeyedPartition::new(key, corpus.header.config.vocab_size)
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let lookup = dmark_core::harness::corpus::green_lookup_for(&partition)?;
    Ok((key, lookup))
}

fn cmd_detect(cmd: DetectCmd) -> Result<(), HarnessError> {
    let started = Instant::now();
    let corpus = Corpus::read_jsonl(&cmd.corpus)?;
    let (key, lookup) = detector_for(&corpus, cmd.config.as_ref())?;
    let scored = detect_corpus(&corpus, &key, lookup.as_ref())?;
    let records: Vec<_> = scored.into_iter().map(|(_, r)| r).collect();
    let out = cmd
        .out
        .unwrap_or_else(|| cmd.corpus.with_extension("reports.jsonl"));
    write_records(&records, &out)?;
    if let Some(cal_path) = &cmd.calibration {
        let calibration = CalibrationFile::read(cal_path)?;
        let zs: Vec<f64> = records.iter().map(|r| r.z).collect();
        let tpr = calibration
            .thresholds
            .iter()
            .map(|t| dmark_core::TprRow {
                fpr: t.fpr,
                threshold: t.z,
                tpr: dmark_core::detect::fraction_above(&zs, t.z),
            })
            .collect();
        let record = RunRecord::new(
            corpus.header.config.clone(),
            records.clone(),
            tpr,
            Some(corpus_nll(&corpus)),
            started.elapsed().as_millis() as u64,
        );
        let run_out = out.with_extension("run.json");
        record.write(&run_out)?;
        println!("wrote {}", run_out.display());
    }
    println!(
        "scored {} samples (variant {}): mean z {:+.4}",
        records.len(),
        corpus.header.variant,
        mean_z_of(&records)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_calibrate(cmd: CalibrateCmd) -> Result<(), HarnessError> {
    let records = read_records(&cmd.reports)?;
    if records.is_empty() {
        return Err(HarnessError::data(format!(
            "{}: no records to calibrate on",
            cmd.reports.display()
        )));
    }
    let zs: Vec<f64> = records.iter().map(|r| r.z).collect();
    let cal = calibrate_scores(&zs, &cmd.fprs).map_err(|e| HarnessError::data(e.to_string()))?;
    let file = CalibrationFile::from_calibration(&cal, records[0].gamma, records[0].seed);
    let out = cmd
        .out
        .unwrap_or_else(|| cmd.reports.with_extension("calibration.json"));
    file.write(&out)?;
    print!("{}", render_calibration(&file));
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_attack(cmd: AttackCmd) -> Result<(), HarnessError> {
    let corpus = Corpus::read_jsonl(&cmd.corpus)?;
    let spec = AttackSpec::new(cmd.attack, cmd.rate, cmd.attack_seed)
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let attacked = attack_corpus(&corpus, &spec)?;
    let out = cmd.out.unwrap_or_else(|| {
        cmd.corpus
            .with_extension(format!("{}-{}.jsonl", spec.kind, spec.rate))
    });
    attacked.write_jsonl(&out)?;
    if attacked.header.degenerate_edits > 0 {
        eprintln!(
            "warning: {} samples below one edit passed through unchanged",
            attacked.header.degenerate_edits
        );
    }
    println!(
        "attacked {} samples with {} at rate {}",
        attacked.samples.len(),
        spec.kind,
        spec.rate
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(cmd: SweepCmd) -> Result<(), HarnessError> {
    let cfg = cmd.config.resolve()?;
    ensure_out_dir(&cfg)?;
    let default = SweepGrid::parameter_table();
    let grid = SweepGrid {
        strategies: cmd.strategies,
        gammas: if cmd.gammas.is_empty() {
            default.gammas
        } else {
            cmd.gammas
        },
        deltas: if cmd.deltas.is_empty() {
            default.deltas
        } else {
            cmd.deltas
        },
        ns: cmd.ns,
    };
    let started = Instant::now();
    let rows = run_sweep(&cfg, &grid, &cmd.fprs)?;
    let wall_ms = started.elapsed().as_millis() as u64;
    write_sweep_jsonl(&rows, &cfg.out_dir.join("sweep.jsonl"))?;
    print!("{}", render_sweep_table(&rows));
    println!(
        "{} cells in {:.1}s; wrote {}",
        rows.len(),
        wall_ms as f64 / 1000.0,
        cfg.out_dir.join("sweep.jsonl").display()
    );
    Ok(())
}

fn cmd_report(cmd: ReportCmd) -> Result<(), HarnessError> {
    let calibration = CalibrationFile::read(&cmd.calibration)?;
    if !cmd.corpora.is_empty() && cmd.corpora.len() != cmd.reports.len() {
        return Err(HarnessError::config(
            "--corpora must match --reports in count and order",
        ));
    }
    let mut rendered = String::new();
    for (i, path) in cmd.reports.iter().enumerate() {
        let records = read_records(path)?;
        if records.is_empty() {
            return Err(HarnessError::data(format!(
                "{}: no data to report",
                path.display()
            )));
        }
        let zs: Vec<f64> = records.iter().map(|r| r.z).collect();
        let rows = calibration
            .thresholds
            .iter()
            .map(|t| dmark_core::TprRow {
                fpr: t.fpr,
                threshold: t.z,
                tpr: dmark_core::detect::fraction_above(&zs, t.z),
            })
            .collect();
        let table = TprTable { rows };
        let nll_label = match cmd.corpora.get(i) {
            Some(corpus_path) => {
                let corpus = Corpus::read_jsonl(corpus_path)?;
                format!(", NLL {:.4}", corpus_nll(&corpus))
            }
            None => String::new(),
        };
        let first = &records[0];
        let attack_label = match (&first.attack, first.attack_param) {
            (Some(a), Some(p)) => format!("{a}@{p}"),
            _ => "none".into(),
        };
        rendered.push_str(&format!(
            "{}: strategy {}, gamma {}, delta {}, attack {}, {} samples, mean z {:+.4}{}\n{}\n",
            path.display(),
            first.strategy,
            first.gamma,
            first.delta,
            attack_label,
            records.len(),
            mean_z_of(&records),
            nll_label,
            table
        ));
    }
    match &cmd.out {
        Some(path) => {
            std::fs::write(path, &rendered)
                .map_err(|e| HarnessError::data(format!("write failed: {e}")))?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

/// Mean NLL of a corpus under the model its own header names.
fn corpus_nll(corpus: &Corpus) -> f64 {
    let cfg = &corpus.header.config;
    let model = ToyLm::random(cfg.vocab_size, cfg.model_seed, cfg.backward_weight as f32);
    let scorer = QualityScorer::new(&model);
    let texts: Vec<_> = corpus.samples.iter().map(|s| s.tokens.clone()).collect();
    scorer.mean_nll(&texts)
}
