use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rvqa_annotate::{ExportParams, RedundancyRule};
use rvqa_cli::commands::{self, ClipArgs, Common, ScoreArgs, ServeArgs};
use rvqa_core::clipsel::ClipMode;
use rvqa_core::detectors::DetectorKind;
use rvqa_core::model::Architecture;
use rvqa_core::uqgen::PtMode;

#[derive(Parser)]
#[command(name = "rvqa", version, about = "Unanswerable-question generation and detection for VQA")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr (-vv for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum PtModeArg {
    Easy,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipModeArg {
    Hard,
    Easy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Integrated,
    Branched,
    Separated,
    KPlusOne,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorArg {
    Msp,
    Odin,
    Energy,
    Mahalanobis,
    FrcnnRule,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Any,
    Majority,
    Unanimous,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        images: Option<usize>,
    },
    /// Build the object/attribute lexicon of a corpus.
    Lexicon {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Perturb AQs into candidate UQs.
    GenPt {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<PtModeArg>,
    },
    /// Pick candidate UQs by image-question embedding similarity.
    GenClip {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        image_embeddings: PathBuf,
        #[arg(long)]
        question_embeddings: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ClipModeArg>,
        /// Also write the full per-image rankings as JSONL.
        #[arg(long)]
        rankings_out: Option<PathBuf>,
    },
    /// Pair images with foreign questions as pseudo UQs.
    PseudoPair {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Rankings JSONL from gen-clip; restricts pairs to the top of each ranking.
        #[arg(long)]
        rankings: Option<PathBuf>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Show one RoI Mixup of a question's image with a donor image.
    MixupPreview {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        donor: String,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train a model on the corpus AQs and optional pseudo UQs.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// butd, lxmert, uniter or none.
        #[arg(long)]
        mixup: Option<String>,
    },
    /// Score questions with a trained model and write prediction records.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, value_enum)]
        detector: Option<DetectorArg>,
        /// Reuse a saved Mahalanobis fit instead of fitting on the corpus AQs.
        #[arg(long)]
        mahalanobis_fit: Option<PathBuf>,
    },
    /// AUAF, FF95, FACC and AUROC of a prediction file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Tables and plots over subsets or over run directories.
    Report {
        /// NAME=PREDICTIONS, repeatable.
        #[arg(long)]
        subset: Vec<String>,
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
    /// Serve the annotation UI and API.
    ServeAnnotate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        redundancy: Option<usize>,
    },
    /// Turn an annotation log into UQs.
    ImportAnnotations {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum, default_value = "any")]
        rule: RuleArg,
        #[arg(long, default_value_t = 0.8)]
        min_pass: f64,
        #[arg(long)]
        include_failed: bool,
    },
    /// Train MSP, RP, Mix and Ens over several seeds and aggregate.
    Experiment {
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let c = Common {
        seed: cli.global.seed,
        config: cli.global.config,
        out: cli.global.out,
    };
    match cli.cmd {
        Cmd::Synth { images } => commands::synth(&c, images),
        Cmd::Lexicon { corpus } => commands::lexicon(&c, &corpus),
        Cmd::GenPt { corpus, mode } => commands::gen_pt(
            &c,
            &corpus,
            mode.map(|m| match m {
                PtModeArg::Easy => PtMode::Easy,
                PtModeArg::Hard => PtMode::Hard,
            }),
        ),
        Cmd::GenClip {
            corpus,
            image_embeddings,
            question_embeddings,
            mode,
            rankings_out,
        } => commands::gen_clip(
            &c,
            ClipArgs {
                corpus: &corpus,
                image_embeddings: &image_embeddings,
                question_embeddings: &question_embeddings,
                mode: mode.map(|m| match m {
                    ClipModeArg::Hard => ClipMode::ClipHard,
                    ClipModeArg::Easy => ClipMode::ClipEasy,
                }),
                rankings_out: rankings_out.as_deref(),
            },
        ),
        Cmd::PseudoPair { corpus, n, rankings, top_n } => {
            commands::pseudo_pair(&c, &corpus, n, rankings.as_deref(), top_n)
        }
        Cmd::MixupPreview {
            corpus,
            question,
            donor,
            beta,
        } => commands::mixup_preview(&c, &corpus, &question, &donor, beta),
        Cmd::Train {
            corpus,
            arch,
            pseudo,
            mixup,
        } => commands::train_cmd(
            &c,
            &corpus,
            arch.map(|a| match a {
                ArchArg::Integrated => Architecture::Integrated,
                ArchArg::Branched => Architecture::Branched,
                ArchArg::Separated => Architecture::Separated,
                ArchArg::KPlusOne => Architecture::KPlusOne,
            }),
            pseudo.as_deref(),
            mixup.as_deref(),
        ),
        Cmd::Score {
            model,
            corpus,
            questions,
            detector,
            mahalanobis_fit,
        } => commands::score(
            &c,
            ScoreArgs {
                model: &model,
                corpus: &corpus,
                questions: &questions,
                detector: detector.map(|d| match d {
                    DetectorArg::Msp => DetectorKind::Msp,
                    DetectorArg::Odin => DetectorKind::Odin,
                    DetectorArg::Energy => DetectorKind::Energy,
                    DetectorArg::Mahalanobis => DetectorKind::Mahalanobis,
                    DetectorArg::FrcnnRule => DetectorKind::FrcnnRule,
                }),
                mahalanobis_fit: mahalanobis_fit.as_deref(),
            },
        ),
        Cmd::Eval { predictions } => commands::eval(&c, &predictions),
        Cmd::Report { subset, runs } => commands::report(&c, &subset, &runs),
        Cmd::ServeAnnotate {
            corpus,
            candidates,
            addr,
            ui,
            images,
            redundancy,
        } => commands::serve_annotate(
            &c,
            ServeArgs {
                corpus: &corpus,
                candidates: &candidates,
                addr,
                ui,
                images,
                redundancy,
            },
        ),
        Cmd::ImportAnnotations {
            tasks,
            results,
            rule,
            min_pass,
            include_failed,
        } => {
            anyhow::ensure!((0.0..=1.0).contains(&min_pass), "--min-pass must be in [0, 1]");
            let params = ExportParams {
                min_filter_pass_rate: min_pass,
                rule: match rule {
                    RuleArg::Any => RedundancyRule::Any,
                    RuleArg::Majority => RedundancyRule::Majority,
                    RuleArg::Unanimous => RedundancyRule::Unanimous,
                },
                include_failed,
            };
            commands::import_annotations(&c, &tasks, &results, params)
        }
        Cmd::Experiment { seeds } => commands::experiment(&c, &seeds),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            // io errors carry their source in both the message and the chain
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("{}", serde_json::json!({ "error": msg }));
            ExitCode::from(1)
        }
    }
}
