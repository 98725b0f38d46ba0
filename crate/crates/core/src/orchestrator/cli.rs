//! `prage` command line. Exit status: 0 ok, 1 configuration or usage error,
//! 2 stage failure.

use std::ffi::OsString;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use super::pipeline::{Pipeline, StageOutcome, AGREEMENT_TXT, REPORT_TXT};
use super::LoadedConfig;
use crate::annotate::{self, Service, ServiceConfig};
use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_STAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "prage",
    version,
    about = "Retrieval-augmented paraphrasing of French medical terms"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Re-run the stage even if the manifest marks it done.
    #[arg(long, global = true)]
    stage_force: bool,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate the paraphrase dataset.
    Ingest,
    /// Split terms into train/validation/test.
    Split,
    /// Build or query the retrieval indexes.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Generate outputs for every configuration and evaluation term.
    Run {
        /// Stop after this many new generations; rerun to resume.
        #[arg(long)]
        max_runs: Option<usize>,
    },
    /// Score generations against the reference paraphrases.
    Eval,
    /// Render the metric table.
    Report,
    /// Sample generations for human evaluation.
    Campaign,
    /// Inter-annotator agreement and manual summaries.
    Agree {
        /// Annotation export (JSONL); defaults to the service journal.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding the built annotation UI.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum IndexAction {
    /// Build the knowledge base and one index per encoder.
    Build,
    /// Print the top-k chunks for a query.
    Query {
        #[arg(long)]
        encoder: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        text: String,
    },
}

fn stage_exit(name: &str, r: crate::error::Result<StageOutcome>) -> i32 {
    match r {
        Ok(StageOutcome::Skipped) => {
            eprintln!("{name}: already done, nothing to do (use --stage-force to rerun)");
            EXIT_OK
        }
        Ok(StageOutcome::Done) => {
            eprintln!("{name}: done");
            EXIT_OK
        }
        Ok(StageOutcome::Partial) => {
            eprintln!("{name}: partial; rerun to continue");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{name}: failed: {e}");
            EXIT_STAGE
        }
    }
}

fn print_artifact(p: &Pipeline, rel: &str) {
    if let Ok(text) = fs::read_to_string(p.path(rel)) {
        print!("{text}");
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let Some(config_path) = cli.config else {
        eprintln!("error: --config is required");
        return EXIT_CONFIG;
    };
    let loaded = match LoadedConfig::load(&config_path) {
        Ok(c) => c.with_seed(cli.seed),
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let mut p = match Pipeline::open(loaded, cli.stage_force) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot open output directory: {e}");
            return EXIT_STAGE;
        }
    };

    match cli.command {
        Command::Ingest => stage_exit("ingest", p.ingest()),
        Command::Split => stage_exit("split", p.split()),
        Command::Index {
            action: IndexAction::Build,
        } => stage_exit("index", p.index()),
        Command::Index {
            action: IndexAction::Query { encoder, k, text },
        } => match p.query_index(&encoder, &text, k) {
            Ok(hits) => {
                for (rank, (id, score, chunk)) in hits.iter().enumerate() {
                    println!("{}\t{score:.6}\t{id}\t{chunk}", rank + 1);
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("index query: {e}");
                EXIT_STAGE
            }
        },
        Command::Run { max_runs } => {
            for c in p.configurations() {
                eprintln!("configuration {}", c.id());
            }
            stage_exit("run", p.run(max_runs))
        }
        Command::Eval => stage_exit("eval", p.eval()),
        Command::Report => {
            let code = stage_exit("report", p.report());
            if code == EXIT_OK {
                print_artifact(&p, REPORT_TXT);
            }
            code
        }
        Command::Campaign => stage_exit("campaign", p.campaign()),
        Command::Agree { annotations } => {
            let code = stage_exit("agree", p.agree(annotations.as_deref()));
            if code == EXIT_OK {
                print_artifact(&p, AGREEMENT_TXT);
            }
            code
        }
        Command::Serve {
            bind,
            port,
            static_dir,
        } => match serve(&p, SocketAddr::new(bind, port), static_dir) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("serve: {e}");
                EXIT_STAGE
            }
        },
    }
}

fn serve(p: &Pipeline, addr: SocketAddr, static_dir: Option<PathBuf>) -> crate::error::Result<()> {
    let cfg = &p.config().config.campaign;
    if cfg.annotators.is_empty() {
        return Err(Error::config(
            "campaign.annotators",
            "no annotators configured",
        ));
    }
    let service = Service::open(ServiceConfig {
        samples: p.campaign_samples()?,
        annotators: cfg.annotators.clone(),
        journal: p.journal_path(),
    })?;
    let static_dir = static_dir.or_else(|| cfg.static_dir.as_ref().map(|d| p.config().resolve(d)));
    let app = annotate::router(Arc::new(service), static_dir);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Http(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Http(format!("bind {addr}: {e}")))?;
        annotate::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Http(e.to_string()))
    })
}
