use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use formwiki::depgraph::Granularity;
use formwiki::minilib::{ItemId, Mode};
use formwiki::policy::Action;
use formwiki::wiki::{Wiki, WikiOptions, ADMIN_USER};
use formwiki_server::{serve, ServerConfig};

#[derive(Parser)]
#[command(name = "formwiki", version, about = "Formal-library wiki server")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, default_value = ".formwiki")]
    store: PathBuf,
    /// Verification worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a store whose main repository holds the library in DIR.
    Init { dir: PathBuf },
    /// Verify a repository from scratch.
    Verify {
        repo: String,
        #[arg(long, default_value = "full")]
        mode: Mode,
    },
    /// Dependency statistics as JSON.
    Stats {
        repo: String,
        #[arg(long, default_value = "item")]
        granularity: Granularity,
    },
    /// Minimal environment of an item (`path#name`).
    Mindeps { repo: String, item: ItemId },
    /// Clone benchmark with N clones of main.
    CloneBench { n: usize },
    /// Run the HTTP server described by a JSON config file.
    Serve { config: PathBuf },
    /// Evaluate the access rules: prints allow or deny.
    PolicyCheck {
        user: String,
        repo: String,
        action: Action,
    },
}

fn options(cli: &Cli) -> WikiOptions {
    let mut o = WikiOptions::default();
    if let Some(w) = cli.workers {
        o.workers = w;
    }
    o
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// `Ok(false)` is a negative answer (deny, failed verification).
fn run(cli: Cli) -> anyhow::Result<bool> {
    let opts = options(&cli);
    let open = || {
        Wiki::open(&cli.store, &opts)
            .with_context(|| format!("opening store {}", cli.store.display()))
    };
    match &cli.cmd {
        Cmd::Init { dir } => {
            let w = Wiki::init(dir, &cli.store, &opts)?;
            let repos = w.vc().repos();
            eprintln!(
                "initialised {} with {} repositories",
                cli.store.display(),
                repos.len()
            );
            Ok(true)
        }
        Cmd::Verify { repo, mode } => {
            let w = open()?;
            let s = w.verify_repo(&w.principal(Some(ADMIN_USER)), repo, *mode)?;
            print_json(&s)?;
            Ok(s.failures.is_empty())
        }
        Cmd::Stats { repo, granularity } => {
            let w = open()?;
            print_json(&w.stats(&w.principal(Some(ADMIN_USER)), repo, *granularity)?)?;
            Ok(true)
        }
        Cmd::Mindeps { repo, item } => {
            let w = open()?;
            print_json(&w.mindeps(&w.principal(Some(ADMIN_USER)), repo, item)?)?;
            Ok(true)
        }
        Cmd::CloneBench { n } => {
            let w = open()?;
            print_json(&w.clone_bench(&w.principal(Some(ADMIN_USER)), *n)?)?;
            Ok(true)
        }
        Cmd::Serve { config } => {
            let mut cfg = ServerConfig::from_file(config)?;
            if let Some(w) = cli.workers {
                cfg.workers = w;
            }
            serve(&cfg)?;
            Ok(true)
        }
        Cmd::PolicyCheck { user, repo, action } => {
            let w = open()?;
            let d = w.decide(&w.principal(Some(user)), repo, *action);
            println!("{d}");
            Ok(d.is_allow())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
