//! `certiflow`: command-line front end.
//!
//! Exit status: 0 on success, 1 on domain errors (or findings under
//! `--strict`), 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use certiflow_core::canonical::{format_ts, parse_ts, Provenance, Timestamp};
use certiflow_core::docgen::{generate_checklist, ItemResult, ReviewKind};
use certiflow_core::gateway::adapters::VcsAdapter;
use certiflow_core::gateway::config::ProjectConfig;
use certiflow_core::gateway::event::PullRequestEvent;
use certiflow_core::gateway::pipeline::{handle_pull_request, IngestOptions};
use certiflow_core::req_store::{RequirementFilter, RequirementStatus, StoreId};
use certiflow_core::scenario::{run_scenario, ScenarioScript};
use certiflow_core::tag_parser::{scan, CommentSyntaxMap, RequirementKind};
use certiflow_core::trace::{EntityRef, LinkKind, TraceLink};
use certiflow_core::workflow::{stage_complete, Stage, TaskId, TaskState};
use certiflow_core::workspace::{ReviewAnswers, Workspace};

#[derive(Parser)]
#[command(
    name = "certiflow",
    version,
    about = "Certification evidence from everyday development work"
)]
struct Cli {
    /// Project configuration file.
    #[arg(long, global = true, env = "CERTIFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Identity recorded on every change.
    #[arg(long, global = true, env = "CERTIFLOW_AUTHOR")]
    author: Option<String>,
    /// Timestamp recorded on every change (RFC 3339); defaults to now.
    #[arg(long, global = true, env = "CERTIFLOW_AT")]
    at: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the requirement drafts declared in a file, one JSON object per line.
    Scan { path: PathBuf },
    #[command(subcommand)]
    Req(ReqCmd),
    #[command(subcommand)]
    Pbi(PbiCmd),
    #[command(subcommand)]
    Trace(TraceCmd),
    #[command(subcommand)]
    Doc(DocCmd),
    #[command(subcommand)]
    Package(PackageCmd),
    /// Run a pull-request event from a JSON file through the ingest pipeline.
    Ingest { event: PathBuf },
    /// Serve the webhook endpoint.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Summarise the workspace.
    Status,
    #[command(subcommand)]
    Scenario(ScenarioCmd),
}

#[derive(Subcommand)]
enum ReqCmd {
    /// Scan files and import their requirements.
    Import {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    List {
        #[arg(long)]
        kind: Option<RequirementKind>,
        #[arg(long)]
        status: Option<RequirementStatus>,
        #[arg(long)]
        text: Option<String>,
    },
    Show {
        id: StoreId,
    },
    /// Move a requirement to a new status, citing a registered artifact.
    SetStatus {
        id: StoreId,
        status: RequirementStatus,
        evidence: String,
    },
}

#[derive(Subcommand)]
enum PbiCmd {
    Create {
        id: String,
        #[arg(long)]
        title: String,
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        sprint: String,
        #[arg(long)]
        release: Option<String>,
        #[arg(long = "req")]
        reqs: Vec<StoreId>,
    },
    Advance {
        pbi: String,
        task: TaskId,
        state: TaskState,
        #[arg(long)]
        evidence: Vec<String>,
    },
    Status {
        pbi: Option<String>,
    },
}

#[derive(Subcommand)]
enum TraceCmd {
    Link {
        from: EntityRef,
        to: EntityRef,
        kind: LinkKind,
        #[arg(long, default_value = "manual")]
        commit: String,
    },
    /// Print the traceability matrix as CSV.
    Matrix {
        /// Also commit the CSV to the docs branch and register it.
        #[arg(long)]
        publish: Option<Stage>,
    },
    Check {
        #[arg(long)]
        strict: bool,
    },
    Anomalies {
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Subcommand)]
enum DocCmd {
    /// Render the SRD, commit it to the docs branch and print it.
    Srd {
        #[arg(long, default_value = "SPECIFICATION")]
        stage: Stage,
        #[arg(long = "pbi")]
        pbis: Vec<String>,
    },
    /// Print the design artifact generated for a commit.
    Design { commit: String },
    /// Print a blank checklist, or record a filled one with `--result`.
    Checklist {
        kind: ReviewKind,
        #[arg(required = true)]
        subjects: Vec<String>,
        #[command(flatten)]
        record: RecordArgs,
    },
}

#[derive(Args)]
struct RecordArgs {
    #[arg(long)]
    result: Option<ItemResult>,
    #[arg(long, requires = "result")]
    stage: Option<Stage>,
    #[arg(long = "pbi", requires = "result")]
    pbis: Vec<String>,
}

#[derive(Subcommand)]
enum PackageCmd {
    Incremental {
        #[arg(long)]
        stage: Stage,
    },
    /// Write the data package and SCI report for the latest package.
    Sci {
        /// File with one ticket id per line.
        #[arg(long)]
        tickets: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    Validate {
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Run {
        file: PathBuf,
        /// Workspace directory; must be missing or empty. A temporary one by default.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

enum Failure {
    Domain(String),
    Findings,
}

type Outcome = Result<(), Failure>;

fn domain<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Domain(e.to_string())
}

struct Ctx {
    config: Option<PathBuf>,
    author: String,
    at: Timestamp,
}

impl Ctx {
    fn prov(&self) -> Result<Provenance, Failure> {
        Provenance::new(self.author.clone(), self.at).map_err(domain)
    }

    fn config(&self) -> Result<ProjectConfig, Failure> {
        let path = self
            .config
            .clone()
            .unwrap_or_else(|| PathBuf::from("certiflow.conf"));
        ProjectConfig::load(&path).map_err(domain)
    }

    fn open(&self) -> Result<Workspace, Failure> {
        Workspace::open(self.config()?).map_err(domain)
    }

    /// Runs `f` under the workspace lock and saves on success.
    fn mutate<T>(
        &self,
        f: impl FnOnce(&mut Workspace) -> Result<T, Failure>,
    ) -> Result<T, Failure> {
        let config = self.config()?;
        let ws = Workspace::open(config.clone()).map_err(domain)?;
        let _lock = ws.lock().map_err(domain)?;
        // reopen under the lock so nothing written meanwhile is lost
        let mut ws = Workspace::open(config).map_err(domain)?;
        let out = f(&mut ws)?;
        ws.save().map_err(domain)?;
        Ok(out)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let at = match &cli.at {
        Some(s) => match parse_ts(s) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: --at: {e}");
                return ExitCode::from(2);
            }
        },
        None => parse_ts(&format_ts(&chrono::Utc::now())).expect("formatted timestamp parses"),
    };
    let author = cli
        .author
        .clone()
        .or_else(|| std::env::var("USER").ok())
        .unwrap_or_else(|| "certiflow".into());
    let ctx = Ctx {
        config: cli.config.clone(),
        author,
        at,
    };
    match run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Findings) => ExitCode::from(1),
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(ctx: &Ctx, cmd: Command) -> Outcome {
    match cmd {
        Command::Scan { path } => scan_file(ctx, &path),
        Command::Req(c) => req(ctx, c),
        Command::Pbi(c) => pbi(ctx, c),
        Command::Trace(c) => trace(ctx, c),
        Command::Doc(c) => doc(ctx, c),
        Command::Package(c) => package(ctx, c),
        Command::Ingest { event } => ingest(ctx, &event),
        Command::Serve { addr } => serve(ctx, &addr),
        Command::Status => status(ctx),
        Command::Scenario(ScenarioCmd::Run { file, dir }) => scenario(&file, dir),
    }
}

/// `path` relative to `base`, with forward slashes.
fn repo_path(path: &Path, base: &Path) -> Result<String, Failure> {
    let abs = |p: &Path| std::path::absolute(p).map_err(domain);
    let (p, b) = (abs(path)?, abs(base)?);
    let rel = p.strip_prefix(&b).map_err(|_| {
        Failure::Domain(format!(
            "{} is outside the project at {}",
            path.display(),
            base.display()
        ))
    })?;
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

fn scan_file(ctx: &Ctx, path: &Path) -> Outcome {
    let (syntax, base) = match &ctx.config {
        Some(_) => {
            let c = ctx.config()?;
            (c.comment_syntax, c.base_dir)
        }
        None => (CommentSyntaxMap::default(), PathBuf::from(".")),
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    let report = scan(&text, &repo_path(path, &base)?, &syntax).map_err(domain)?;
    for d in &report.drafts {
        println!("{}", serde_json::to_string(d).expect("drafts serialize"));
    }
    for e in report.errors.iter().chain(&report.trace_errors) {
        eprintln!("warning: {e}");
    }
    if report.errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::Findings)
    }
}

fn req(ctx: &Ctx, cmd: ReqCmd) -> Outcome {
    match cmd {
        ReqCmd::Import { paths } => {
            let prov = ctx.prov()?;
            ctx.mutate(|ws| {
                let mut drafts = Vec::new();
                for p in &paths {
                    let text = fs::read_to_string(p)
                        .map_err(|e| Failure::Domain(format!("{}: {e}", p.display())))?;
                    let report = scan(
                        &text,
                        &repo_path(p, &ws.config.base_dir)?,
                        &ws.config.comment_syntax,
                    )
                    .map_err(domain)?;
                    if let Some(e) = report.errors.first() {
                        return Err(domain(e));
                    }
                    drafts.extend(report.drafts);
                }
                let outcome = ws.project.import(&drafts, &prov).map_err(domain)?;
                for (id, action) in &outcome.actions {
                    println!("{action}\t{id}");
                }
                Ok(())
            })
        }
        ReqCmd::List { kind, status, text } => {
            let ws = ctx.open()?;
            let filter = RequirementFilter {
                kind,
                status,
                parent: None,
                text,
            };
            for r in ws.project.store.query(&filter) {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    r.store_id, r.status, r.revision, r.local_key, r.title
                );
            }
            Ok(())
        }
        ReqCmd::Show { id } => {
            let ws = ctx.open()?;
            let r = ws
                .project
                .store
                .get(&id)
                .ok_or_else(|| Failure::Domain(format!("unknown requirement {id}")))?;
            println!("{}", serde_json::to_string(r).expect("records serialize"));
            Ok(())
        }
        ReqCmd::SetStatus {
            id,
            status,
            evidence,
        } => {
            let prov = ctx.prov()?;
            ctx.mutate(|ws| {
                ws.project
                    .set_status(&id, status, &evidence, &prov)
                    .map_err(domain)
            })?;
            println!("{id}\t{status}");
            Ok(())
        }
    }
}

fn print_pbi(p: &certiflow_core::workflow::Pbi) {
    let state = if stage_complete(p) {
        "COMPLETE"
    } else {
        "OPEN"
    };
    println!(
        "{}\t{}\t{}\t{}\t{}",
        p.pbi_id, p.stage, p.sprint, state, p.title
    );
    for t in &p.tasks {
        println!("  {}\t{}\t{}", t.task_id, t.state, t.evidence.join(","));
    }
}

fn pbi(ctx: &Ctx, cmd: PbiCmd) -> Outcome {
    match cmd {
        PbiCmd::Create {
            id,
            title,
            stage,
            sprint,
            release,
            reqs,
        } => {
            let prov = ctx.prov()?;
            ctx.mutate(|ws| {
                let release = release.unwrap_or_else(|| ws.config.release_version.clone());
                ws.project
                    .create_pbi(&id, &title, stage, &release, &sprint, reqs, &prov)
                    .map_err(domain)?;
                print_pbi(ws.project.board.get(&id).expect("just created"));
                Ok(())
            })
        }
        PbiCmd::Advance {
            pbi,
            task,
            state,
            evidence,
        } => {
            let prov = ctx.prov()?;
            ctx.mutate(|ws| {
                let reviewed = ws
                    .project
                    .advance(&pbi, task, state, evidence, &prov)
                    .map_err(domain)?;
                println!("{pbi}\t{task}\t{state}");
                for id in reviewed {
                    println!("REVIEWED\t{id}");
                }
                Ok(())
            })
        }
        PbiCmd::Status { pbi } => {
            let ws = ctx.open()?;
            match pbi {
                Some(id) => print_pbi(
                    ws.project
                        .board
                        .get(&id)
                        .ok_or_else(|| Failure::Domain(format!("unknown PBI {id}")))?,
                ),
                None => ws.project.pbis().into_iter().for_each(print_pbi),
            }
            Ok(())
        }
    }
}

fn trace(ctx: &Ctx, cmd: TraceCmd) -> Outcome {
    match cmd {
        TraceCmd::Link {
            from,
            to,
            kind,
            commit,
        } => {
            let prov = ctx.prov()?;
            let link = TraceLink::new(from, to, kind, &commit, &prov);
            let line = link.describe();
            let added = ctx.mutate(|ws| ws.project.link(link).map_err(domain))?;
            println!("{}\t{line}", if added { "ADDED" } else { "EXISTS" });
            Ok(())
        }
        TraceCmd::Matrix {
            publish: Some(stage),
        } => {
            let prov = ctx.prov()?;
            let (csv, id) =
                ctx.mutate(|ws| ws.publish_matrix(stage, Vec::new(), &prov).map_err(domain))?;
            print!("{csv}");
            eprintln!("registered {id}");
            Ok(())
        }
        TraceCmd::Matrix { publish: None } => {
            let mut ws = ctx.open()?;
            let m = ws.project.matrix(ctx.at).map_err(domain)?;
            print!("{}", certiflow_core::trace::render_matrix_csv(&m));
            Ok(())
        }
        TraceCmd::Check { strict } => {
            let mut ws = ctx.open()?;
            let findings = ws.project.completeness(ctx.at).map_err(domain)?;
            for f in &findings {
                println!("{f}");
            }
            if strict && !findings.is_empty() {
                return Err(Failure::Findings);
            }
            Ok(())
        }
        TraceCmd::Anomalies { strict } => {
            let ws = ctx.open()?;
            let open = ws.project.open_anomalies();
            for a in &open {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    a.anomaly_id, a.kind, a.subject, a.commit_id, a.detail
                );
            }
            if strict && !open.is_empty() {
                return Err(Failure::Findings);
            }
            Ok(())
        }
    }
}

fn doc(ctx: &Ctx, cmd: DocCmd) -> Outcome {
    match cmd {
        DocCmd::Srd { stage, pbis } => {
            let prov = ctx.prov()?;
            let (doc, id) = ctx.mutate(|ws| ws.generate_srd(stage, pbis, &prov).map_err(domain))?;
            print!("{}", doc.body);
            eprintln!("registered {id}");
            Ok(())
        }
        DocCmd::Design { commit } => {
            let ws = ctx.open()?;
            let path = format!("docs/generated/design-{commit}.md");
            let head = ws
                .vcs
                .branch_head(ws.repo(), &ws.config.docs_branch)
                .map_err(domain)?
                .ok_or_else(|| Failure::Domain("nothing has been published yet".into()))?;
            let bytes = ws.vcs.fetch_file(ws.repo(), &head, &path).map_err(domain)?;
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
        DocCmd::Checklist {
            kind,
            subjects,
            record,
        } => match record.result {
            None => {
                let ws = ctx.open()?;
                let c = generate_checklist(kind, &subjects, &ws.catalog, &|s| {
                    s.parse::<EntityRef>().is_ok_and(|r| match r {
                        EntityRef::Requirement(id) => ws.project.store.get(&id).is_some(),
                        EntityRef::Artifact(a) => ws.project.index.contains(&a),
                    })
                })
                .map_err(domain)?;
                print!("{}", c.render());
                Ok(())
            }
            Some(result) => {
                let prov = ctx.prov()?;
                let stage = record.stage.unwrap_or(Stage::Specification);
                let (c, id) = ctx.mutate(|ws| {
                    ws.record_review(
                        kind,
                        &subjects,
                        &ReviewAnswers::all(result),
                        stage,
                        record.pbis,
                        &prov,
                    )
                    .map_err(domain)
                })?;
                print!("{}", c.render());
                eprintln!("registered {id}");
                Ok(())
            }
        },
    }
}

fn package(ctx: &Ctx, cmd: PackageCmd) -> Outcome {
    match cmd {
        PackageCmd::Incremental { stage } => {
            let prov = ctx.prov()?;
            let (pkg, id) = ctx.mutate(|ws| ws.assemble_package(stage, &prov).map_err(domain))?;
            print!("{}", pkg.manifest_text());
            eprintln!("registered {id}");
            Ok(())
        }
        PackageCmd::Sci { tickets, out } => {
            let prov = ctx.prov()?;
            let text = fs::read_to_string(&tickets)
                .map_err(|e| Failure::Domain(format!("{}: {e}", tickets.display())))?;
            let ids: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect();
            let (report, id) =
                ctx.mutate(|ws| ws.generate_sci(&ids, &out, &prov).map_err(domain))?;
            for (path, digest) in &report.written {
                println!("{digest}\t{path}");
            }
            println!("folder\t{}", report.folder.display());
            eprintln!("registered {id}");
            Ok(())
        }
        PackageCmd::Validate { strict } => {
            let prov = ctx.prov()?;
            let (findings, promoted) = ctx.mutate(|ws| ws.validate(&prov).map_err(domain))?;
            for f in &findings {
                println!("{f}");
            }
            println!(
                "{}",
                if promoted {
                    "CERTIFIABLE_RELEASE"
                } else {
                    "INCREMENTAL"
                }
            );
            if strict && !findings.is_empty() {
                return Err(Failure::Findings);
            }
            Ok(())
        }
    }
}

fn ingest(ctx: &Ctx, path: &Path) -> Outcome {
    let bytes = fs::read(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    let event = PullRequestEvent::from_json(&bytes).map_err(domain)?;
    let r = ctx
        .mutate(|ws| handle_pull_request(ws, &event, &IngestOptions::default()).map_err(domain))?;
    println!("event\t{}", r.event_id);
    if r.duplicate {
        println!("duplicate");
        return Ok(());
    }
    for (id, action) in &r.imported {
        println!("{action}\t{id}");
    }
    for a in &r.registered {
        println!("REGISTERED\t{a}");
    }
    for a in &r.anomalies {
        println!("ANOMALY\t{}\t{}", a.kind, a.subject);
    }
    for t in &r.unresolved_tickets {
        println!("UNRESOLVED\t{t}");
    }
    Ok(())
}

fn serve(ctx: &Ctx, addr: &str) -> Outcome {
    let config = ctx.config()?;
    let rt = tokio::runtime::Runtime::new().map_err(domain)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(domain)?;
        eprintln!("listening on {}", listener.local_addr().map_err(domain)?);
        certiflow_server::serve(listener, certiflow_server::WorkspaceProcessor::new(config))
            .await
            .map_err(domain)
    })
}

fn status(ctx: &Ctx) -> Outcome {
    let mut ws = ctx.open()?;
    let p = &ws.project;
    println!("requirements\t{}", p.store.len());
    for kind in [
        RequirementKind::System,
        RequirementKind::Hlr,
        RequirementKind::Llr,
    ] {
        println!(
            "requirements.{kind}\t{}",
            p.store.query(&RequirementFilter::kind(kind)).len()
        );
    }
    println!("artifacts\t{}", p.index.current().len());
    println!("links\t{}", p.links.len());
    println!("pbis\t{}", p.board.pbis().count());
    println!(
        "pbis.complete\t{}",
        p.board.pbis().filter(|b| stage_complete(b)).count()
    );
    println!("open-anomalies\t{}", p.open_anomalies().len());
    println!("events\t{}", p.ingest_log.len());
    match p.latest_package() {
        Some(pkg) => println!("package\t{}\t{}", pkg.package_version, pkg.kind),
        None => println!("package\tnone"),
    }
    let findings = ws.project.completeness(ctx.at).map_err(domain)?;
    println!("completeness-findings\t{}", findings.len());
    Ok(())
}

fn scenario(file: &Path, dir: Option<PathBuf>) -> Outcome {
    let script = ScenarioScript::load(file).map_err(domain)?;
    let tmp;
    let dir = match dir {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir().map_err(domain)?;
            tmp.path().join("ws")
        }
    };
    let report = run_scenario(&script, &dir).map_err(domain)?;
    for o in &report.outcomes {
        println!("{o}");
    }
    println!("store-digest\t{}", report.store_digest);
    if let Some(d) = report.manifest_digest() {
        println!("manifest-digest\t{d}");
    }
    let failed = report.outcomes.iter().filter(|o| !o.passed).count();
    println!(
        "{}: {} checks, {} failed",
        report.name,
        report.outcomes.len(),
        failed
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Findings)
    }
}
