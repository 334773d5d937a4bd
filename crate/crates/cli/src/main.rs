//! `telerehab`: author content, run sessions against recordings, query
//! recommendations and analytics, simulate the link, serve the API.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use telerehab_core::analytics::timeseries_csv;
use telerehab_core::assessment::AutoTest;
use telerehab_core::fixtures::{plan_playback, PlaybackOptions, RELEVANCE_THRESHOLD};
use telerehab_core::knowledge::{PatientRecord, Protocol, Provenance};
use telerehab_core::movement::{
    record_movement, reverse_movement, suggest_relevant_angles, KinematicComponent, Movement,
};
use telerehab_core::posture::{register_posture, PostureConcept, DEFAULT_TAU};
use telerehab_core::session::{run_session, start_session, Exercise, SessionMeta, SessionPlan};
use telerehab_core::skeleton::{load_recording, save_recording, JointId, Recording};
use telerehab_core::telestream::{NetworkModel, Scenario};
use telerehab_service::api::TOKEN_ENV;
use telerehab_service::{AppState, Document, Store, StoreError};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Store(StoreError::Validation { .. }) => "validation",
            CliError::Store(StoreError::Integrity(_)) => "integrity",
            CliError::Store(StoreError::NotFound { .. }) => "not_found",
            CliError::Store(StoreError::Conflict(_)) => "conflict",
            CliError::Store(_) => "store",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Domain(_) => "domain",
        }
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "telerehab", version, about = "Skeleton-based telerehabilitation engine")]
struct Cli {
    /// Document store directory.
    #[arg(long, global = true, env = "TELEREHAB_STORE", default_value = "telerehab-store")]
    store: PathBuf,
    /// Seed for synthesis and network simulation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the demo library, the THR protocol and the John record.
    Fixtures {
        #[command(subcommand)]
        action: FixturesCmd,
    },
    /// Patient records.
    Patient {
        #[command(subcommand)]
        action: FileCmd,
    },
    /// Posture concepts recorded from a playback.
    Posture {
        #[command(subcommand)]
        action: PostureCmd,
    },
    /// Movements between two postures.
    Movement {
        #[command(subcommand)]
        action: MovementCmd,
    },
    /// Exercises built from stored movements.
    Exercise {
        #[command(subcommand)]
        action: ExerciseCmd,
    },
    /// Rehabilitation protocols.
    Protocol {
        #[command(subcommand)]
        action: FileCmd,
    },
    /// Auto-test questionnaires.
    Test {
        #[command(subcommand)]
        action: FileCmd,
    },
    /// Write a scripted playback of a plan as a JSONL recording.
    Synth(SynthArgs),
    /// Run, list and replay monitored sessions.
    Session {
        #[command(subcommand)]
        action: SessionCmd,
    },
    /// Recommended and contraindicated exercises for a patient.
    Recommend {
        #[arg(long)]
        patient: String,
        #[arg(long)]
        protocol: String,
    },
    /// Session rating time series of a patient, or the cohort average.
    Analyze {
        #[arg(long, conflicts_with = "cohort")]
        patient: Option<String>,
        #[arg(long)]
        cohort: bool,
    },
    /// Run a two-peer streaming scenario and print its QoS report.
    SimulateNet(SimArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
enum FixturesCmd {
    Init,
}

#[derive(Debug, Subcommand)]
enum FileCmd {
    /// Add a document from a JSON file.
    Add {
        #[arg(long)]
        file: PathBuf,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum PostureCmd {
    /// Register a posture from a recording of it being held.
    Add {
        #[arg(long)]
        name: String,
        #[arg(long)]
        recording: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum MovementCmd {
    /// Record a movement between two stored postures.
    Add {
        #[arg(long)]
        name: String,
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        initial: String,
        #[arg(long = "final")]
        final_posture: String,
        /// Relevant angles; replaces the suggestion.
        #[arg(long, value_delimiter = ',')]
        angles: Vec<String>,
        /// Use the suggested relevant angles as they are.
        #[arg(long)]
        accept_suggested: bool,
        /// Kinematic component as LOCATION:JOINT:TYPE:ROM, e.g. HipJoint:HipLeft:Flexion:40.
        #[arg(long = "component")]
        components: Vec<String>,
        /// Also store the reversed movement.
        #[arg(long)]
        with_reverse: bool,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum ExerciseCmd {
    Add {
        #[arg(long)]
        name: String,
        #[arg(long = "movement", required = true)]
        movements: Vec<String>,
        #[arg(long, default_value = "")]
        description: String,
        #[arg(long, default_value_t = 2)]
        series: u32,
        #[arg(long, default_value_t = 5)]
        reps: u32,
    },
    List,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Plan file; `--exercise` builds a single-exercise plan instead.
    #[arg(long, conflicts_with = "exercise")]
    plan: Option<PathBuf>,
    #[arg(long)]
    exercise: Option<String>,
    #[arg(long, default_value_t = 1)]
    series: u32,
    #[arg(long, default_value_t = 1)]
    reps: u32,
    /// Joint noise standard deviation in metres.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Relative hold and transit time jitter.
    #[arg(long, default_value_t = 0.0)]
    warp: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum SessionCmd {
    /// Monitor a recording against a plan.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        recording: PathBuf,
        /// Write feedback events as NDJSON.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write the session report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "patient")]
        patient: String,
        #[arg(long, default_value = "session")]
        id: String,
        #[arg(long, default_value = "2024-01-01")]
        date: NaiveDate,
        /// Store the report and update the patient's explorations.
        #[arg(long)]
        upload: bool,
    },
    /// Print the frames of a stored session as a JSONL recording.
    Replay {
        #[arg(long)]
        patient: String,
        #[arg(long)]
        session: String,
    },
    List,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Scenario file; the flags below build the standard scenario instead.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Bits per second.
    #[arg(long, default_value_t = 2e6)]
    bandwidth: f64,
    /// One-way delay in seconds.
    #[arg(long, default_value_t = 0.05)]
    delay: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0.05)]
    loss: f64,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Write the event log as NDJSON.
    #[arg(long)]
    events: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Store(StoreError::Validation {
            path: format!("{}:{}", path.display(), e.path()),
            reason: e.into_inner().to_string(),
        })
    })
}

fn recording(path: &Path) -> Result<Recording> {
    load_recording(&read(path)?).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn ndjson<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("serializes");
        out.push(b'\n');
    }
    out
}

/// Write to stdout, exiting quietly once the reader has gone away.
fn emit(args: std::fmt::Arguments) {
    if let Err(e) = std::io::stdout().write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

macro_rules! out {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

macro_rules! outln {
    ($($t:tt)*) => { emit(format_args!("{}\n", format_args!($($t)*))) };
}

fn print_json(v: &impl Serialize) {
    outln!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

/// Store `doc` unless an identical one is there already.
fn add<T: Document + PartialEq>(store: &Store, doc: T) -> Result<Value> {
    let id = doc.id();
    if let Ok(existing) = store.get::<T>(&id) {
        if existing.document != doc {
            return Err(StoreError::Conflict(format!("{} `{id}` exists with different content", T::COLLECTION)).into());
        }
    }
    let (stored, changed) = store.ensure(doc)?;
    if !changed {
        eprintln!("warning: {} `{id}` unchanged", T::COLLECTION);
    }
    Ok(json!({ "id": id, "revision": stored.revision, "changed": changed }))
}

fn list<T: Document>(store: &Store, format: Format) -> Result<()> {
    let docs = store.list::<T>()?;
    match format {
        Format::Json => print_json(
            &docs
                .iter()
                .map(|s| json!({ "id": s.document.id(), "revision": s.revision }))
                .collect::<Vec<_>>(),
        ),
        Format::Csv => {
            outln!("id,revision");
            for s in docs {
                outln!("{},{}", s.document.id(), s.revision);
            }
        }
    }
    Ok(())
}

fn parse_component(spec: &str) -> Result<KinematicComponent> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [location, joint, ty, rom] = parts[..] else {
        return Err(CliError::Usage(format!(
            "component `{spec}` is not LOCATION:JOINT:TYPE:ROM"
        )));
    };
    let joint: JointId = joint
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown joint `{joint}`")))?;
    let rom: f64 = rom.parse().map_err(|_| CliError::Usage(format!("bad ROM `{rom}`")))?;
    let mut c = KinematicComponent::new(location, ty.parse().expect("infallible"), rom);
    c.joint = Some(joint);
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let format = cli.format;
    let open = || Store::open(&cli.store).map_err(CliError::from);
    match cli.command {
        Command::Fixtures {
            action: FixturesCmd::Init,
        } => {
            let summary = telerehab_service::seed_fixtures(&open()?)?;
            print_json(&summary);
        }
        Command::Patient { action } => match action {
            FileCmd::Add { file } => print_json(&add(&open()?, read_json::<PatientRecord>(&file)?)?),
            FileCmd::List => list::<PatientRecord>(&open()?, format)?,
        },
        Command::Protocol { action } => match action {
            FileCmd::Add { file } => print_json(&add(&open()?, read_json::<Protocol>(&file)?)?),
            FileCmd::List => list::<Protocol>(&open()?, format)?,
        },
        Command::Test { action } => match action {
            FileCmd::Add { file } => print_json(&add(&open()?, read_json::<AutoTest>(&file)?)?),
            FileCmd::List => list::<AutoTest>(&open()?, format)?,
        },
        Command::Posture { action } => match action {
            PostureCmd::Add {
                name,
                recording: path,
                tau,
            } => {
                let store = open()?;
                let rec = recording(&path)?;
                let basis = store.content()?.postures.basis().clone();
                let concept = register_posture(&name, rec.frames(), &basis, tau).map_err(domain)?;
                let mut out = add(&store, concept)?;
                out["tau"] = json!(tau);
                print_json(&out);
            }
            PostureCmd::List => list::<PostureConcept>(&open()?, format)?,
        },
        Command::Movement { action } => match action {
            MovementCmd::Add {
                name,
                recording: path,
                initial,
                final_posture,
                angles,
                accept_suggested,
                components,
                with_reverse,
            } => {
                let store = open()?;
                let rec = recording(&path)?;
                let content = store.content()?;
                let suggested =
                    suggest_relevant_angles(&rec, content.postures.basis(), RELEVANCE_THRESHOLD).map_err(domain)?;
                eprintln!("suggested relevant angles: {}", suggested.join(","));
                let angles = match (angles.is_empty(), accept_suggested) {
                    (false, _) => angles,
                    (true, true) => suggested,
                    (true, false) => {
                        return Err(CliError::Usage(
                            "confirm the suggestion with --accept-suggested or choose with --angles".into(),
                        ))
                    }
                };
                let components = components
                    .iter()
                    .map(|c| parse_component(c))
                    .collect::<Result<Vec<_>>>()?;
                let m = record_movement(
                    &name,
                    &rec,
                    &initial,
                    &final_posture,
                    &angles,
                    components,
                    &content.postures,
                )
                .map_err(domain)?;
                let mut out = vec![add(&store, m.clone())?];
                if with_reverse {
                    out.push(add(&store, reverse_movement(&m))?);
                }
                print_json(&out);
            }
            MovementCmd::List => list::<Movement>(&open()?, format)?,
        },
        Command::Exercise { action } => match action {
            ExerciseCmd::Add {
                name,
                movements,
                description,
                series,
                reps,
            } => {
                let e = Exercise {
                    name,
                    description,
                    movements,
                    default_series: series,
                    default_reps: reps,
                };
                print_json(&add(&open()?, e)?);
            }
            ExerciseCmd::List => list::<Exercise>(&open()?, format)?,
        },
        Command::Synth(args) => {
            let plan = match (&args.plan, &args.exercise) {
                (Some(p), _) => read_json::<SessionPlan>(p)?,
                (None, Some(e)) => SessionPlan::single(e, args.series, args.reps),
                (None, None) => return Err(CliError::Usage("give --plan or --exercise".into())),
            };
            let content = open()?.content()?;
            let opts = PlaybackOptions {
                seed: cli.seed,
                noise_sigma: args.noise,
                time_warp: args.warp,
            };
            let rec = plan_playback(&content, &plan, &opts).map_err(domain)?;
            write(&args.out, &save_recording(&rec))?;
            print_json(&json!({ "frames": rec.len(), "duration": rec.end() - rec.start() }));
        }
        Command::Session { action } => match action {
            SessionCmd::Run {
                plan,
                recording: path,
                events,
                report,
                patient,
                id,
                date,
                upload,
            } => {
                let store = open()?;
                let plan: SessionPlan = read_json(&plan)?;
                let rec = recording(&path)?;
                let content = store.content()?;
                let meta = SessionMeta {
                    id,
                    patient_id: patient,
                    date,
                };
                let (out, evs) = if upload {
                    // uploads keep the frames for replay
                    let mut engine = start_session(meta, plan, &content).map_err(domain)?.with_replay();
                    let mut evs = Vec::new();
                    for f in rec.frames() {
                        if engine.is_completed() {
                            break;
                        }
                        evs.extend(engine.feed_frame(f).map_err(domain)?);
                    }
                    (engine.finish(), evs)
                } else {
                    run_session(meta, plan, &content, rec.frames()).map_err(domain)?
                };
                if let Some(p) = events {
                    write(&p, &ndjson(&evs))?;
                }
                if let Some(p) = report {
                    write(&p, &serde_json::to_vec_pretty(&out).expect("serializes"))?;
                }
                let summary: Vec<Value> = out
                    .exercises
                    .iter()
                    .map(|e| json!({ "exercise": e.exercise, "correct": e.correct, "exercise_rating": e.exercise_rating }))
                    .collect();
                let mut body = json!({ "session": out.meta.id, "aborted": out.aborted, "exercises": summary });
                if upload {
                    let up = telerehab_service::upload_session(&store, out)?;
                    body["explorations_added"] = json!(up.explorations_added);
                    body["phases"] = json!(up.phases);
                }
                print_json(&body);
            }
            SessionCmd::Replay { patient, session } => {
                let frames = telerehab_service::replay(&open()?, &patient, &session)?;
                let rec = Recording::new(frames, Recording::DEFAULT_RATE).map_err(domain)?;
                out!("{}", String::from_utf8_lossy(&save_recording(&rec)));
            }
            SessionCmd::List => list::<telerehab_core::session::SessionReport>(&open()?, format)?,
        },
        Command::Recommend { patient, protocol } => {
            let set = telerehab_service::recommendations(&open()?, &patient, &protocol)?;
            match format {
                Format::Json => print_json(&set),
                Format::Csv => {
                    outln!("phase,exercise,status,source");
                    for r in &set.recommended {
                        let sources: Vec<&str> = r
                            .provenance
                            .iter()
                            .map(|p| match p {
                                Provenance::PhaseMatch { .. } => "phase_match",
                                Provenance::CarryOver { .. } => "carry_over",
                                Provenance::Override { .. } => "override",
                            })
                            .collect();
                        let mut sources = sources;
                        sources.dedup();
                        outln!(
                            "{},{},recommended,{}",
                            set.phase.as_str(),
                            r.exercise,
                            sources.join("+")
                        );
                    }
                    for c in &set.contraindicated {
                        outln!("{},{},contraindicated,override", set.phase.as_str(), c.exercise);
                    }
                }
            }
        }
        Command::Analyze { patient, cohort } => {
            let store = open()?;
            match (patient, cohort) {
                (Some(p), false) => {
                    let points = telerehab_service::timeseries(&store, &p)?;
                    match format {
                        Format::Json => print_json(&points),
                        Format::Csv => out!("{}", timeseries_csv(&points)),
                    }
                }
                (None, true) => {
                    let points = telerehab_service::cohort(&store)?;
                    match format {
                        Format::Json => print_json(&points),
                        Format::Csv => {
                            outln!("ordinal,mean_exercise_rating,count");
                            for p in points {
                                outln!("{},{},{}", p.ordinal, p.mean_exercise_rating, p.count);
                            }
                        }
                    }
                }
                _ => return Err(CliError::Usage("give --patient or --cohort".into())),
            }
        }
        Command::SimulateNet(args) => {
            let scenario = match &args.scenario {
                Some(p) => read_json::<Scenario>(p)?,
                None => Scenario::standard(
                    NetworkModel {
                        bandwidth: args.bandwidth,
                        delay: args.delay,
                        jitter: args.jitter,
                        loss: args.loss,
                        seed: cli.seed,
                    },
                    args.duration,
                ),
            };
            let out = scenario.run().map_err(domain)?;
            if let Some(p) = args.events {
                write(&p, &ndjson(&out.events))?;
            }
            match format {
                Format::Json => print_json(&json!({
                    "connected_at": out.connected_at,
                    "handshake_messages": out.handshake_messages,
                    "qos": out.qos,
                })),
                Format::Csv => out!("{}", out.qos.to_csv()),
            }
        }
        Command::Serve { addr } => {
            let state = AppState {
                store: open()?,
                token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            };
            if state.token.is_none() {
                eprintln!("warning: {TOKEN_ENV} is not set; the API is open");
            }
            let rt = tokio::runtime::Runtime::new().map_err(domain)?;
            eprintln!("listening on http://{addr}/v1");
            rt.block_on(telerehab_service::serve(addr, state)).map_err(domain)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
