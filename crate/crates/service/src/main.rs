use std::fs;
use std::io::{self, BufRead, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use clicksim_core::analysis::analyze;
use clicksim_core::click::{lagged_rms_error, render_click, ClickEngine};
use clicksim_core::device::{run_isolation, PressProfile, Scenario, DEFAULT_SENSOR_LAG_S};
use clicksim_core::protocol::{Experiment, Prompt, Response, ResponseKind};
use clicksim_core::session::{session_id, simulate_study, SessionMode, SessionRecord, SIMULATED_PREFIX};
use clicksim_core::signal::{StimulusParams, DEFAULT_AMPLITUDE_PP_MN};
use clicksim_core::subject::{default_population, Answer, Percept, SubjectModel};
use clicksim_service::store::{load_session, save_session, session_files, session_path, DEFAULT_OPERATOR};
use clicksim_service::{artifacts, serve, ServeConfig, DATA_DIR_ENV, DEFAULT_DATA_DIR};

type Error = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser)]
#[command(name = "clicksim", version, about = "Electroadhesive button-click simulator and experiment engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one click on the simulated device and write the trace as CSV.
    Simulate(SimulateArgs),
    /// Run the two-finger localization scenario and report envelopes.
    Isolate(IsolateArgs),
    /// Run the two-section experiment with simulated subjects or a live operator.
    Run(RunArgs),
    /// Analyze session files and write tables and figures.
    Analyze(AnalyzeArgs),
    /// Start the HTTP/WebSocket service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Duty cycle in percent.
    #[arg(long, default_value_t = 25.0)]
    duty: f64,
    /// Stimulus duration in ms.
    #[arg(long, default_value_t = 160.0)]
    duration: f64,
    /// Peak-to-peak lateral force in mN.
    #[arg(long, default_value_t = DEFAULT_AMPLITUDE_PP_MN)]
    amplitude: f64,
    /// Press profile JSON; the default is a single 900 mN press.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Sensor-noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep every n-th simulation sample.
    #[arg(long, default_value_t = 10)]
    decimate: usize,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IsolateArgs {
    /// Scenario JSON; the default is the two-finger isolation layout.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    settle: f64,
    #[arg(long, default_value_t = 2.0)]
    measure: f64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["simulated", "live"])))]
struct RunArgs {
    #[arg(long)]
    simulated: bool,
    #[arg(long)]
    live: bool,
    /// Study seed (simulated) or session seed (live).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for session files.
    #[arg(long, env = DATA_DIR_ENV, default_value = DEFAULT_DATA_DIR)]
    out: PathBuf,
    /// Roster subject ids to simulate, comma separated; all by default.
    #[arg(long, value_delimiter = ',', conflicts_with = "live")]
    subjects: Vec<String>,
    /// Roster JSON (array of subject models) replacing the built-in roster.
    #[arg(long, conflicts_with = "live")]
    roster: Option<PathBuf>,
    /// Live subject label.
    #[arg(long, required_if_eq("live", "true"))]
    label: Option<String>,
    /// Name recorded as the responder of live answers.
    #[arg(long, default_value = DEFAULT_OPERATOR)]
    responder: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Session files or directories holding them.
    #[arg(required = true)]
    sessions: Vec<PathBuf>,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
    /// Also write SVG figures.
    #[arg(long)]
    figures: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, env = DATA_DIR_ENV, default_value = DEFAULT_DATA_DIR)]
    data_dir: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,clicksim_service=info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Isolate(a) => isolate(a),
        Command::Run(a) if a.simulated => run_simulated(a),
        Command::Run(a) => run_live(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn simulate(a: SimulateArgs) -> Result<(), Error> {
    let params = StimulusParams::new(a.duty, a.duration, a.amplitude)?;
    let profile: PressProfile = match &a.profile {
        Some(p) => read_json(p)?,
        None => PressProfile::default(),
    };
    let mut scenario = Scenario::single_finger();
    scenario.device.seed = a.seed;
    let mut device = scenario.build()?;
    let finger = scenario.fingers[0].id.clone();
    let mut engine = ClickEngine::new(params, finger.clone());
    let render = render_click(&mut device, &mut engine, &finger, &profile)?;
    match &a.out {
        Some(path) => {
            let mut buf = Vec::new();
            render.trace.write_csv(&mut buf, a.decimate)?;
            clicksim_service::store::write_atomic(path, &buf)?;
        }
        None => render.trace.write_csv(io::stdout().lock(), a.decimate)?,
    }
    eprintln!("triggers: {}", render.triggers.len());
    for t in &render.triggers {
        eprintln!(
            "  at {:.5} s, lateral RMS error after {} ms lag: {:.2} % of peak-to-peak",
            t.t_s,
            DEFAULT_SENSOR_LAG_S * 1e3,
            100.0 * lagged_rms_error(&render.trace, t, DEFAULT_SENSOR_LAG_S)
        );
    }
    Ok(())
}

fn isolate(a: IsolateArgs) -> Result<(), Error> {
    let scenario: Scenario = match &a.scenario {
        Some(p) => read_json(p)?,
        None => Scenario::isolation(),
    };
    let r = run_isolation(&scenario, a.settle, a.measure)?;
    let beat = clicksim_core::signal::beat_frequency(&scenario.drive);
    let carrier = scenario.drive.piezo_freq_hz();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
        return Ok(());
    }
    println!("finger      state       {beat:>6.1} Hz envelope (um)  {carrier:>7.0} Hz envelope (um)");
    println!(
        "{:<11} energized   {:>24.3}  {:>25.5}",
        r.energized_finger, r.energized_beat_um, r.energized_carrier_um
    );
    println!(
        "{:<11} isolated    {:>24.3}  {:>25.5}",
        r.isolated_finger, r.isolated_beat_um, r.isolated_carrier_um
    );
    println!("isolation ratio: {:.1} dB", r.isolation_db);
    Ok(())
}

fn run_simulated(a: RunArgs) -> Result<(), Error> {
    let mut roster: Vec<SubjectModel> = match &a.roster {
        Some(p) => read_json(p)?,
        None => default_population(),
    };
    if !a.subjects.is_empty() {
        for id in &a.subjects {
            if !roster.iter().any(|s| &s.id == id) {
                return Err(format!("unknown subject {id:?}").into());
            }
        }
        roster.retain(|s| a.subjects.contains(&s.id));
    }
    for s in &roster {
        s.validate()?;
    }
    fs::create_dir_all(&a.out)?;
    for record in simulate_study(&roster, a.seed)? {
        let path = save_session(&a.out, &record)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn parse_judgment(line: &str) -> Option<Response> {
    let words: Vec<String> = line.split([' ', ',', '/']).filter(|w| !w.is_empty()).map(str::to_lowercase).collect();
    let [a, p] = words.as_slice() else { return None };
    let acceptable = match a.as_str() {
        "y" | "yes" => Answer::Yes,
        "n" | "no" => Answer::No,
        _ => return None,
    };
    let percept = match p.as_str() {
        "p" | "pulse" => Percept::Pulse,
        "o" | "osc" | "oscillation" => Percept::Oscillation,
        _ => return None,
    };
    Some(Response::Judgment { acceptable, percept })
}

fn describe(p: &Prompt) -> String {
    let place = match (p.section, p.block, p.round) {
        (1, Some(b), _) => format!("section 1 block {}", b + 1),
        (_, _, Some(r)) => format!("section 2 round {r}"),
        _ => format!("section {}", p.section),
    };
    let ask = match p.expects {
        ResponseKind::Judgment => "answer: y|n p|o",
        ResponseKind::Rating => "rating 0-7",
    };
    format!(
        "trial {} ({place}): duty {}%, {} ms; {ask}, q to stop",
        p.trial_index + 1,
        p.duty_pct(),
        p.duration_ms()
    )
}

fn run_live(a: RunArgs) -> Result<(), Error> {
    let label = a.label.clone().ok_or("--live needs --label")?;
    if a.responder.is_empty() || a.responder.starts_with(SIMULATED_PREFIX) {
        return Err(format!("responder {:?} is not a live responder", a.responder).into());
    }
    fs::create_dir_all(&a.out)?;
    let id = session_id(&label, a.seed);
    let path = session_path(&a.out, &id);
    let mut record = if path.exists() {
        let r = load_session(&path)?;
        if r.mode != SessionMode::Live {
            return Err(format!("{} is not a live session", path.display()).into());
        }
        eprintln!("resuming {id} at trial {}", r.status.cursor + 1);
        r
    } else {
        let r = SessionRecord::new(id, SessionMode::Live, label, None, &Experiment::new(a.seed));
        save_session(&a.out, &r)?;
        r
    };
    record.resume();
    let mut experiment = record.experiment()?;
    let start = std::time::Instant::now();
    let base = experiment.trials().last().map_or(0, |t| t.timestamp_ms);
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    let mut out = io::stdout().lock();
    while let Some(prompt) = experiment.next_prompt() {
        writeln!(out, "{}", describe(&prompt))?;
        out.flush()?;
        let Some(line) = lines.next().transpose()? else {
            record.mark_aborted();
            save_session(&a.out, &record)?;
            writeln!(out, "input closed; session saved at trial {}", prompt.trial_index + 1)?;
            return Ok(());
        };
        let line = line.trim();
        if line.eq_ignore_ascii_case("q") {
            record.mark_aborted();
            save_session(&a.out, &record)?;
            writeln!(out, "stopped; session saved at trial {}", prompt.trial_index + 1)?;
            return Ok(());
        }
        let response = match prompt.expects {
            ResponseKind::Judgment => parse_judgment(line),
            ResponseKind::Rating => line.parse::<u8>().ok().map(|rating| Response::Rating { rating }),
        };
        let Some(response) = response else {
            writeln!(out, "not understood: {line:?}")?;
            continue;
        };
        let ts = base + start.elapsed().as_millis() as u64;
        if let Err(e) = experiment.submit(prompt.trial_index, response, ts, &a.responder) {
            writeln!(out, "rejected: {e}")?;
            continue;
        }
        record.update(&experiment);
        save_session(&a.out, &record)?;
    }
    writeln!(out, "session complete: {}", path.display())?;
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<(), Error> {
    let files = session_files(&a.sessions)?;
    if files.is_empty() {
        return Err("no session files found".into());
    }
    let sessions = files.iter().map(|f| load_session(f)).collect::<Result<Vec<_>, _>>()?;
    let report = analyze(&sessions)?;
    for path in artifacts::write_all(&report, &a.out, a.figures)? {
        eprintln!("wrote {}", path.display());
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<(), Error> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(
        ServeConfig {
            addr: SocketAddr::new(a.host, a.port),
            data_dir: a.data_dir,
        },
        |addr| {
            println!("listening on http://{addr}");
            let _ = io::stdout().flush();
        },
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
    ))
}
