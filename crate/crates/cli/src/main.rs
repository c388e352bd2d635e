use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualstream_core::clients::ClientsConfig;
use dualstream_core::curation::{
    curate, load_manifest, persist_manifest, style_templates, verify_quadruplet, CandidateThresholds, MediaStore,
    Rejection,
};
use dualstream_core::engine::{
    sample, Ablations, DiTConfig, DualStreamModel, FeedbackConfig, GuidanceClients, SampleRequest,
};
use dualstream_core::guidance::STYLE_PROMPT;
use dualstream_core::selftest::{run_selftest, toy_inputs};
use dualstream_core::tensor_file::{read_grid, write_grid};
use dualstream_core::{Error, GridDims, LatentGrid, Role};

#[derive(Parser)]
#[command(name = "dualstream", version, about = "Dual-stream video object insertion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Insert a reference object into a source video.
    Sample(SampleArgs),
    /// Build and verify quadruplets from a directory of raw videos.
    Curate(CurateArgs),
    /// Check a manifest and, optionally, re-run the verifier agents.
    Verify(VerifyArgs),
    /// Run the invariant checks and print a numeric report.
    Selftest(SelftestArgs),
    /// Write a random source video and reference image.
    ToyInputs(ToyInputsArgs),
    /// Write random raw videos for curation.
    ToyVideos(ToyVideosArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StreamMode {
    Dual,
    Single,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 32)]
    guidance_dim: usize,
    #[arg(long, default_value_t = 48)]
    vlm_dim: usize,
    /// Seed for weight initialization.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    p_insert: String,
    #[arg(long, default_value = "")]
    p_desc: String,
    /// Style-harmonization instruction; defaults to the shipped prompt.
    #[arg(long)]
    p_style: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 30)]
    t_start: usize,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    feedback: OnOff,
    #[arg(long, default_value_t = 1)]
    feedback_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// single_stream, fulldit_rope or feedback_off; repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    #[arg(long, value_enum, default_value_t = StreamMode::Dual)]
    stream: StreamMode,
    /// TOML file choosing a backend per client role.
    #[arg(long)]
    clients: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clients: Option<PathBuf>,
    #[arg(long, default_value_t = 0.35)]
    max_area: f64,
    #[arg(long, default_value_t = 0.9)]
    min_visibility: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Ask the agents again and compare with the stored records.
    #[arg(long)]
    recheck: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clients: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long)]
    ablate: Vec<String>,
    /// One JSON object per property.
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ToyInputsArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    ref_height: usize,
    #[arg(long, default_value_t = 2)]
    ref_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ToyVideosArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes and their exit codes.
enum Failure {
    Property(String),
    Input(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Property(_) => 1,
            Failure::Input(_) => 2,
            Failure::Backend(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Property(m) | Failure::Input(m) | Failure::Backend(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_backend() {
            Failure::Backend(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn ablations(names: &[String]) -> Result<Ablations, Failure> {
    let mut a = Ablations::default();
    for n in names {
        a.enable(n)?;
    }
    Ok(a)
}

fn clients_config(path: Option<&Path>, seed: u64) -> Result<ClientsConfig, Failure> {
    Ok(match path {
        Some(p) => ClientsConfig::load(p)?,
        None => ClientsConfig::all_stub(seed),
    })
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| Failure::Input(format!("cannot create {}: {e}", path.display())))
}

fn cmd_sample(args: SampleArgs) -> CmdResult {
    let mut abl = ablations(&args.ablate)?;
    if args.stream == StreamMode::Single {
        abl.single_stream = true;
    }
    let source = read_grid(&args.source)?.with_role(Role::SourceVideo)?;
    let reference = read_grid(&args.reference)?.with_role(Role::RawRefImage)?;
    let m = &args.model;
    let cfg = DiTConfig {
        depth: m.depth,
        model_dim: m.model_dim,
        heads: m.heads,
        head_dim: m.head_dim,
        guidance_dim: m.guidance_dim,
        vlm_dim: m.vlm_dim,
        latent_channels: source.channels(),
        seed: m.model_seed,
        ablations: abl,
        ..DiTConfig::default()
    };
    let model = DualStreamModel::new(cfg.clone())?;
    let clients_cfg = clients_config(args.clients.as_deref(), args.seed)?;
    let vlm = clients_cfg.vlm(cfg.vlm_dim, args.seed)?;
    let motion = clients_cfg.motion(cfg.guidance_dim, args.seed)?;
    let feedback = FeedbackConfig {
        t_start: args.t_start,
        enabled: args.feedback == OnOff::On,
        every: args.feedback_every,
    };
    let req = SampleRequest {
        source_video: &source,
        reference: &reference,
        insert_prompt: &args.p_insert,
        description: &args.p_desc,
        style_prompt: args.p_style.as_deref().unwrap_or(STYLE_PROMPT),
        steps: args.steps,
        seed: args.seed,
    };
    create_dir(&args.out_dir)?;
    let trace_path = args.out_dir.join("trace.txt");
    let clients = GuidanceClients {
        vlm: &vlm,
        motion: &motion,
    };
    match sample(&model, &req, &feedback, clients) {
        Ok(out) => {
            write_grid(args.out_dir.join("video.dsi"), &out.video)?;
            write_grid(args.out_dir.join("image.dsi"), &out.image)?;
            write_file(&trace_path, &out.trace.to_text())?;
            println!(
                "steps={} gated={} feedback_calls={} out={}",
                out.trace.steps.len(),
                out.trace.gated_steps(),
                out.trace.feedback_calls(),
                args.out_dir.display()
            );
            Ok(())
        }
        Err(failure) => {
            write_file(&trace_path, &failure.trace.to_text())?;
            Err(failure.error.into())
        }
    }
}

fn read_inputs(dir: &Path) -> Result<Vec<(String, LatentGrid)>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dsi"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Input(format!("no .dsi files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((id, read_grid(p)?))
        })
        .collect()
}

fn cmd_curate(args: CurateArgs) -> CmdResult {
    let inputs = read_inputs(&args.input_dir)?;
    let clients = clients_config(args.clients.as_deref(), args.seed)?.curation(args.seed)?;
    let thresholds = CandidateThresholds {
        max_area: args.max_area,
        min_visibility: args.min_visibility,
    };
    create_dir(&args.out_dir)?;
    let store = MediaStore::new(&args.out_dir);
    let templates = style_templates();
    let report = curate(&inputs, &clients, &templates, thresholds, args.seed, &store)?;
    for (id, reason) in &report.rejected {
        let why = match reason {
            Rejection::NoCandidate => "no admissible candidate".to_string(),
            Rejection::Verification(rec) => {
                let f: Vec<String> = rec
                    .failures()
                    .iter()
                    .map(|(agent, c)| format!("agent_{}:{c}", ["a", "b"][*agent]))
                    .collect();
                format!("verification failed ({})", f.join(", "))
            }
        };
        eprintln!("rejected {id}: {why}");
        let dir = args.out_dir.join(id);
        if dir.is_dir() {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
    let manifest = args.out_dir.join("manifest.txt");
    persist_manifest(&report.accepted, &manifest)?;
    println!(
        "accepted={} rejected={} manifest={}",
        report.accepted.len(),
        report.rejected.len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    let quads = load_manifest(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let agents = if args.recheck {
        Some(clients_config(args.clients.as_deref(), args.seed)?.curation(args.seed)?)
    } else {
        None
    };
    let (mut accepted, mut rejected, mut unverified, mut disagree) = (0, 0, 0, 0);
    for q in &quads {
        q.load_media_in(base)?;
        match q.verification {
            None => unverified += 1,
            Some(r) if r.accepted() => accepted += 1,
            Some(_) => rejected += 1,
        }
        if let Some(c) = &agents {
            let mut fresh = q.clone();
            fresh.verification = None;
            let rec = verify_quadruplet(&mut fresh, c.agent_a.as_ref(), c.agent_b.as_ref())?;
            if q.verification != Some(rec) {
                disagree += 1;
                eprintln!("{}: stored record differs from recheck", q.id);
            }
        }
    }
    println!(
        "records={} accepted={accepted} rejected={rejected} unverified={unverified}{}",
        quads.len(),
        if args.recheck {
            format!(" disagreements={disagree}")
        } else {
            String::new()
        }
    );
    if disagree > 0 {
        return Err(Failure::Property(format!(
            "{disagree} records disagree with a fresh verification"
        )));
    }
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> CmdResult {
    let abl = ablations(&args.ablate)?;
    let reports = run_selftest(abl, args.seed)?;
    for r in &reports {
        if args.json {
            let obj = serde_json::json!({
                "name": r.name,
                "pass": r.pass,
                "measured": r.measured,
                "threshold": r.threshold,
                "expected_violation": r.expected_violation,
            });
            println!("{obj}");
        } else {
            println!("{r}");
        }
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.acceptable()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Property(format!("failed properties: {}", failed.join(", "))))
    }
}

fn cmd_toy_inputs(args: ToyInputsArgs) -> CmdResult {
    let (video, reference) = toy_inputs(
        GridDims::new(args.frames, args.height, args.width),
        GridDims::new(1, args.ref_height, args.ref_width),
        args.channels,
        args.seed,
    )?;
    create_dir(&args.out_dir)?;
    write_grid(args.out_dir.join("source.dsi"), &video)?;
    write_grid(args.out_dir.join("reference.dsi"), &reference)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn cmd_toy_videos(args: ToyVideosArgs) -> CmdResult {
    create_dir(&args.out_dir)?;
    let dims = GridDims::new(args.frames, args.height, args.width);
    for i in 0..args.count {
        let (video, _) = toy_inputs(
            dims,
            GridDims::new(1, 1, 1),
            args.channels,
            args.seed.wrapping_add(i as u64),
        )?;
        write_grid(args.out_dir.join(format!("raw_{i:03}.dsi")), &video)?;
    }
    println!("wrote {} videos to {}", args.count, args.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::Curate(a) => cmd_curate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::ToyInputs(a) => cmd_toy_inputs(a),
        Command::ToyVideos(a) => cmd_toy_videos(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
