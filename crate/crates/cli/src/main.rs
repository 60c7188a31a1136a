//! `plotnpolish`: plan a story, render it, and edit the frames from the shell.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 schema, 4 backend,
//! 5 replay divergence.

use std::collections::BTreeMap;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};

use clap::{Args, Parser, Subcommand};
use plotnpolish_core::backend::{open_backend, BackendKind, PersonalizationSource};
use plotnpolish_core::grid::GridLayout;
use plotnpolish_core::imaging;
use plotnpolish_core::pipeline::{
    load_project, save_project, EditOutcome, EditRequest, MaskSource, Pipeline, PipelineError, Project,
    ProjectConfig, DEBUG_GRIDS_ENV,
};
use plotnpolish_core::planner::http::ChatCompletionsClient;
use plotnpolish_core::planner::{generate_plan, refine_plan, FnLlm, LlmClient, PlannerConfig, PlannerError};
use plotnpolish_core::schema::{parse_plan, serialize_plan, ParseMode, StoryIdea, StoryPlan};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "plotnpolish", version, about = "Plan, render and edit illustrated stories")]
struct Cli {
    /// Print results, and errors, as JSON.
    #[arg(long, global = true)]
    json: bool,

    /// Diffusion backend: mock, latent-diffusion-v1, latent-diffusion-xl or
    /// flow-transformer. Existing projects must match.
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a story plan from an idea, or refine an existing one.
    Plan(PlanArgs),
    /// Render one frame per page of the plan.
    Visualize(VisualizeArgs),
    /// Edit one character across frames.
    Edit(EditArgs),
    /// Restyle whole frames.
    Style(StyleArgs),
    /// Edit a character toward a reference image or personalization weights.
    Personalize(PersonalizeArgs),
    /// Start a project from existing images.
    Import(ImportArgs),
    /// Recompute the history and check it against the stored frames.
    Replay(ProjectArg),
    Undo(ProjectArg),
    Redo(ProjectArg),
    /// List the edit history.
    History(ProjectArg),
    /// Copy the current frames out as page_NN.png.
    Export(ExportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ProjectArg {
    #[arg(long)]
    project: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, required_unless_present = "refine")]
    idea: Option<String>,
    #[arg(long, default_value_t = 6)]
    pages: usize,
    #[arg(long, default_value = "children's picture book")]
    story_style: String,
    #[arg(long, default_value = "storybook illustration")]
    visual_style: String,
    /// Feedback on the plan already stored in --project.
    #[arg(long, requires = "project", conflicts_with = "idea")]
    refine: Option<String>,
    /// Save the plan (and conversation) into this project directory.
    #[arg(long)]
    project: Option<PathBuf>,
    /// Answer every LLM call with the contents of this file.
    #[arg(long)]
    stub_llm: Option<PathBuf>,
    #[arg(long)]
    llm_base_url: Option<String>,
    #[arg(long, default_value = "gpt-4")]
    model: String,
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    /// Keep raw LLM requests and responses in this directory.
    #[arg(long)]
    llm_log_dir: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Square working resolution in pixels.
    #[arg(long)]
    resolution: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    /// Grid shape as ROWSxCOLS.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<GridLayout>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    project: PathBuf,
    /// Plan file; defaults to the plan stored in the project.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Follow up with one consistency edit per character.
    #[arg(long)]
    consistency_pass: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    project: PathBuf,
    /// 1-based pages, e.g. 2,4. All pages when omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    concept: String,
    #[arg(long)]
    prompt: String,
    #[arg(long, value_parser = parse_mask_source)]
    mask_source: Option<MaskSource>,
    /// Hand-drawn mask for a page, as PAGE=FILE.png. Implies --mask-source user_supplied.
    #[arg(long = "mask", value_parser = parse_page_file)]
    masks: Vec<(usize, PathBuf)>,
    /// Pick a specific detection on a page, as PAGE=INSTANCE.
    #[arg(long = "instance", value_parser = parse_page_instance)]
    instances: Vec<(usize, usize)>,
}

#[derive(Args)]
struct StyleArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    prompt: String,
}

#[derive(Args)]
struct PersonalizeArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    concept: String,
    #[arg(long)]
    prompt: String,
    #[arg(long, conflicts_with = "weights", required_unless_present = "weights")]
    reference: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    project: PathBuf,
    /// Plan whose pages caption the imported images.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    project: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "plotnpolish-data")]
    root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Resolution of the mock backend.
    #[arg(long, default_value_t = 512)]
    resolution: u32,
    #[arg(long)]
    llm_base_url: Option<String>,
}

fn parse_layout(s: &str) -> Result<GridLayout, String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    let r = r.trim().parse().map_err(|_| format!("bad row count {r:?}"))?;
    let c = c.trim().parse().map_err(|_| format!("bad column count {c:?}"))?;
    GridLayout::new(r, c).map_err(|e| e.to_string())
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse().map_err(|e: plotnpolish_core::backend::BackendError| e.to_string())
}

fn parse_mask_source(s: &str) -> Result<MaskSource, String> {
    serde_json::from_value(json!(s.replace('-', "_")))
        .map_err(|_| "expected segmentation, attention or user_supplied".to_string())
}

fn parse_page_file(s: &str) -> Result<(usize, PathBuf), String> {
    let (page, file) = s.split_once('=').ok_or("expected PAGE=FILE")?;
    Ok((page.parse().map_err(|_| format!("bad page {page:?}"))?, file.into()))
}

fn parse_page_instance(s: &str) -> Result<(usize, usize), String> {
    let (page, id) = s.split_once('=').ok_or("expected PAGE=INSTANCE")?;
    Ok((
        page.parse().map_err(|_| format!("bad page {page:?}"))?,
        id.parse().map_err(|_| format!("bad instance {id:?}"))?,
    ))
}

struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { exit: 2, code: "usage", message: message.into() }
    }

    fn other(message: impl Into<String>) -> Self {
        Failure { exit: 1, code: "error", message: message.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let (exit, code) = match &e {
            PipelineError::Schema(_) => (3, "schema_error"),
            PipelineError::Backend(_) | PipelineError::Perception(_) | PipelineError::Grid(_) => (4, "backend_error"),
            PipelineError::ReplayDivergence { .. } => (5, "replay_divergence"),
            PipelineError::InvalidRequest(_)
            | PipelineError::NothingTo(_)
            | PipelineError::NoFrames
            | PipelineError::EmptyInput => (2, "invalid_request"),
            _ => (1, "error"),
        };
        Failure { exit, code, message: e.to_string() }
    }
}

impl From<PlannerError> for Failure {
    fn from(e: PlannerError) -> Self {
        let (exit, code) = match &e {
            PlannerError::Validation(_) => (2, "invalid_request"),
            PlannerError::PlanRejected { .. } => (3, "plan_rejected"),
            PlannerError::LlmUnavailable(_) => (4, "llm_unavailable"),
        };
        Failure { exit, code, message: e.to_string() }
    }
}

impl From<plotnpolish_core::schema::SchemaError> for Failure {
    fn from(e: plotnpolish_core::schema::SchemaError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<plotnpolish_core::backend::BackendError> for Failure {
    fn from(e: plotnpolish_core::backend::BackendError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<plotnpolish_core::imaging::ImageIoError> for Failure {
    fn from(e: plotnpolish_core::imaging::ImageIoError) -> Self {
        Failure::other(e.to_string())
    }
}

type Outcome = Result<(Value, String), Failure>;

static REQUESTED_BACKEND: OnceLock<Option<BackendKind>> = OnceLock::new();

fn requested_backend() -> Option<BackendKind> {
    REQUESTED_BACKEND.get().copied().flatten()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_mode = cli.json;
    REQUESTED_BACKEND.set(cli.backend).expect("set once");
    // JSON mode keeps stderr machine-readable unless RUST_LOG asks otherwise.
    let default_filter = if json_mode { "off" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_filter.into()),
        )
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok((value, text)) => {
            let mut out = std::io::stdout().lock();
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = if json_mode {
                writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("output serializes"))
            } else if !text.is_empty() {
                writeln!(out, "{text}")
            } else {
                Ok(())
            };
            ExitCode::SUCCESS
        }
        Err(f) => {
            if json_mode {
                eprintln!("{}", json!({ "error": { "code": f.code, "message": f.message } }));
            } else {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.exit)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Plan(args) => plan(args),
        Command::Visualize(args) => visualize(args),
        Command::Edit(args) => edit(args),
        Command::Style(args) => style(args),
        Command::Personalize(args) => personalize(args),
        Command::Import(args) => import(args),
        Command::Replay(args) => replay(&args.project),
        Command::Undo(args) => step_history(&args.project, false),
        Command::Redo(args) => step_history(&args.project, true),
        Command::History(args) => history(&args.project),
        Command::Export(args) => export(args),
        Command::Serve(args) => serve(args),
    }
}

fn read_plan(path: &Path) -> Result<StoryPlan, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
    Ok(parse_plan(&text, ParseMode::Lenient)?)
}

fn open(dir: &Path) -> Result<Project, Failure> {
    if !dir.join("project.json").exists() {
        return Err(Failure::usage(format!("{} is not a project directory", dir.display())));
    }
    Ok(load_project(dir)?)
}

fn pipeline_for(config: &ProjectConfig, dir: &Path) -> Result<Pipeline, Failure> {
    if let Some(kind) = requested_backend() {
        if kind != config.backend.kind {
            return Err(Failure::usage(format!(
                "--backend {} does not match the project's backend {}",
                json!(kind).as_str().unwrap_or_default(),
                json!(config.backend.kind).as_str().unwrap_or_default()
            )));
        }
    }
    let pipeline = if config.backend.kind == BackendKind::Mock {
        let (w, h) = config.working_resolution;
        if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
            return Err(Failure::usage(format!("resolution {w}x{h} must be a positive multiple of 8")));
        }
        Pipeline::mock(w, h)
    } else {
        Pipeline::new(open_backend(&config.backend)?, plotnpolish_core::perception::Perception::oracle())
    };
    Ok(pipeline.with_debug_dir_from_env(dir.join("debug")))
}

fn apply_config(mut config: ProjectConfig, args: &ConfigArgs) -> Result<ProjectConfig, Failure> {
    if let Some(kind) = requested_backend() {
        config.backend.kind = kind;
    }
    if let Some(r) = args.resolution {
        config.working_resolution = (r, r);
    }
    if let Some(s) = args.steps {
        config.steps = s;
    }
    if let Some(l) = args.layout {
        config.layout = l;
    }
    config.validate()?;
    Ok(config)
}

fn llm_client(args: &PlanArgs) -> Result<Arc<dyn LlmClient>, Failure> {
    if let Some(path) = &args.stub_llm {
        let reply = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        return Ok(Arc::new(FnLlm(move |_: &[_]| Ok(reply.clone()))));
    }
    let mut client = ChatCompletionsClient::from_env(args.llm_base_url.as_deref())?;
    if let Some(dir) = &args.llm_log_dir {
        client = client.with_log_dir(dir);
    }
    Ok(Arc::new(client))
}

fn plan(args: PlanArgs) -> Outcome {
    let config = PlannerConfig {
        model_identifier: args.model.clone(),
        temperature: args.temperature,
        ..PlannerConfig::default()
    };
    let llm = llm_client(&args)?;
    let (outcome, mut project) = match (&args.refine, &args.idea) {
        (Some(feedback), _) => {
            let dir = args.project.as_deref().expect("clap requires --project with --refine");
            let project = open(dir)?;
            let conversation = project
                .conversation
                .clone()
                .ok_or_else(|| Failure::usage("this project's plan was not written by the planner"))?;
            (refine_plan(llm.as_ref(), &conversation, feedback, &config)?, Some(project))
        }
        (None, Some(idea)) => {
            let idea = StoryIdea::new(idea.clone(), args.pages, args.story_style.clone(), args.visual_style.clone())?;
            (generate_plan(llm.as_ref(), &idea, &config)?, None)
        }
        (None, None) => return Err(Failure::usage("give --idea or --refine")),
    };
    let text = serialize_plan(&outcome.plan);
    if let Some(dir) = &args.project {
        let mut p = project.take().unwrap_or_else(|| Project::new(None, ProjectConfig::default(), 0));
        p.plan = Some(outcome.plan.clone());
        p.conversation = Some(outcome.conversation);
        save_project(&p, dir)?;
    }
    let value = serde_json::from_str(&text).expect("serialized plan is JSON");
    Ok((value, text))
}

fn frame_listing(project: &Project, dir: &Path) -> (Vec<Value>, String) {
    let mut lines = Vec::new();
    let values = project
        .frames()
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join("frames").join(format!("{}.png", f.hash));
            lines.push(format!("page {:>2}  {}", i + 1, path.display()));
            json!({ "page": i + 1, "hash": f.hash, "path": path })
        })
        .collect();
    (values, lines.join("\n"))
}

fn visualize(args: VisualizeArgs) -> Outcome {
    let existing = if args.project.join("project.json").exists() { Some(open(&args.project)?) } else { None };
    let plan = match (&args.plan, existing.as_ref().and_then(|p| p.plan.clone())) {
        (Some(path), _) => read_plan(path)?,
        (None, Some(plan)) => plan,
        (None, None) => return Err(Failure::usage("no plan: pass --plan or run `plotnpolish plan --project` first")),
    };
    let base = existing.as_ref().map(|p| p.config.clone()).unwrap_or_default();
    let config = apply_config(base, &args.config)?;
    let seed = args.seed.or(existing.as_ref().map(|p| p.seed)).unwrap_or(0);
    let pipeline = pipeline_for(&config, &args.project)?;
    let mut project = pipeline.visualize(&plan, config, seed)?;
    project.conversation = existing.and_then(|p| p.conversation);
    let mut warnings = Vec::new();
    if args.consistency_pass {
        let out = pipeline.consistency_pass(&project, seed)?;
        warnings = out.warnings;
        project = out.project;
    }
    save_project(&project, &args.project)?;
    let (frames, listing) = frame_listing(&project, &args.project);
    let mut text = format!("rendered {} pages into {}\n{listing}", frames.len(), args.project.display());
    for w in &warnings {
        text.push_str(&format!("\nwarning: {w}"));
    }
    Ok((json!({ "project": args.project, "frames": frames, "warnings": warnings }), text))
}

fn finish_edit(dir: &Path, out: EditOutcome) -> Outcome {
    save_project(&out.project, dir)?;
    let pages: Vec<String> = out.changed_pages.iter().map(ToString::to_string).collect();
    let mut text = format!(
        "turn {}: changed pages {}",
        out.project.head,
        if pages.is_empty() { "none".to_string() } else { pages.join(", ") }
    );
    for w in &out.warnings {
        text.push_str(&format!("\nwarning: {w}"));
    }
    let (frames, _) = frame_listing(&out.project, dir);
    let value = json!({
        "turn": out.project.head,
        "changed_pages": out.changed_pages,
        "warnings": out.warnings,
        "mask_reads": out.mask_reads,
        "frames": frames,
    });
    Ok((value, text))
}

fn targeted(mut request: EditRequest, target: &TargetArgs) -> EditRequest {
    if let Some(frames) = &target.frames {
        request = request.with_frames(frames.clone());
    }
    if let Some(s) = target.strength {
        request = request.with_strength(s);
    }
    request
}

fn default_seed(project: &Project, target: &TargetArgs) -> u64 {
    target.seed.unwrap_or_else(|| project.seed.wrapping_add(project.head as u64 + 1))
}

fn edit(args: EditArgs) -> Outcome {
    let dir = &args.target.project;
    let mut project = open(dir)?;
    let mut request = targeted(EditRequest::local(args.concept, args.prompt), &args.target);
    if let Some(source) = args.mask_source {
        request = request.with_mask_source(source);
    }
    if !args.masks.is_empty() {
        request = request.with_mask_source(MaskSource::UserSupplied);
        let mut user_masks = BTreeMap::new();
        for (page, path) in &args.masks {
            let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let mask = imaging::decode_mask_png(&bytes, &path.display().to_string())?;
            user_masks.insert(*page, project.add_mask(mask));
        }
        request.user_masks = user_masks;
    }
    request.instance_overrides = args.instances.iter().copied().collect();
    let seed = default_seed(&project, &args.target);
    let out = pipeline_for(&project.config, dir)?.edit(&project, &request, seed)?;
    finish_edit(dir, out)
}

fn style(args: StyleArgs) -> Outcome {
    let dir = &args.target.project;
    let project = open(dir)?;
    let request = targeted(EditRequest::style(args.prompt), &args.target);
    let seed = default_seed(&project, &args.target);
    let out = pipeline_for(&project.config, dir)?.style(&project, &request, seed)?;
    finish_edit(dir, out)
}

fn personalize(args: PersonalizeArgs) -> Outcome {
    let dir = &args.target.project;
    let project = open(dir)?;
    let request = targeted(EditRequest::personalized(args.concept, args.prompt), &args.target);
    let source = match (args.reference, args.weights) {
        (Some(path), _) => PersonalizationSource::ReferenceImagePath(path),
        (None, Some(path)) => PersonalizationSource::Weights(path),
        (None, None) => return Err(Failure::usage("give --reference or --weights")),
    };
    let seed = default_seed(&project, &args.target);
    let out = pipeline_for(&project.config, dir)?.personalize(&project, &request, &source, seed)?;
    finish_edit(dir, out)
}

fn import(args: ImportArgs) -> Outcome {
    let plan = args.plan.as_deref().map(read_plan).transpose()?;
    let config = apply_config(ProjectConfig::default(), &args.config)?;
    let project = pipeline_for(&config, &args.project)?.import_paths(&args.images, plan, config, args.seed)?;
    save_project(&project, &args.project)?;
    let (frames, listing) = frame_listing(&project, &args.project);
    let text = format!("imported {} images into {}\n{listing}", frames.len(), args.project.display());
    Ok((json!({ "project": args.project, "frames": frames }), text))
}

fn replay(dir: &Path) -> Outcome {
    let project = open(dir)?;
    let frames = pipeline_for(&project.config, dir)?.replay(&project)?;
    let text = format!("replay matches: {} turns, {} frames", project.head, frames.len());
    Ok((json!({ "consistent": true, "turns": project.head, "frames": frames.hashes() }), text))
}

fn step_history(dir: &Path, forward: bool) -> Outcome {
    let project = open(dir)?;
    let next = if forward { project.redo()? } else { project.undo()? };
    save_project(&next, dir)?;
    let text = format!("at turn {} of {}", next.head, next.turns.len());
    Ok((json!({ "head": next.head, "turns": next.turns.len(), "frames": next.frames().hashes() }), text))
}

fn history(dir: &Path) -> Outcome {
    let project = open(dir)?;
    let mut lines = vec![format!("baseline: {} frames", project.baseline.len())];
    let mut turns = Vec::new();
    for t in &project.turns {
        let marker = if t.index <= project.head { ' ' } else { '~' };
        let target = t.request.concept.as_deref().unwrap_or("whole frame");
        let kind = serde_json::to_value(t.request.kind).expect("kind serializes");
        lines.push(format!(
            "{marker}{:>3}  {:<16} {:<14} {:?}  pages {:?}",
            t.index,
            kind.as_str().unwrap_or_default(),
            target,
            t.request.edit_prompt,
            t.changed_pages
        ));
        turns.push(json!({
            "index": t.index,
            "active": t.index <= project.head,
            "request": t.request,
            "seed": t.seed,
            "strength": t.strength,
            "changed_pages": t.changed_pages,
            "warnings": t.warnings,
        }));
    }
    Ok((json!({ "head": project.head, "turns": turns }), lines.join("\n")))
}

fn export(args: ExportArgs) -> Outcome {
    let project = open(&args.project)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::other(format!("{}: {e}", args.out.display())))?;
    let mut written = Vec::new();
    for (i, image) in project.current_images()?.iter().enumerate() {
        let path = args.out.join(format!("page_{:02}.png", i + 1));
        imaging::save_png(image, &path)?;
        written.push(path);
    }
    let text = written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n");
    Ok((json!({ "written": written }), text))
}

fn serve(args: ServeArgs) -> Outcome {
    use plotnpolish_server::{AppState, ServerConfig};

    if args.resolution == 0 || !args.resolution.is_multiple_of(8) {
        return Err(Failure::usage("--resolution must be a positive multiple of 8"));
    }
    let llm: Option<Arc<dyn LlmClient>> = match ChatCompletionsClient::from_env(args.llm_base_url.as_deref()) {
        Ok(client) => Some(Arc::new(client)),
        Err(e) => {
            eprintln!("planning disabled: {e}");
            None
        }
    };
    let mut config = ServerConfig::new(&args.root);
    config.workers = args.workers;
    config.project_defaults.working_resolution = (args.resolution, args.resolution);
    let pipeline = Pipeline::mock(args.resolution, args.resolution)
        .with_debug_dir_from_env(args.root.join("debug"));
    if std::env::var(DEBUG_GRIDS_ENV).as_deref() == Ok("1") {
        eprintln!("grid dumps go to {}", args.root.join("debug").display());
    }
    let state = AppState::open(config, pipeline, llm).map_err(|e| Failure::other(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::other(e.to_string()))?;
    runtime
        .block_on(async {
            let listener = tokio::net::TcpListener::bind(&args.addr).await?;
            eprintln!("listening on http://{}", listener.local_addr()?);
            plotnpolish_server::serve(listener, state).await
        })
        .map_err(|e| Failure::other(e.to_string()))?;
    Ok((Value::Null, String::new()))
}
