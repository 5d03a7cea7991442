use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use splatscope::config::{RunConfig, KEYS};
use splatscope::gateway::{sha256_hex, Gateway};
use splatscope::grounding::{distill_gt, read_gt_points, InstanceLabeling};
use splatscope::pipeline::{gateway_from_config, load_questions, AnswerRun, Pipeline};
use splatscope::render::render_with;
use splatscope::scene::load_scene;
use splatscope::sidecar::attach_semantics;
use splatscope::{Error, Result};

/// Question-driven view selection and referring segmentation over Gaussian splatting scenes.
#[derive(Parser)]
#[command(name = "splatscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a semantic sidecar against a scene and summarise it.
    BuildSidecar(Common),
    /// Evidence, activation, clustering and initial views; writes scores and initial renders.
    SelectViews {
        #[command(flatten)]
        common: Common,
        question: String,
    },
    /// Full question answering; writes the answer record, candidate renders and the ledger.
    Answer {
        #[command(flatten)]
        common: Common,
        question: String,
    },
    /// Answer, then frustum-filter the activated Gaussians in the answer view.
    Segment {
        #[command(flatten)]
        common: Common,
        question: String,
        /// Ground-truth instance id (needs `gt_labels`); adds IoU to the result.
        #[arg(long)]
        gt_instance: Option<u32>,
    },
    /// Run a JSON-lines questions file and write an aggregate report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        questions: PathBuf,
    },
    /// Label Gaussians from an instance-labelled point cloud (PLY with x, y, z, instance).
    DistillGt {
        #[command(flatten)]
        common: Common,
        points: PathBuf,
    },
    /// Write the bundled synthetic fixture (scene, cameras, categories, mock script) and a config for it.
    Fixture { dir: PathBuf },
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (`key=value`); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Exact run directory instead of a timestamped one under `out_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// More logging (`-v` info, `-vv` debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(flatten)]
    flags: ConfigFlags,
}

/// One flag per configuration key; flags override `--set` and the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    cameras: Option<String>,
    #[arg(long)]
    sidecar: Option<String>,
    #[arg(long)]
    text_embeddings: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    prompts: Option<String>,
    #[arg(long)]
    mock_script: Option<String>,
    #[arg(long)]
    gt_labels: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    scene_name: Option<String>,
    /// `category` or `similarity`.
    #[arg(long)]
    mode: Option<String>,
    /// `sum` or `per_category`.
    #[arg(long)]
    similarity_rule: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    min_cluster_size: Option<String>,
    #[arg(long)]
    min_samples: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    visibility_threshold: Option<String>,
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    dolly: Option<String>,
    #[arg(long)]
    focal_zoom: Option<String>,
    /// `visibility` or `volume`.
    #[arg(long)]
    score_mode: Option<String>,
    #[arg(long)]
    max_calls: Option<String>,
    #[arg(long)]
    max_tokens: Option<String>,
    #[arg(long)]
    max_retries: Option<String>,
    #[arg(long)]
    max_in_flight: Option<String>,
    #[arg(long)]
    max_images: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> [(&'static str, &Option<String>); 27] {
        [
            ("scene", &self.scene),
            ("cameras", &self.cameras),
            ("sidecar", &self.sidecar),
            ("text_embeddings", &self.text_embeddings),
            ("vocab", &self.vocab),
            ("prompts", &self.prompts),
            ("mock_script", &self.mock_script),
            ("gt_labels", &self.gt_labels),
            ("out_dir", &self.out_dir),
            ("scene_name", &self.scene_name),
            ("mode", &self.mode),
            ("similarity_rule", &self.similarity_rule),
            ("tau", &self.tau),
            ("k", &self.k),
            ("min_cluster_size", &self.min_cluster_size),
            ("min_samples", &self.min_samples),
            ("eps", &self.eps),
            ("visibility_threshold", &self.visibility_threshold),
            ("shift", &self.shift),
            ("dolly", &self.dolly),
            ("focal_zoom", &self.focal_zoom),
            ("score_mode", &self.score_mode),
            ("max_calls", &self.max_calls),
            ("max_tokens", &self.max_tokens),
            ("max_retries", &self.max_retries),
            ("max_in_flight", &self.max_in_flight),
            ("max_images", &self.max_images),
        ]
    }
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NO_EVIDENCE: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;
const EXIT_BUDGET: u8 = 5;
const EXIT_PARTIAL: u8 = 6;

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "validation" | "parse" | "format" | "mode" | "json" => EXIT_CONFIG,
        "insufficient_evidence" | "no_instance" => EXIT_NO_EVIDENCE,
        "transport" => EXIT_TRANSPORT,
        "budget" => EXIT_BUDGET,
        _ => EXIT_OTHER,
    }
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(key.trim(), value, None)?;
        }
        for (key, value) in self.flags.pairs() {
            debug_assert!(KEYS.contains(&key));
            if let Some(v) = value {
                cfg.set(key, v, None)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Output directory of one invocation, with a manifest describing it.
struct Run {
    dir: PathBuf,
    command: &'static str,
    artifacts: Vec<String>,
}

impl Run {
    fn create(common: &Common, cfg: &RunConfig, command: &'static str) -> Result<Run> {
        let dir = match &common.run_dir {
            Some(d) => d.clone(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
                let mut dir = cfg.out_dir.join(format!("{stamp}-{command}"));
                let mut n = 1;
                while dir.exists() {
                    n += 1;
                    dir = cfg.out_dir.join(format!("{stamp}-{command}-{n}"));
                }
                dir
            }
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut run = Run {
            dir,
            command,
            artifacts: Vec::new(),
        };
        run.write("config.txt", cfg.to_text().as_bytes())?;
        Ok(run)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    fn gateway(&mut self, cfg: &RunConfig) -> Result<Gateway> {
        self.artifacts.push("ledger.jsonl".into());
        gateway_from_config(cfg)?.with_ledger_file(&self.dir.join("ledger.jsonl"))
    }

    fn finish(&mut self, cfg: &RunConfig, extra: serde_json::Value, outcome: &str) -> Result<()> {
        let digest = |p: &Option<PathBuf>| -> serde_json::Value {
            match p {
                Some(p) if p.is_file() => match fs::read(p) {
                    Ok(bytes) => json!({"path": p.display().to_string(), "sha256": sha256_hex(&bytes)}),
                    Err(_) => json!({"path": p.display().to_string()}),
                },
                Some(p) => json!({"path": p.display().to_string()}),
                None => serde_json::Value::Null,
            }
        };
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "prompt_version": splatscope::prompts::PROMPT_VERSION,
            "created": chrono::Local::now().to_rfc3339(),
            "outcome": outcome,
            "inputs": {
                "scene": digest(&cfg.scene),
                "cameras": digest(&cfg.cameras),
                "sidecar": digest(&cfg.sidecar),
                "text_embeddings": digest(&cfg.text_embeddings),
                "vocab": digest(&cfg.vocab),
                "mock_script": digest(&cfg.mock_script),
                "gt_labels": digest(&cfg.gt_labels),
            },
            "details": extra,
            "artifacts": self.artifacts,
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| {
        Error::Validation(format!(
            "{key} is not set (use --{} or the config file)",
            key.replace('_', "-")
        ))
    })
}

fn write_answer_artifacts(run: &mut Run, ans: &AnswerRun) -> Result<()> {
    run.write("answer.json", ans.record.to_json().as_bytes())?;
    run.write("scores.csv", ans.selection.scores.to_csv().as_bytes())?;
    for c in &ans.candidates {
        for (v, png) in c.renders.iter().enumerate() {
            let kind = splatscope::refine::ViewKind::ALL[v].as_str();
            run.write(&format!("renders/instance{}_{v}_{kind}.png", c.instance), png)?;
        }
    }
    Ok(())
}

fn build_sidecar(common: &Common) -> Result<u8> {
    let cfg = common.config()?;
    let scene = load_scene(require(&cfg.scene, "scene")?, require(&cfg.cameras, "cameras")?)?;
    let scene = attach_semantics(&scene, require(&cfg.sidecar, "sidecar")?)?;
    let labelled = scene.gaussians().iter().filter(|g| g.category.is_some()).count();
    let per_category: Vec<serde_json::Value> = scene
        .vocab()
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let n = scene.gaussians().iter().filter(|g| g.category == Some(c)).count();
            json!({"category": name, "gaussians": n})
        })
        .collect();
    let summary = json!({
        "gaussians": scene.len(),
        "cameras": scene.cameras().len(),
        "sh_degree": scene.sh_degree(),
        "labelled": labelled,
        "embedding_dim": scene.embedding_dim(),
        "vocab": per_category,
    });
    let mut run = Run::create(common, &cfg, "build-sidecar")?;
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    run.write("sidecar_summary.json", text.as_bytes())?;
    print!("{text}");
    run.finish(&cfg, json!({}), "ok")?;
    Ok(0)
}

fn select_views(common: &Common, question: &str) -> Result<u8> {
    let cfg = common.config()?;
    let pipeline = Pipeline::from_config(&cfg)?;
    let mut run = Run::create(common, &cfg, "select-views")?;
    let gw = run.gateway(&cfg)?;
    let result = pipeline.select(&gw, question);
    let sel = match result {
        Ok(sel) => sel,
        Err(e) => {
            run.finish(&cfg, json!({"question": question, "error": e.to_string()}), e.kind())?;
            return Err(e);
        }
    };
    run.write("scores.csv", sel.scores.to_csv().as_bytes())?;
    let opts = cfg.render_options();
    for (l, &cam_id) in sel.initial.iter().enumerate() {
        let cam = pipeline.scene().camera(cam_id).expect("selected camera exists");
        let buf = render_with(pipeline.scene(), cam, None, &opts)?;
        run.write(&format!("renders/instance{l}_camera{cam_id}.png"), &buf.color_png())?;
        let mask = render_with(pipeline.scene(), cam, Some(&sel.clusters.clusters[l]), &opts)?;
        run.write(
            &format!("renders/instance{l}_camera{cam_id}_mask.png"),
            &mask.mask_png(),
        )?;
    }
    let selection = json!({
        "question": question,
        "evidence": sel.evidence.names(pipeline.scene().vocab()),
        "activated": sel.activated.len(),
        "clusters": sel.clusters.clusters,
        "initial_cameras": sel.initial,
    });
    let text = serde_json::to_string_pretty(&selection)? + "\n";
    run.write("selection.json", text.as_bytes())?;
    print!("{text}");
    run.finish(&cfg, json!({"question": question}), "ok")?;
    Ok(0)
}

fn answer(common: &Common, question: &str) -> Result<u8> {
    let cfg = common.config()?;
    let pipeline = Pipeline::from_config(&cfg)?;
    let mut run = Run::create(common, &cfg, "answer")?;
    let gw = run.gateway(&cfg)?;
    match pipeline.answer(&gw, question) {
        Ok(ans) => {
            write_answer_artifacts(&mut run, &ans)?;
            println!("{}", ans.record.verified_answer);
            run.finish(&cfg, json!({"question": question, "calls": gw.calls_made()}), "ok")?;
            Ok(0)
        }
        Err(e) => {
            run.finish(&cfg, json!({"question": question, "error": e.to_string()}), e.kind())?;
            Err(e)
        }
    }
}

fn segment(common: &Common, question: &str, gt_instance: Option<u32>) -> Result<u8> {
    let cfg = common.config()?;
    let pipeline = Pipeline::from_config(&cfg)?;
    let gt = match gt_instance {
        Some(inst) => {
            let labels = InstanceLabeling::load(require(&cfg.gt_labels, "gt_labels")?, pipeline.scene())?;
            Some(labels.members(inst))
        }
        None => None,
    };
    let mut run = Run::create(common, &cfg, "segment")?;
    let gw = run.gateway(&cfg)?;
    match pipeline.segment(&gw, question, gt.as_deref()) {
        Ok(seg) => {
            write_answer_artifacts(&mut run, &seg.answer)?;
            let text = serde_json::to_string_pretty(&seg.result)? + "\n";
            run.write("segmentation.json", text.as_bytes())?;
            println!("{}", seg.answer.record.verified_answer);
            match seg.result.iou {
                Some(iou) => println!("{} gaussians predicted, IoU {iou:.4}", seg.result.predicted.len()),
                None => println!("{} gaussians predicted", seg.result.predicted.len()),
            }
            run.finish(&cfg, json!({"question": question, "gt_instance": gt_instance}), "ok")?;
            Ok(0)
        }
        Err(e) => {
            run.finish(&cfg, json!({"question": question, "error": e.to_string()}), e.kind())?;
            Err(e)
        }
    }
}

fn evaluate(common: &Common, questions: &Path) -> Result<u8> {
    let cfg = common.config()?;
    let items = load_questions(questions)?;
    let pipeline = Pipeline::from_config(&cfg)?;
    let labels = match &cfg.gt_labels {
        Some(p) => Some(InstanceLabeling::load(p, pipeline.scene())?),
        None => None,
    };
    let mut run = Run::create(common, &cfg, "evaluate")?;
    let gw = run.gateway(&cfg)?;
    let report = pipeline.evaluate(&gw, &items, labels.as_ref());
    run.write("report.json", report.to_json().as_bytes())?;
    let a = &report.aggregate;
    println!("{}/{} questions completed", a.completed, a.questions);
    let show = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            println!("{name}: {v:.4}");
        }
    };
    show("llm_match", a.llm_match);
    show("miou", a.miou);
    show("acc@5", a.acc_5);
    show("acc@8", a.acc_8);
    show("acc@10", a.acc_10);
    show("average_frames", a.average_frames);
    let outcome = if report.all_ok() { "ok" } else { "partial_failure" };
    run.finish(&cfg, json!({"questions": questions.display().to_string()}), outcome)?;
    Ok(if report.all_ok() { 0 } else { EXIT_PARTIAL })
}

fn distill(common: &Common, points: &Path) -> Result<u8> {
    let cfg = common.config()?;
    let scene = load_scene(require(&cfg.scene, "scene")?, require(&cfg.cameras, "cameras")?)?;
    let pts = read_gt_points(points)?;
    let labels = distill_gt(&pts, &scene)?;
    let mut run = Run::create(common, &cfg, "distill-gt")?;
    let path = run.dir.join("gt_labels.json");
    labels.save(&path)?;
    run.artifacts.push("gt_labels.json".into());
    let instances = labels.instances();
    println!(
        "{} of {} gaussians labelled across {} instances -> {}",
        labels.labels.iter().flatten().count(),
        scene.len(),
        instances.len(),
        path.display()
    );
    run.finish(
        &cfg,
        json!({"points": points.display().to_string(), "point_count": pts.len()}),
        "ok",
    )?;
    Ok(0)
}

fn fixture(dir: &Path) -> Result<u8> {
    splatscope::synthetic::write_fixture(dir)?;
    let cfg = "scene = scene.ply\ncameras = cameras.json\nsidecar = categories.json\nmock_script = mock_script.json\nout_dir = runs\n";
    let path = dir.join("fixture.cfg");
    fs::write(&path, cfg).map_err(|e| Error::io(&path, e))?;
    println!("fixture written to {}; try --config {}", dir.display(), path.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Fixture { dir } = &cli.command {
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
        return match fixture(dir) {
            Ok(code) => ExitCode::from(code),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_code(&e))
            }
        };
    }
    let common = match &cli.command {
        Command::Fixture { .. } => unreachable!("handled above"),
        Command::BuildSidecar(c) => c,
        Command::SelectViews { common, .. }
        | Command::Answer { common, .. }
        | Command::Segment { common, .. }
        | Command::Evaluate { common, .. }
        | Command::DistillGt { common, .. } => common,
    };
    let level = match common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::BuildSidecar(c) => build_sidecar(c),
        Command::SelectViews { common, question } => select_views(common, question),
        Command::Answer { common, question } => answer(common, question),
        Command::Segment {
            common,
            question,
            gt_instance,
        } => segment(common, question, *gt_instance),
        Command::Evaluate { common, questions } => evaluate(common, questions),
        Command::DistillGt { common, points } => distill(common, points),
        Command::Fixture { .. } => unreachable!("handled above"),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
