use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anonymizer_core::metrics::{self, EvalReport, Psnr, ReidInstance, DEFAULT_RANKS};
use anonymizer_core::pipeline::BodyChoice;
use anonymizer_core::{
    synthetic, vanish_attack, AnonymizationChoice, AnonymizationRequest, BodyManifold, Embedding, Image,
    ManifoldEntry, Pipeline,
};
use anonymizer_gateway::service::{build_pipeline, load_manifold};
use anonymizer_gateway::{Service, ServiceConfig};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "anonymizer", version, about = "Per-body image anonymization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or query an embedding manifold.
    #[command(subcommand)]
    Manifold(ManifoldCommand),
    /// Detect bodies and anonymize one image.
    Anonymize(AnonymizeArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Serve the deterministic mock backends over HTTP.
    MockBackends {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: String,
        #[arg(long, default_value_t = anonymizer_gateway::config::DEFAULT_MOCK_DIM)]
        dim: usize,
    },
}

#[derive(Subcommand)]
enum ManifoldCommand {
    /// Balanced manifold from JSONL records {"id","activity","embedding","source_uri"}.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Farthest same-activity guide (or a face guide with --face).
    Query {
        #[arg(long)]
        manifold: PathBuf,
        /// JSON array of floats.
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        activity: Option<String>,
        /// Random pick among the sphere-k farthest, ignoring activity.
        #[arg(long)]
        face: bool,
        #[arg(long, default_value_t = anonymizer_core::manifold::DEFAULT_SPHERE_K)]
        sphere_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct AnonymizeArgs {
    #[arg(long)]
    image: PathBuf,
    /// Inline JSON or a file: [{"body_id"|"index", "option"}, ...].
    #[arg(long)]
    choices: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Service config for endpoints, manifolds and pipeline defaults;
    /// in-process mocks when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the detected bodies.
    #[arg(long)]
    detect: bool,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Detection accuracy before and after the vanishing attack.
    Adv {
        /// Images to attack; synthetic person images when omitted.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 50)]
        synthetic: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// mAP and CMC rank-k from {"query":[{"label","embedding"}],"gallery":[...]}.
    Reid {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RANKS.to_vec())]
        ranks: Vec<usize>,
        #[arg(long, default_value = "reid")]
        dataset: String,
        #[arg(long)]
        json: bool,
    },
    /// Fréchet distance between two embedding sets (JSON array or JSONL of arrays).
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value = "fid")]
        dataset: String,
        #[arg(long)]
        json: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Manifold(ManifoldCommand::Build { input, per_class, out }) => manifold_build(&input, per_class, &out),
        Command::Manifold(ManifoldCommand::Query { manifold, embedding, activity, face, sphere_k, seed }) => {
            manifold_query(&manifold, &embedding, activity.as_deref(), face, sphere_k, seed)
        }
        Command::Anonymize(args) => anonymize(args),
        Command::Eval(EvalCommand::Adv { images, synthetic, seed, config, json }) => {
            eval_adv(&images, synthetic, seed, config.as_deref(), json)
        }
        Command::Eval(EvalCommand::Reid { input, ranks, dataset, json }) => eval_reid(&input, &ranks, &dataset, json),
        Command::Eval(EvalCommand::Fid { real, generated, dataset, json }) => eval_fid(&real, &generated, &dataset, json),
        Command::Serve { config, listen } => serve(&config, listen),
        Command::MockBackends { seed, listen, dim } => mock_backends(seed, &listen, dim),
    }
}

#[derive(Deserialize)]
struct InputRecord {
    id: String,
    activity: String,
    embedding: Vec<f32>,
    #[serde(default)]
    source_uri: Option<String>,
}

fn manifold_build(input: &Path, per_class: usize, out: &Path) -> Result<()> {
    let reader = BufReader::new(File::open(input).with_context(|| format!("cannot open {}", input.display()))?);
    let mut entries = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputRecord =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", input.display(), i + 1))?;
        dim.get_or_insert(rec.embedding.len());
        let entry = ManifoldEntry::new(rec.id, rec.activity, rec.embedding, rec.source_uri)
            .with_context(|| format!("{}: line {}", input.display(), i + 1))?;
        entries.push(entry);
    }
    let dim = dim.ok_or_else(|| anyhow!("{} has no records", input.display()))?;
    let manifold = BodyManifold::build(entries, per_class, dim)?;
    let file = File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
    manifold.write_to(BufWriter::new(file))?;
    println!(
        "{}",
        json!({"entries": manifold.len(), "activities": manifold.activities(), "dim": dim, "out": out})
    );
    Ok(())
}

fn read_embedding(path: &Path) -> Result<Embedding> {
    let values: Vec<f32> = serde_json::from_str(&fs::read_to_string(path)?)
        .with_context(|| format!("{} must hold a JSON array of floats", path.display()))?;
    Ok(Embedding::normalized(values)?)
}

fn manifold_query(
    path: &Path,
    embedding: &Path,
    activity: Option<&str>,
    face: bool,
    sphere_k: usize,
    seed: u64,
) -> Result<()> {
    let manifold = load_manifold(path)?;
    let query = read_embedding(embedding)?;
    let entry = if face {
        manifold.select_face_guide(&query, sphere_k, seed)?
    } else {
        let activity = activity.ok_or_else(|| anyhow!("--activity is required unless --face is given"))?;
        manifold.select_guide(&query, activity)?
    };
    let distance = anonymizer_core::cosine_distance(&query, &entry.embedding)?;
    println!(
        "{}",
        json!({"id": entry.id, "activity": entry.activity, "distance": distance, "source_uri": entry.source_uri})
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig> {
    match path {
        Some(p) => Ok(ServiceConfig::load(p)?),
        None => Ok(ServiceConfig::mock(0, std::env::temp_dir())),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CliChoice {
    body_id: Option<String>,
    index: Option<usize>,
    option: String,
}

fn parse_choices(arg: &str, body_ids: &[String]) -> Result<Vec<BodyChoice>> {
    let text = if arg.trim_start().starts_with('[') { arg.to_string() } else { fs::read_to_string(arg)? };
    let raw: Vec<CliChoice> = serde_json::from_str(&text).context("choices must be a JSON array")?;
    raw.into_iter()
        .map(|c| {
            let option: AnonymizationChoice = c.option.parse()?;
            let body_id = match (c.body_id, c.index) {
                (Some(id), None) => id,
                (None, Some(i)) => body_ids
                    .get(i)
                    .cloned()
                    .ok_or_else(|| anyhow!("body index {i} out of range, {} bodies detected", body_ids.len()))?,
                _ => bail!("each choice needs exactly one of body_id or index"),
            };
            Ok(BodyChoice { body_id, option })
        })
        .collect()
}

fn anonymize(args: AnonymizeArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let pipeline = build_pipeline(&config)?;
    let bytes = fs::read(&args.image).with_context(|| format!("cannot read {}", args.image.display()))?;
    let image = Image::decode(&bytes)?;
    let bodies = pipeline.detect_bodies(&image)?;
    let ids: Vec<String> = bodies.iter().map(|b| b.body_id.clone()).collect();
    if args.detect {
        let listed: Vec<_> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| json!({"index": i, "body_id": b.body_id, "bbox": b.bbox, "confidence": b.confidence}))
            .collect();
        println!("{}", serde_json::to_string_pretty(&json!({"bodies": listed}))?);
    }
    let Some(choices) = args.choices else {
        if args.detect {
            return Ok(());
        }
        bail!("--choices is required unless --detect is given");
    };
    let out = args.out.ok_or_else(|| anyhow!("--out is required with --choices"))?;
    let choices = parse_choices(&choices, &ids)?;
    let request = AnonymizationRequest { image, choices, seed: args.seed, config: config.pipeline.clone() };
    let started = Instant::now();
    let output = pipeline.anonymize(&request)?;
    fs::write(&out, output.image.to_png()?).with_context(|| format!("cannot write {}", out.display()))?;
    for w in &output.warnings {
        log::warn!("{w}");
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "out": out,
            "bodies": output.bodies,
            "warnings": output.warnings,
            "merged_pixels": output.merged_pixels,
            "adversarial": output.adversarial,
            "seconds": started.elapsed().as_secs_f64(),
        }))?
    );
    Ok(())
}

fn print_report(report: &EvalReport, json: bool) -> Result<()> {
    report.validate()?;
    if json {
        println!("{}", report.to_json());
    } else {
        println!("{}", report.to_table());
    }
    Ok(())
}

fn eval_adv(paths: &[PathBuf], count: usize, seed: u64, config: Option<&Path>, json: bool) -> Result<()> {
    let config = load_config(config)?;
    let pipeline: Pipeline = build_pipeline(&config)?;
    let (dataset, before) = if paths.is_empty() {
        let images: Vec<Image> =
            (0..count as u64).map(|i| synthetic::person_image(seed.wrapping_add(i), 64, 64).0).collect();
        ("synthetic".to_string(), images)
    } else {
        let images = paths
            .iter()
            .map(|p| Ok(Image::decode(&fs::read(p).with_context(|| format!("cannot read {}", p.display()))?)?))
            .collect::<Result<Vec<_>>>()?;
        ("images".to_string(), images)
    };
    if before.is_empty() {
        bail!("no images to evaluate");
    }
    let detector = pipeline.backends();
    let attack = &config.pipeline.attack;
    let after = before
        .iter()
        .map(|img| Ok(vanish_attack(img, detector, attack, None)?.image))
        .collect::<Result<Vec<_>>>()?;
    let (acc_before, acc_after) = metrics::detection_delta(&before, &after, detector, attack.stop_threshold)?;
    let psnrs = before.iter().zip(&after).map(|(a, b)| metrics::psnr(a, b)).collect::<Result<Vec<_>, _>>()?;
    let finite: Vec<f64> = psnrs.iter().filter_map(|p| match p {
        Psnr::Db(v) => Some(*v),
        Psnr::Identical => None,
    }).collect();
    let mut report = EvalReport::new(dataset, before.len());
    report.accuracy_before = Some(acc_before);
    report.accuracy_after = Some(acc_after);
    report.psnr = Some(if finite.is_empty() {
        Psnr::Identical
    } else {
        Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
    });
    print_report(&report, json)
}

#[derive(Deserialize)]
struct LabeledEmbedding {
    label: String,
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct ReidFile {
    query: Vec<LabeledEmbedding>,
    gallery: Vec<LabeledEmbedding>,
}

fn eval_reid(input: &Path, ranks: &[usize], dataset: &str, json: bool) -> Result<()> {
    let file: ReidFile = serde_json::from_str(&fs::read_to_string(input)?)
        .with_context(|| format!("cannot parse {}", input.display()))?;
    let split = |items: Vec<LabeledEmbedding>| -> Result<(Vec<Embedding>, Vec<String>)> {
        let mut e = Vec::with_capacity(items.len());
        let mut l = Vec::with_capacity(items.len());
        for item in items {
            e.push(Embedding::normalized(item.embedding)?);
            l.push(item.label);
        }
        Ok((e, l))
    };
    let (query_embeddings, query_labels) = split(file.query)?;
    let (gallery_embeddings, gallery_labels) = split(file.gallery)?;
    let humans = query_labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let instance = ReidInstance { query_embeddings, query_labels, gallery_embeddings, gallery_labels };
    let result = metrics::reid_eval(&instance, ranks)?;
    let mut report = EvalReport::new(dataset, humans);
    report.map = Some(result.map);
    report.rank_k = result.rank_k;
    print_report(&report, json)
}

fn read_embedding_set(path: &Path) -> Result<Vec<Embedding>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let rows: Vec<Vec<f32>> = if text.trim_start().starts_with("[[") || text.trim() == "[]" {
        serde_json::from_str(&text)?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 1)))
            .collect::<Result<_>>()?
    };
    rows.into_iter().map(|r| Ok(Embedding::normalized(r)?)).collect()
}

fn eval_fid(real: &Path, generated: &Path, dataset: &str, json: bool) -> Result<()> {
    let a = read_embedding_set(real)?;
    let b = read_embedding_set(generated)?;
    let mut report = EvalReport::new(dataset, a.len());
    report.fid = Some(metrics::fid(&a, &b)?);
    print_report(&report, json)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn serve(path: &Path, listen: Option<String>) -> Result<()> {
    let mut config = ServiceConfig::load(path)?;
    if let Some(l) = listen {
        config.listen = l;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("cannot listen on {}", config.listen))?;
        log::info!("gateway listening on {}", listener.local_addr()?);
        let service = Service::new(config)?;
        anonymizer_gateway::serve(service, listener, shutdown_signal()).await?;
        Ok(())
    })
}

fn mock_backends(seed: u64, listen: &str, dim: usize) -> Result<()> {
    if dim == 0 {
        bail!("--dim must be >= 1");
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener =
            tokio::net::TcpListener::bind(listen).await.with_context(|| format!("cannot listen on {listen}"))?;
        let roles: BTreeMap<&str, String> = anonymizer_core::BackendRole::ALL
            .iter()
            .map(|r| (r.as_str(), format!("http://{}", listener.local_addr().expect("bound"))))
            .collect();
        log::info!("mock backends (seed {seed}) listening on {}", listener.local_addr()?);
        println!("{}", json!({ "endpoints": roles }));
        anonymizer_gateway::serve_mock(seed, dim, listener, shutdown_signal()).await?;
        Ok(())
    })
}
