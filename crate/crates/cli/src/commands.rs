use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tarenv_core::config::{AppConfig, ConfigError};
use tarenv_core::datagen::llm::{generate_thoughts, llm_validate, placeholder_thoughts};
use tarenv_core::datagen::sft::{annotated_path_for, assemble_sft_record, write_annotated_image};
use tarenv_core::datagen::synthetic::{synthetic_records, write_synthetic_images};
use tarenv_core::datagen::{
    generate, geometric_validate, ingest_detections, DetectionFormat, IngestOptions, TemplateKind, VqaSample,
};
use tarenv_core::episode::{Episode, IMAGE_ANNOTATED};
use tarenv_core::eval::{
    compare_reports, load_benchmark, run_benchmark, BenchmarkItem, EvalConfig, EvalError, FsImages, RunReport,
};
use tarenv_core::geometry::DetectionRecord;
use tarenv_core::model::{ChatRequest, ModelBackend, OracleTarget, RemoteChatBackend, ScriptedBackend};
use tarenv_core::question::lettered;
use tarenv_core::reward::{score_trajectory, RewardRequest, Trajectory};
use tarenv_server::ServerConfig;

use crate::{BackendKind, Cli, Command, Global, ThoughtSource, ValidationMode};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INVALID: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            kind: "error",
            error,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self {
            code: EXIT_FAILURE,
            kind: "config",
            error: e.into(),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config(g: &Global) -> Result<AppConfig> {
    let mut c = AppConfig::load_from_env(g.config.as_deref())?;
    if let Some(f) = g.format {
        c.format = f;
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(e) = &g.endpoint {
        c.backend.endpoint = Some(e.clone());
    }
    if let Some(k) = &g.api_key {
        c.backend.api_key = Some(k.clone());
    }
    if let Some(m) = &g.model {
        c.backend.model = m.clone();
    }
    if let Some(p) = g.parallelism {
        c.parallelism = p.max(1);
    }
    Ok(c)
}

fn remote(config: &AppConfig) -> Result<RemoteChatBackend> {
    let rc = config.remote_config()?;
    RemoteChatBackend::new(rc).map_err(|e| Failure {
        code: EXIT_FAILURE,
        kind: "config",
        error: e.into(),
    })
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    create_parent(path)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_records(path: &Path, format: DetectionFormat, check_images: bool) -> anyhow::Result<Vec<DetectionRecord>> {
    let report = ingest_detections(path, IngestOptions { format, check_images })?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    if !report.errors.is_empty() {
        let shown: Vec<&str> = report.errors.iter().take(5).map(String::as_str).collect();
        bail!(
            "{} invalid record(s) in {}: {}",
            report.errors.len(),
            path.display(),
            shown.join("; ")
        );
    }
    Ok(report.records)
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { records, out } => synth(&config, records, &out),
        Command::Datagen {
            input,
            input_format,
            out,
            report,
            benchmark,
            no_check_images,
        } => datagen(
            &config,
            &input,
            input_format,
            &out,
            report,
            benchmark.as_deref(),
            !no_check_images,
        ),
        Command::Validate {
            samples,
            detections,
            input_format,
            mode,
            out,
            strict,
        } => validate(
            &config,
            &samples,
            &detections,
            input_format,
            mode,
            out.as_deref(),
            strict,
        ),
        Command::SftGen {
            samples,
            image_root,
            out,
            thoughts,
            detections,
        } => sft_gen(&config, &samples, &image_root, &out, thoughts, detections.as_deref()),
        Command::Rollout {
            image,
            question,
            options,
            ground_truth,
            script,
            save_annotated,
        } => rollout(
            &config,
            &image,
            question,
            options,
            ground_truth,
            script.as_deref(),
            save_annotated.as_deref(),
        ),
        Command::Eval {
            benchmark,
            image_root,
            override_dir,
            protocol,
            backend,
            script,
            out,
            csv,
        } => {
            let images = FsImages {
                base_dir: image_root.unwrap_or_else(|| benchmark.parent().map(Path::to_path_buf).unwrap_or_default()),
                override_dir,
            };
            eval(
                &config,
                &benchmark,
                images,
                protocol,
                backend,
                script.as_deref(),
                out.as_deref(),
                csv.as_deref(),
            )
        }
        Command::Compare { a, b } => compare(&a, &b),
        Command::Reward {
            trajectory,
            ground_truth,
        } => reward(&config, &trajectory, ground_truth),
        Command::Serve {
            addr,
            image_root,
            workdir,
            ttl_s,
        } => serve(&config, addr, image_root, workdir, ttl_s),
    }
}

fn synth(config: &AppConfig, n: usize, out: &Path) -> Result<()> {
    let records = synthetic_records(n, config.seed);
    write_synthetic_images(&records, out).context("writing synthetic images")?;
    let path = out.join("detections.jsonl");
    write_jsonl(&path, &records)?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct GenerationReport<'a> {
    records: usize,
    samples: usize,
    seed: u64,
    per_kind: BTreeMap<TemplateKind, usize>,
    discards: &'a [tarenv_core::datagen::Discard],
    unmatched_categories: &'a [String],
}

fn datagen(
    config: &AppConfig,
    input: &Path,
    format: DetectionFormat,
    out: &Path,
    report: Option<PathBuf>,
    benchmark: Option<&Path>,
    check_images: bool,
) -> Result<()> {
    let records = load_records(input, format, check_images)?;
    let output = generate(&records, &config.templates, config.seed);
    write_jsonl(out, &output.samples)?;
    if let Some(path) = benchmark {
        let items: Vec<BenchmarkItem> = output.samples.iter().map(BenchmarkItem::from).collect();
        write_jsonl(path, &items)?;
    }
    let report_path = report.unwrap_or_else(|| PathBuf::from(format!("{}.report.json", out.display())));
    let summary = GenerationReport {
        records: records.len(),
        samples: output.samples.len(),
        seed: config.seed,
        per_kind: TemplateKind::ALL.iter().map(|k| (*k, output.count(*k))).collect(),
        discards: &output.discards,
        unmatched_categories: &output.unmatched_categories,
    };
    write_json(&report_path, &summary)?;
    println!(
        "{} samples from {} records ({} discarded) -> {}",
        summary.samples,
        summary.records,
        output.discards.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn validate(
    config: &AppConfig,
    samples_path: &Path,
    detections: &Path,
    format: DetectionFormat,
    mode: ValidationMode,
    out: Option<&Path>,
    strict: bool,
) -> Result<()> {
    let backend = match mode {
        ValidationMode::Geometric => None,
        ValidationMode::Llm | ValidationMode::Both => Some(remote(config)?),
    };
    let samples: Vec<VqaSample> = read_jsonl(samples_path)?;
    let records = load_records(detections, format, false)?;
    let by_id: HashMap<&str, &DetectionRecord> = records.iter().map(|r| (r.image_id.as_str(), r)).collect();

    let mut verdicts = Vec::new();
    let mut invalid = 0;
    for s in &samples {
        let Some(record) = by_id.get(s.image_id.as_str()) else {
            verdicts.push(tarenv_core::datagen::ValidationVerdict::invalid(
                &s.id,
                tarenv_core::datagen::VerdictSource::Geometric,
                format!("no detection record for image {}", s.image_id),
            ));
            invalid += 1;
            continue;
        };
        let mut ok = true;
        if mode != ValidationMode::Llm {
            let v = geometric_validate(s, record, &config.templates);
            ok &= v.is_valid();
            verdicts.push(v);
        }
        if let Some(b) = &backend {
            let v = llm_validate(s, record, b, &config.prompts, &config.generation)
                .with_context(|| format!("validating {}", s.id))?;
            ok &= v.is_valid();
            verdicts.push(v);
        }
        if !ok {
            invalid += 1;
        }
    }
    if let Some(path) = out {
        write_jsonl(path, &verdicts)?;
    }
    print_json(&serde_json::json!({
        "samples": samples.len(),
        "valid": samples.len() - invalid,
        "invalid": invalid,
    }))?;
    if strict && invalid > 0 {
        return Err(Failure {
            code: EXIT_INVALID,
            kind: "invalid_samples",
            error: anyhow!("{invalid} of {} samples are invalid", samples.len()),
        });
    }
    Ok(())
}

fn sft_gen(
    config: &AppConfig,
    samples_path: &Path,
    image_root: &Path,
    out: &Path,
    source: ThoughtSource,
    detections: Option<&Path>,
) -> Result<()> {
    let samples: Vec<VqaSample> = read_jsonl(samples_path)?;
    let episode = config.episode_config();
    let (backend, records) = match source {
        ThoughtSource::Placeholder => (None, HashMap::new()),
        ThoughtSource::Llm => {
            let path = detections.ok_or_else(|| anyhow!("--detections is required for model-written thoughts"))?;
            let records = load_records(path, DetectionFormat::Jsonl, false)?;
            (
                Some(remote(config)?),
                records.into_iter().map(|r| (r.image_id.clone(), r)).collect(),
            )
        }
    };
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let annotated_dir = out_dir.join(IMAGE_ANNOTATED);
    fs::create_dir_all(&annotated_dir).with_context(|| format!("creating {}", annotated_dir.display()))?;

    let mut rows = Vec::new();
    let mut skipped = 0;
    for s in &samples {
        let thoughts = match (&backend, records.get(&s.image_id)) {
            (None, _) => placeholder_thoughts(s),
            (Some(b), Some(r)) => match generate_thoughts(s, r, b, &config.prompts, &config.generation) {
                Ok(t) => t,
                Err(e) => {
                    tracing::warn!(sample = %s.id, "skipping: {e}");
                    skipped += 1;
                    continue;
                }
            },
            (Some(_), None) => {
                tracing::warn!(sample = %s.id, "skipping: no detection record");
                skipped += 1;
                continue;
            }
        };
        let annotated = if s.provenance.gt_boxes.is_empty() {
            None
        } else {
            let name = annotated_path_for(Path::new(&s.image_path), &s.id);
            let name = name.file_name().context("image path has no file name")?;
            write_annotated_image(&image_root.join(&s.image_path), &annotated_dir.join(name), s, &episode)
                .with_context(|| format!("annotating {}", s.id))?;
            Some(format!("{IMAGE_ANNOTATED}/{}", name.to_string_lossy()))
        };
        let record = assemble_sft_record(s, &thoughts, &episode, &s.image_path, annotated.as_deref())
            .with_context(|| format!("assembling {}", s.id))?;
        rows.push(record);
    }
    write_jsonl(out, &rows)?;
    println!("{} records -> {} ({} skipped)", rows.len(), out.display(), skipped);
    Ok(())
}

fn rollout(
    config: &AppConfig,
    image_path: &Path,
    question: String,
    options: Vec<String>,
    ground_truth: Option<String>,
    script: Option<&Path>,
    save_annotated: Option<&Path>,
) -> Result<()> {
    let image = image_bytes(image_path)?;
    let backend: Box<dyn ModelBackend> = match script {
        Some(p) => Box::new(ScriptedBackend::replay(read_json::<Vec<String>>(p)?)),
        None => Box::new(remote(config)?),
    };
    let mut ep = Episode::from_image_bytes(
        "rollout",
        &image,
        question,
        lettered(options),
        ground_truth.clone(),
        Arc::new(config.episode_config()),
    )
    .context("starting episode")?;
    while !ep.is_done() {
        let messages = ep.chat_messages();
        let completion = backend
            .complete(&ChatRequest {
                messages: &messages,
                params: &config.generation,
                episode_id: Some(ep.id()),
            })
            .context("backend call failed")?;
        let resp = ep.step(&completion.text).context("stepping episode")?;
        if let (Some(img), Some(path)) = (&resp.updated_image, save_annotated) {
            create_parent(path)?;
            fs::write(path, tarenv_core::model::encode_png(img))
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let reward = match &ground_truth {
        Some(gt) => Some(score_trajectory(ep.transcript(), gt, ep.format()).context("scoring")?),
        None => None,
    };
    print_json(&serde_json::json!({
        "state": ep.state(),
        "final_answer": ep.final_answer(),
        "transcript": ep.transcript(),
        "reward": reward,
    }))?;
    Ok(())
}

fn image_bytes(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    config: &AppConfig,
    benchmark: &Path,
    images: FsImages,
    protocol: tarenv_core::prompts::Protocol,
    kind: BackendKind,
    script: Option<&Path>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let items = load_benchmark(benchmark)?;
    let backend: Box<dyn ModelBackend> = match kind {
        BackendKind::Remote => Box::new(remote(config)?),
        BackendKind::Oracle => Box::new(ScriptedBackend::oracle(
            items
                .iter()
                .map(|i| {
                    let t = OracleTarget {
                        boxes: i.boxes.clone(),
                        answer: i.ground_truth.to_string(),
                    };
                    (i.id.clone(), t)
                })
                .collect(),
            config.format,
        )),
        BackendKind::Scripted => {
            let path = script.ok_or_else(|| anyhow!("--script is required with --backend scripted"))?;
            Box::new(ScriptedBackend::per_episode(read_json(path)?))
        }
    };
    let eval_config = EvalConfig {
        episode: Arc::new(config.episode_config()),
        params: config.generation,
        parallelism: config.parallelism,
    };
    let report = run_benchmark(&items, backend.as_ref(), &images, protocol, &eval_config)?;
    println!("{report}");
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if let Some(path) = csv {
        create_parent(path)?;
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(file).context("writing CSV")?;
    }
    Ok(())
}

fn compare(a: &Path, b: &Path) -> Result<()> {
    let ra: RunReport = read_json(a)?;
    let rb: RunReport = read_json(b)?;
    let c = compare_reports(&ra, &rb)?;
    println!("{c}");
    Ok(())
}

fn reward(config: &AppConfig, path: &Path, ground_truth: Option<String>) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let request = match serde_json::from_str::<RewardRequest>(&text) {
        Ok(mut r) => {
            if let Some(gt) = ground_truth {
                r.ground_truth = gt;
            }
            r
        }
        Err(full) => {
            let gt = ground_truth.ok_or_else(|| {
                anyhow!(
                    "{}: not a scoring request ({full}); pass --ground-truth to score a bare trajectory",
                    path.display()
                )
            })?;
            let trajectory: Trajectory =
                serde_json::from_str(&text).with_context(|| format!("{}: not a trajectory", path.display()))?;
            RewardRequest {
                trajectory,
                ground_truth: gt,
                format: config.format,
            }
        }
    };
    let breakdown = request.score().context("scoring")?;
    print_json(&breakdown)?;
    Ok(())
}

fn serve(
    config: &AppConfig,
    addr: std::net::SocketAddr,
    image_root: Option<PathBuf>,
    workdir: Option<PathBuf>,
    ttl_s: Option<u64>,
) -> Result<()> {
    if let Some(dir) = &workdir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let server = ServerConfig {
        episode: config.episode_config(),
        ttl: Duration::from_secs(ttl_s.unwrap_or(config.session_ttl_s)),
        image_root,
        workdir,
    };
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(tarenv_server::run(addr, server))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(())
}
