//! Benchmark runs and report comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::VqaSample;
use crate::episode::{Episode, EpisodeConfig};
use crate::geometry::BoundingBox;
use crate::model::{ChatMessage, ChatRequest, ContentPart, GenerationParams, ModelBackend};
use crate::prompts::Protocol;
use crate::protocol::{extract_tag_answer, ActionFormat};
use crate::question::{normalize_letter, validate_options, ChoiceOption};
use crate::reward::{score_accuracy, score_final_format, score_trajectory, RewardBreakdown};

pub const LATENCY_NOTE: &str = "wall-clock seconds spent inside backend calls; image encoding and scoring excluded";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark has no items")]
    Empty,
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}`: {message}")]
    BadItem { id: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{failed} of {n} items failed; run aborted")]
    TooManyFailures { failed: usize, n: usize },
    #[error("reports cover different items: {only_a} only in the first, {only_b} only in the second")]
    MismatchedItems { only_a: usize, only_b: usize },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

fn default_source() -> String {
    "default".to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub image_path: String,
    pub question: String,
    pub options: Vec<ChoiceOption>,
    pub ground_truth: char,
    #[serde(default = "default_source")]
    pub source: String,
    /// Ground-truth regions, when known. Only scripted backends use them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<BoundingBox>,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: String| EvalError::BadItem {
            id: self.id.clone(),
            message,
        };
        validate_options(&self.options).map_err(|e| bad(e.to_string()))?;
        if !self.options.iter().any(|o| o.letter == self.ground_truth) {
            return Err(bad(format!(
                "ground truth {} is not an option letter",
                self.ground_truth
            )));
        }
        Ok(())
    }
}

impl From<&VqaSample> for BenchmarkItem {
    fn from(s: &VqaSample) -> Self {
        Self {
            id: s.id.clone(),
            image_path: s.image_path.clone(),
            question: s.question.clone(),
            options: s.options.clone(),
            ground_truth: s.answer,
            source: s.kind.to_string(),
            boxes: s.provenance.gt_boxes.clone(),
        }
    }
}

/// Reads a JSONL benchmark (one [`BenchmarkItem`] per line, blank lines skipped).
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem = serde_json::from_str(line).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

/// Supplies item images and, optionally, replacement round-1 annotations.
pub trait ImageSource: Send + Sync {
    fn image(&self, item: &BenchmarkItem) -> Result<RgbImage, String>;

    fn annotation_override(&self, _item: &BenchmarkItem) -> Result<Option<RgbImage>, String> {
        Ok(None)
    }
}

impl<F> ImageSource for F
where
    F: Fn(&BenchmarkItem) -> Result<RgbImage, String> + Send + Sync,
{
    fn image(&self, item: &BenchmarkItem) -> Result<RgbImage, String> {
        self(item)
    }
}

/// Images on disk. Relative paths resolve against `base_dir`; override
/// annotations are looked up as `<override_dir>/<image file name>`.
#[derive(Debug, Clone, Default)]
pub struct FsImages {
    pub base_dir: PathBuf,
    pub override_dir: Option<PathBuf>,
}

impl FsImages {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            override_dir: None,
        }
    }

    fn read(path: &Path) -> Result<RgbImage, String> {
        image::open(path)
            .map(|i| i.to_rgb8())
            .map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl ImageSource for FsImages {
    fn image(&self, item: &BenchmarkItem) -> Result<RgbImage, String> {
        Self::read(&self.base_dir.join(&item.image_path))
    }

    fn annotation_override(&self, item: &BenchmarkItem) -> Result<Option<RgbImage>, String> {
        let Some(dir) = &self.override_dir else {
            return Ok(None);
        };
        let Some(name) = Path::new(&item.image_path).file_name() else {
            return Ok(None);
        };
        let path = dir.join(name);
        if path.exists() {
            Self::read(&path).map(Some)
        } else {
            Ok(None)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub episode: Arc<EpisodeConfig>,
    pub params: GenerationParams,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episode: Arc::new(EpisodeConfig::default()),
            params: GenerationParams::default(),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub source: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub reward: RewardBreakdown,
    pub turns: usize,
    /// Every assistant turn parsed and executed.
    pub actions_ok: bool,
    pub latency_s: f64,
    pub output_chars: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ItemResult {
    fn failed(item: &BenchmarkItem, error: String, turns: usize, latency_s: f64) -> Self {
        Self {
            id: item.id.clone(),
            source: item.source.clone(),
            predicted: None,
            correct: false,
            reward: RewardBreakdown::zero(),
            turns,
            actions_ok: false,
            latency_s,
            output_chars: 0,
            completion_tokens: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: Protocol,
    pub format: ActionFormat,
    pub backend: String,
    pub latency_note: String,
    pub n: usize,
    pub accuracy: f64,
    pub action_success_rate: f64,
    pub mean_latency_s: f64,
    pub mean_output_chars: f64,
    /// Present only when the backend reported usage for every item.
    pub mean_completion_tokens: Option<f64>,
    pub failures: usize,
    pub per_item: Vec<ItemResult>,
}

impl RunReport {
    fn aggregate(protocol: Protocol, format: ActionFormat, backend: &str, mut per_item: Vec<ItemResult>) -> Self {
        per_item.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_item.len();
        let nf = n as f64;
        let mean = |f: &dyn Fn(&ItemResult) -> f64| per_item.iter().map(f).sum::<f64>() / nf;
        let tokens: Option<Vec<u64>> = per_item.iter().map(|r| r.completion_tokens).collect();
        Self {
            protocol,
            format,
            backend: backend.to_owned(),
            latency_note: LATENCY_NOTE.to_owned(),
            n,
            accuracy: mean(&|r| r.reward.accuracy),
            action_success_rate: mean(&|r| f64::from(u8::from(r.actions_ok))),
            mean_latency_s: mean(&|r| r.latency_s),
            mean_output_chars: mean(&|r| r.output_chars as f64),
            mean_completion_tokens: tokens.map(|t| t.iter().sum::<u64>() as f64 / nf),
            failures: per_item.iter().filter(|r| r.error.is_some()).count(),
            per_item,
        }
    }

    /// Copy with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.mean_latency_s = 0.0;
        for item in &mut r.per_item {
            item.latency_s = 0.0;
        }
        r
    }

    /// One row per item.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "id",
            "source",
            "predicted",
            "correct",
            "format_round1",
            "format_final",
            "accuracy",
            "total",
            "turns",
            "actions_ok",
            "latency_s",
            "output_chars",
            "completion_tokens",
            "error",
        ])?;
        for r in &self.per_item {
            w.write_record([
                r.id.clone(),
                r.source.clone(),
                r.predicted.clone().unwrap_or_default(),
                r.correct.to_string(),
                r.reward.format_round1.to_string(),
                r.reward.format_final.to_string(),
                r.reward.accuracy.to_string(),
                r.reward.total.to_string(),
                r.turns.to_string(),
                r.actions_ok.to_string(),
                format!("{:.6}", r.latency_s),
                r.output_chars.to_string(),
                r.completion_tokens.map(|t| t.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "backend {} | protocol {} | format {}",
            self.backend, self.protocol, self.format
        )?;
        writeln!(f, "items               {}", self.n)?;
        writeln!(f, "accuracy            {:.4}", self.accuracy)?;
        writeln!(f, "action success rate {:.4}", self.action_success_rate)?;
        writeln!(f, "mean latency (s)    {:.4}", self.mean_latency_s)?;
        writeln!(f, "mean output chars   {:.1}", self.mean_output_chars)?;
        match self.mean_completion_tokens {
            Some(t) => writeln!(f, "mean output tokens  {t:.1}")?,
            None => writeln!(f, "mean output tokens  n/a")?,
        }
        write!(f, "failures            {}", self.failures)
    }
}

/// Runs every item and aggregates. Items are evaluated concurrently up to
/// `config.parallelism`; results are sorted by id.
pub fn run_benchmark(
    items: &[BenchmarkItem],
    backend: &dyn ModelBackend,
    images: &dyn ImageSource,
    protocol: Protocol,
    config: &EvalConfig,
) -> Result<RunReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(EvalError::DuplicateId(item.id.clone()));
        }
        item.validate()?;
    }

    let run = |item: &BenchmarkItem| match protocol {
        Protocol::Tar => run_tar(item, backend, images, config),
        Protocol::Think | Protocol::Direct => run_single(item, backend, images, protocol, config),
    };
    let results: Vec<ItemResult> = if config.parallelism <= 1 {
        items.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?
            .install(|| items.par_iter().map(run).collect())
    };

    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed * 2 > results.len() {
        return Err(EvalError::TooManyFailures {
            failed,
            n: results.len(),
        });
    }
    Ok(RunReport::aggregate(
        protocol,
        config.episode.format,
        backend.name(),
        results,
    ))
}

fn run_tar(
    item: &BenchmarkItem,
    backend: &dyn ModelBackend,
    images: &dyn ImageSource,
    config: &EvalConfig,
) -> ItemResult {
    let setup = || -> Result<Episode, String> {
        let image = images.image(item)?;
        let mut ep = Episode::new(
            item.id.clone(),
            image,
            item.question.clone(),
            item.options.clone(),
            Some(item.ground_truth.to_string()),
            config.episode.clone(),
        )
        .map_err(|e| e.to_string())?;
        if let Some(ann) = images.annotation_override(item)? {
            ep.override_annotation(ann).map_err(|e| e.to_string())?;
        }
        Ok(ep)
    };
    let mut ep = match setup() {
        Ok(ep) => ep,
        Err(e) => return ItemResult::failed(item, e, 0, 0.0),
    };

    let mut latency = 0.0;
    let mut chars = 0;
    let mut tokens = Some(0u64);
    while !ep.is_done() {
        let messages = ep.chat_messages();
        let request = ChatRequest {
            messages: &messages,
            params: &config.params,
            episode_id: Some(&item.id),
        };
        let started = Instant::now();
        let result = backend.complete(&request);
        latency += started.elapsed().as_secs_f64();
        let completion = match result {
            Ok(c) => c,
            Err(e) => return ItemResult::failed(item, e.to_string(), ep.assistant_turns(), latency),
        };
        chars += completion.text.chars().count();
        tokens = tokens.zip(completion.token_counts).map(|(t, c)| t + c.completion);
        if let Err(e) = ep.step(&completion.text) {
            return ItemResult::failed(item, e.to_string(), ep.assistant_turns(), latency);
        }
    }

    let gt = item.ground_truth.to_string();
    let reward = match score_trajectory(ep.transcript(), &gt, config.episode.format) {
        Ok(r) => r,
        Err(e) => return ItemResult::failed(item, e.to_string(), ep.assistant_turns(), latency),
    };
    ItemResult {
        id: item.id.clone(),
        source: item.source.clone(),
        predicted: ep.final_answer().map(str::to_owned),
        correct: reward.is_correct(),
        reward,
        turns: ep.assistant_turns(),
        actions_ok: ep.all_turns_parsed(),
        latency_s: latency,
        output_chars: chars,
        completion_tokens: tokens,
        error: None,
    }
}

fn run_single(
    item: &BenchmarkItem,
    backend: &dyn ModelBackend,
    images: &dyn ImageSource,
    protocol: Protocol,
    config: &EvalConfig,
) -> ItemResult {
    let image = match images.image(item) {
        Ok(i) => Arc::new(i),
        Err(e) => return ItemResult::failed(item, e, 0, 0.0),
    };
    let text = config
        .episode
        .prompts
        .user_round1_text(&item.question, &item.options, protocol);
    let messages = [ChatMessage::user(vec![
        ContentPart::Image(image),
        ContentPart::Text(text),
    ])];
    let request = ChatRequest {
        messages: &messages,
        params: &config.params,
        episode_id: Some(&item.id),
    };
    let started = Instant::now();
    let result = backend.complete(&request);
    let latency = started.elapsed().as_secs_f64();
    let completion = match result {
        Ok(c) => c,
        Err(e) => return ItemResult::failed(item, e.to_string(), 0, latency),
    };

    let predicted = extract_tag_answer(&completion.text).ok();
    let gt = item.ground_truth.to_string();
    let correct = predicted.as_deref().is_some_and(|p| score_accuracy(p, &gt) > 0.0);
    let final_ok = score_final_format(&completion.text, ActionFormat::Implicit) > 0.0;
    let reward = RewardBreakdown::from_flags(false, final_ok, correct);
    ItemResult {
        id: item.id.clone(),
        source: item.source.clone(),
        actions_ok: predicted.as_deref().and_then(normalize_letter).is_some(),
        predicted,
        correct: reward.is_correct(),
        reward,
        turns: 1,
        latency_s: latency,
        output_chars: completion.text.chars().count(),
        completion_tokens: completion.token_counts.map(|t| t.completion),
        error: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDelta {
    pub source: String,
    pub n: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `accuracy_a - accuracy_b`
    pub delta: f64,
}

/// Paired outcome counts for McNemar's test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct McNemar {
    pub both_right: usize,
    pub both_wrong: usize,
    pub only_a_right: usize,
    pub only_b_right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub per_source: Vec<SourceDelta>,
    pub overall: SourceDelta,
    pub action_success_delta: f64,
    /// Mean latency of `a` divided by mean latency of `b`.
    pub speedup: f64,
    pub mcnemar: McNemar,
}

pub fn compare_reports(a: &RunReport, b: &RunReport) -> Result<Comparison, EvalError> {
    fn by_id(r: &RunReport) -> BTreeMap<&str, &ItemResult> {
        r.per_item.iter().map(|i| (i.id.as_str(), i)).collect()
    }
    let (ma, mb) = (by_id(a), by_id(b));
    let only_a = ma.keys().filter(|k| !mb.contains_key(*k)).count();
    let only_b = mb.keys().filter(|k| !ma.contains_key(*k)).count();
    if only_a > 0 || only_b > 0 || ma.is_empty() {
        return Err(EvalError::MismatchedItems { only_a, only_b });
    }

    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    let mut mc = McNemar::default();
    for (id, ia) in &ma {
        let ib = mb[id];
        let g = groups.entry(ia.source.as_str()).or_default();
        g.0 += 1;
        g.1 += ia.reward.accuracy;
        g.2 += ib.reward.accuracy;
        match (ia.correct, ib.correct) {
            (true, true) => mc.both_right += 1,
            (false, false) => mc.both_wrong += 1,
            (true, false) => mc.only_a_right += 1,
            (false, true) => mc.only_b_right += 1,
        }
    }
    let row = |source: &str, n: usize, sa: f64, sb: f64| {
        let (accuracy_a, accuracy_b) = (sa / n as f64, sb / n as f64);
        SourceDelta {
            source: source.to_owned(),
            n,
            accuracy_a,
            accuracy_b,
            delta: accuracy_a - accuracy_b,
        }
    };
    let per_source: Vec<SourceDelta> = groups.iter().map(|(s, (n, sa, sb))| row(s, *n, *sa, *sb)).collect();
    let (n, sa, sb) = groups
        .values()
        .fold((0, 0.0, 0.0), |acc, g| (acc.0 + g.0, acc.1 + g.1, acc.2 + g.2));
    let speedup = if a.mean_latency_s == b.mean_latency_s {
        1.0
    } else {
        a.mean_latency_s / b.mean_latency_s
    };
    Ok(Comparison {
        per_source,
        overall: row("overall", n, sa, sb),
        action_success_delta: a.action_success_rate - b.action_success_rate,
        speedup,
        mcnemar: mc,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>6} {:>8} {:>8} {:>8}",
            "source", "n", "acc A", "acc B", "A-B"
        )?;
        for r in self.per_source.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                f,
                "{:<24} {:>6} {:>8.4} {:>8.4} {:>+8.4}",
                r.source, r.n, r.accuracy_a, r.accuracy_b, r.delta
            )?;
        }
        writeln!(f, "action success A-B  {:+.4}", self.action_success_delta)?;
        writeln!(f, "speedup (lat A/B)   {:.3}", self.speedup)?;
        let m = &self.mcnemar;
        write!(
            f,
            "mcnemar             both right {} | both wrong {} | only A {} | only B {}",
            m.both_right, m.both_wrong, m.only_a_right, m.only_b_right
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScriptedBackend;
    use crate::question::lettered;

    fn item(id: &str, gt: char) -> BenchmarkItem {
        BenchmarkItem {
            id: id.into(),
            image_path: "x.png".into(),
            question: "Is there a mass?".into(),
            options: lettered(["Yes", "No"]),
            ground_truth: gt,
            source: "s".into(),
            boxes: vec![],
        }
    }

    fn blank(_: &BenchmarkItem) -> Result<RgbImage, String> {
        Ok(RgbImage::new(32, 32))
    }

    fn seq() -> EvalConfig {
        EvalConfig {
            parallelism: 1,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn think_protocol_scores_tag_answers() {
        let items = [item("a", 'A'), item("b", 'B')];
        let backend = ScriptedBackend::replay(["<think>x</think> <answer>A</answer>", "<answer>A</answer>"]);
        let r = run_benchmark(&items, &backend, &blank, Protocol::Think, &seq()).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.action_success_rate, 1.0);
        assert_eq!(r.per_item[0].reward.total, 1.2);
        assert_eq!(r.per_item[1].reward.total, 0.2);
    }

    #[test]
    fn validation_of_items() {
        assert!(matches!(
            run_benchmark(
                &[],
                &ScriptedBackend::replay(Vec::<String>::new()),
                &blank,
                Protocol::Tar,
                &seq()
            ),
            Err(EvalError::Empty)
        ));
        let bad = item("a", 'C');
        assert!(bad.validate().is_err());
        let dup = [item("a", 'A'), item("a", 'A')];
        assert!(matches!(
            run_benchmark(&dup, &ScriptedBackend::replay(["x"]), &blank, Protocol::Tar, &seq()),
            Err(EvalError::DuplicateId(_))
        ));
    }

    #[test]
    fn majority_failures_abort() {
        let items = [item("a", 'A'), item("b", 'A'), item("c", 'A')];
        let backend = ScriptedBackend::replay(["<answer>A</answer>"]);
        let err = run_benchmark(&items, &backend, &blank, Protocol::Direct, &seq()).unwrap_err();
        assert!(matches!(err, EvalError::TooManyFailures { failed: 2, n: 3 }));
    }

    #[test]
    fn minority_failures_are_recorded() {
        let items = [item("a", 'A'), item("b", 'A'), item("c", 'A')];
        let backend = ScriptedBackend::replay(["<answer>A</answer>", "<answer>A</answer>"]);
        let r = run_benchmark(&items, &backend, &blank, Protocol::Direct, &seq()).unwrap();
        assert_eq!(r.failures, 1);
        assert!(r.per_item[2].error.is_some());
        assert!(!r.per_item[2].correct);
    }
}
