//! Linear-evaluation reports, embedding interpolation curves, prediction
//! jitter profiles and their CSV / JSON encodings.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{apply_transform, sample_transform, AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::inference::{
    self, build_index, central_embedding, mean_f64, query_index, sample_embeddings, tta_probs,
};
use crate::model::{Checkpoint, LinearHead};
use crate::parallel;
use crate::rng;
use crate::tensor::ops::PROB_FLOOR;
use crate::tensor::{argmax, log_softmax_f64, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Central,
    Tta,
    Metta,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Central, Method::Tta, Method::Metta];

    pub fn name(self) -> &'static str {
        match self {
            Method::Central => "central",
            Method::Tta => "tta",
            Method::Metta => "metta",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    #[serde(rename = "S")]
    pub samples: usize,
    pub top1: f64,
    pub nll: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub checkpoint: String,
    pub policy: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, method: Method, samples: usize) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.samples == samples)
    }
}

pub fn dataset_descriptor(ds: &Dataset) -> String {
    let [c, h, w] = ds.image_shape();
    format!(
        "{} images, {} classes, {c}x{h}x{w}",
        ds.len(),
        ds.num_classes()
    )
}

pub fn checkpoint_descriptor(ckpt: &Checkpoint) -> String {
    format!("backbone {:016x}", ckpt.backbone_digest())
}

/// Sampling key of a dataset image. Keyed by content so that aggregate
/// metrics do not depend on dataset order.
pub fn image_key(image: &Tensor) -> u64 {
    rng::content_key(image.data())
}

fn check_compat(ckpt: &Checkpoint, head: &LinearHead, ds: &Dataset) -> Result<()> {
    if head.dim() != ckpt.config.embedding_dim {
        return Err(Error::shape("head", ckpt.config.embedding_dim, head.dim()));
    }
    if ds.num_classes() > head.num_classes() {
        return Err(Error::shape(
            "head classes",
            ds.num_classes(),
            head.num_classes(),
        ));
    }
    Ok(())
}

/// Top-1 hit and NLL of one prediction given as logits.
fn score_logits(logits: &[f64], label: usize) -> (f64, f64) {
    let hit = (argmax(logits) == label) as u8 as f64;
    (hit, -log_softmax_f64(logits)[label])
}

fn score_probs(probs: &[f64], label: usize) -> (f64, f64) {
    let hit = (argmax(probs) == label) as u8 as f64;
    (hit, -probs[label].max(PROB_FLOOR).ln())
}

/// Means of `(hit, nll)` pairs, accumulated in order.
fn average(scores: &[(f64, f64)]) -> (f64, f64) {
    let n = scores.len() as f64;
    let (h, l) = scores
        .iter()
        .fold((0.0, 0.0), |(h, l), &(a, b)| (h + a, l + b));
    (h / n, l / n)
}

/// Evaluates every `(method, S)` pair with a shared set of augmentation
/// samples per image: the first `S` samples of a draw of `max(S)` are the
/// same as a draw of `S`.
pub fn evaluate_grid(
    ckpt: &Checkpoint,
    head: &LinearHead,
    ds: &Dataset,
    methods: &[Method],
    policy: &AugmentationPolicy,
    sample_counts: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_compat(ckpt, head, ds)?;
    if let Some(&s) = sample_counts.iter().find(|&&s| s < 1) {
        return Err(Error::TooFewSamples { min: 1, got: s });
    }
    let max_s = sample_counts.iter().copied().max().unwrap_or(1);
    let needs_samples = methods.iter().any(|&m| m != Method::Central);

    // per image: one (hit, nll) per (method, S) cell
    let cells: Vec<Vec<(f64, f64)>> = parallel::try_map(ds.len(), |i| {
        let image = ds.image(i);
        let label = ds.label(i);
        let central = if methods.contains(&Method::Central) {
            Some(score_logits(
                &head.logits(&central_embedding(ckpt, image)?)?,
                label,
            ))
        } else {
            None
        };
        let samples = if needs_samples {
            sample_embeddings(ckpt, image, policy, max_s, seed, image_key(image))?
        } else {
            Vec::new()
        };
        let mut out = Vec::new();
        for &s in sample_counts {
            let set = if policy.is_enumerable() {
                &samples[..]
            } else {
                &samples[..s.min(samples.len())]
            };
            for &m in methods {
                out.push(match m {
                    Method::Central => central.expect("computed above"),
                    Method::Metta => score_logits(&head.logits_f64(&mean_f64(set))?, label),
                    Method::Tta => score_probs(&tta_probs(head, set)?, label),
                });
            }
        }
        Ok::<_, Error>(out)
    })?;

    let mut rows = Vec::new();
    let mut col = 0;
    for &s in sample_counts {
        for &m in methods {
            let scores: Vec<(f64, f64)> = cells.iter().map(|c| c[col]).collect();
            let (top1, nll) = average(&scores);
            rows.push(EvalRow {
                method: m,
                samples: s,
                top1,
                nll,
                seed,
            });
            col += 1;
        }
    }
    Ok(EvalReport {
        dataset: dataset_descriptor(ds),
        checkpoint: checkpoint_descriptor(ckpt),
        policy: policy.descriptor(),
        rows,
    })
}

/// Top-1 accuracy and mean NLL of one inference method.
pub fn evaluate(
    ckpt: &Checkpoint,
    head: &LinearHead,
    ds: &Dataset,
    method: Method,
    policy: &AugmentationPolicy,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_grid(ckpt, head, ds, &[method], policy, &[samples], seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    CentralCrop,
    SingleAugmentation,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Endpoint::CentralCrop => "central_crop",
            Endpoint::SingleAugmentation => "single_augmentation",
        })
    }
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central_crop" => Ok(Endpoint::CentralCrop),
            "single_augmentation" => Ok(Endpoint::SingleAugmentation),
            other => Err(Error::InvalidConfig(format!("unknown endpoint `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha: f64,
    pub endpoint: Endpoint,
    pub nll: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCurve {
    pub endpoint: Endpoint,
    #[serde(rename = "S")]
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<CurveRow>,
}

impl InterpolationCurve {
    pub fn at(&self, alpha: f64) -> Option<&CurveRow> {
        self.rows.iter().find(|r| r.alpha == alpha)
    }
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidAlphas(m.to_string()));
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return bad("alphas must lie in [0, 1]");
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return bad("alphas must be strictly ascending");
    }
    if alphas.first() != Some(&0.0) || alphas.last() != Some(&1.0) {
        return bad("alphas must include 0 and 1");
    }
    Ok(())
}

fn lerp(m: &[f64], y: &[f64], alpha: f64) -> Vec<f64> {
    m.iter()
        .zip(y)
        .map(|(&m, &y)| (1.0 - alpha) * m + alpha * y)
        .collect()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Evaluates the head along `(1 - α)·mean + α·endpoint`. For the
/// single-augmentation endpoint every one of the `S` samples serves as an
/// endpoint in turn and the per-image metrics are averaged over them.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_curve(
    ckpt: &Checkpoint,
    head: &LinearHead,
    ds: &Dataset,
    endpoint: Endpoint,
    alphas: &[f64],
    policy: &AugmentationPolicy,
    samples: usize,
    seed: u64,
) -> Result<InterpolationCurve> {
    validate_alphas(alphas)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_compat(ckpt, head, ds)?;

    let per_image: Vec<Vec<(f64, f64)>> = parallel::try_map(ds.len(), |i| {
        let image = ds.image(i);
        let label = ds.label(i);
        let set = sample_embeddings(ckpt, image, policy, samples, seed, image_key(image))?;
        let mean = mean_f64(&set);
        let ends: Vec<Vec<f64>> = match endpoint {
            Endpoint::CentralCrop => vec![to_f64(&central_embedding(ckpt, image)?)],
            Endpoint::SingleAugmentation => set.iter().map(to_f64).collect(),
        };
        alphas
            .iter()
            .map(|&a| {
                let scores = ends
                    .iter()
                    .map(|y| Ok(score_logits(&head.logits_f64(&lerp(&mean, y, a))?, label)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(average(&scores))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let rows = alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let scores: Vec<(f64, f64)> = per_image.iter().map(|r| r[j]).collect();
            let (accuracy, nll) = average(&scores);
            CurveRow {
                alpha,
                endpoint,
                nll,
                accuracy,
            }
        })
        .collect();
    Ok(InterpolationCurve {
        endpoint,
        samples,
        seed,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassJitter {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageJitter {
    pub image_id: usize,
    /// `[S][K]` per-sample softmax outputs.
    pub probs: Vec<Vec<f64>>,
    pub classes: Vec<ClassJitter>,
    /// Samples whose argmax differs from the most frequent argmax.
    pub argmax_flips: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct JitterProfile {
    pub images: Vec<ImageJitter>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRow {
    pub image_id: usize,
    pub class: usize,
    pub prob_mean: f64,
    pub prob_std: f64,
    pub prob_min: f64,
    pub prob_max: f64,
    pub argmax_flips: usize,
}

/// Population statistics of one column. Deviations are taken from the first
/// value, so a constant column has exactly zero spread.
pub fn column_stats(values: &[f64]) -> ClassJitter {
    let n = values.len() as f64;
    let x0 = values[0];
    let shift = values.iter().map(|&v| v - x0).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v - x0 - shift).powi(2))
        .sum::<f64>()
        / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ClassJitter {
        mean: (x0 + shift).clamp(min, max),
        std: var.sqrt(),
        min,
        max,
    }
}

/// Most frequent argmax (lowest class on ties) and the number of samples
/// disagreeing with it.
pub fn argmax_flips(probs: &[Vec<f64>]) -> (usize, usize) {
    let k = probs.first().map_or(0, Vec::len);
    let mut votes = vec![0usize; k];
    let picks: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    picks.iter().for_each(|&c| votes[c] += 1);
    let majority = argmax(&votes);
    (majority, picks.iter().filter(|&&c| c != majority).count())
}

pub fn image_jitter(image_id: usize, probs: Vec<Vec<f64>>) -> ImageJitter {
    let k = probs[0].len();
    let classes = (0..k)
        .map(|c| column_stats(&probs.iter().map(|p| p[c]).collect::<Vec<_>>()))
        .collect();
    let (_, flips) = argmax_flips(&probs);
    ImageJitter {
        image_id,
        probs,
        classes,
        argmax_flips: flips,
    }
}

/// Spread of per-sample softmax outputs over `S ≥ 2` augmentations.
pub fn jitter_stats(
    ckpt: &Checkpoint,
    head: &LinearHead,
    ds: &Dataset,
    policy: &AugmentationPolicy,
    samples: usize,
    seed: u64,
) -> Result<JitterProfile> {
    if samples < 2 {
        return Err(Error::TooFewSamples {
            min: 2,
            got: samples,
        });
    }
    check_compat(ckpt, head, ds)?;
    let images = parallel::try_map(ds.len(), |i| {
        let image = ds.image(i);
        let set = sample_embeddings(ckpt, image, policy, samples, seed, image_key(image))?;
        Ok::<_, Error>(image_jitter(i, inference::sample_probs(head, &set)?))
    })?;
    Ok(JitterProfile { images })
}

impl JitterProfile {
    pub fn rows(&self) -> Vec<JitterRow> {
        self.images
            .iter()
            .flat_map(|im| {
                im.classes
                    .iter()
                    .enumerate()
                    .map(move |(class, c)| JitterRow {
                        image_id: im.image_id,
                        class,
                        prob_mean: c.mean,
                        prob_std: c.std,
                        prob_min: c.min,
                        prob_max: c.max,
                        argmax_flips: im.argmax_flips,
                    })
            })
            .collect()
    }

    /// CSV `image_id,sample_index,p_0..p_{K-1}` of every per-sample output.
    pub fn write_probability_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let k = self.images.first().map_or(0, |im| im.classes.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image_id".to_string(), "sample_index".to_string()];
        header.extend((0..k).map(|c| format!("p_{c}")));
        w.write_record(&header)?;
        for im in &self.images {
            for (s, p) in im.probs.iter().enumerate() {
                let mut rec = vec![im.image_id.to_string(), s.to_string()];
                rec.extend(p.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a per-sample probability dump back as `(image_id, [S][K])`.
pub fn read_probability_dump(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("probability dump `{s}`: {e}")))
        };
        let id = num(&rec[0])? as usize;
        let p = rec.iter().skip(2).map(num).collect::<Result<Vec<_>>>()?;
        match out.last_mut() {
            Some((last, rows)) if *last == id => rows.push(p),
            _ => out.push((id, vec![p])),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub index_policy: String,
    pub queries: usize,
    pub recall_at_1: f64,
}

/// Recall@1 of retrieving each corpus image from a distorted view of it
/// (one `query_policy` sample per image).
pub fn retrieval_recall(
    ckpt: &Checkpoint,
    corpus: &Dataset,
    index_policy: &AugmentationPolicy,
    query_policy: &AugmentationPolicy,
    seed: u64,
) -> Result<RecallRow> {
    let index = build_index(ckpt, corpus, index_policy, 1, seed)?;
    let hits = parallel::try_map(corpus.len(), |i| {
        let image = corpus.image(i);
        let (_, h, w) = image.dims3()?;
        let t = sample_transform(query_policy, h, w, seed, image_key(image), 0);
        let query = apply_transform(image, &t)?;
        Ok::<_, Error>(query_index(&index, ckpt, &query, index_policy, 1)?[0].0 == i)
    })?;
    Ok(RecallRow {
        index_policy: index_policy.descriptor(),
        queries: corpus.len(),
        recall_at_1: hits.iter().filter(|&&h| h).count() as f64 / corpus.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidConfig(format!(
                "unknown report format `{other}`"
            ))),
        }
    }
}

/// Anything emitted as a table of rows.
pub trait Report {
    type Row: Serialize + DeserializeOwned;
    const HEADER: &'static [&'static str];

    fn rows(&self) -> Vec<Self::Row>;
}

impl Report for EvalReport {
    type Row = EvalRow;
    const HEADER: &'static [&'static str] = &["method", "S", "top1", "nll", "seed"];

    fn rows(&self) -> Vec<EvalRow> {
        self.rows.clone()
    }
}

impl Report for InterpolationCurve {
    type Row = CurveRow;
    const HEADER: &'static [&'static str] = &["alpha", "endpoint", "nll", "accuracy"];

    fn rows(&self) -> Vec<CurveRow> {
        self.rows.clone()
    }
}

impl Report for JitterProfile {
    type Row = JitterRow;
    const HEADER: &'static [&'static str] = &[
        "image_id",
        "class",
        "prob_mean",
        "prob_std",
        "prob_min",
        "prob_max",
        "argmax_flips",
    ];

    fn rows(&self) -> Vec<JitterRow> {
        JitterProfile::rows(self)
    }
}

impl Report for Vec<RecallRow> {
    type Row = RecallRow;
    const HEADER: &'static [&'static str] = &["index_policy", "queries", "recall_at_1"];

    fn rows(&self) -> Vec<RecallRow> {
        self.clone()
    }
}

/// Writes the rows of `report` as CSV (header always present) or as a JSON
/// array of row objects.
pub fn emit_report<R: Report>(
    report: &R,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let rows = report.rows();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(path)?;
            w.write_record(R::HEADER)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, &rows)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Parses rows written by [`emit_report`].
pub fn read_report<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<Vec<T>> {
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            Ok(r.deserialize()
                .collect::<std::result::Result<Vec<T>, _>>()?)
        }
        ReportFormat::Json => Ok(serde_json::from_reader(File::open(path)?)?),
    }
}
