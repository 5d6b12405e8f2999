//! Experiment orchestration: the five-model ablation grid, evaluation
//! metrics, embedding export with PCA, and divergence handling.
//!
//! Metric note: perceptual scores (PESQ, speech error rate, MOS) need
//! licensed tooling, an external recognizer, or human raters; the report
//! substitutes proxies — SI-SNR improvement and log-spectral distance for
//! separation quality, classifier accuracy and silhouette score for
//! embedding quality. The mapping is recorded in the report header.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::corpus::{
    filter_corpus, read_manifest, resolve_audio, write_manifest, QualityLabel, Split,
    UtteranceRecord,
};
use crate::dsp::{log_spectral_distance, magnitude, si_snr, stft, StftParams};
use crate::error::{Error, Result};
use crate::gsttts::{
    aqc_accuracy, load_tts_examples, train_tts, Text2Mel, Text2MelConfig, TtsLogEntry,
    TtsTrainOptions,
};
use crate::musicfilter::MusicFilter;
use crate::nn::AdamConfig;

// ---- ablation variants ----

/// The five ablation models: a plain text-to-mel baseline, style tokens
/// alone, style tokens with the auxiliary classifier, and both of those
/// trained on music-filtered (rather than raw noisy) degraded speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Tts,
    Gst,
    GstAux,
    GstMf,
    GstMfAux,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Tts,
        Variant::Gst,
        Variant::GstAux,
        Variant::GstMf,
        Variant::GstMfAux,
    ];

    /// Degraded training stream comes from the music filter.
    pub fn uses_filter(self) -> bool {
        matches!(self, Variant::GstMf | Variant::GstMfAux)
    }

    /// Auxiliary classifier loss is active (`lambda > 0`).
    pub fn uses_aux(self) -> bool {
        matches!(self, Variant::GstAux | Variant::GstMfAux)
    }

    /// Decoder is conditioned on the style/quality embedding.
    pub fn uses_style(self) -> bool {
        !matches!(self, Variant::Tts)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Tts => "TTS",
            Variant::Gst => "GST",
            Variant::GstAux => "GST+Aux",
            Variant::GstMf => "GST+MF",
            Variant::GstMfAux => "GST+MF+Aux",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TTS" => Ok(Variant::Tts),
            "GST" => Ok(Variant::Gst),
            "GST+AUX" => Ok(Variant::GstAux),
            "GST+MF" => Ok(Variant::GstMf),
            "GST+MF+AUX" => Ok(Variant::GstMfAux),
            other => Err(Error::Usage(format!(
                "unknown variant {other:?}; expected TTS, GST, GST+Aux, GST+MF, or GST+MF+Aux"
            ))),
        }
    }
}

// ---- clustering / projection metrics ----

/// Mean silhouette score of labelled points, in [-1, 1]. Points are rows of
/// `data`; singleton-cluster points score 0 by convention.
pub fn silhouette(data: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = data.nrows();
    if n != labels.len() {
        return Err(Error::Shape(format!(
            "{n} points but {} labels",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::Data("silhouette needs at least 2 points".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("silhouette needs at least 2 clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        data.row(i)
            .iter()
            .zip(data.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // s(i) = 0
        }
        let a = (0..n)
            .filter(|&j| j != i && labels[j] == own)
            .map(|j| dist(i, j))
            .sum::<f64>()
            / (own_size - 1) as f64;
        let b = classes
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b).max(1e-300);
    }
    Ok(total / n as f64)
}

/// A fitted 2-d principal-component projection.
#[derive(Debug, Clone)]
pub struct Pca2d {
    pub mean: Array1<f64>,
    /// The two leading eigenvectors of the covariance, rows `[2 x d]`; each
    /// has its largest-magnitude entry positive, fixing the sign.
    pub components: Array2<f64>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
}

impl Pca2d {
    /// Project one point into the 2-d subspace.
    pub fn project(&self, x: &Array1<f64>) -> [f64; 2] {
        let c = x - &self.mean;
        [self.components.row(0).dot(&c), self.components.row(1).dot(&c)]
    }

    /// Map 2-d coordinates back to the original space (onto the subspace).
    pub fn reconstruct(&self, p: [f64; 2]) -> Array1<f64> {
        &self.mean + &(p[0] * &self.components.row(0).to_owned() + p[1] * &self.components.row(1).to_owned())
    }
}

/// Fit a 2-d PCA by eigendecomposition of the centered covariance. Rows of
/// `data` are points; requires at least 3 points and 2 dimensions.
pub fn pca_2d(data: &Array2<f64>) -> Result<Pca2d> {
    let (n, d) = data.dim();
    if n < 3 {
        return Err(Error::Data(format!(
            "principal-component projection needs at least 3 points, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::Data(format!(
            "principal-component projection needs at least 2 dimensions, got {d}"
        )));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let centered = data - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let total: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    let mut components = Array2::zeros((2, d));
    let mut explained = [0.0; 2];
    for (r, &k) in order.iter().take(2).enumerate() {
        let col = eig.eigenvectors.column(k);
        // Fix the sign: largest-magnitude entry positive.
        let lead = (0..d).fold(0, |best, i| {
            if col[i].abs() > col[best].abs() {
                i
            } else {
                best
            }
        });
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[r, i]] = sign * col[i];
        }
        explained[r] = if total > 0.0 {
            eig.eigenvalues[k].max(0.0) / total
        } else {
            0.0
        };
    }
    Ok(Pca2d {
        mean,
        components,
        explained,
    })
}

// ---- embedding export ----

/// One exported utterance: its quality embedding and 2-d projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRow {
    pub utterance_id: String,
    pub label: QualityLabel,
    pub embedding: Vec<f64>,
    pub pc: [f64; 2],
}

/// The full embedding export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedExport {
    pub rows: Vec<EmbedRow>,
    pub explained: [f64; 2],
    /// Silhouette of clean vs. degraded labels in the full embedding space.
    pub silhouette: f64,
}

/// Compute quality embeddings for every utterance in `manifests`, project
/// them to 2-d, and (if `csv_path` is given) write a CSV with header
/// `utterance_id,label,e0..e{d-1},pc1,pc2`.
pub fn embed_export(
    model: &Text2Mel,
    manifests: &[PathBuf],
    split: Option<Split>,
    stft_params: &StftParams,
    csv_path: Option<&Path>,
) -> Result<EmbedExport> {
    let examples = load_tts_examples(
        manifests,
        split,
        &model.vocab,
        &model.mel_stats,
        stft_params,
        model.config.n_mels,
        model.config.downsample,
        true,
    )?;
    let d = model.config.quality_dim();
    let mut data = Array2::zeros((examples.len(), d));
    for (i, ex) in examples.iter().enumerate() {
        let e = model.quality_embedding(&ex.mel)?;
        data.row_mut(i).assign(&e.vector);
    }
    let pca = pca_2d(&data)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.class()).collect();
    let sil = silhouette(&data, &labels)?;
    let rows: Vec<EmbedRow> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| EmbedRow {
            utterance_id: ex.id.clone(),
            label: ex.label,
            embedding: data.row(i).to_vec(),
            pc: pca.project(&data.row(i).to_owned()),
        })
        .collect();
    if let Some(path) = csv_path {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut header = String::from("utterance_id,label");
        for i in 0..d {
            header.push_str(&format!(",e{i}"));
        }
        header.push_str(",pc1,pc2\n");
        f.write_all(header.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for r in &rows {
            let mut line = format!("{},{:?}", r.utterance_id, r.label);
            for v in &r.embedding {
                line.push_str(&format!(",{v}"));
            }
            line.push_str(&format!(",{},{}\n", r.pc[0], r.pc[1]));
            f.write_all(line.as_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(EmbedExport {
        rows,
        explained: pca.explained,
        silhouette: sil,
    })
}

// ---- separation metrics ----

/// Per-utterance separation metrics for one (clean, noisy, filtered) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationRow {
    pub id: String,
    pub snr_db: f64,
    pub si_snr_noisy: f64,
    pub si_snr_filtered: f64,
    pub lsd_noisy: f64,
    pub lsd_filtered: f64,
}

/// Aggregate separation metrics over matched manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationReport {
    pub split: Split,
    pub rows: Vec<SeparationRow>,
    pub mean_si_snr_improvement: f64,
    pub mean_lsd_noisy: f64,
    pub mean_lsd_filtered: f64,
}

/// Compare noisy and filtered audio against the clean reference, matched by
/// utterance id, over one split.
pub fn separation_metrics(
    clean_manifest: &Path,
    noisy_manifest: &Path,
    filtered_manifest: &Path,
    stft_params: &StftParams,
    split: Split,
) -> Result<SeparationReport> {
    let clean = read_manifest(clean_manifest)?;
    let noisy = read_manifest(noisy_manifest)?;
    let filtered = read_manifest(filtered_manifest)?;
    let by_id = |rs: &[UtteranceRecord]| -> std::collections::BTreeMap<String, UtteranceRecord> {
        rs.iter().map(|r| (r.id.clone(), r.clone())).collect()
    };
    let noisy_by = by_id(&noisy);
    let filt_by = by_id(&filtered);
    let mut rows = Vec::new();
    for c in clean.iter().filter(|r| r.split == split) {
        let (Some(nr), Some(fr)) = (noisy_by.get(&c.id), filt_by.get(&c.id)) else {
            continue;
        };
        let cw = read_wav(&resolve_audio(clean_manifest, c))?;
        let nw = read_wav(&resolve_audio(noisy_manifest, nr))?;
        let fw = read_wav(&resolve_audio(filtered_manifest, fr))?;
        let n = cw.len().min(nw.len()).min(fw.len());
        let trim = |w: &crate::audio::Waveform| {
            crate::audio::Waveform::new(w.samples[..n].to_vec(), w.sample_rate)
        };
        let (cw, nw, fw) = (trim(&cw)?, trim(&nw)?, trim(&fw)?);
        let cm = magnitude(&stft(&cw, stft_params)?);
        let nm = magnitude(&stft(&nw, stft_params)?);
        let fm = magnitude(&stft(&fw, stft_params)?);
        rows.push(SeparationRow {
            id: c.id.clone(),
            snr_db: nr.snr_db.unwrap_or(f64::NAN),
            si_snr_noisy: si_snr(&cw, &nw)?,
            si_snr_filtered: si_snr(&cw, &fw)?,
            lsd_noisy: log_spectral_distance(&cm, &nm)?,
            lsd_filtered: log_spectral_distance(&cm, &fm)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no matched utterances in split {split:?}"
        )));
    }
    let n = rows.len() as f64;
    Ok(SeparationReport {
        split,
        mean_si_snr_improvement: rows
            .iter()
            .map(|r| r.si_snr_filtered - r.si_snr_noisy)
            .sum::<f64>()
            / n,
        mean_lsd_noisy: rows.iter().map(|r| r.lsd_noisy).sum::<f64>() / n,
        mean_lsd_filtered: rows.iter().map(|r| r.lsd_filtered).sum::<f64>() / n,
        rows,
    })
}

// ---- ablation grid ----

/// Data inputs shared by ablation cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub clean_manifest: PathBuf,
    pub noisy_manifest: PathBuf,
    /// Pre-filtered degraded stream; derived from `filter_checkpoint` when
    /// absent.
    pub filtered_manifest: Option<PathBuf>,
    pub filter_checkpoint: Option<PathBuf>,
}

/// One ablation cell: a model variant at a clean-data ratio and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub variant: Variant,
    /// Fraction of training utterances kept clean; the rest come from the
    /// degraded (noisy or filtered) stream.
    pub clean_ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub steps: u64,
    pub lr: f64,
    pub paths: DataPaths,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clean_ratio > 0.0 && self.clean_ratio < 1.0) {
            return Err(Error::Usage(format!(
                "clean_ratio must be in (0, 1), got {}",
                self.clean_ratio
            )));
        }
        if self.variant.uses_aux() && !(self.lambda > 0.0) {
            return Err(Error::Usage(format!(
                "variant {} requires lambda > 0, got {}",
                self.variant, self.lambda
            )));
        }
        if self.variant.uses_filter()
            && self.paths.filter_checkpoint.is_none()
            && self.paths.filtered_manifest.is_none()
        {
            return Err(Error::Usage(format!(
                "variant {} requires a music-filter checkpoint or a pre-filtered manifest",
                self.variant
            )));
        }
        if self.steps == 0 {
            return Err(Error::Usage("steps must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Usage(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Build the full grid: every variant x clean ratio x seed.
pub fn grid(
    variants: &[Variant],
    clean_ratios: &[f64],
    seeds: &[u64],
    lambda: f64,
    steps: u64,
    lr: f64,
    paths: &DataPaths,
) -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for &variant in variants {
        for &clean_ratio in clean_ratios {
            for &seed in seeds {
                out.push(ExperimentSpec {
                    variant,
                    clean_ratio,
                    lambda: if variant.uses_aux() { lambda } else { 0.0 },
                    seed,
                    steps,
                    lr,
                    paths: paths.clone(),
                });
            }
        }
    }
    out
}

/// Terminal status of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed,
}

/// A metric value tagged with its provenance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub seed: u64,
    pub split: Split,
}

/// Result of one ablation cell; fully populated even on failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub variant: String,
    pub clean_ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub status: CellStatus,
    /// Error or divergence detail when status is not Ok.
    pub message: Option<String>,
    pub aqc_accuracy: Option<Metric>,
    pub silhouette: Option<Metric>,
    pub final_loss: Option<Metric>,
    /// Training curve, subsampled to at most 200 points.
    pub loss_curve: Vec<TtsLogEntry>,
}

/// The assembled experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Documents the proxy-metric substitutions.
    pub header: String,
    pub separation: Option<SeparationReport>,
    pub cells: Vec<CellReport>,
}

const REPORT_HEADER: &str = "Proxy metrics: SI-SNR improvement and log-spectral distance stand in \
for PESQ (separation quality); held-out classifier accuracy stands in for speech error rate; \
silhouette of clean-vs-degraded quality embeddings stands in for listening-test clustering. \
PESQ, ASR-based error rates, and MOS require licensed tools, an external recognizer, or human \
raters and are out of scope.";

/// Loss-curve divergence: a non-finite loss anywhere, or any loss exceeding
/// 100x the first logged loss. The first step's loss is an architecture-level
/// constant (sigmoid outputs around one-half against unit-interval targets),
/// so a 100x excursion above it only happens when optimization blows up;
/// healthy runs stay within a small multiple throughout.
pub fn diverged(curve: &[TtsLogEntry]) -> Option<String> {
    let base = match curve.first() {
        Some(e) => e.l_total,
        None => return None,
    };
    for e in curve {
        if !e.l_total.is_finite() {
            return Some(format!("non-finite loss at step {}", e.step));
        }
        if e.step > curve[0].step && e.l_total > 100.0 * base {
            return Some(format!(
                "loss {} at step {} exceeds 100x the initial loss {}",
                e.l_total, e.step, base
            ));
        }
    }
    None
}

fn subsample(curve: Vec<TtsLogEntry>, cap: usize) -> Vec<TtsLogEntry> {
    if curve.len() <= cap {
        return curve;
    }
    let stride = curve.len().div_ceil(cap);
    let last = curve.last().cloned();
    let mut out: Vec<TtsLogEntry> =
        curve.into_iter().step_by(stride).collect();
    if let (Some(l), Some(tail)) = (last, out.last()) {
        if tail.step != l.step {
            out.push(l);
        }
    }
    out
}

/// Write per-cell manifests: clean records for the first `clean_ratio`
/// fraction of training utterances (seeded shuffle), degraded records for
/// the rest, plus both streams' test split. Audio paths are made absolute so
/// the manifests resolve from anywhere.
fn cell_manifests(
    spec: &ExperimentSpec,
    degraded_manifest: &Path,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let absolutize = |manifest: &Path, mut r: UtteranceRecord| -> Result<UtteranceRecord> {
        let p = resolve_audio(manifest, &r);
        let abs = p
            .canonicalize()
            .map_err(|e| Error::io(p.display().to_string(), e))?;
        r.audio_path = abs.display().to_string();
        Ok(r)
    };
    let clean: Vec<UtteranceRecord> = read_manifest(&spec.paths.clean_manifest)?
        .into_iter()
        .map(|r| absolutize(&spec.paths.clean_manifest, r))
        .collect::<Result<_>>()?;
    let degraded: Vec<UtteranceRecord> = read_manifest(degraded_manifest)?
        .into_iter()
        .map(|r| absolutize(degraded_manifest, r))
        .collect::<Result<_>>()?;
    let degraded_by: std::collections::BTreeMap<&str, &UtteranceRecord> =
        degraded.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut train_ids: Vec<&str> = clean
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.id.as_str())
        .collect();
    train_ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_ids.shuffle(&mut rng);
    let n_clean = ((train_ids.len() as f64 * spec.clean_ratio).ceil() as usize)
        .clamp(1, train_ids.len().saturating_sub(1));
    let clean_ids: std::collections::BTreeSet<&str> =
        train_ids[..n_clean].iter().copied().collect();

    let mut clean_out = Vec::new();
    let mut degraded_out = Vec::new();
    for r in &clean {
        if r.split == Split::Test || clean_ids.contains(r.id.as_str()) {
            clean_out.push(r.clone());
        } else if let Some(d) = degraded_by.get(r.id.as_str()) {
            degraded_out.push((*d).clone());
        } else {
            return Err(Error::Data(format!(
                "{}: no degraded counterpart in {}",
                r.id,
                degraded_manifest.display()
            )));
        }
    }
    // Held-out degraded examples for two-class evaluation.
    for d in &degraded {
        if d.split == Split::Test {
            degraded_out.push(d.clone());
        }
    }
    if degraded_out.is_empty() {
        return Err(Error::Data(
            "cell has no degraded utterances; lower clean_ratio".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let clean_path = dir.join("clean.jsonl");
    let degraded_path = dir.join("degraded.jsonl");
    write_manifest(&clean_path, &clean_out)?;
    write_manifest(&degraded_path, &degraded_out)?;
    Ok(vec![clean_path, degraded_path])
}

/// Run one cell: assemble its data, train, detect divergence, evaluate.
/// Infrastructure errors (missing files, bad configs) surface as `Err`;
/// training-dynamics failures are reported in the cell status.
pub fn run_cell(
    spec: &ExperimentSpec,
    config: &Text2MelConfig,
    stft_params: &StftParams,
    degraded_manifest: &Path,
    work_dir: &Path,
) -> Result<CellReport> {
    spec.validate()?;
    let mut report = CellReport {
        variant: spec.variant.to_string(),
        clean_ratio: spec.clean_ratio,
        lambda: spec.lambda,
        seed: spec.seed,
        status: CellStatus::Ok,
        message: None,
        aqc_accuracy: None,
        silhouette: None,
        final_loss: None,
        loss_curve: Vec::new(),
    };
    let manifests = cell_manifests(spec, degraded_manifest, work_dir)?;
    let mut config = config.clone();
    config.use_style = spec.variant.uses_style();
    let opts = TtsTrainOptions {
        steps: spec.steps,
        seed: spec.seed,
        lambda: spec.lambda,
        adam: AdamConfig {
            lr: spec.lr,
            ..AdamConfig::default()
        },
        stft: *stft_params,
        allow_noisy: !spec.variant.uses_filter(),
        ..TtsTrainOptions::default()
    };
    let (model, log) = match train_tts(&manifests, config, &opts) {
        Ok(pair) => pair,
        Err(Error::Numerical(msg)) => {
            report.status = CellStatus::Diverged;
            report.message = Some(msg);
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    if let Some(msg) = diverged(&log) {
        report.status = CellStatus::Diverged;
        report.message = Some(msg);
        report.loss_curve = subsample(log, 200);
        return Ok(report);
    }
    if let Some(last) = log.last() {
        report.final_loss = Some(Metric {
            value: last.l_total,
            seed: spec.seed,
            split: Split::Train,
        });
    }
    report.loss_curve = subsample(log, 200);

    let held_out = load_tts_examples(
        &manifests,
        Some(Split::Test),
        &model.vocab,
        &model.mel_stats,
        stft_params,
        model.config.n_mels,
        model.config.downsample,
        true,
    )?;
    report.aqc_accuracy = Some(Metric {
        value: aqc_accuracy(&model, &held_out)?,
        seed: spec.seed,
        split: Split::Test,
    });
    let export = embed_export(&model, &manifests, Some(Split::Train), stft_params, None)?;
    report.silhouette = Some(Metric {
        value: export.silhouette,
        seed: spec.seed,
        split: Split::Train,
    });
    Ok(report)
}

/// Run every cell of the grid, isolating failures: a diverged or failed cell
/// is recorded in the report and does not affect its siblings.
pub fn run_ablation(
    cells: &[ExperimentSpec],
    config: &Text2MelConfig,
    stft_params: &StftParams,
    out_dir: &Path,
) -> Result<EvalReport> {
    if cells.is_empty() {
        return Err(Error::Usage("empty ablation grid".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    // Materialize the filtered stream once if any cell needs it.
    let mut filtered_manifest: Option<PathBuf> = cells[0].paths.filtered_manifest.clone();
    if filtered_manifest.is_none() && cells.iter().any(|c| c.variant.uses_filter()) {
        let ckpt_path = cells
            .iter()
            .find_map(|c| c.paths.filter_checkpoint.clone())
            .ok_or_else(|| {
                Error::Usage("filter variants present but no filter checkpoint".into())
            })?;
        let (filter, _) = MusicFilter::load(&ckpt_path)?;
        let fdir = out_dir.join("filtered");
        let records = filter_corpus(&cells[0].paths.noisy_manifest, &fdir, &|w| {
            filter.infer_file(w, stft_params)
        })?;
        let path = fdir.join("filtered.jsonl");
        write_manifest(&path, &records)?;
        filtered_manifest = Some(path);
    }

    let mut separation = None;
    if let Some(fm) = &filtered_manifest {
        separation = separation_metrics(
            &cells[0].paths.clean_manifest,
            &cells[0].paths.noisy_manifest,
            fm,
            stft_params,
            Split::Test,
        )
        .ok();
    }

    let mut reports = Vec::with_capacity(cells.len());
    for (i, spec) in cells.iter().enumerate() {
        let degraded = if spec.variant.uses_filter() {
            filtered_manifest
                .clone()
                .ok_or_else(|| Error::Usage("filter variant without filtered data".into()))?
        } else {
            spec.paths.noisy_manifest.clone()
        };
        let work = out_dir.join(format!("cell_{i:03}"));
        match run_cell(spec, config, stft_params, &degraded, &work) {
            Ok(r) => reports.push(r),
            Err(e) => reports.push(CellReport {
                variant: spec.variant.to_string(),
                clean_ratio: spec.clean_ratio,
                lambda: spec.lambda,
                seed: spec.seed,
                status: CellStatus::Failed,
                message: Some(e.to_string()),
                aqc_accuracy: None,
                silhouette: None,
                final_loss: None,
                loss_curve: Vec::new(),
            }),
        }
    }
    Ok(EvalReport {
        header: REPORT_HEADER.to_string(),
        separation,
        cells: reports,
    })
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn variant_parsing_round_trips() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("gst+aux".parse::<Variant>().is_ok());
        assert!("XYZ".parse::<Variant>().is_err());
        assert!(Variant::GstMfAux.uses_filter() && Variant::GstMfAux.uses_aux());
        assert!(!Variant::Tts.uses_style());
        assert!(Variant::Gst.uses_style() && !Variant::Gst.uses_aux());
    }

    #[test]
    fn silhouette_separates_tight_clusters() {
        // Two tight, well-separated clusters: near-perfect score.
        let mut data = Array2::zeros((20, 3));
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..20 {
            let c = i % 2;
            for j in 0..3 {
                data[[i, j]] = c as f64 * 50.0 + rng.gen_range(-0.1..0.1);
            }
            labels.push(c);
        }
        let s = silhouette(&data, &labels).unwrap();
        assert!(s > 0.95, "silhouette {s}");
        // Shuffled labels destroy the structure.
        let bad: Vec<usize> = (0..20).map(|i| (i / 10) % 2).collect();
        let s_bad = silhouette(&data, &bad).unwrap();
        assert!(s_bad < s);
        assert!(silhouette(&data, &vec![0; 20]).is_err());
    }

    #[test]
    fn pca_projects_separated_gaussians_cleanly() {
        // Two isotropic Gaussian clusters. For Euclidean silhouette on the
        // 2-d projection, mean intra-cluster distance is ~1.77 sigma, so the
        // expected score at separation k*sigma is ~1 - 1.77/k: ~0.82 at 10
        // sigma and ~0.91 at 20 sigma; 30 sigma clears 0.9 with margin.
        use rand_distr::{Distribution, Normal};
        let mut run = |sep: f64| -> (f64, Pca2d) {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let n = 60;
            let d = 6;
            let mut data = Array2::zeros((n, d));
            let mut labels = Vec::new();
            for i in 0..n {
                let c = i % 2;
                for j in 0..d {
                    let center = if j == 0 { c as f64 * sep } else { 0.0 };
                    data[[i, j]] = center + normal.sample(&mut rng);
                }
                labels.push(c);
            }
            let pca = pca_2d(&data).unwrap();
            let mut proj = Array2::zeros((n, 2));
            for i in 0..n {
                let p = pca.project(&data.row(i).to_owned());
                proj[[i, 0]] = p[0];
                proj[[i, 1]] = p[1];
            }
            (silhouette(&proj, &labels).unwrap(), pca)
        };
        let (s10, pca) = run(10.0);
        assert!(s10 > 0.75, "projected silhouette at 10 sigma: {s10}");
        let (s30, _) = run(30.0);
        assert!(s30 > 0.9, "projected silhouette at 30 sigma: {s30}");
        assert!(pca.explained[0] > pca.explained[1]);
        assert!(pca.explained[0] <= 1.0 + 1e-12);
        // Sign convention: each component's largest entry is positive.
        for r in 0..2 {
            let row = pca.components.row(r);
            let lead = row.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn projection_is_idempotent_on_the_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((12, 5), |_| rng.gen_range(-1.0..1.0));
        let pca = pca_2d(&data).unwrap();
        for i in 0..data.nrows() {
            let p = pca.project(&data.row(i).to_owned());
            let back = pca.reconstruct(p);
            let p2 = pca.project(&back);
            assert!((p[0] - p2[0]).abs() < 1e-10 && (p[1] - p2[1]).abs() < 1e-10);
        }
        assert!(pca_2d(&Array2::<f64>::zeros((2, 5))).is_err());
    }

    #[test]
    fn spec_validation_enforces_variant_requirements() {
        let paths = DataPaths {
            clean_manifest: "c.jsonl".into(),
            noisy_manifest: "n.jsonl".into(),
            filtered_manifest: None,
            filter_checkpoint: None,
        };
        let base = ExperimentSpec {
            variant: Variant::Gst,
            clean_ratio: 0.3,
            lambda: 0.0,
            seed: 0,
            steps: 10,
            lr: 1e-3,
            paths: paths.clone(),
        };
        assert!(base.validate().is_ok());
        let aux = ExperimentSpec {
            variant: Variant::GstAux,
            ..base.clone()
        };
        assert!(aux.validate().is_err(), "aux needs lambda > 0");
        let aux_ok = ExperimentSpec {
            lambda: 0.01,
            ..aux
        };
        assert!(aux_ok.validate().is_ok());
        let mf = ExperimentSpec {
            variant: Variant::GstMf,
            ..base.clone()
        };
        assert!(mf.validate().is_err(), "mf needs a filter checkpoint or filtered manifest");
        let mf_ckpt = ExperimentSpec {
            paths: DataPaths {
                filter_checkpoint: Some("f.ckpt".into()),
                ..paths.clone()
            },
            ..mf.clone()
        };
        assert!(mf_ckpt.validate().is_ok());
        let mf_manifest = ExperimentSpec {
            paths: DataPaths {
                filtered_manifest: Some("f.jsonl".into()),
                ..paths
            },
            ..mf
        };
        assert!(mf_manifest.validate().is_ok());
        let bad_ratio = ExperimentSpec {
            clean_ratio: 1.0,
            ..base
        };
        assert!(bad_ratio.validate().is_err());
    }

    #[test]
    fn grid_covers_the_cross_product_with_variant_lambdas() {
        let paths = DataPaths {
            clean_manifest: "c.jsonl".into(),
            noisy_manifest: "n.jsonl".into(),
            filtered_manifest: None,
            filter_checkpoint: Some("f.ckpt".into()),
        };
        let cells = grid(
            &Variant::ALL,
            &[0.1, 0.3, 0.5],
            &[0, 1],
            0.01,
            100,
            1e-3,
            &paths,
        );
        assert_eq!(cells.len(), 5 * 3 * 2);
        for c in &cells {
            c.validate().unwrap();
            if c.variant.uses_aux() {
                assert_eq!(c.lambda, 0.01);
            } else {
                assert_eq!(c.lambda, 0.0);
            }
        }
    }

    #[test]
    fn divergence_detector_flags_blowups_only() {
        let entry = |step: u64, l_total: f64| TtsLogEntry {
            step,
            l1: 0.0,
            d_bd: 0.0,
            l_aux: 0.0,
            l_total,
            aqc_accuracy: 0.5,
        };
        let healthy: Vec<_> = (1..=300).map(|s| entry(s, 1.0 / s as f64)).collect();
        assert!(diverged(&healthy).is_none());
        let mut blown = healthy.clone();
        blown.push(entry(301, 1e6));
        assert!(diverged(&blown).is_some());
        let mut nan = healthy.clone();
        nan.push(entry(301, f64::NAN));
        assert!(diverged(&nan).is_some());
        // A large early loss that decays is not divergence.
        let decaying: Vec<_> = (1..=150).map(|s| entry(s, 1e4 / s as f64)).collect();
        assert!(diverged(&decaying).is_none());
    }

    #[test]
    fn silhouette_rejects_mismatched_inputs() {
        let d = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(silhouette(&d, &[0]).is_err());
        assert!(silhouette(&d, &[0, 1]).is_ok());
        let single = array![[0.0, 0.0]];
        assert!(silhouette(&single, &[0]).is_err());
    }
}
