//! Command-line front end for the pipeline: corpus construction, filter and
//! TTS training, synthesis, embedding export, and the ablation runner.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use bgmtts_core::corpus::toy::{generate_music_corpus, generate_speech_corpus, ToySpeechConfig};
use bgmtts_core::corpus::{build_mixed_corpus, filter_corpus, write_manifest, Split};
use bgmtts_core::dsp::{
    downsample_mel_time, griffin_lim, magnitude, mel_project, stft, MagnitudeSpectrogram,
    StftParams, WindowKind,
};
use bgmtts_core::gsttts::{
    synthesize, train_tts, Text2Mel, Text2MelConfig, TtsTrainOptions, MEL_FMAX, MEL_FMIN,
};
use bgmtts_core::harness::{embed_export, grid, run_ablation, DataPaths, Variant};
use bgmtts_core::musicfilter::{train_filter, FilterTrainOptions, MusicFilter, MusicFilterConfig};
use bgmtts_core::nn::AdamConfig;
use bgmtts_core::ssrn::{train_ssrn, Ssrn, SsrnConfig, SsrnTrainOptions};
use bgmtts_core::{audio, Error, Result};

#[derive(Parser)]
#[command(name = "bgmtts", version, about = "Music-filtered style-token TTS pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// STFT analysis parameters shared by all audio-processing subcommands.
#[derive(Args, Clone, Copy)]
struct StftArgs {
    #[arg(long, default_value_t = 1024)]
    fft_size: usize,
    #[arg(long, default_value_t = 1024)]
    win_size: usize,
    #[arg(long, default_value_t = 256)]
    hop_size: usize,
}

impl StftArgs {
    fn params(&self) -> Result<StftParams> {
        StftParams::new(self.fft_size, self.win_size, self.hop_size, WindowKind::Hann)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic toy speech + music corpus.
    GenToy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        utterances: usize,
        /// Utterances held out as the TEST split.
        #[arg(long, default_value_t = 4)]
        n_test: usize,
        #[arg(long, default_value_t = 6)]
        min_chars: usize,
        #[arg(long, default_value_t = 12)]
        max_chars: usize,
        /// Number of music files.
        #[arg(long, default_value_t = 6)]
        music: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mix clean speech with music at random SNRs, producing a noisy corpus.
    Mix {
        #[arg(long)]
        clean_manifest: PathBuf,
        #[arg(long)]
        music_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        snr_lo: f64,
        #[arg(long, default_value_t = 20.0)]
        snr_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the spectral-mask music filter on paired noisy/clean audio.
    TrainFilter {
        #[arg(long)]
        noisy_manifest: PathBuf,
        #[arg(long)]
        clean_manifest: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Use the small toy network shape.
        #[arg(long)]
        toy: bool,
        /// JSON file overriding the model configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the effective configuration as JSON and exit.
        #[arg(long)]
        print_config: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Run a trained music filter over a noisy corpus.
    Filter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        noisy_manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Train the text-to-mel model with style tokens and the quality
    /// classifier.
    TrainTts {
        /// Manifests of CLEAN and FILTERED (or NOISY with --allow-noisy)
        /// speech.
        #[arg(long, required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        /// Weight of the auxiliary classifier loss.
        #[arg(long, default_value_t = 0.01)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Accept raw NOISY audio as the degraded class.
        #[arg(long)]
        allow_noisy: bool,
        /// Disable style conditioning (plain text-to-mel baseline).
        #[arg(long)]
        no_style: bool,
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        print_config: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Train the spectrogram super-resolution model on clean speech.
    TrainSsrn {
        #[arg(long, required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        print_config: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Synthesize speech: text-to-mel, super-resolution, phase
    /// reconstruction, WAV.
    Synth {
        #[arg(long)]
        text: String,
        /// Reference WAV providing the style/quality embedding.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        tts_checkpoint: PathBuf,
        #[arg(long)]
        ssrn_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        max_frames: usize,
        #[arg(long, default_value_t = 60)]
        gl_iters: usize,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Export quality embeddings with a 2-d PCA projection to CSV.
    EmbedExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split (train|test); default is all records.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Run the ablation grid and write a JSON evaluation report.
    Eval {
        #[arg(long)]
        clean_manifest: PathBuf,
        #[arg(long)]
        noisy_manifest: PathBuf,
        /// Pre-filtered corpus; derived from --filter-checkpoint when
        /// absent.
        #[arg(long)]
        filtered_manifest: Option<PathBuf>,
        #[arg(long)]
        filter_checkpoint: Option<PathBuf>,
        /// Comma-separated variants (TTS,GST,GST+Aux,GST+MF,GST+MF+Aux).
        #[arg(long, default_value = "TTS,GST,GST+Aux,GST+MF,GST+MF+Aux")]
        variants: String,
        /// Comma-separated clean-data ratios in (0,1).
        #[arg(long, default_value = "0.1,0.3,0.5")]
        ratios: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long, default_value_t = 0.01)]
        lambda: f64,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
        /// Working directory for per-cell artifacts.
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        print_config: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Usage(format!("bad config {}: {e}", path.display())))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value)
            .map_err(|e| Error::Data(format!("config serialization: {e}")))?
    );
    Ok(())
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::Usage(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Usage(format!(
            "bad split {other:?}; expected train or test"
        ))),
    }
}

/// Coarse normalized mel of a reference WAV under a trained model's
/// statistics.
fn reference_mel(model: &Text2Mel, path: &Path, p: &StftParams) -> Result<ndarray::Array2<f64>> {
    let w = audio::read_wav(path)?;
    let mag = magnitude(&stft(&w, p)?);
    let mel = mel_project(&mag, model.config.n_mels, MEL_FMIN, MEL_FMAX)?;
    let coarse = downsample_mel_time(&mel, model.config.downsample)?;
    Ok(model.mel_stats.normalize(&coarse.values))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy {
            out_dir,
            utterances,
            n_test,
            min_chars,
            max_chars,
            music,
            seed,
        } => {
            let cfg = ToySpeechConfig {
                n_utterances: utterances,
                min_chars,
                max_chars,
                seed,
                n_test,
            };
            let records = generate_speech_corpus(&out_dir.join("speech"), &cfg)?;
            let music_paths = generate_music_corpus(&out_dir.join("music"), music, seed)?;
            println!(
                "wrote {} utterances to {} and {} music files to {}",
                records.len(),
                out_dir.join("speech").join("clean.jsonl").display(),
                music_paths.len(),
                out_dir.join("music").display()
            );
            Ok(())
        }
        Command::Mix {
            clean_manifest,
            music_dir,
            out_dir,
            snr_lo,
            snr_hi,
            seed,
        } => {
            let records =
                build_mixed_corpus(&clean_manifest, &music_dir, snr_lo, snr_hi, seed, &out_dir)?;
            let manifest = out_dir.join("noisy.jsonl");
            write_manifest(&manifest, &records)?;
            println!("wrote {} noisy utterances to {}", records.len(), manifest.display());
            Ok(())
        }
        Command::TrainFilter {
            noisy_manifest,
            clean_manifest,
            out,
            steps,
            seed,
            lr,
            toy,
            config,
            print_config,
            stft,
        } => {
            let p = stft.params()?;
            let mut cfg = match &config {
                Some(path) => read_config::<MusicFilterConfig>(path)?,
                None if toy => MusicFilterConfig::toy(p.bins()),
                None => MusicFilterConfig {
                    bins: p.bins(),
                    ..MusicFilterConfig::default()
                },
            };
            if config.is_none() {
                cfg.bins = p.bins();
            }
            if print_config {
                return print_json(&cfg);
            }
            if cfg.bins != p.bins() {
                return Err(Error::Usage(format!(
                    "config has {} bins but the analysis produces {}",
                    cfg.bins,
                    p.bins()
                )));
            }
            let opts = FilterTrainOptions {
                steps,
                seed,
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                stft: p,
                checkpoint_path: Some(out.clone()),
                ..FilterTrainOptions::default()
            };
            let (_, log) = train_filter(&noisy_manifest, &clean_manifest, cfg, &opts)?;
            let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
            println!("trained {steps} steps (final loss {last:.6}); checkpoint at {}", out.display());
            Ok(())
        }
        Command::Filter {
            checkpoint,
            noisy_manifest,
            out_dir,
            stft,
        } => {
            let p = stft.params()?;
            let (filter, _) = MusicFilter::load(&checkpoint)?;
            let records = filter_corpus(&noisy_manifest, &out_dir, &|w| filter.infer_file(w, &p))?;
            let manifest = out_dir.join("filtered.jsonl");
            write_manifest(&manifest, &records)?;
            println!("wrote {} filtered utterances to {}", records.len(), manifest.display());
            Ok(())
        }
        Command::TrainTts {
            manifests,
            out,
            steps,
            lambda,
            seed,
            lr,
            allow_noisy,
            no_style,
            toy,
            config,
            print_config,
            stft,
        } => {
            let p = stft.params()?;
            let mut cfg = match &config {
                Some(path) => read_config::<Text2MelConfig>(path)?,
                None if toy => Text2MelConfig::toy(0),
                None => Text2MelConfig::default(),
            };
            if no_style {
                cfg.use_style = false;
            }
            if print_config {
                return print_json(&cfg);
            }
            let opts = TtsTrainOptions {
                steps,
                seed,
                lambda,
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                stft: p,
                checkpoint_path: Some(out.clone()),
                allow_noisy,
                ..TtsTrainOptions::default()
            };
            let (_, log) = train_tts(&manifests, cfg, &opts)?;
            let last = log.last();
            println!(
                "trained {steps} steps (final loss {:.6}, classifier accuracy {:.2}); checkpoint at {}",
                last.map(|e| e.l_total).unwrap_or(f64::NAN),
                last.map(|e| e.aqc_accuracy).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::TrainSsrn {
            manifests,
            out,
            steps,
            seed,
            lr,
            toy,
            config,
            print_config,
            stft,
        } => {
            let p = stft.params()?;
            let mut cfg = match &config {
                Some(path) => read_config::<SsrnConfig>(path)?,
                None if toy => SsrnConfig::toy(80, p.bins()),
                None => SsrnConfig::default(),
            };
            if config.is_none() {
                cfg.bins = p.bins();
            }
            if print_config {
                return print_json(&cfg);
            }
            let opts = SsrnTrainOptions {
                steps,
                seed,
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                stft: p,
                checkpoint_path: Some(out.clone()),
                ..SsrnTrainOptions::default()
            };
            let (_, log) = train_ssrn(&manifests, cfg, &opts)?;
            let last = log.last().map(|e| e.l_total).unwrap_or(f64::NAN);
            println!("trained {steps} steps (final loss {last:.6}); checkpoint at {}", out.display());
            Ok(())
        }
        Command::Synth {
            text,
            reference,
            tts_checkpoint,
            ssrn_checkpoint,
            out,
            seed,
            max_frames,
            gl_iters,
            stft,
        } => {
            let p = stft.params()?;
            let (tts, _) = Text2Mel::load(&tts_checkpoint)?;
            let (sr, _) = Ssrn::load(&ssrn_checkpoint)?;
            if sr.config.n_mels != tts.config.n_mels || sr.config.factor != tts.config.downsample {
                return Err(Error::Usage(format!(
                    "model mismatch: text-to-mel emits {} mels at 1/{} rate, super-resolution expects {} mels at 1/{}",
                    tts.config.n_mels, tts.config.downsample, sr.config.n_mels, sr.config.factor
                )));
            }
            if sr.config.bins != p.bins() {
                return Err(Error::Usage(format!(
                    "super-resolution emits {} bins but synthesis expects {}",
                    sr.config.bins,
                    p.bins()
                )));
            }
            let ref_mel = reference_mel(&tts, &reference, &p)?;
            let syn = synthesize(&tts, &text, &ref_mel, max_frames)?;
            if !syn.completed {
                eprintln!("warning: attention did not reach the end of the text within {max_frames} frames");
            }
            let lin = sr.forward(&syn.mel)?;
            let mag = MagnitudeSpectrogram {
                values: sr.lin_stats.denormalize(&lin),
                params: p,
                sample_rate: audio::SAMPLE_RATE,
            };
            let mut w = griffin_lim(&mag, gl_iters, seed)?;
            w.clamp_peak(0.99);
            audio::write_wav(&out, &w)?;
            println!(
                "synthesized {:.2} s ({} coarse frames, completed: {}) to {}",
                w.duration_s(),
                syn.mel.nrows(),
                syn.completed,
                out.display()
            );
            Ok(())
        }
        Command::EmbedExport {
            checkpoint,
            manifests,
            out,
            split,
            stft,
        } => {
            let p = stft.params()?;
            let (model, _) = Text2Mel::load(&checkpoint)?;
            let split = split.as_deref().map(parse_split).transpose()?;
            let export = embed_export(&model, &manifests, split, &p, Some(&out))?;
            println!(
                "wrote {} embeddings to {} (silhouette {:.3}, explained variance {:.3}/{:.3})",
                export.rows.len(),
                out.display(),
                export.silhouette,
                export.explained[0],
                export.explained[1]
            );
            Ok(())
        }
        Command::Eval {
            clean_manifest,
            noisy_manifest,
            filtered_manifest,
            filter_checkpoint,
            variants,
            ratios,
            seeds,
            lambda,
            steps,
            lr,
            out,
            work_dir,
            toy,
            config,
            print_config,
            stft,
        } => {
            let p = stft.params()?;
            let cfg = match &config {
                Some(path) => read_config::<Text2MelConfig>(path)?,
                None if toy => Text2MelConfig::toy(0),
                None => Text2MelConfig::default(),
            };
            if print_config {
                return print_json(&cfg);
            }
            let variants: Vec<Variant> = parse_list(&variants, "variant")?;
            let ratios: Vec<f64> = parse_list(&ratios, "ratio")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let paths = DataPaths {
                clean_manifest,
                noisy_manifest,
                filtered_manifest,
                filter_checkpoint,
            };
            let cells = grid(&variants, &ratios, &seeds, lambda, steps, lr, &paths);
            for c in &cells {
                c.validate()?;
            }
            let report = run_ablation(&cells, &cfg, &p, &work_dir)?;
            report.save(&out)?;
            for c in &report.cells {
                println!(
                    "{:<11} ratio {:.2} seed {} -> {:?}{}",
                    c.variant,
                    c.clean_ratio,
                    c.seed,
                    c.status,
                    c.aqc_accuracy
                        .map(|m| format!(" (classifier accuracy {:.2})", m.value))
                        .unwrap_or_default()
                );
            }
            println!("report written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
