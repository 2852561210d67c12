use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{NaiveDate, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use trapline_core::annotation::{read_store_snapshot, AnnotationStore, EventSchema, FrameService};
use trapline_core::config::{Config, Settings};
use trapline_core::evalkit::{evaluate_by_recording, precision_recall, write_evaluation_csv, ConfusionCounts};
use trapline_core::naming::parse_date_code;
use trapline_core::pipeline::{archive_days, CardSource, DayReport, Runner, StageSet};
use trapline_core::reid::{prune_library, Metric, ReferenceLibrary, ValidationQuery};
use trapline_core::report::{annotation_report, status_report, ReportFilter, StatusLog};
use trapline_core::schedule::{estimate_schedule, StageWorkers, WorkloadSpec};
use trapline_core::segmenter::read_segments;
use trapline_core::{BurrowId, RecordingId};
use trapline_server::AppState;

#[derive(Parser)]
#[command(name = "trapline", version, about = "Camera-trap time-lapse pipeline")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, env = "TRAPLINE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PathArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Directory of encoded videos.
    #[arg(long, visible_alias = "out")]
    videos: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct Cards {
    /// SD card directory; repeat for several cards.
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    /// Manifest for the card at the same position; cards without one use
    /// `<source>/manifest.csv`.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
}

impl Cards {
    fn resolve(&self) -> Result<Vec<CardSource>> {
        if self.manifests.len() > self.sources.len() {
            bail!("{} manifests given for {} sources", self.manifests.len(), self.sources.len());
        }
        Ok(self
            .sources
            .iter()
            .enumerate()
            .map(|(i, dir)| match self.manifests.get(i) {
                Some(m) => CardSource {
                    dir: dir.clone(),
                    manifest: m.clone(),
                },
                None => CardSource::with_default_manifest(dir.clone()),
            })
            .collect())
    }
}

#[derive(Args)]
struct DaySelection {
    /// Only this burrow.
    #[arg(long)]
    burrow: Option<String>,
    /// Only this date, YYYYMMDD.
    #[arg(long)]
    date: Option<String>,
    /// Only the burrow-day of this recording, e.g. B07-O-20210314.
    #[arg(long, conflicts_with_all = ["burrow", "date"])]
    recording: Option<RecordingId>,
}

impl DaySelection {
    fn select(&self, archive: &Path) -> Result<BTreeSet<(BurrowId, NaiveDate)>> {
        let mut burrow = self.burrow.as_deref().map(BurrowId::new).transpose()?;
        let mut date = self.date.as_deref().map(parse_date_code).transpose()?;
        if let Some(rec) = &self.recording {
            burrow = Some(rec.burrow_id.clone());
            date = Some(rec.date);
        }
        let days = archive_days(archive).with_context(|| format!("listing {}", archive.display()))?;
        Ok(days
            .into_iter()
            .filter(|(b, d)| burrow.as_ref().is_none_or(|x| x == b) && date.is_none_or(|x| x == *d))
            .collect())
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum ReportKind {
    Annotations,
    Status,
}

#[derive(Subcommand)]
enum ReidCommand {
    /// Rank individuals for sampled frames of each segment and cache the results.
    Identify {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        days: DaySelection,
        /// Reference library CSV.
        #[arg(long)]
        library: Option<PathBuf>,
        /// synthetic, csv or subprocess.
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long, visible_alias = "k")]
        top_k: Option<usize>,
        #[arg(long)]
        frames_per_segment: Option<usize>,
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Drop library embeddings that do not help top-1 validation accuracy.
    Prune {
        #[arg(long)]
        library: PathBuf,
        /// Labelled queries in library layout; rows sharing an image_ref form one query.
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Metric::Euclidean)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Command {
    /// Copy SD cards into the archive under canonical names.
    Ingest {
        #[command(flatten)]
        cards: Cards,
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Encode per-view day videos and side-by-side composites.
    Encode {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        days: DaySelection,
        #[arg(long)]
        fps: Option<u32>,
        #[arg(long)]
        workers: Option<usize>,
        /// Encoder binary.
        #[arg(long)]
        ffmpeg: Option<PathBuf>,
    },
    /// Detect animals in overhead frames, group them into draft segments and
    /// import those into the annotation store.
    Segment {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        days: DaySelection,
        /// synthetic, csv or subprocess.
        #[arg(long)]
        provider: Option<String>,
        /// Directory of `<recording>.csv` detections for the csv provider.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Detector command line for the subprocess provider.
        #[arg(long)]
        command: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        gap: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
    },
    /// Re-identification against a reference library.
    Reid {
        #[command(subcommand)]
        command: ReidCommand,
    },
    /// Score predicted segments against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-recording CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        videos: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write annotation or status reports.
    Report {
        kind: ReportKind,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        burrow: Option<String>,
        #[arg(long)]
        date: Option<String>,
        #[arg(long)]
        event: Option<String>,
        #[arg(long)]
        animal: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the processing time of one batch of cards.
    Schedule {
        #[arg(long)]
        burrows: Option<u32>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        overhead_images: Option<u64>,
        #[arg(long)]
        front_images: Option<u64>,
        /// Detection rate, images/s.
        #[arg(long)]
        seg_rate: Option<f64>,
        /// Copy rate, images/s.
        #[arg(long)]
        copy_rate: Option<f64>,
        /// Encoding minutes per burrow-day.
        #[arg(long)]
        compression_minutes: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seg_workers: u32,
        #[arg(long, default_value_t = 1)]
        copy_workers: u32,
        #[arg(long, default_value_t = 1)]
        compression_workers: u32,
    },
    /// Ingest cards and run every stage for the days they contain.
    Run {
        #[command(flatten)]
        cards: Cards,
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn apply_paths(cfg: &mut Config, p: &PathArgs) {
    cfg.set_opt("paths", "archive", p.archive.as_ref().map(|p| p.display()));
    cfg.set_opt("paths", "videos", p.videos.as_ref().map(|p| p.display()));
    cfg.set_opt("paths", "store", p.store.as_ref().map(|p| p.display()));
}

fn print_days(reports: &[DayReport]) -> bool {
    let mut ok = true;
    for d in reports {
        for (stage, outcome) in &d.stages {
            ok &= !outcome.is_failure();
            println!("{} {} {stage}: {outcome}", d.burrow_id, d.date.format("%Y%m%d"));
        }
    }
    ok
}

fn run_stages(cfg: &Config, days: &DaySelection, which: StageSet) -> Result<bool> {
    let settings = cfg.settings()?;
    let runner = Runner::new(settings)?;
    let selected = days.select(&runner.layout().archive)?;
    if selected.is_empty() {
        println!("no burrow-days selected");
        return Ok(true);
    }
    Ok(print_days(&runner.run_days(&selected, which)))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_segment_file(path: &Path) -> Result<Vec<trapline_core::segmenter::Segment>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_segments(f).with_context(|| format!("reading {}", path.display()))
}

fn validation_queries(lib: &ReferenceLibrary) -> Vec<ValidationQuery> {
    let mut grouped: BTreeMap<(String, String), Vec<_>> = BTreeMap::new();
    for (id, entries) in lib.individuals() {
        for e in entries {
            grouped
                .entry((id.to_string(), e.image_ref.clone()))
                .or_default()
                .push(e.embedding);
        }
    }
    grouped
        .into_iter()
        .map(|((label, _), embeddings)| ValidationQuery { label, embeddings })
        .collect()
}

fn read_library(path: &Path) -> Result<ReferenceLibrary> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ReferenceLibrary::read_csv(f).with_context(|| format!("reading {}", path.display()))
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    let mut cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { cards, archive } => {
            cfg.set_opt("paths", "archive", archive.as_ref().map(|p| p.display()));
            let settings = cfg.settings()?;
            let archive = Settings::require(&settings.archive, "paths", "archive")?;
            for card in cards.resolve()? {
                let provider = trapline_core::ingest::ManifestProvider::from_path(&card.manifest)?;
                let r = trapline_core::ingest::ingest_card(&card.dir, archive, &provider)?;
                println!(
                    "{}: copied {}, duplicates {}, errors {}, out of schedule {}, {:.1} images/s",
                    card.dir.display(),
                    r.copied,
                    r.skipped_duplicates,
                    r.errors.len(),
                    r.out_of_schedule,
                    r.rate()
                );
                for e in &r.errors {
                    eprintln!("  {}: {}", e.path.display(), e.reason);
                }
            }
            // per-file problems are reported above; only a fatal error fails the command
            Ok(true)
        }
        Command::Encode {
            paths,
            days,
            fps,
            workers,
            ffmpeg,
        } => {
            apply_paths(&mut cfg, &paths);
            cfg.set_opt("encode", "fps", fps);
            cfg.set_opt("pipeline", "workers", workers);
            cfg.set_opt("encode", "ffmpeg", ffmpeg.as_ref().map(|p| p.display()));
            let which = StageSet {
                encode: true,
                ..StageSet::none()
            };
            run_stages(&cfg, &days, which)
        }
        Command::Segment {
            paths,
            days,
            provider,
            detections,
            command,
            threshold,
            gap,
            min_len,
        } => {
            apply_paths(&mut cfg, &paths);
            cfg.set_opt("segment", "provider", provider);
            cfg.set_opt("segment", "detections", detections.as_ref().map(|p| p.display()));
            cfg.set_opt("segment", "command", command);
            cfg.set_opt("segment", "threshold", threshold);
            cfg.set_opt("segment", "gap", gap);
            cfg.set_opt("segment", "min_len", min_len);
            let which = StageSet {
                segment: true,
                ..StageSet::none()
            };
            run_stages(&cfg, &days, which)
        }
        Command::Reid {
            command:
                ReidCommand::Identify {
                    paths,
                    days,
                    library,
                    embedder,
                    top_k,
                    frames_per_segment,
                    metric,
                },
        } => {
            apply_paths(&mut cfg, &paths);
            cfg.set_opt("reid", "library", library.as_ref().map(|p| p.display()));
            cfg.set_opt("reid", "embedder", embedder);
            cfg.set_opt("reid", "top_k", top_k);
            cfg.set_opt("reid", "frames_per_segment", frames_per_segment);
            cfg.set_opt("reid", "metric", metric);
            if cfg.get("reid", "library").is_none() {
                bail!("no reference library: pass --library or set [reid] library");
            }
            let which = StageSet {
                reid: true,
                ..StageSet::none()
            };
            run_stages(&cfg, &days, which)
        }
        Command::Reid {
            command:
                ReidCommand::Prune {
                    library,
                    validation,
                    seed,
                    metric,
                    out,
                },
        } => {
            let lib = read_library(&library)?;
            let queries = validation_queries(&read_library(&validation)?);
            let outcome = prune_library(&lib, &queries, seed, metric)?;
            fs::write(&out, outcome.library.to_csv_bytes()).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "kept {} of {} embeddings in {} passes; top-1 {:.3} -> {:.3}",
                outcome.library.len(),
                lib.len(),
                outcome.passes,
                outcome.initial_top1,
                outcome.final_top1
            );
            Ok(true)
        }
        Command::Evaluate { pred, truth, out } => {
            let rows = evaluate_by_recording(&read_segment_file(&pred)?, &read_segment_file(&truth)?);
            let total = rows.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts);
            let (p, r) = precision_recall(total);
            let mut buf = Vec::new();
            write_evaluation_csv(&mut buf, &rows)?;
            match &out {
                Some(path) => {
                    fs::write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
                    println!(
                        "tp {} fp {} fn {}; precision {p}, recall {r}",
                        total.tp, total.fp, total.fn_
                    );
                }
                None => print!("{}", String::from_utf8(buf)?),
            }
            Ok(true)
        }
        Command::Serve {
            store,
            schema,
            videos,
            port,
            host,
        } => {
            cfg.set_opt("paths", "store", store.as_ref().map(|p| p.display()));
            cfg.set_opt("paths", "videos", videos.as_ref().map(|p| p.display()));
            cfg.set_opt("serve", "schema", schema.as_ref().map(|p| p.display()));
            cfg.set_opt("serve", "port", port);
            let s = cfg.settings()?;
            let store_dir = Settings::require(&s.store, "paths", "store")?;
            let videos = Settings::require(&s.videos, "paths", "videos")?;
            let schema = match &s.schema {
                Some(p) => EventSchema::from_path(p)?,
                None => EventSchema::default(),
            };
            let state = Arc::new(AppState {
                store: AnnotationStore::open(store_dir, schema)?,
                frames: FrameService::new(videos.to_path_buf(), s.encode.encoder.clone()),
            });
            let addr: SocketAddr = format!("{host}:{}", s.port).parse().context("listen address")?;
            tokio::runtime::Runtime::new()?.block_on(trapline_server::serve(addr, state))?;
            Ok(true)
        }
        Command::Report {
            kind,
            store,
            burrow,
            date,
            event,
            animal,
            out,
        } => {
            cfg.set_opt("paths", "store", store.as_ref().map(|p| p.display()));
            let s = cfg.settings()?;
            let store_dir = Settings::require(&s.store, "paths", "store")?;
            let text = match kind {
                ReportKind::Annotations => {
                    let filter = ReportFilter {
                        burrow: burrow.as_deref().map(BurrowId::new).transpose()?,
                        date: date.as_deref().map(parse_date_code).transpose()?,
                        event,
                        animal,
                    };
                    annotation_report(&read_store_snapshot(store_dir)?, &filter)
                }
                ReportKind::Status => status_report(&StatusLog::new(store_dir).read()?, Utc::now()),
            };
            write_output(out.as_deref(), &text)?;
            Ok(true)
        }
        Command::Schedule {
            burrows,
            days,
            overhead_images,
            front_images,
            seg_rate,
            copy_rate,
            compression_minutes,
            seg_workers,
            copy_workers,
            compression_workers,
        } => {
            let base = WorkloadSpec::field_deployment();
            let w = WorkloadSpec {
                burrows: burrows.unwrap_or(base.burrows),
                days_per_batch: days.unwrap_or(base.days_per_batch),
                overhead_images: overhead_images.unwrap_or(base.overhead_images),
                front_images: front_images.unwrap_or(base.front_images),
                segmentation_rate: seg_rate.unwrap_or(base.segmentation_rate),
                copy_rate: copy_rate.unwrap_or(base.copy_rate),
                compression_minutes: compression_minutes.unwrap_or(base.compression_minutes),
            };
            let e = estimate_schedule(
                &w,
                &StageWorkers {
                    segmentation: seg_workers,
                    copy: copy_workers,
                    compression: compression_workers,
                },
            )?;
            println!("segmentation {:>7.2} h", e.segmentation_hours);
            println!("copy         {:>7.2} h", e.copy_hours);
            println!("compression  {:>7.2} h", e.compression_hours);
            println!("makespan     {:>7.2} h", e.makespan_hours);
            println!(
                "deadline     {:>7.2} h  {}",
                e.deadline_hours,
                if e.meets_deadline { "PASS" } else { "FAIL" }
            );
            Ok(e.meets_deadline)
        }
        Command::Run { cards, paths, workers } => {
            apply_paths(&mut cfg, &paths);
            cfg.set_opt("pipeline", "workers", workers);
            let runner = Runner::new(cfg.settings()?)?;
            let report = runner.run(&cards.resolve()?)?;
            let i = &report.ingest;
            println!(
                "ingest: copied {}, duplicates {}, errors {}",
                i.copied,
                i.skipped_duplicates,
                i.errors.len()
            );
            for e in &i.errors {
                eprintln!("  {}: {}", e.path.display(), e.reason);
            }
            Ok(print_days(&report.days) && i.errors.is_empty())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
