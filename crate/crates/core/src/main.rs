use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use dualpose::config::RunConfig;
use dualpose::heatmap::{decode, read_stack, write_stack};
use dualpose::io::{read_frames, write_frames, FrameRecord, PersonRecord, Source};
use dualpose::metrics::write_report_csv;
use dualpose::pipeline::{
    evaluate_records, fuse_frames, fused_to_records, match_frames, refine_records, run_pipeline, write_outputs,
    write_traces,
};
use dualpose::synth::{generate, SceneSpec};
use dualpose::{Error, Result};

#[derive(Parser)]
#[command(name = "dualpose", version, about = "Multi-person 3D pose matching, fusion, refinement and evaluation")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene into a directory.
    Synth {
        /// Scene description (JSON). Without it a benchmark scene is built.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        persons: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 30.0)]
        sigma_3d: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode heatmap stacks into bottom-up frame records.
    Decode {
        /// Stack files, one per frame, in frame order.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        first_frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match top-down against bottom-up persons per frame.
    Match {
        #[arg(long)]
        td: PathBuf,
        #[arg(long)]
        bu: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match and fuse per frame.
    Fuse {
        #[arg(long)]
        td: PathBuf,
        #[arg(long)]
        bu: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Link poses into tracks and refine them.
    Tto {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        obs: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Metric report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional one-row CSV summary.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Full chain: match, fuse, link, refine and (with --gt) evaluate.
    Run {
        #[arg(long)]
        td: PathBuf,
        #[arg(long)]
        bu: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        obs: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct MatchLine {
    frame_index: usize,
    pairs: Vec<MatchPair>,
    unmatched_td: Vec<usize>,
    unmatched_bu: Vec<usize>,
}

#[derive(Serialize)]
struct MatchPair {
    td: usize,
    bu: usize,
    similarity: f64,
}

fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn synth(cfg: &RunConfig, scene: Option<&Path>, persons: usize, frames: usize, sigma_3d: f64, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match scene {
        Some(p) => serde_json::from_str::<SceneSpec>(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SceneSpec::benchmark(persons, frames, sigma_3d, seed.unwrap_or(cfg.seed)),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate(&spec, &cfg.skeleton, &cfg.camera)?;
    std::fs::create_dir_all(out)?;
    let rec = scene.records();
    write_frames(&rec.td, &out.join("td.jsonl"))?;
    write_frames(&rec.bu, &out.join("bu.jsonl"))?;
    write_frames(&rec.gt, &out.join("gt.jsonl"))?;
    write_frames(&rec.obs, &out.join("obs.jsonl"))?;
    write_json_pretty(&spec, &out.join("scene.json"))?;
    if let Some(maps) = &scene.heatmaps {
        let dir = out.join("heatmaps");
        std::fs::create_dir_all(&dir)?;
        for (t, stack) in maps.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(format!("frame_{t:06}.phms")))?);
            write_stack(stack, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let k = cfg.skeleton.num_joints();
    match cli.command {
        Command::Synth {
            scene,
            persons,
            frames,
            sigma_3d,
            out,
        } => synth(&cfg, scene.as_deref(), persons, frames, sigma_3d, cli.seed, &out),
        Command::Decode {
            inputs,
            first_frame,
            out,
        } => {
            let mut records = Vec::with_capacity(inputs.len());
            for (i, path) in inputs.iter().enumerate() {
                let stack = read_stack::<f64, _>(BufReader::new(File::open(path)?))?;
                let poses = decode(&stack, &cfg.camera, cfg.skeleton.root_index, &cfg.decode)?;
                records.push(FrameRecord {
                    frame_index: first_frame + i,
                    source: Source::Bu,
                    persons: poses.iter().map(|p| PersonRecord::from_pose3d(None, p)).collect(),
                });
            }
            write_frames(&records, &out)
        }
        Command::Match { td, bu, out } => {
            let results = match_frames(&cfg, &read_frames(&td, k)?, &read_frames(&bu, k)?)?;
            let mut w = BufWriter::new(File::create(&out)?);
            for (f, m) in results {
                let line = MatchLine {
                    frame_index: f,
                    pairs: m
                        .pairs
                        .iter()
                        .map(|&(td, bu, similarity)| MatchPair { td, bu, similarity })
                        .collect(),
                    unmatched_td: m.unmatched_td,
                    unmatched_bu: m.unmatched_bu,
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Fuse { td, bu, out } => {
            let td = read_frames(&td, k)?;
            let bu = match bu {
                Some(p) if p.exists() => Some(read_frames(&p, k)?),
                _ => {
                    log::warn!("no bottom-up input; passing top-down poses through");
                    None
                }
            };
            write_frames(&fused_to_records(&fuse_frames(&cfg, &td, bu.as_deref())?), &out)
        }
        Command::Tto { input, obs, trace, out } => {
            let records = read_frames(&input, k)?;
            let obs = obs.map(|p| read_frames(&p, k)).transpose()?;
            let (refined, traces) = refine_records(&cfg, &records, obs.as_deref())?;
            write_frames(&refined, &out)?;
            if let Some(t) = trace {
                write_traces(&traces, &t)?;
            }
            Ok(())
        }
        Command::Eval { pred, gt, out, csv } => {
            let report = evaluate_records(&cfg, &read_frames(&pred, k)?, &read_frames(&gt, k)?)?;
            write_json_pretty(&report, &out)?;
            if let Some(c) = csv {
                let mut w = BufWriter::new(File::create(c)?);
                write_report_csv(&[("pred".to_string(), report)], &mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Run {
            td,
            bu,
            gt,
            obs,
            trace,
            out,
        } => {
            let output = run_pipeline(&cfg, &td, bu.as_deref(), gt.as_deref(), obs.as_deref())?;
            write_outputs(&output, &out)?;
            if let Some(t) = trace {
                write_traces(&output.traces, &t)?;
            }
            if let Some(r) = &output.reports {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
                log::info!(
                    "MPJPE input {} mm, fused {} mm, refined {} mm",
                    fmt(r.input.mpjpe),
                    fmt(r.fused.mpjpe),
                    fmt(r.output.mpjpe)
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
