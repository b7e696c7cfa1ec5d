use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use handcue::annotate::annotate;
use handcue::config::Settings;
use handcue::dataset::{read_split, write_dataset, Manifest, SceneLabels};
use handcue::eval::median;
use handcue::landmark::LandmarkNet;
use handcue::pipeline::{evaluate_frames, Analyzer, Frame, Pipeline};
use handcue::pose::PoseNet;
use handcue::scenario::{golden_sequence, GoldenScript};
use handcue::service::Server;
use handcue_tensor::Checkpoint;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "handcue", version, about = "Gesture-driven patient positioning on synthetic scenes")]
struct Cli {
    /// Settings file (TOML); every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set pipeline.conf_thresh=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Split as name=count; repeatable.
        #[arg(long = "split", value_name = "NAME=COUNT", default_values_t = ["train=1000".to_string(), "val=100".to_string(), "test=300".to_string()])]
        splits: Vec<String>,
    },
    /// Train the hand/body detector.
    TrainDetector(TrainArgs),
    /// Train the landmark network.
    TrainLandmark(TrainArgs),
    /// Train the pose network and its gesture head (needs the landmark net).
    TrainPose(TrainArgs),
    /// Retrain only the gesture head of an existing pose checkpoint.
    TrainGesture(TrainArgs),
    /// Evaluate the full pipeline on a dataset split.
    Eval {
        #[command(flatten)]
        input: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Process frames in order and dump results and events.
    Run {
        #[command(flatten)]
        input: FrameArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write annotated PNGs.
        #[arg(long)]
        annotate: bool,
    },
    /// Serve the frame protocol over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Write annotated PNGs only.
    Annotate {
        #[command(flatten)]
        input: FrameArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint to write; defaults to the configured path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct FrameArgs {
    /// Dataset directory; frames are replayed 100 ms apart.
    #[arg(long, conflicts_with = "golden", required_unless_present = "golden")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Use the scripted "okay" sequence instead of a dataset.
    #[arg(long)]
    golden: bool,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long)]
    limit: Option<usize>,
}

/// Marks failures caused by configuration rather than by the run itself.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<handcue::Error>(),
                Some(handcue::Error::Config(_) | handcue::Error::Calibration(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref(), &cli.overrides).context("loading settings")?;
    match cli.cmd {
        Cmd::Synth { out, seed, splits } => synth(&settings, &out, seed, &splits),
        Cmd::TrainDetector(a) => train_detector(&settings, a),
        Cmd::TrainLandmark(a) => train_landmark(&settings, a),
        Cmd::TrainPose(a) => train_pose(&settings, a),
        Cmd::TrainGesture(a) => train_gesture(&settings, a),
        Cmd::Eval { input, out } => eval(&settings, &input, &out),
        Cmd::Run { input, out, annotate } => run_frames(&settings, &input, &out, annotate),
        Cmd::Serve { addr } => serve(&settings, &addr),
        Cmd::Annotate { input, out } => annotate_frames(&settings, &input, &out),
    }
}

fn parse_split(s: &str) -> Result<(String, usize)> {
    let (name, n) = s
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("split `{s}` is not name=count")))?;
    let n = n
        .parse()
        .map_err(|_| ConfigError(format!("split `{s}`: bad count")))?;
    Ok((name.to_string(), n))
}

fn synth(s: &Settings, out: &Path, seed: u64, splits: &[String]) -> Result<()> {
    let splits = splits.iter().map(|x| parse_split(x)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, usize)> = splits.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let calib = s.pipeline.calibration()?;
    let start = Instant::now();
    let m = write_dataset(out, &s.scene, &calib, seed, &refs)?;
    s.write_snapshot(out)?;
    for sp in &m.splits {
        println!("{}: {} scenes", sp.name, sp.count);
    }
    println!("wrote {} in {:.1}s", out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn save(ckpt: &Checkpoint, path: &Path, s: &Settings) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    ckpt.save(path).with_context(|| format!("writing {}", path.display()))?;
    s.write_snapshot(dir)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(ConfigError(format!("checkpoint {} does not exist", path.display())).into());
    }
    Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

fn train_detector(s: &Settings, a: TrainArgs) -> Result<()> {
    let calib = s.pipeline.calibration()?;
    let start = Instant::now();
    let det = s.train.detector.run(&s.scene, &calib, &s.detector)?;
    println!("trained detector in {:.0}s", start.elapsed().as_secs_f64());
    let path = a.out.unwrap_or_else(|| s.pipeline.checkpoints.detector.clone());
    save(&det.to_checkpoint(s.train.detector.init_seed)?, &path, s)
}

fn train_landmark(s: &Settings, a: TrainArgs) -> Result<()> {
    let calib = s.pipeline.calibration()?;
    let start = Instant::now();
    let net = s.train.landmark.run(&s.scene, &calib, &s.landmark)?;
    println!("trained landmark network in {:.0}s", start.elapsed().as_secs_f64());
    let path = a.out.unwrap_or_else(|| s.pipeline.checkpoints.landmark.clone());
    save(&net.to_checkpoint(s.train.landmark.init_seed)?, &path, s)
}

fn train_pose(s: &Settings, a: TrainArgs) -> Result<()> {
    let calib = s.pipeline.calibration()?;
    let lmk = LandmarkNet::from_checkpoint(&load(&s.pipeline.checkpoints.landmark)?)?;
    let start = Instant::now();
    let net = s.train.pose.run(&s.scene, &calib, &s.pose, &lmk)?;
    println!("trained pose network in {:.0}s", start.elapsed().as_secs_f64());
    let path = a.out.unwrap_or_else(|| s.pipeline.checkpoints.pose.clone());
    save(&net.to_checkpoint(s.train.pose.init_seed)?, &path, s)
}

fn train_gesture(s: &Settings, a: TrainArgs) -> Result<()> {
    let calib = s.pipeline.calibration()?;
    let lmk = LandmarkNet::from_checkpoint(&load(&s.pipeline.checkpoints.landmark)?)?;
    let mut net = PoseNet::from_checkpoint(&load(&s.pipeline.checkpoints.pose)?)?;
    let start = Instant::now();
    let data = s.train.pose.samples(&s.scene, &calib, &lmk)?;
    net.train_gesture(&data, &s.train.pose.gesture)?;
    println!("trained gesture head in {:.0}s", start.elapsed().as_secs_f64());
    let path = a
        .out
        .or_else(|| s.pipeline.checkpoints.gesture.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoints/gesture.ckpt"));
    save(&net.gesture_checkpoint(s.train.pose.gesture.seed)?, &path, s)
}

fn analyzer(s: &Settings) -> Result<Arc<Analyzer>> {
    Ok(Arc::new(Analyzer::from_config(s.pipeline.clone()).context("loading models")?))
}

fn write_lines<I, T>(path: &Path, items: I, line: impl Fn(&T) -> String) -> Result<()>
where
    I: IntoIterator<Item = T>,
{
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for it in items {
        writeln!(w, "{}", line(&it))?;
    }
    w.flush()?;
    Ok(())
}

fn check_dataset(s: &Settings, dir: &Path) -> Result<()> {
    let m = Manifest::load(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if m.scene.width != s.detector.scene_size || m.scene.height != s.detector.scene_size {
        bail!(ConfigError(format!(
            "dataset frames are {}x{} but the detector expects {}",
            m.scene.width, m.scene.height, s.detector.scene_size
        )));
    }
    Ok(())
}

fn eval(s: &Settings, input: &DatasetArgs, out: &Path) -> Result<()> {
    let an = analyzer(s)?;
    check_dataset(s, &input.dataset)?;
    let (frames, labels) = read_split(&input.dataset, &input.split)?;
    let (report, outcomes) = evaluate_frames(&an, &frames, &labels)?;
    fs::create_dir_all(out)?;
    s.write_snapshot(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_lines(&out.join("outcomes.jsonl"), &outcomes, |o| {
        serde_json::to_string(o).expect("outcome serializes")
    })?;
    println!("{}", report.summary_line());
    Ok(())
}

fn select_frames(s: &Settings, input: &FrameArgs) -> Result<(Vec<Frame>, Option<Vec<SceneLabels>>)> {
    let (frames, labels) = if input.golden {
        let g = golden_sequence(&GoldenScript::default(), &s.scene, &s.pipeline.calibration()?)?;
        println!(
            "golden target (scanner, m): [{:.6}, {:.6}, {:.6}]",
            g.target.x, g.target.y, g.target.z
        );
        (g.frames, None)
    } else {
        let dir = input.dataset.as_ref().expect("clap enforces --dataset or --golden");
        check_dataset(s, dir)?;
        let (f, l) = read_split(dir, &input.split)?;
        (f, Some(l))
    };
    let end = input.limit.map_or(frames.len(), |n| (input.start + n).min(frames.len()));
    if input.start >= end {
        bail!(ConfigError(format!("no frames in {}..{end}", input.start)));
    }
    let labels = labels.map(|l| l[input.start..end].to_vec());
    Ok((frames[input.start..end].to_vec(), labels))
}

fn run_frames(s: &Settings, input: &FrameArgs, out: &Path, with_images: bool) -> Result<()> {
    let an = analyzer(s)?;
    let (frames, _) = select_frames(s, input)?;
    fs::create_dir_all(out)?;
    s.write_snapshot(out)?;
    let img_dir = out.join("annotated");
    if with_images {
        fs::create_dir_all(&img_dir)?;
    }
    let mut pipeline = Pipeline::new(an)?;
    let mut results = BufWriter::new(File::create(out.join("results.jsonl"))?);
    let mut detections = BufWriter::new(File::create(out.join("detections.jsonl"))?);
    let mut events = BufWriter::new(File::create(out.join("events.jsonl"))?);
    let (mut secs, mut n_events) = (Vec::new(), 0);
    for f in &frames {
        let o = pipeline.process(f)?;
        if !o.result.skipped {
            secs.push(o.seconds);
        }
        writeln!(results, "{}", o.result.to_json_line())?;
        for d in &o.result.detections {
            writeln!(detections, "{}", serde_json::to_string(d)?)?;
        }
        for e in &o.events {
            writeln!(events, "{}", e.to_json_line())?;
            n_events += 1;
        }
        if with_images {
            annotate(&f.image()?, &o.result).save_png(img_dir.join(format!("frame_{:06}.png", f.frame_id)))?;
        }
    }
    results.flush()?;
    detections.flush()?;
    events.flush()?;
    let fps = median(&secs).filter(|&t| t > 0.0).map_or("n/a".into(), |t| format!("{:.1}", 1.0 / t));
    println!(
        "{} frames, {n_events} events, final phase {:?}, median {fps} FPS",
        frames.len(),
        pipeline.phase()
    );
    Ok(())
}

fn annotate_frames(s: &Settings, input: &FrameArgs, out: &Path) -> Result<()> {
    let an = analyzer(s)?;
    let (frames, _) = select_frames(s, input)?;
    fs::create_dir_all(out)?;
    s.write_snapshot(out)?;
    let mut pipeline = Pipeline::new(an)?;
    for f in &frames {
        let o = pipeline.process(f)?;
        annotate(&f.image()?, &o.result).save_png(out.join(format!("frame_{:06}.png", f.frame_id)))?;
    }
    println!("wrote {} images to {}", frames.len(), out.display());
    Ok(())
}

fn serve(s: &Settings, addr: &str) -> Result<()> {
    if s.pipeline.calibration.is_none() {
        bail!(ConfigError(
            "serve needs an explicit calibration file (pipeline.calibration)".into()
        ));
    }
    let an = analyzer(s)?;
    let server = Server::bind(addr, an).with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", server.addr);
    server.wait();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arguments_parse() {
        assert_eq!(parse_split("train=12").unwrap(), ("train".to_string(), 12));
        assert!(parse_split("train").is_err());
        assert!(parse_split("train=x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
