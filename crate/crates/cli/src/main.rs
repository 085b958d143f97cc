use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rotdetr::config::TrainConfig;
use rotdetr::geom::{rotated_iou, OrientedBox};
use rotdetr::harness::{self, data, SceneSpec};
use rotdetr::matching::hungarian;
use rotdetr::model::Detector;
use rotdetr::tensor::{checkpoint, sigmoid};
use rotdetr::Error;

#[derive(Parser)]
#[command(name = "rotdetr", version, about = "Oriented object detection with deformable transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic rotated-rectangle dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Square image side in pixels (multiple of 64).
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint (overrides `resume` in the config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rotated mAP@0.5 of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.05)]
        floor: f64,
    },
    /// Rotated IoU of two boxes given as "cx cy w h theta".
    Iou {
        #[arg(allow_hyphen_values = true)]
        box1: OrientedBox,
        #[arg(allow_hyphen_values = true)]
        box2: OrientedBox,
    },
    /// Optimal assignment for a cost matrix (one row of numbers per line).
    Match {
        #[arg(long)]
        costs: PathBuf,
    },
    /// Write the query proposals and their decoder sampling points.
    DumpProposals {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> rotdetr::Result<()> {
    match cmd {
        Cmd::GenData { out, n, seed, size, classes } => {
            let spec = SceneSpec { size, classes, ..SceneSpec::default() };
            harness::gen_dataset(&out, seed, n, &spec)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Cmd::Train { config, resume } => {
            let mut cfg = TrainConfig::load(&config)?;
            if resume.is_some() {
                cfg.resume = resume;
            }
            let r = harness::train(&cfg)?;
            print!("trained {} steps in {:.1}s, final loss {:.6}", r.steps, r.seconds, r.last.total);
            match r.report {
                Some(rep) => println!(", held-out mAP {:.4}", rep.map),
                None => println!(),
            }
        }
        Cmd::Eval { checkpoint: ckpt, data: dir, iou, floor } => {
            let det = Detector::from_tensors(&checkpoint::load(&ckpt)?)?;
            let scenes = data::load_dataset(&dir)?;
            let refs: Vec<_> = scenes.iter().map(|(_, s)| s).collect();
            let rep = harness::evaluate(&det, &refs, iou, floor)?;
            for (c, ap) in rep.ap.iter().enumerate() {
                match ap {
                    Some(ap) => println!("class {c} AP {ap:.4}"),
                    None => println!("class {c} AP n/a"),
                }
            }
            println!("mAP {:.4}", rep.map);
        }
        Cmd::Iou { box1, box2 } => {
            if box1.w <= 0.0 || box1.h <= 0.0 || box2.w <= 0.0 || box2.h <= 0.0 {
                return Err(Error::Usage("box sides must be positive".into()));
            }
            println!("{:.6}", rotated_iou(&box1, &box2));
        }
        Cmd::Match { costs } => {
            let text = std::fs::read_to_string(&costs)?;
            let rows = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad cost {t:?}"))))
                        .collect::<rotdetr::Result<Vec<f64>>>()
                })
                .collect::<rotdetr::Result<Vec<_>>>()?;
            let a = hungarian(&rows)?;
            let pairs: Vec<String> = a.pairs.iter().map(|(r, c)| format!("({r},{c})")).collect();
            println!("pairs {}", pairs.join(","));
            println!("cost {}", a.cost);
        }
        Cmd::DumpProposals { checkpoint: ckpt, image, out } => {
            let det = Detector::from_tensors(&checkpoint::load(&ckpt)?)?;
            let img = data::read_image(&image)?;
            let mut s = det.session(false);
            let fwd = det.forward(&mut s, &img)?;
            let last = fwd.layers.len().checked_sub(1).ok_or_else(|| Error::Config("decoder has no layers".into()))?;
            let points = det.sampling_points(&s, &fwd, last);
            let mut text = String::from("# score cx cy w h theta, then x y of each sampling point\n");
            for (q, b) in fwd.query_boxes.iter().enumerate() {
                let b = b.canonicalize();
                let _ = write!(text, "{:.6} {b}", sigmoid(fwd.query_scores[q]));
                for p in &points[q] {
                    let _ = write!(text, " {:.6} {:.6}", p[0], p[1]);
                }
                text.push('\n');
            }
            std::fs::write(&out, text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
