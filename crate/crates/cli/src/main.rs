use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use tabseq_core::codec::{
    build_bbox_vocab, build_structure_vocab, default_content_vocab, Task, Vocab,
};
use tabseq_core::image::RasterImage;
use tabseq_core::model::{load_encoder_checkpoint, train_task, Init, TaskConfig, TaskModel};
use tabseq_core::pipeline::{
    evaluate, lint_corpus, task_samples, InferenceResult, Pipeline, OVERLAP_THRESHOLD,
};
use tabseq_core::ssp::{pretrain, SspConfig};
use tabseq_core::synthgen::{make_corpus, Annotation, Corpus, FaultPlan, GenConfig};
use tabseq_core::vqvae::{format_token_grid, train_vqvae, VqvaeConfig, VqvaeModel};

#[derive(Parser)]
#[command(
    name = "tabseq",
    version,
    about = "Table recognition as sequence generation"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with the command's configuration; omitted keys keep defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Structure,
    Bbox,
    Content,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Structure => Task::Structure,
            TaskArg::Bbox => Task::Bbox,
            TaskArg::Content => Task::Content,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Scratch,
    Ssp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Steds,
    Teds,
    Wf1,
    Ap,
}

#[derive(clap::Args)]
struct Models {
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    bbox: PathBuf,
    #[arg(long)]
    content: PathBuf,
}

impl Models {
    fn load(&self) -> Result<Pipeline> {
        let load =
            |p: &Path| TaskModel::load(p).with_context(|| format!("loading {}", p.display()));
        Ok(Pipeline::new(
            load(&self.structure)?,
            load(&self.bbox)?,
            load(&self.content)?,
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, optionally with injected annotation faults.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        out_of_bounds: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long, default_value_t = 0)]
        word_wise: usize,
        #[arg(long, default_value_t = 0)]
        unrelated_text: usize,
    },
    /// Train the image tokenizer.
    TrainVqvae {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Masked visual-token pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        /// Encoder checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train one task model.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "scratch")]
        init: InitArg,
        /// Pretrained encoder checkpoint, required with `--init ssp`.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score the pipeline on a corpus: the chosen metric, then a table of all metrics.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        models: Models,
        /// Full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check annotations for out-of-bounds boxes, overlaps and count mismatches.
    Lint {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Recognize one table image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        models: Models,
        /// Result JSON path.
        #[arg(long)]
        out: PathBuf,
        /// HTML path; defaults to the result path with an `.html` extension.
        #[arg(long)]
        html: Option<PathBuf>,
    },
    /// Print the tokenizer's code grid for an image.
    Tokens {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LintConfig {
    theta: f64,
}

impl Default for LintConfig {
    fn default() -> Self {
        LintConfig {
            theta: OVERLAP_THRESHOLD,
        }
    }
}

/// Commands without tunable settings still accept a config file, which must
/// then be an empty object.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoConfig {}

fn read_config_value(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            if !v.is_object() {
                bail!("config {} must be a JSON object", p.display());
            }
            Ok(v)
        }
    }
}

fn config<T: DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    let v = read_config_value(path)?;
    serde_json::from_value(v).context("invalid config")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn corpus_images(corpus: &Corpus) -> Result<Vec<RasterImage>> {
    (0..corpus.len()).map(|i| Ok(corpus.image(i)?)).collect()
}

fn corpus_items(corpus: &Corpus) -> Result<Vec<(RasterImage, Annotation)>> {
    (0..corpus.len())
        .map(|i| Ok((corpus.image(i)?, corpus.records[i].annotation())))
        .collect()
}

fn task_vocab(task: Task, cfg: &TaskConfig) -> Result<Vocab> {
    Ok(match task {
        Task::Structure => build_structure_vocab(),
        Task::Bbox => {
            let e = &cfg.encoder;
            if e.image_height != e.image_width {
                bail!(
                    "bbox models need a square input, got {}x{}",
                    e.image_height,
                    e.image_width
                );
            }
            build_bbox_vocab(e.image_width as u32)
        }
        Task::Content => default_content_vocab(),
    })
}

/// Task config from the file, with the task taken from the command line and
/// the sequence limit defaulting to that task's.
fn task_config(path: Option<&Path>, task: Task) -> Result<TaskConfig> {
    let mut v = read_config_value(path)?;
    let obj = v.as_object_mut().unwrap();
    obj.insert("task".into(), serde_json::to_value(task)?);
    obj.entry("max_len")
        .or_insert_with(|| Value::from(task.max_len()));
    let cfg: TaskConfig = serde_json::from_value(v).context("invalid config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            out,
            count,
            out_of_bounds,
            overlap,
            word_wise,
            unrelated_text,
        } => {
            let cfg: GenConfig = config(cfg_path)?;
            let faults = FaultPlan {
                out_of_bounds,
                overlap,
                word_wise,
                unrelated_text,
            };
            let m = make_corpus(&cfg, seed, count, &faults, &out)?;
            println!("wrote {} samples to {}", m.count, out.display());
        }
        Command::TrainVqvae { corpus, out, log } => {
            let cfg: VqvaeConfig = config(cfg_path)?;
            let images = corpus_images(&Corpus::load(&corpus)?)?;
            let (model, train_log) = train_vqvae(&images, &cfg, seed)?;
            model.save(&out)?;
            if let Some(p) = log {
                train_log.write_csv(p)?;
            }
            println!(
                "final loss {:.6}",
                train_log.final_loss().unwrap_or(f32::NAN)
            );
        }
        Command::Pretrain {
            corpus,
            vqvae,
            out,
            log,
        } => {
            let cfg: SspConfig = config(cfg_path)?;
            let images = corpus_images(&Corpus::load(&corpus)?)?;
            let tokenizer = VqvaeModel::load(&vqvae)?;
            let (model, train_log) = pretrain(&images, &tokenizer, &cfg, seed)?;
            model.save_encoder(&out)?;
            if let Some(p) = log {
                train_log.write_csv(p)?;
            }
            println!(
                "final loss {:.6}",
                train_log.final_loss().unwrap_or(f32::NAN)
            );
        }
        Command::Finetune {
            task,
            init,
            encoder,
            corpus,
            out,
            log,
        } => {
            let task = Task::from(task);
            let cfg = task_config(cfg_path, task)?;
            let vocab = task_vocab(task, &cfg)?;
            let init = match (init, encoder) {
                (InitArg::Scratch, None) => Init::Scratch,
                (InitArg::Scratch, Some(_)) => bail!("--encoder only applies with --init ssp"),
                (InitArg::Ssp, None) => bail!("--init ssp needs --encoder"),
                (InitArg::Ssp, Some(p)) => {
                    let (weights, enc) = load_encoder_checkpoint(&p)?;
                    Init::Encoder(weights, enc)
                }
            };
            let items = corpus_items(&Corpus::load(&corpus)?)?;
            let content_size = (cfg.encoder.image_height, cfg.encoder.image_width);
            let samples = task_samples(task, &items, &vocab, content_size)?;
            let (model, train_log) = train_task(&cfg, &vocab, &samples, &init, seed)?;
            model.save(&out)?;
            if let Some(p) = log {
                train_log.write_csv(p)?;
            }
            println!(
                "final loss {:.6}",
                train_log.final_loss().unwrap_or(f32::NAN)
            );
        }
        Command::Eval {
            metric,
            corpus,
            models,
            report,
        } => {
            let NoConfig {} = config(cfg_path)?;
            let pipe = models.load()?;
            let corpus = Corpus::load(&corpus)?;
            let items = corpus_items(&corpus)?;
            let preds = items
                .iter()
                .map(|(im, _)| pipe.infer(im))
                .collect::<tabseq_core::Result<Vec<InferenceResult>>>()?;
            let gts: Vec<Annotation> = items.into_iter().map(|(_, a)| a).collect();
            let r = evaluate(&preds, &gts)?;
            if let Some(p) = report {
                write(&p, serde_json::to_string_pretty(&r)?)?;
            }
            let value = match metric {
                Metric::Steds => r.steds,
                Metric::Teds => r.teds,
                Metric::Wf1 => r.wf1,
                Metric::Ap => r.ap50,
            };
            println!("{value:.4}");
            println!(
                "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "S-TEDS", "TEDS", "AP50", "AP75", "mAP", "F1@0.6", "WF1"
            );
            println!(
                "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.steds, r.teds, r.ap50, r.ap75, r.map, r.f1_at_06, r.wf1
            );
        }
        Command::Lint { corpus, report } => {
            let cfg: LintConfig = config(cfg_path)?;
            let r = lint_corpus(&corpus, cfg.theta)?;
            if let Some(p) = report {
                write(&p, serde_json::to_string_pretty(&r)?)?;
            }
            println!("{:.4}", r.fraction);
        }
        Command::Infer {
            image,
            models,
            out,
            html,
        } => {
            let NoConfig {} = config(cfg_path)?;
            let pipe = models.load()?;
            let img = RasterImage::load_ppm(&image)?;
            let result = pipe.infer(&img)?;
            write(&out, serde_json::to_string_pretty(&result)?)?;
            let html_path = html.unwrap_or_else(|| out.with_extension("html"));
            match &result.html {
                Some(h) => write(&html_path, h)?,
                None => eprintln!("structure is malformed; no HTML written"),
            }
            if result.flags.any() {
                eprintln!("flags: {}", serde_json::to_string(&result.flags)?);
            }
            println!("{}", out.display());
        }
        Command::Tokens { vqvae, image } => {
            let NoConfig {} = config(cfg_path)?;
            let model = VqvaeModel::load(&vqvae)?;
            let img = RasterImage::load_ppm(&image)?;
            print!("{}", format_token_grid(&model.token_grid(&img)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
