use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use diffgap::contrastive::{generate_corpus, train_contrastive};
use diffgap::corpus::PairedCorpus;
use diffgap::denoiser::{check_gradients, DenoiserConfig};
use diffgap::eval::{diffgap_retrieval, generate, generation_metrics, raw_retrieval, RetrievalReport, REPORT_HEADER};
use diffgap::format::{decode_corpus, encode_corpus};
use diffgap::gradcheck::GradCheckOptions;
use diffgap::seeds;
use diffgap::trainer::{decode_checkpoint, encode_checkpoint, train, write_loss_csv, Checkpoint, Direction, TrainConfig};

use crate::config::{CorpusSource, RunConfig, RESOLVED_FILE};
use crate::error::CliError;

pub const ABLATE_STEPS: [usize; 3] = [50, 20, 5];
pub const ABLATE_INTERVALS: [u64; 3] = [1000, 5000, 10000];
pub const DIRECTIONS: [Direction; 2] = [Direction::CondVDenoiseA, Direction::CondADenoiseV];

pub const LOSS_FILE: &str = "loss.csv";
pub const SAMPLES_FILE: &str = "samples.dgc";
pub const RETRIEVAL_FILE: &str = "retrieval.csv";
pub const GENERATION_FILE: &str = "generation.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.txt";
pub const ABLATE_STEPS_FILE: &str = "ablate_steps.csv";
pub const ABLATE_INTERVAL_FILE: &str = "ablate_interval.csv";
pub const GENERATION_HEADER: &str = "direction,steps,eta,mean_cosine,mse,count";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Steps,
    Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Sample,
    EvalRetrieval,
    EvalGen,
    GradCheck,
    /// `None` sweeps both axes.
    Ablate(Option<Axis>),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Writes `bytes`, reads them back and checks they are unchanged and still
/// decode.
fn write_checked(
    path: &Path,
    bytes: &[u8],
    what: &'static str,
    decodes: impl Fn(&[u8]) -> bool,
) -> Result<PathBuf, CliError> {
    write(path, bytes)?;
    let back = fs::read(path).map_err(io_err(path))?;
    if back != bytes || !decodes(&back) {
        return Err(CliError::Validation {
            what,
            path: path.to_path_buf(),
        });
    }
    Ok(path.to_path_buf())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

pub fn build_corpus(cfg: &RunConfig) -> Result<PairedCorpus, CliError> {
    let spec = cfg.concept_spec();
    Ok(match cfg.corpus_source {
        CorpusSource::Direct => generate_corpus(&spec)?,
        CorpusSource::Contrastive => train_contrastive(&spec, &cfg.contrastive)?.corpus,
    })
}

/// Loads the corpus (re-normalised) and splits off the evaluation tail.
pub fn load_split(cfg: &RunConfig) -> Result<(PairedCorpus, PairedCorpus), CliError> {
    let path = cfg.corpus_path();
    let corpus = decode_corpus(&read(&path)?)?.normalized()?;
    if cfg.eval_count >= corpus.count() {
        return Err(CliError::Conflict(format!(
            "eval_count {} leaves no training items in a corpus of {}",
            cfg.eval_count,
            corpus.count()
        )));
    }
    Ok(corpus.split_tail(cfg.eval_count)?)
}

fn load_checkpoint(cfg: &RunConfig, corpus: &PairedCorpus) -> Result<Checkpoint, CliError> {
    let ck = decode_checkpoint(&read(&cfg.ckpt_path())?)?;
    ck.check_dims(corpus.dim_a(), corpus.dim_v())?;
    Ok(ck)
}

fn base_config(cfg: &RunConfig, corpus: &PairedCorpus) -> DenoiserConfig {
    DenoiserConfig {
        embed_dim: corpus.dim_a(),
        cond_dim: corpus.dim_v(),
        ..cfg.denoiser
    }
}

fn train_with(cfg: &RunConfig, corpus: &PairedCorpus, train_cfg: &TrainConfig) -> Result<diffgap::trainer::TrainOutcome, CliError> {
    Ok(train(corpus, &base_config(cfg, corpus), train_cfg)?)
}

fn retrieval_reports(cfg: &RunConfig, ck: &Checkpoint, eval: &PairedCorpus, steps: &[usize]) -> Result<Vec<RetrievalReport>, CliError> {
    let mut reports = Vec::new();
    for d in DIRECTIONS {
        let queries = eval.matrix(d.condition());
        let candidates = eval.matrix(d.target());
        reports.push(raw_retrieval(&queries, &candidates, d)?);
        for &s in steps {
            reports.push(diffgap_retrieval(ck, d, &queries, &candidates, s, cfg.seed)?);
        }
    }
    Ok(reports)
}

fn report_csv(prefix_header: Option<&str>, rows: &[(Option<String>, &RetrievalReport)]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    let io = |e: std::io::Error| CliError::Io {
        path: PathBuf::from("<report>"),
        message: e.to_string(),
    };
    match prefix_header {
        Some(p) => writeln!(buf, "{p},{REPORT_HEADER}"),
        None => writeln!(buf, "{REPORT_HEADER}"),
    }
    .map_err(io)?;
    for (prefix, r) in rows {
        let mut body = Vec::new();
        r.write_rows(&mut body).map_err(io)?;
        for line in String::from_utf8_lossy(&body).lines() {
            match prefix {
                Some(p) => writeln!(buf, "{p},{line}"),
                None => writeln!(buf, "{line}"),
            }
            .map_err(io)?;
        }
    }
    Ok(buf)
}

fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let corpus = build_corpus(cfg)?;
    let bytes = encode_corpus(&corpus)?;
    Ok(vec![write_checked(&cfg.corpus_path(), &bytes, "corpus", |b| decode_corpus(b).is_ok())?])
}

fn train_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (train_set, _) = load_split(cfg)?;
    let out = train_with(cfg, &train_set, &cfg.train_config())?;
    let bytes = encode_checkpoint(&out.checkpoint)?;
    let ck = write_checked(&cfg.ckpt_path(), &bytes, "checkpoint", |b| decode_checkpoint(b).is_ok())?;
    let mut loss = Vec::new();
    let loss_path = cfg.out.join(LOSS_FILE);
    write_loss_csv(&out.history, &mut loss).map_err(io_err(&loss_path))?;
    Ok(vec![ck, write(&loss_path, &loss)?])
}

fn sample(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (_, eval) = load_split(cfg)?;
    let ck = load_checkpoint(cfg, &eval)?;
    let d = cfg.sample_direction;
    let generated = generate(&ck, d, &eval.matrix(d.condition()), cfg.steps, cfg.eta, cfg.seed)?;
    let (_, dim) = generated.as_rows().expect("generated rows");
    let set = PairedCorpus::single(dim, generated.data().to_vec())?;
    let bytes = encode_corpus(&set)?;
    Ok(vec![write_checked(&cfg.out.join(SAMPLES_FILE), &bytes, "samples", |b| decode_corpus(b).is_ok())?])
}

fn eval_retrieval(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (_, eval) = load_split(cfg)?;
    let ck = load_checkpoint(cfg, &eval)?;
    let reports = retrieval_reports(cfg, &ck, &eval, &[cfg.steps])?;
    let rows: Vec<_> = reports.iter().map(|r| (None, r)).collect();
    Ok(vec![write(&cfg.out.join(RETRIEVAL_FILE), &report_csv(None, &rows)?)?])
}

fn eval_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (_, eval) = load_split(cfg)?;
    let ck = load_checkpoint(cfg, &eval)?;
    let mut csv = format!("{GENERATION_HEADER}\n");
    for d in DIRECTIONS {
        let g = generate(&ck, d, &eval.matrix(d.condition()), cfg.steps, cfg.eta, cfg.seed)?;
        let m = generation_metrics(&g, &eval.matrix(d.target()))?;
        writeln!(csv, "{},{},{},{},{},{}", d.label(), cfg.steps, cfg.eta, m.mean_cosine, m.mse, m.count)
            .expect("write to string");
    }
    Ok(vec![write(&cfg.out.join(GENERATION_FILE), csv.as_bytes())?])
}

fn grad_check_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut text = String::new();
    let mut worst: f64 = 0.0;
    let tol = cfg.grad_check_tol;
    for d in DIRECTIONS {
        let seed = seeds::derive(cfg.seed, d.label());
        let opts = GradCheckOptions {
            step: cfg.grad_check_step,
            tol,
            max_coords: Some(cfg.grad_check_coords),
            seed,
            ..Default::default()
        };
        let report = check_gradients(cfg.denoiser_config(d), cfg.train.schedule.steps, seed, &opts)?;
        worst = worst.max(report.max_rel_err());
        writeln!(text, "[{}]\n{report}", d.label()).expect("write to string");
    }
    let path = write(&cfg.out.join(GRAD_CHECK_FILE), text.as_bytes())?;
    print!("{text}");
    if worst > tol {
        return Err(CliError::GradCheck { max_rel_err: worst, tol });
    }
    Ok(vec![path])
}

fn ablate_steps(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let (_, eval) = load_split(cfg)?;
    let ck = load_checkpoint(cfg, &eval)?;
    let reports = retrieval_reports(cfg, &ck, &eval, &ABLATE_STEPS)?;
    let rows: Vec<_> = reports.iter().map(|r| (None, r)).collect();
    write(&cfg.out.join(ABLATE_STEPS_FILE), &report_csv(None, &rows)?)
}

fn ablate_interval(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let (train_set, eval) = load_split(cfg)?;
    let mut all = Vec::new();
    for m in ABLATE_INTERVALS {
        let tc = TrainConfig {
            interval: Some(m),
            ..cfg.train_config()
        };
        let ck = train_with(cfg, &train_set, &tc)?.checkpoint;
        for d in DIRECTIONS {
            let r = diffgap_retrieval(&ck, d, &eval.matrix(d.condition()), &eval.matrix(d.target()), cfg.steps, cfg.seed)?;
            all.push((m, r));
        }
    }
    let rows: Vec<_> = all.iter().map(|(m, r)| (Some(m.to_string()), r)).collect();
    write(&cfg.out.join(ABLATE_INTERVAL_FILE), &report_csv(Some("interval"), &rows)?)
}

/// Runs `cmd`, writing `resolved.cfg` and the command's artifacts under
/// the configured output directory. Returns the artifact paths.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut written = vec![write(&cfg.out.join(RESOLVED_FILE), cfg.render().as_bytes())?];
    written.extend(match cmd {
        Command::GenData => gen_data(cfg)?,
        Command::Train => train_cmd(cfg)?,
        Command::Sample => sample(cfg)?,
        Command::EvalRetrieval => eval_retrieval(cfg)?,
        Command::EvalGen => eval_gen(cfg)?,
        Command::GradCheck => grad_check_cmd(cfg)?,
        Command::Ablate(axis) => {
            let mut v = Vec::new();
            if axis != Some(Axis::Interval) {
                v.push(ablate_steps(cfg)?);
            }
            if axis != Some(Axis::Steps) {
                v.push(ablate_interval(cfg)?);
            }
            v
        }
    });
    Ok(written)
}
