use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coattn::classifier::{LossTerms, ModelParams};
use coattn::config::KeyValues;
use coattn::data::{self, generate, read_classes, read_dataset, write_dataset, write_mask, Dataset, DatasetSpec};
use coattn::evaluation::{probe_pairs, probe_rate, ConfusionAccumulator};
use coattn::gradcheck::gradcheck_suite;
use coattn::inference::{localize, to_pseudo_mask, write_maps, InferConfig, Strategy};
use coattn::seeding::{derive_rng, hash_str};
use coattn::training::{ablation_suite, train, RunOptions, TrainConfig, TrainState, ABLATION_ARMS};
use coattn::{netpbm, Error, Result};

#[derive(Parser)]
#[command(name = "coattn", version, about = "Co-attention classifier for weakly supervised segmentation")]
struct Cli {
    /// Accepted for compatibility; everything runs on one thread.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into OUT/train and OUT/test.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Dataset spec file (`key = value`).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the classifier on a dataset split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// basic | basic+coatt | full
        #[arg(long)]
        loss: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Localization maps and pseudo masks for every image of a split.
    Infer(InferArgs),
    /// mIoU of predicted masks against ground truth; JSON on stdout.
    Eval {
        /// Directory of `<id>.pgm` predicted masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>.pgm` ground-truth masks.
        #[arg(long)]
        gt: PathBuf,
        /// `classes.json` of the dataset.
        #[arg(long)]
        classes: PathBuf,
        /// With `--data`, also report the common-semantics probe rate.
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        probe_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backward passes against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the three loss-term arms and score their pseudo masks.
    Ablate {
        /// Dataset root holding `train` and `test`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        r: usize,
        #[arg(long, default_value_t = 0.2)]
        theta: f64,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "multi")]
    strategy: Strategy,
    #[arg(long = "R", default_value_t = 3)]
    related: usize,
    #[arg(long, default_value_t = 0.2)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split to draw related images from; defaults to `--data`.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Contract(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::DataMismatch(_) | Error::Dimension(_) | Error::Sampling(_) => 5,
        Error::Io { .. } => 1,
    }
}

fn print_settings(title: &str, body: &str) {
    eprintln!("[{title}]");
    for line in body.lines() {
        eprintln!("  {line}");
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A dataset root resolves to its `split` subdirectory; a split directory is
/// used as is.
fn open_split(dir: &Path, split: &str) -> Result<Dataset> {
    if dir.join("manifest.jsonl").exists() {
        read_dataset(dir)
    } else {
        read_dataset(&dir.join(split))
    }
}

fn load_params(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    ModelParams::load(path)
}

fn check_classes(params: &ModelParams, data: &Dataset) -> Result<()> {
    if params.classes() != data.num_classes() {
        return Err(Error::DataMismatch(format!(
            "checkpoint has {} classes, dataset has {}",
            params.classes(),
            data.num_classes()
        )));
    }
    Ok(())
}

fn gen_data(out: &Path, spec_path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => DatasetSpec::from_key_values(KeyValues::read(p)?)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    print_settings("gen-data", &spec.to_key_values());
    let data = generate(&spec)?;
    write_dataset(&data.train, &out.join("train"))?;
    write_dataset(&data.test, &out.join("test"))?;
    write_file(&out.join("dataset.cfg"), spec.to_key_values())?;
    eprintln!("wrote {} train and {} test images to {}", data.train.len(), data.test.len(), out.display());
    Ok(())
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::read(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run_train(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    loss: Option<&str>,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let mut cfg = train_config(config)?;
    if let Some(l) = loss {
        cfg.terms = LossTerms::parse(l)
            .ok_or_else(|| Error::Config(format!("unknown loss `{l}`; expected basic, basic+coatt or full")))?;
    }
    cfg.validate()?;
    print_settings("train", &cfg.to_key_values());
    let data = open_split(data_dir, "train")?;
    let resume = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Checkpoint(format!("{} does not exist", p.display())));
            }
            let state = TrainState::load(p)?;
            check_classes(&state.params, &data)?;
            Some(state)
        }
        None => None,
    };
    let outcome = train(
        &data,
        &cfg,
        RunOptions {
            out: Some(out.to_path_buf()),
            resume,
            verbose: !quiet,
        },
    )?;
    if let Some(m) = outcome.metrics.last() {
        eprintln!("finished epoch {} with train f1 {:.4}", m.epoch, m.f1);
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct Provenance<'a> {
    id: &'a str,
    strategy: String,
    related: BTreeMap<usize, &'a [String]>,
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let cfg = InferConfig {
        strategy: a.strategy,
        related: a.related,
        theta: a.theta,
        seed: a.seed,
    };
    cfg.validate()?;
    print_settings(
        "infer",
        &format!(
            "strategy = {}\nR = {}\ntheta = {}\nseed = {}\n",
            cfg.strategy, cfg.related, cfg.theta, cfg.seed
        ),
    );
    let params = load_params(&a.ckpt)?;
    let data = open_split(&a.data, "train")?;
    check_classes(&params, &data)?;
    let reference = match &a.reference {
        Some(r) => {
            let d = open_split(r, "train")?;
            if d.classes != data.classes {
                return Err(Error::DataMismatch("reference split has different classes".into()));
            }
            d
        }
        None => data.clone(),
    };

    let masks_dir = a.out.join("masks");
    let maps_dir = a.out.join("maps");
    create_dir(&masks_dir)?;
    create_dir(&maps_dir)?;
    let mut provenance = Vec::new();
    for s in &data.samples {
        let map = localize(&params, s, &reference.samples, &cfg)?;
        let (h, w) = (s.height(), s.width());
        let mask = to_pseudo_mask(&map, &s.labels, cfg.theta, h, w)?;
        write_mask(&masks_dir.join(format!("{}.pgm", s.id)), &mask, w, h)?;
        write_maps(&maps_dir, &s.id, &map, &s.labels, h, w)?;
        let rec = Provenance {
            id: &s.id,
            strategy: map.strategy.to_string(),
            related: map.related.iter().map(|(k, ids)| (*k, ids.as_slice())).collect(),
        };
        provenance.extend(serde_json::to_vec(&rec).expect("record serializes"));
        provenance.push(b'\n');
    }
    write_file(&a.out.join("provenance.jsonl"), provenance)?;
    eprintln!("wrote {} masks to {}", data.len(), masks_dir.display());
    Ok(())
}

/// `<id>.pgm` files of a directory, sorted by id.
fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    pred: &Path,
    gt: &Path,
    classes_path: &Path,
    ckpt: Option<&Path>,
    data_dir: Option<&Path>,
    pairs: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let classes = read_classes(classes_path)?;
    let pred_files = mask_files(pred)?;
    let gt_files = mask_files(gt)?;
    if pred_files.keys().ne(gt_files.keys()) {
        let missing: Vec<&String> = gt_files.keys().filter(|k| !pred_files.contains_key(*k)).collect();
        let extra: Vec<&String> = pred_files.keys().filter(|k| !gt_files.contains_key(*k)).collect();
        return Err(Error::DataMismatch(format!(
            "prediction ids differ from ground truth (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    if gt_files.is_empty() {
        return Err(Error::DataMismatch(format!("no masks in {}", gt.display())));
    }
    let mut acc = ConfusionAccumulator::new(classes.len());
    for (id, gp) in &gt_files {
        let p = data::read_mask(&pred_files[id])?;
        let g = data::read_mask(gp)?;
        if (p.width, p.height) != (g.width, g.height) {
            return Err(Error::DataMismatch(format!("mask size of {id} differs")));
        }
        let bad = |m: &netpbm::Raster| m.data.iter().any(|&v| v as usize > classes.len() && v != data::IGNORE);
        if bad(&p) || bad(&g) {
            return Err(Error::DataMismatch(format!("mask {id} has labels outside 0..={}", classes.len())));
        }
        acc.add(&p.data, &g.data)?;
    }
    let mut report = acc.report(&classes);
    if let (Some(ckpt), Some(dir)) = (ckpt, data_dir) {
        let params = load_params(ckpt)?;
        let data = open_split(dir, "test")?;
        check_classes(&params, &data)?;
        let mut rng = derive_rng(seed, &[hash_str("probe")]);
        let p = probe_pairs(&data.samples, pairs, &mut rng)?;
        report.probe_rate = Some(probe_rate(&params, &data.samples, &p)?);
    }
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    if let Some(path) = out {
        write_file(path, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    eprintln!("[gradcheck]\n  seed = {seed}\n  tolerance = {}", coattn::gradcheck::TOLERANCE);
    let checks = gradcheck_suite(seed)?;
    for c in &checks {
        println!("{}", c.line());
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn arm_miou(params: &ModelParams, test: &Dataset, reference: &Dataset, cfg: &InferConfig) -> Result<f64> {
    let mut acc = ConfusionAccumulator::new(test.num_classes());
    for s in &test.samples {
        let map = localize(params, s, &reference.samples, cfg)?;
        let mask = to_pseudo_mask(&map, &s.labels, cfg.theta, s.height(), s.width())?;
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::DataMismatch(format!("test image {} has no mask", s.id)))?;
        acc.add(&mask, gt)?;
    }
    Ok(acc.mean_iou())
}

fn run_ablate(data_dir: &Path, config: Option<&Path>, out: &Path, related: usize, theta: f64, quiet: bool) -> Result<()> {
    let cfg = train_config(config)?;
    cfg.validate()?;
    InferConfig {
        theta,
        ..InferConfig::default()
    }
    .validate()?;
    print_settings("ablate", &format!("{}R = {related}\ntheta = {theta}\n", cfg.to_key_values()));
    let train_set = read_dataset(&data_dir.join("train"))?;
    let test_set = read_dataset(&data_dir.join("test"))?;
    let outcomes = ablation_suite(&train_set, &cfg, Some(out), !quiet)?;

    let mut csv = String::from("arm,single_miou,multi_miou,reported_miou\n");
    for ((name, outcome), (_, terms)) in outcomes.iter().zip(ABLATION_ARMS) {
        let params = &outcome.state.params;
        let single = InferConfig {
            strategy: Strategy::Single,
            related: 0,
            theta,
            seed: cfg.seed,
        };
        let multi = InferConfig {
            strategy: Strategy::Multi,
            related,
            ..single.clone()
        };
        let s = arm_miou(params, &test_set, &train_set, &single)?;
        let m = arm_miou(params, &test_set, &train_set, &multi)?;
        let reported = if terms.coatt { m } else { s };
        csv.push_str(&format!("{name},{s:.6},{m:.6},{reported:.6}\n"));
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = cli.jobs;
    let result = match &cli.command {
        Command::GenData { out, spec, seed } => gen_data(out, spec.as_deref(), *seed),
        Command::Train {
            data,
            config,
            out,
            loss,
            resume,
            quiet,
        } => run_train(data, config.as_deref(), out, loss.as_deref(), resume.as_deref(), *quiet),
        Command::Infer(a) => run_infer(a),
        Command::Eval {
            pred,
            gt,
            classes,
            ckpt,
            data,
            probe_pairs,
            seed,
            out,
        } => run_eval(pred, gt, classes, ckpt.as_deref(), data.as_deref(), *probe_pairs, *seed, out.as_deref()),
        Command::Gradcheck { seed } => match run_gradcheck(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Ablate {
            data,
            config,
            out,
            r,
            theta,
            quiet,
        } => run_ablate(data, config.as_deref(), out, *r, *theta, *quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
