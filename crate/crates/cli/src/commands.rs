use std::fs;
use std::path::{Path, PathBuf};

use anomgan::data::synth::{self, SynthConfig};
use anomgan::data::{build_split, sample_subset, scan_dataset, split_validation, Dataset, Manifest, Protocol, Split};
use anomgan::discriminator::DiscriminatorConfig;
use anomgan::eval::{
    check_compatible, emit_report, eta_sweep, evaluate_pairs, score_dataset, write_scores, Evaluation, SCORES_FILE,
};
use anomgan::generator::GeneratorConfig;
use anomgan::model::ModelConfig;
use anomgan::train::{self, config_hash, Checkpoint, TrainConfig, TrainRun, BEST_CHECKPOINT, LAST_CHECKPOINT};

use crate::config::{output_dir, resolve_seed, DataConfig, Needs, Overrides, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const VALIDATION_MANIFEST: &str = "validation.manifest";
pub const TEST_MANIFEST: &str = "test.manifest";
pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const EVAL_DIR: &str = "eval";
pub const SCORE_DIR: &str = "score";

fn load_config(path: Option<&Path>, overrides: &Overrides, needs: Needs) -> Result<RunConfig> {
    let path = path.ok_or_else(|| CliError::invalid("--config: required for this command"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    cfg.validate(needs)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(CliError::invalid(format!(
            "--validation-fraction: {fraction} outside [0, 1)"
        )))
    }
}

/// Splits validation off `test` and writes all manifests into `dir`.
fn write_manifests(dir: &Path, train: &Manifest, test: Manifest, fraction: f64, seed: u64) -> Result<()> {
    let (test, validation) = if fraction > 0.0 {
        let (rest, val) = split_validation(&test, fraction, seed)?;
        (rest, Some(val))
    } else {
        (test, None)
    };
    create_dir(dir)?;
    train.save(&dir.join(TRAIN_MANIFEST))?;
    test.save(&dir.join(TEST_MANIFEST))?;
    if let Some(v) = &validation {
        v.save(&dir.join(VALIDATION_MANIFEST))?;
    }
    let describe = |name: &str, m: &Manifest| {
        let tags: std::collections::BTreeMap<&str, usize> = m.records.iter().fold(Default::default(), |mut acc, r| {
            *acc.entry(r.class_tag.as_str()).or_default() += 1;
            acc
        });
        println!(
            "{name}: {} records ({} normal, {} anomalous) {tags:?}",
            m.len(),
            m.count(anomgan::data::Label::Normal),
            m.count(anomgan::data::Label::Anomalous)
        );
    };
    describe("train", train);
    if let Some(v) = &validation {
        describe("validation", v);
    }
    describe("test", &test);
    Ok(())
}

pub fn prepare(
    root: &Path,
    protocol: &Protocol,
    fraction: f64,
    train_limit: Option<usize>,
    overrides: &Overrides,
) -> Result<()> {
    if !root.is_dir() {
        return Err(CliError::invalid(format!(
            "--dataset-root: not a directory: {}",
            root.display()
        )));
    }
    check_fraction(fraction)?;
    let seed = overrides.seed.unwrap_or(0);
    let out = output_dir(overrides.out_dir.as_deref().unwrap_or(Path::new("data")));
    let images = scan_dataset(root)?;
    let (mut train, test) = build_split(&images, protocol)?;
    if matches!(protocol, Protocol::RoiMasked(_)) {
        test.validate_files()?;
    }
    if let Some(n) = train_limit {
        train = Manifest::new(Split::Train, sample_subset(&train.records, n, seed))?;
    }
    write_manifests(&out, &train, test, fraction, seed)?;
    println!("manifests written to {}", out.display());
    Ok(())
}

/// Model and training settings sized for the procedural texture data.
pub fn smoke_config(size: usize) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        generator: GeneratorConfig {
            input_size: size,
            depth: 3,
            base_channels: 8,
            latent_dim: 64,
            ..Default::default()
        },
        discriminator: DiscriminatorConfig {
            input_size: size,
            depth: 3,
            base_channels: 8,
            ..Default::default()
        },
    };
    let train = TrainConfig {
        batch_size: 16,
        ..Default::default()
    };
    (model, train)
}

pub fn synth(cfg: SynthConfig, fraction: f64, overrides: &Overrides) -> Result<()> {
    check_fraction(fraction)?;
    let requested = overrides.out_dir.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let out = output_dir(&requested);
    let (train, test) = synth::generate(&out.join("data"), &cfg)?;
    write_manifests(&out, &train, test, fraction, cfg.seed)?;

    let (model, train_cfg) = smoke_config(cfg.size as usize);
    let run = RunConfig {
        seed: Some(cfg.seed),
        out_dir: requested.join("run"),
        data: DataConfig {
            train_manifest: Some(TRAIN_MANIFEST.into()),
            validation_manifest: (fraction > 0.0).then(|| VALIDATION_MANIFEST.into()),
            test_manifest: Some(TEST_MANIFEST.into()),
            ..Default::default()
        },
        patch: anomgan::data::PatchSpec::new(cfg.size as usize),
        model,
        train: train_cfg,
        ..Default::default()
    };
    let path = out.join(EFFECTIVE_CONFIG);
    fs::write(&path, run.to_toml()).map_err(|e| CliError::io(&path, e))?;
    println!("dataset and starter config written to {}", out.display());
    Ok(())
}

fn dataset(manifest: &Path, cfg: &RunConfig, roi: bool) -> Result<Dataset> {
    let m = Manifest::load(manifest)?;
    Ok(Dataset::new(m, cfg.patch, cfg.data.channels, roi)?)
}

pub fn train(config: Option<&Path>, overrides: &Overrides, resume: bool) -> Result<()> {
    let mut cfg = load_config(
        config,
        overrides,
        Needs {
            train: true,
            test: false,
        },
    )?;
    let seed = resolve_seed(cfg.seed);
    cfg.seed = Some(seed);
    let out = output_dir(&cfg.out_dir);
    let last = out.join(LAST_CHECKPOINT);
    let checkpoint = if resume {
        if !last.is_file() {
            return Err(CliError::invalid(format!("--resume: no checkpoint at {}", last.display())));
        }
        let hash = config_hash(&cfg.model, &cfg.train, seed);
        Some(Checkpoint::load(&last, Some(&hash))?)
    } else {
        if last.exists() {
            return Err(CliError::invalid(format!(
                "out_dir: {} already holds a run; pass --resume or choose another directory",
                out.display()
            )));
        }
        None
    };
    let train_data = dataset(cfg.data.train_manifest.as_deref().expect("validated"), &cfg, false)?;
    let validation = match &cfg.data.validation_manifest {
        Some(p) => Some(dataset(p, &cfg, cfg.data.roi)?),
        None => None,
    };
    create_dir(&out)?;
    let path = out.join(EFFECTIVE_CONFIG);
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;

    let outcome = train::train(TrainRun {
        model: &cfg.model,
        config: &cfg.train,
        seed,
        eta: cfg.eta,
        aggregation: cfg.eval.aggregation,
        train_data: &train_data,
        validation: validation.as_ref(),
        out_dir: &out,
        resume: checkpoint,
    })?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs: total loss {:.4}, contextual {:.4}",
            last.epoch, last.total, last.l_con
        );
    }
    if let Some((epoch, auc)) = outcome.best {
        println!("best validation AUC {auc:.4} at epoch {epoch}");
    }
    println!("checkpoints: {} and {}", outcome.last_checkpoint.display(), outcome.best_checkpoint.display());
    Ok(())
}

/// Loads the checkpoint and test data and checks they fit together.
fn scoring_inputs(
    config: Option<&Path>,
    overrides: &Overrides,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<(RunConfig, PathBuf, anomgan::model::Model, Dataset)> {
    let mut cfg = load_config(
        config,
        overrides,
        Needs {
            train: false,
            test: manifest.is_none(),
        },
    )?;
    if let Some(m) = manifest {
        if !m.is_file() {
            return Err(CliError::invalid(format!("--test-manifest: file does not exist: {}", m.display())));
        }
        cfg.data.test_manifest = Some(m);
    }
    let out = output_dir(&cfg.out_dir);
    let ckpt_path = checkpoint.unwrap_or_else(|| out.join(BEST_CHECKPOINT));
    if !ckpt_path.is_file() {
        return Err(CliError::invalid(format!(
            "--checkpoint: file does not exist: {}",
            ckpt_path.display()
        )));
    }
    let model = Checkpoint::load(&ckpt_path, None)?.model;
    let data = dataset(cfg.data.test_manifest.as_deref().expect("validated"), &cfg, cfg.data.roi)?;
    check_compatible(&model, &data)?;
    Ok((cfg, out, model, data))
}

fn print_summary(ev: &Evaluation) {
    let r = &ev.report;
    println!(
        "eta {:.2}: AUC {:.4} (patch {:.4}), recall {:.4} at threshold {:.4}, {} normal / {} anomalous",
        r.eta, r.auc, r.patch_auc, r.recall, r.threshold, r.n_normal, r.n_anomalous
    );
    for (class, recall) in &r.per_class_recall {
        println!("  recall[{class}] = {recall:.4}");
    }
}

pub fn eval(
    config: Option<&Path>,
    overrides: &Overrides,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
    sweep: bool,
) -> Result<()> {
    let (cfg, out, model, data) = scoring_inputs(config, overrides, checkpoint, manifest)?;
    let pairs = score_dataset(&model, &data, cfg.eval.batch_size)?;
    let options = cfg.eval_options();
    let evaluation = evaluate_pairs(&data, &pairs, &options)?;
    let dir = out.join(EVAL_DIR);
    emit_report(&evaluation, &dir)?;
    print_summary(&evaluation);
    if sweep {
        let mut w = csv::Writer::from_path(dir.join("eta_sweep.csv")).map_err(anomgan::Error::from)?;
        w.write_record(["eta", "auc", "patch_auc", "recall", "threshold"])
            .map_err(anomgan::Error::from)?;
        for ev in eta_sweep(&data, &pairs, &options)? {
            let r = &ev.report;
            emit_report(&ev, &dir.join(format!("eta-{:.1}", r.eta)))?;
            w.write_record([r.eta, r.auc, r.patch_auc, r.recall, r.threshold].map(|v| v.to_string()))
                .map_err(anomgan::Error::from)?;
            print_summary(&ev);
        }
        w.flush().map_err(|e| CliError::io(&dir.join("eta_sweep.csv"), e))?;
    }
    println!("report written to {}", dir.display());
    Ok(())
}

pub fn score(
    config: Option<&Path>,
    overrides: &Overrides,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let (cfg, out, model, data) = scoring_inputs(config, overrides, checkpoint, manifest)?;
    let pairs = score_dataset(&model, &data, cfg.eval.batch_size)?;
    let images = anomgan::eval::image_scores(&data, &pairs, cfg.eta, cfg.eval.aggregation);
    let range = anomgan::objectives::ScoreRange::fit(&images.raw)?;
    let rows: Vec<_> = (0..images.raw.len())
        .map(|i| anomgan::eval::ScoreRecord {
            sample_id: images.ids[i].clone(),
            class_tag: images.class_tags[i].clone(),
            label: images.labels[i],
            raw_score: images.raw[i],
            normalized_score: range.apply(images.raw[i]),
        })
        .collect();
    let dir = out.join(SCORE_DIR);
    create_dir(&dir)?;
    let path = dir.join(SCORES_FILE);
    write_scores(&rows, &path)?;
    println!("{} image scores written to {}", rows.len(), path.display());
    Ok(())
}

pub fn print_config(config: Option<&Path>, overrides: &Overrides) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    print!("{}", cfg.to_toml());
    Ok(())
}
