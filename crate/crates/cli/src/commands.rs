use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use cawcl_core::datagen::{generate, read_dataset, write_dataset, Dataset, Domain, GenConfig};
use cawcl_core::eval::{evaluate, EpochMetrics, ItemLabels, MetricsReport, METRICS_HEADER};
use cawcl_core::model::{read_checkpoint, write_checkpoint, Model};
use cawcl_core::pseudo::{assign_pseudo_labels, ClusterParams, OUTLIER};
use cawcl_core::trainer::ablation::{
    ablation_csv, run_cell, AblationCell, AblationRow, SuiteConfig,
};
use cawcl_core::trainer::{parse_key_values, tracklet_reps, TrainConfig, Trainer};
use cawcl_core::{Error, Exec};

use crate::manifest::{content_hash, Manifest, RUN_PREFIX};
use crate::{ConfigArgs, SEED_ENV};

type Pairs = Vec<(String, String)>;

fn read_config_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path)
        .map_err(|e| Error::BadConfig(format!("cannot read config {}: {e}", path.display())))
}

/// Configuration pairs from the file then the overrides, with `run.*` keys
/// split off.
fn load_pairs(args: &ConfigArgs) -> Result<(Pairs, Pairs), Error> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = read_config_text(path)?;
        for (k, v, _) in parse_key_values(&text, &path.display().to_string())? {
            pairs.push((k, v));
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("override `{o}` is not key=value")))?;
        pairs.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    let (run, config): (Pairs, Pairs) = pairs
        .into_iter()
        .partition(|(k, _)| k.starts_with(RUN_PREFIX));
    let run = run
        .into_iter()
        .map(|(k, v)| (k[RUN_PREFIX.len()..].to_owned(), v))
        .collect();
    Ok((run, config))
}

/// Seed precedence: `--seed`, then the configuration, then `CAWCL_SEED`.
fn resolve_seed(args: &ConfigArgs, config: &Pairs) -> Result<Option<u64>, Error> {
    if args.seed.is_some() {
        return Ok(args.seed);
    }
    if config.iter().any(|(k, _)| k == "seed") {
        return Ok(None);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                Error::BadConfig(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn resolve_train(args: &ConfigArgs) -> Result<(TrainConfig, Pairs), Error> {
    let (run, pairs) = load_pairs(args)?;
    let mut cfg = TrainConfig::default();
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    if let Some(seed) = resolve_seed(args, &pairs)? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, run))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_dataset(path: &Path) -> Result<(Dataset, String), Error> {
    let bytes = read_bytes(path)?;
    let dataset = read_dataset(
        BufReader::new(bytes.as_slice()),
        &path.display().to_string(),
    )?;
    Ok((dataset, content_hash(&bytes)))
}

fn load_model(path: &Path) -> Result<Model, Error> {
    let bytes = read_bytes(path)?;
    read_checkpoint(
        BufReader::new(bytes.as_slice()),
        &path.display().to_string(),
    )
}

fn check_dims(model: &Model, dataset: &Dataset) -> Result<(), Error> {
    if model.encoder.d_in() != dataset.d_in() {
        return Err(Error::DimMismatch(format!(
            "checkpoint expects {}-dimensional frames, dataset has {}",
            model.encoder.d_in(),
            dataset.d_in()
        )));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, content: &[u8]) -> Result<(), Error> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(args: &ConfigArgs, preset: Option<&str>, out: &Path) -> anyhow::Result<()> {
    let (_, pairs) = load_pairs(args)?;
    let preset = preset.map(str::to_owned).or_else(|| {
        pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
    });
    let mut cfg = GenConfig::preset(preset.as_deref().unwrap_or("default"))?;
    for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
        cfg.set(k, v)?;
    }
    if let Some(seed) = resolve_seed(args, &pairs)? {
        cfg.seed = seed;
    }
    let dataset = generate(&cfg)?;
    let mut buf = Vec::new();
    write_dataset(&dataset, &mut buf).map_err(|e| Error::io(out, e))?;
    write_file(out, &buf)?;
    println!(
        "wrote {} tracklets to {} (sha256 {})",
        dataset.tracklets.len(),
        out.display(),
        content_hash(&buf)
    );
    Ok(())
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub history: Vec<EpochMetrics>,
}

pub fn cmd_train(
    args: &ConfigArgs,
    data: Option<&Path>,
    out: &Path,
) -> anyhow::Result<TrainArtifacts> {
    let (cfg, run) = resolve_train(args)?;
    let from_manifest = run
        .iter()
        .find(|(k, _)| k == "dataset")
        .map(|(_, v)| PathBuf::from(v));
    let data_path = match (data, &from_manifest) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(
                Error::BadConfig("no dataset: pass --data or set run.dataset".into()).into(),
            )
        }
    };
    let (dataset, hash) = load_dataset(&data_path)?;
    if data.is_none() {
        if let Some((_, expected)) = run.iter().find(|(k, _)| k == "dataset_sha256") {
            if *expected != hash {
                return Err(Error::Parse {
                    file: data_path.display().to_string(),
                    line: 0,
                    msg: format!("content hash {hash} differs from the manifest's {expected}"),
                }
                .into());
            }
        }
    }
    create_dir(out)?;
    let metrics_path = out.join("metrics.csv");
    let checkpoint_path = out.join("model.ckpt");
    let manifest_path = out.join("manifest.txt");
    let dataset_ref = fs::canonicalize(&data_path).unwrap_or(data_path.clone());

    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    log::info!(
        "training on {} source and {} target samples for {} epochs (seed {})",
        trainer.source_samples(),
        trainer.target_samples(),
        cfg.epochs,
        cfg.seed
    );
    trainer.pretrain_source()?;
    let mut csv = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut history = vec![trainer.baseline_metrics()?];
    writeln!(csv, "{METRICS_HEADER}\n{}", history[0].csv_row())
        .map_err(|e| Error::io(&metrics_path, e))?;
    for _ in 0..cfg.epochs {
        let m = trainer.train_epoch()?;
        log::info!(
            "epoch {}: rank1 {:.4} mAP {:.4} camera probe {:.4}",
            m.epoch,
            m.report.rank1,
            m.report.map,
            m.report.camera_probe_accuracy
        );
        writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        history.push(m);
    }
    let mut ckpt = Vec::new();
    write_checkpoint(trainer.model(), &mut ckpt).map_err(|e| Error::io(&checkpoint_path, e))?;
    write_file(&checkpoint_path, &ckpt)?;
    let manifest = Manifest {
        run: vec![
            ("command".into(), "train".into()),
            ("version".into(), env!("CARGO_PKG_VERSION").into()),
            ("dataset".into(), dataset_ref.display().to_string()),
            ("dataset_sha256".into(), hash),
            ("checkpoint_sha256".into(), content_hash(&ckpt)),
        ],
        config: cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect(),
    };
    manifest
        .write(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(TrainArtifacts {
        metrics: metrics_path,
        checkpoint: checkpoint_path,
        manifest: manifest_path,
        history,
    })
}

/// What `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Checkpoint {
        checkpoint: PathBuf,
        data: PathBuf,
        n_clips: usize,
    },
    Embeddings(PathBuf),
}

fn target_labels(dataset: &Dataset) -> ItemLabels {
    ItemLabels {
        ids: dataset.target().map(|t| t.person).collect(),
        cams: dataset.target().map(|t| t.camera).collect(),
    }
}

pub fn cmd_eval(source: &EvalSource) -> anyhow::Result<MetricsReport> {
    match source {
        EvalSource::Checkpoint {
            checkpoint,
            data,
            n_clips,
        } => {
            let model = load_model(checkpoint)?;
            let (dataset, _) = load_dataset(data)?;
            check_dims(&model, &dataset)?;
            let reps = tracklet_reps(&model, &dataset, Domain::Target, *n_clips)?;
            Ok(evaluate(&reps, &target_labels(&dataset))?)
        }
        EvalSource::Embeddings(path) => {
            let table = read_embeddings(path)?;
            let target: Vec<&EmbeddingRow> = table
                .iter()
                .filter(|r| r.domain == Domain::Target)
                .collect();
            let labels = ItemLabels {
                ids: target.iter().map(|r| r.person).collect(),
                cams: target.iter().map(|r| r.camera).collect(),
            };
            let reps: Vec<&[f64]> = target.iter().map(|r| r.rep.as_slice()).collect();
            Ok(evaluate(&reps, &labels)?)
        }
    }
}

/// One row of an exported embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub tracklet: usize,
    pub person: usize,
    pub camera: usize,
    pub domain: Domain,
    pub pseudo_label: i64,
    pub rep: Vec<f64>,
}

pub const EMBEDDING_COLUMNS: [&str; 5] = [
    "tracklet_id",
    "person_id",
    "camera",
    "domain",
    "pseudo_label",
];

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        file: file.clone(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() <= EMBEDDING_COLUMNS.len() {
            return Err(parse_err(i + 1, "too few columns".into()));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(i + 1, format!("bad integer `{s}`")))
        };
        let rep = fields[5..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(i + 1, format!("bad number `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(EmbeddingRow {
            tracklet: num(fields[0])?,
            person: num(fields[1])?,
            camera: num(fields[2])?,
            domain: fields[3].parse()?,
            pseudo_label: fields[4]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad label `{}`", fields[4])))?,
            rep,
        });
    }
    Ok(rows)
}

pub fn cmd_export_embeddings(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    args: &ConfigArgs,
) -> anyhow::Result<()> {
    let (cfg, _) = resolve_train(args)?;
    let model = load_model(checkpoint)?;
    let (dataset, _) = load_dataset(data)?;
    check_dims(&model, &dataset)?;
    let n_clips = cfg.effective_clips();
    let target = tracklet_reps(&model, &dataset, Domain::Target, n_clips)?;
    let source = tracklet_reps(&model, &dataset, Domain::Source, n_clips)?;
    let params = ClusterParams {
        k: cfg.cluster.k.min(target.len().saturating_sub(1)).max(1),
        ..cfg.cluster
    };
    let labels = assign_pseudo_labels(&target, params)?.exported();
    let dim = model.feature_dim();
    let mut text = EMBEDDING_COLUMNS.join("\t");
    for j in 0..dim {
        text.push_str(&format!("\tf{j}"));
    }
    text.push('\n');
    let (mut ti, mut si) = (0, 0);
    for t in &dataset.tracklets {
        let (rep, label) = match t.domain {
            Domain::Target => {
                ti += 1;
                (&target[ti - 1], labels[ti - 1])
            }
            Domain::Source => {
                si += 1;
                (&source[si - 1], OUTLIER)
            }
        };
        let unit = cawcl_core::diffcore::l2_normalize(rep)?;
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}",
            t.id,
            t.person,
            t.camera,
            t.domain.as_str(),
            label
        ));
        for v in unit {
            text.push_str(&format!("\t{v}"));
        }
        text.push('\n');
    }
    write_file(out, text.as_bytes())?;
    Ok(())
}

fn cell_manifest(suite: &SuiteConfig, cell: AblationCell, seed: u64) -> Manifest {
    let mut config: Pairs = cell
        .apply(&suite.base, seed)
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
    config.extend(
        suite
            .data_for(seed)
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("gen.{k}"), v)),
    );
    Manifest {
        run: vec![
            ("command".into(), "ablate-cell".into()),
            ("version".into(), env!("CARGO_PKG_VERSION").into()),
            ("cell".into(), cell.key()),
        ],
        config,
    }
}

fn render_result(row: &AblationRow) -> String {
    let m = &row.metrics;
    let r = &m.report;
    format!(
        "epoch={}\nrank1={}\nrank5={}\nrank10={}\nmap={}\ncamera_probe_accuracy={}\nloss_ce={}\nloss_cam={}\nloss_contr={}\n",
        m.epoch, r.rank1, r.rank5, r.rank10, r.map, r.camera_probe_accuracy, m.losses.ce, m.losses.cam, m.losses.contr
    )
}

fn parse_result(
    text: &str,
    path: &Path,
    cell: AblationCell,
    seed: u64,
) -> Result<AblationRow, Error> {
    let pairs = parse_key_values(text, &path.display().to_string())?;
    let get = |key: &str| -> Result<f64, Error> {
        pairs
            .iter()
            .find(|(k, _, _)| k == key)
            .and_then(|(_, v, _)| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                line: 0,
                msg: format!("missing or bad `{key}`"),
            })
    };
    Ok(AblationRow {
        cell,
        seed,
        metrics: EpochMetrics {
            epoch: get("epoch")? as usize,
            report: MetricsReport {
                rank1: get("rank1")?,
                rank5: get("rank5")?,
                rank10: get("rank10")?,
                map: get("map")?,
                camera_probe_accuracy: get("camera_probe_accuracy")?,
            },
            losses: cawcl_core::losses::LossParts {
                ce: get("loss_ce")?,
                cam: get("loss_cam")?,
                contr: get("loss_contr")?,
            },
        },
    })
}

/// Outcome of [`cmd_ablate`].
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub csv: PathBuf,
    pub rows: Vec<AblationRow>,
    /// Jobs trained by this invocation.
    pub trained: usize,
    /// Jobs skipped because another process holds their lock.
    pub locked: usize,
}

/// Runs every (cell, seed) job of a suite. Each job is keyed by the hash of
/// its manifest; `<hash>.result` caches its final metrics and
/// `<hash>.lock` marks it as running, so several processes can share one
/// output directory.
pub fn cmd_ablate(suite_path: &Path, out: &Path, resume: bool) -> anyhow::Result<AblationOutcome> {
    let text = read_config_text(suite_path)?;
    let suite = SuiteConfig::parse(&text, &suite_path.display().to_string())?;
    let cells_dir = out.join("cells");
    create_dir(&cells_dir)?;
    let jobs: Vec<(AblationCell, u64, Manifest)> = suite
        .cells()
        .into_iter()
        .flat_map(|c| suite.seeds.iter().map(move |&s| (c, s)))
        .map(|(c, s)| (c, s, cell_manifest(&suite, c, s)))
        .collect();
    let result_path = |m: &Manifest| cells_dir.join(format!("{}.result", m.digest()));

    let outcomes = Exec::default().map(jobs.len(), |i| -> anyhow::Result<Option<bool>> {
        let (cell, seed, manifest) = &jobs[i];
        let result = result_path(manifest);
        if resume && result.exists() {
            return Ok(None);
        }
        let lock = result.with_extension("lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                log::warn!("{} is locked by another run; skipping", lock.display());
                return Ok(Some(false));
            }
            Err(e) => return Err(Error::io(&lock, e).into()),
        }
        let run = run_cell(&suite, *cell, *seed);
        let written = run.and_then(|row| {
            manifest
                .write(&result.with_extension("manifest"))
                .map_err(|e| Error::io(&result, e))?;
            write_file(&result, render_result(&row).as_bytes())
        });
        let _ = fs::remove_file(&lock);
        written?;
        log::info!("finished {} seed {seed}", cell.key());
        Ok(Some(true))
    });
    let mut trained = 0;
    let mut locked = 0;
    for o in outcomes {
        match o? {
            Some(true) => trained += 1,
            Some(false) => locked += 1,
            None => {}
        }
    }

    let mut rows = Vec::new();
    for (cell, seed, manifest) in &jobs {
        let path = result_path(manifest);
        match fs::read_to_string(&path) {
            Ok(text) => rows.push(parse_result(&text, &path, *cell, *seed)?),
            Err(_) => log::warn!("no result yet for {} seed {seed}", cell.key()),
        }
    }
    let csv = out.join("ablation.csv");
    write_file(&csv, ablation_csv(&rows).as_bytes())?;
    Ok(AblationOutcome {
        csv,
        rows,
        trained,
        locked,
    })
}
