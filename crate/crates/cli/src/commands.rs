use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use vfd_core::analysis::{geometry_report, nn_class_retention, project_2d, write_projection_csv, LabeledFeatures};
use vfd_core::covariance::estimate_pooled_covariance;
use vfd_core::eval::{
    augment_support, run_benchmark, AugmentationScheme, EvalData, SchemeKind, SupportItem, LEDGER_HEADER,
};
use vfd_core::feature::{FeatureMap, Item, LabeledDataset, Provenance, Shape3, Split};
use vfd_core::model::{PlainVae, VfdModel};
use vfd_core::rng::{derive_seed, stream};
use vfd_core::synth::{choose_without_replacement, load_feature_file, make_task_spec, sample_dataset, save_feature_file};
use vfd_core::train::{load_checkpoint, save_checkpoint, train_plain_vae, train_with, TrainState};

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Context {
    pub config: RunConfig,
    pub digest: String,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(config: RunConfig, out_dir: PathBuf, workers: usize) -> Self {
        let digest = config.digest();
        Self {
            config,
            digest,
            out_dir,
            workers,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn ensure_out_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir).map_err(|e| CliError::io(&self.out_dir, e))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::path(format!("{what} not found: {}", path.display())))
    }
}

fn load_dataset(path: &Path, shape: Shape3) -> Result<LabeledDataset, CliError> {
    require_file(path, "data file")?;
    let data = load_feature_file(path)?;
    let dim = data.items.first().map_or(0, |i| i.input.len());
    if dim != shape.0 * shape.1 * shape.2 {
        return Err(CliError::new(
            "shape",
            format!(
                "{} has dim={dim}, which does not fit feature_shape {:?}",
                path.display(),
                shape
            ),
        ));
    }
    Ok(data.reshape_inputs(shape)?)
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let cfg = &ctx.config;
    let spec_seed = derive_seed(cfg.seed, "synth-spec", 0);
    let spec = make_task_spec(&cfg.synth_config(spec_seed))?;
    let base = sample_dataset(&spec, cfg.data.base_per_class, Split::BaseTrain, derive_seed(cfg.seed, "synth-base", 0))?;
    let novel = sample_dataset(&spec, cfg.data.novel_per_class, Split::Novel, derive_seed(cfg.seed, "synth-novel", 0))?;
    let base_path = ctx.resolve(&cfg.data.base_file);
    let novel_path = ctx.resolve(&cfg.data.novel_file);
    save_feature_file(&base_path, &base).map_err(|e| CliError::new(e.category(), format!("{}: {e}", base_path.display())))?;
    save_feature_file(&novel_path, &novel).map_err(|e| CliError::new(e.category(), format!("{}: {e}", novel_path.display())))?;
    let file_entry = |path: &Path, d: &LabeledDataset| {
        json!({
            "path": path.display().to_string(),
            "count": d.len(),
            "dim": d.items.first().map_or(0, |i| i.input.len()),
            "class_ids": d.class_ids,
        })
    };
    let manifest = json!({
        "config_digest": ctx.digest,
        "seed": cfg.seed,
        "feature_shape": spec.feature_shape,
        "files": {
            "base": file_entry(&cfg.data.base_file, &base),
            "novel": file_entry(&cfg.data.novel_file, &novel),
        },
        "spec": spec,
    });
    let m = ctx.write_json("synth_manifest.json", &manifest)?;
    println!("wrote {} ({} items)", base_path.display(), base.len());
    println!("wrote {} ({} items)", novel_path.display(), novel.len());
    println!("wrote {}", m.display());
    Ok(())
}

pub fn train(ctx: &Context, resume: bool) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let base_path = ctx.resolve(&cfg.data.base_file);
    let base = load_dataset(&base_path, cfg.data.feature_shape)?;
    ctx.ensure_out_dir()?;
    let ck_path = ctx.resolve(&cfg.data.checkpoint);

    let (mut model, mut state) = if resume && ck_path.is_file() {
        let ck = load_checkpoint(&ck_path, Some(&ctx.digest))?;
        if let Some(w) = &ck.digest_warning {
            eprintln!("warning: {w}");
        }
        if ck.model.input_shape() != cfg.data.feature_shape {
            return Err(CliError::new(
                "shape",
                format!(
                    "checkpoint expects {:?}, data has {:?}",
                    ck.model.input_shape(),
                    cfg.data.feature_shape
                ),
            ));
        }
        (ck.model, ck.state)
    } else {
        let mut rng = stream(cfg.seed, "model-init", 0);
        let model = VfdModel::new(&cfg.model, cfg.data.feature_shape, base.n_classes(), &mut rng)?;
        (model, TrainState::new(&cfg.train))
    };

    let hist_path = ctx.out_dir.join("history.jsonl");
    let mut hist = fs::File::create(&hist_path).map_err(|e| CliError::io(&hist_path, e))?;
    let t = &cfg.train;
    let header = json!({
        "record": "header",
        "config_digest": ctx.digest,
        "seed": cfg.seed,
        "epochs": t.epochs,
        "batch_size": t.batch_size,
        "learning_rate": t.learning_rate,
        "decay_epochs": t.decay_epochs,
        "decay_factor": t.decay_factor,
        "alpha": t.alpha,
        "beta": t.beta,
        "adam": [t.adam_beta1, t.adam_beta2, t.adam_eps],
        "n_items": base.len(),
        "n_classes": base.n_classes(),
        "input_shape": cfg.data.feature_shape,
    });
    let mut write_line = |v: serde_json::Value| -> Result<(), CliError> {
        writeln!(hist, "{v}").map_err(|e| CliError::io(&hist_path, e))
    };
    write_line(header)?;
    for rec in &state.history {
        write_line(json!({"record": "epoch", "epoch": rec.epoch, "lr": rec.lr, "steps": rec.steps, "loss": rec.loss}))?;
    }
    let epochs = t.epochs;
    train_with(&mut model, &base, t, &mut state, |rec, _, _| {
        eprintln!(
            "epoch {}/{} lr={:e} total={:.4} cls={:.4} recon={:.4}",
            rec.epoch + 1,
            epochs,
            rec.lr,
            rec.loss.total,
            rec.loss.l_cls,
            rec.loss.recon
        );
        write_line(json!({"record": "epoch", "epoch": rec.epoch, "lr": rec.lr, "steps": rec.steps, "loss": rec.loss}))
            .map_err(|e| vfd_core::VfdError::Io(std::io::Error::other(e.message)))
    })?;
    save_checkpoint(&ck_path, &model, &state, &ctx.digest)?;
    println!("wrote {}", ck_path.display());
    println!("wrote {}", ctx.out_dir.join("history.jsonl").display());
    Ok(())
}

fn load_model(ctx: &Context) -> Result<VfdModel, CliError> {
    let ck_path = ctx.resolve(&ctx.config.data.checkpoint);
    require_file(&ck_path, "checkpoint")?;
    let ck = load_checkpoint(&ck_path, Some(&ctx.digest))?;
    if let Some(w) = &ck.digest_warning {
        eprintln!("warning: {w}");
    }
    Ok(ck.model)
}

fn build_scheme(ctx: &Context, model: &VfdModel, kind: SchemeKind) -> Result<AugmentationScheme, CliError> {
    let cfg = &ctx.config;
    let n_aug = if kind == SchemeKind::None { 0 } else { cfg.eval.n_aug };
    match kind {
        SchemeKind::None | SchemeKind::Posterior | SchemeKind::Prior => Ok(AugmentationScheme::simple(kind, n_aug)?),
        SchemeKind::CovarianceTransfer => {
            let base = load_dataset(&ctx.resolve(&cfg.data.base_file), model.input_shape())?;
            let inputs: Vec<&FeatureMap> = base.items.iter().map(|i| &i.input).collect();
            let z_i: Vec<Vec<f64>> = model.embed_all(&inputs)?.into_iter().map(|e| e.z_i).collect();
            let labels: Vec<usize> = base.items.iter().map(|i| i.label).collect();
            let cov = estimate_pooled_covariance(&z_i, &labels, cfg.eval.shrinkage)?;
            Ok(AugmentationScheme::covariance_transfer(n_aug, cov))
        }
        SchemeKind::NoDisentanglement => {
            let base = load_dataset(&ctx.resolve(&cfg.data.base_file), model.input_shape())?;
            let mut rng = stream(cfg.seed, "plain-vae-init", 0);
            let mut vae = PlainVae::new(model.feature_shape(), &cfg.model, &mut rng)?;
            train_plain_vae(&mut vae, model, &base, &cfg.train)?;
            Ok(AugmentationScheme::no_disentanglement(n_aug, vae))
        }
    }
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = load_model(ctx)?;
    let novel = load_dataset(&ctx.resolve(&cfg.data.novel_file), model.input_shape())?;
    ctx.ensure_out_dir()?;
    let data = EvalData::new(&model, &novel)?;
    let ecfg = ctx.config.eval_config();
    let ledger_path = ctx.resolve(&cfg.eval.ledger);
    let mut rows = Vec::new();
    for &kind in &cfg.eval.schemes {
        let scheme = build_scheme(ctx, &model, kind)?;
        for &clf in &cfg.eval.classifiers {
            let mut report = run_benchmark(&data, &scheme, clf, &ecfg, cfg.seed, ctx.workers)?;
            report.config_digest = Some(ctx.digest.clone());
            ctx.write_json(&format!("report_{}_{}.json", kind.name(), clf.name()), &report)?;
            println!("{}", report.ledger_row());
            rows.push(report.ledger_row());
        }
    }
    let fresh = fs::metadata(&ledger_path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ledger_path)
        .map_err(|e| CliError::io(&ledger_path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LEDGER_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(&ledger_path, e))?;
    Ok(())
}

fn flat_dataset(rows: Vec<(Vec<f64>, usize)>, class_ids: &[u64]) -> LabeledDataset {
    LabeledDataset {
        items: rows
            .into_iter()
            .map(|(v, label)| Item {
                input: FeatureMap::from_flat(v),
                label,
            })
            .collect(),
        class_ids: class_ids.to_vec(),
        split: Some(Split::Novel),
        provenance: Provenance::File,
    }
}

pub fn augment(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = load_model(ctx)?;
    let novel = load_dataset(&ctx.resolve(&cfg.data.novel_file), model.input_shape())?;
    ctx.ensure_out_dir()?;
    let data = EvalData::new(&model, &novel)?;
    let scheme = build_scheme(ctx, &model, cfg.analysis.scheme)?;
    let k = cfg.analysis.support_per_class;
    let mut support = Vec::new();
    for (c, members) in data.by_class.iter().enumerate() {
        if members.len() < k {
            return Err(vfd_core::VfdError::InsufficientItems {
                class: c,
                available: members.len(),
                required: k,
            }
            .into());
        }
        let mut rng = stream(cfg.seed, "augment-support", c as u64);
        for j in choose_without_replacement(members.len(), k, &mut rng) {
            let i = members[j];
            support.push(SupportItem {
                input: &novel.items[i].input,
                embedding: &data.embeddings[i],
                label: c,
            });
        }
    }
    let feats = augment_support(&model, &support, &scheme, &mut stream(cfg.seed, "augmentation", 0))?;
    let (orig, aug): (Vec<_>, Vec<_>) = feats.into_iter().partition(|f| f.original);
    let support_ds = flat_dataset(orig.into_iter().map(|f| (f.feature, f.label)).collect(), &novel.class_ids);
    let aug_ds = flat_dataset(aug.into_iter().map(|f| (f.feature, f.label)).collect(), &novel.class_ids);
    let real_ds = flat_dataset(
        data.embeddings
            .iter()
            .zip(&novel.items)
            .map(|(e, it)| (e.feature(), it.label))
            .collect(),
        &novel.class_ids,
    );
    let mut files = serde_json::Map::new();
    for (name, ds) in [("support", &support_ds), ("augmented", &aug_ds), ("real", &real_ds)] {
        let path = ctx.out_dir.join(format!("{name}.txt"));
        save_feature_file(&path, ds)?;
        files.insert(name.into(), json!({"path": path.display().to_string(), "count": ds.len()}));
        println!("wrote {} ({} rows)", path.display(), ds.len());
    }
    let manifest = json!({
        "config_digest": ctx.digest,
        "seed": cfg.seed,
        "scheme": cfg.analysis.scheme.name(),
        "n_aug": scheme.n_aug,
        "support_per_class": k,
        "files": files,
    });
    ctx.write_json("augment_manifest.json", &manifest)?;
    Ok(())
}

fn labeled_features(path: &Path) -> Result<LabeledFeatures, CliError> {
    require_file(path, "feature file")?;
    let ds = load_feature_file(path)?;
    let (features, labels) = ds
        .items
        .into_iter()
        .map(|it| (it.input.values, ds.class_ids[it.label] as usize))
        .unzip();
    Ok(LabeledFeatures::new(features, labels)?)
}

pub fn analyze(ctx: &Context, files: &[PathBuf]) -> Result<(), CliError> {
    if files.is_empty() || files.len() > 2 {
        return Err(CliError::config("analyze takes one feature file, or an augmented file followed by a real file"));
    }
    let primary = labeled_features(&files[0])?;
    let reference = files.get(1).map(|p| labeled_features(p)).transpose()?;
    if let Some(r) = &reference {
        if r.dim() != primary.dim() {
            return Err(CliError::new(
                "shape",
                format!("dimension mismatch: {} has {}, {} has {}", files[0].display(), primary.dim(), files[1].display(), r.dim()),
            ));
        }
    }
    ctx.ensure_out_dir()?;
    let geometry = geometry_report(&primary)?;
    let mut report = json!({
        "config_digest": ctx.digest,
        "seed": ctx.config.seed,
        "inputs": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "n_points": primary.len(),
        "dim": primary.dim(),
        "geometry": geometry,
    });
    if let Some(r) = &reference {
        report["reference_geometry"] = serde_json::to_value(geometry_report(r)?)?;
        report["retention"] = json!(nn_class_retention(&primary, r)?);
    }
    let path = ctx.write_json("analysis.json", &report)?;
    println!("wrote {}", path.display());
    if ctx.config.analysis.projection {
        let coords = project_2d(&primary.features)?;
        let csv = ctx.out_dir.join("projection.csv");
        let f = fs::File::create(&csv).map_err(|e| CliError::io(&csv, e))?;
        write_projection_csv(std::io::BufWriter::new(f), &primary.labels, &coords)?;
        println!("wrote {}", csv.display());
    }
    Ok(())
}
