use std::collections::HashMap;
use std::path::{Path, PathBuf};

use attrnet::data::{manifest::SPLIT, Dataset, DatasetManifest, KvConfig, SynthSpec, TensorContainer};
use attrnet::eval::{
    branch_grid, grid_task, invariance_probe, probe_config, select_operating_point, verify, GridConfig,
    ProbeFactor, VerificationPair,
};
use attrnet::graph::{
    build_trunk, count_flops, count_params, infer_nodes, resolve_architecture, ArchConfig, Constraints,
    FlopConvention, GraphSpec, INPUT,
};
use attrnet::multihead::{add_head_to_bundle, MultiHeadModel, TRUNK_FILE};
use attrnet::train::{
    checkpoint_bytes, finetune, init_params, load_checkpoint, make_branch, save_checkpoint, train, HeadSpec,
    LossKind, TrainConfig,
};
use attrnet::{Error, Result};

use crate::{Command, ConfigArgs};

const HOLDOUT: &str = "holdout_splits";
const PREDICT_CHUNK: usize = 64;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::ArchResolve {
            constraints,
            report,
            out_config,
            top,
        } => arch_resolve(constraints.as_deref(), report.as_deref(), out_config.as_deref(), top),
        Command::TrainBase { cfg, data, out, log } => train_base(&cfg, &data, &out, log),
        Command::Finetune {
            cfg,
            trunk,
            branch,
            task,
            classes,
            warm,
            loss,
            field,
            data,
            out,
        } => {
            let spec = HeadSpec {
                task: task.clone(),
                branch_layer: branch,
                num_classes: classes,
                loss: loss.parse()?,
            };
            run_finetune(&cfg, &trunk, spec, warm, field.as_deref().unwrap_or(&task), &data, &out)
        }
        Command::BranchGrid {
            cfg,
            trunk,
            tasks,
            data,
            layers,
            report,
        } => run_grid(&cfg, &trunk, &tasks, &data, &layers, &report),
        Command::Predict { bundle, data, out } => predict(&bundle, &data, &out),
        Command::Embed {
            trunk,
            data,
            layer,
            out,
        } => embed(&trunk, &data, &layer, &out),
        Command::EvalVerify {
            pairs,
            embeddings,
            report,
        } => eval_verify(&pairs, &embeddings, &report),
        Command::OperatingPoint {
            scores,
            labels,
            target_fpr,
            report,
        } => operating_point(&scores, &labels, target_fpr, &report),
        Command::Probe {
            cfg,
            trunk,
            data,
            layers,
            factors,
            report,
        } => probe(&cfg, &trunk, &data, &layers, &factors, &report),
        Command::Synth { spec, set, out } => synth(spec.as_deref(), &set, &out),
        Command::Flops { cfg, convention } => flops(&cfg, &convention),
    }
}

fn load_kv(file: Option<&Path>, set: &[String]) -> Result<KvConfig> {
    let mut kv = match file {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn config(args: &ConfigArgs) -> Result<KvConfig> {
    load_kv(args.config.as_deref(), &args.set)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Ids for fitting and for held-out evaluation. Without a `split` column or
/// held-out splits, everything is used for fitting and the held-out set is
/// empty.
fn split_ids<'a>(m: &'a DatasetManifest, holdout: &[usize]) -> Result<(Vec<&'a str>, Vec<&'a str>)> {
    if holdout.is_empty() || !m.columns.iter().any(|c| c == SPLIT) {
        return Ok((m.ids(), Vec::new()));
    }
    Ok((m.ids_by_split(holdout, false)?, m.ids_by_split(holdout, true)?))
}

fn holdout(kv: &KvConfig, default: &[usize]) -> Result<Vec<usize>> {
    Ok(kv.get_list(HOLDOUT)?.unwrap_or_else(|| default.to_vec()))
}

fn check_input(graph: &GraphSpec, images: &attrnet::Tensor) -> Result<()> {
    let s = images.shape();
    if (s.c, s.h, s.w) != graph.input_shape() {
        let (c, h, w) = graph.input_shape();
        return Err(Error::Shape(format!(
            "samples are {}x{}x{}, network expects {c}x{h}x{w}",
            s.c, s.h, s.w
        )));
    }
    Ok(())
}

fn arch_resolve(constraints: Option<&Path>, report: Option<&Path>, out_config: Option<&Path>, top: usize) -> Result<()> {
    let kv = load_kv(constraints, &[])?;
    let c = Constraints::from_kv(&kv)?;
    let res = resolve_architecture(&c)?;
    let text = res.report(top)?;
    print!("{text}");
    if let Some(p) = report {
        write(p, &text)?;
    }
    if let Some(p) = out_config {
        write(p, &res.best().config.to_kv().to_text())?;
    }
    Ok(())
}

fn train_base(args: &ConfigArgs, data: &Path, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let kv = config(args)?;
    let mut keys = ArchConfig::KEYS.to_vec();
    keys.push(HOLDOUT);
    let tc = TrainConfig::from_kv(&kv, &TrainConfig::default(), &keys)?;
    let manifest = DatasetManifest::load(data)?;
    let mut base = ArchConfig::desk();
    if let Some(&k) = manifest.classes.get("identity") {
        base.num_identities = k;
    }
    let arch = ArchConfig::from_kv(&kv, &base)?;
    let graph = build_trunk(&arch)?;
    let (ids, _) = split_ids(&manifest, &holdout(&kv, &[])?)?;
    let (images, labels) = manifest.load_batch(&ids, "identity")?;
    check_input(&graph, &images)?;
    let mut store = init_params(&graph, tc.init_std, tc.seed)?;
    let log_rows = train(&graph, &mut store, &Dataset::new(images, labels)?, &tc)?;
    save_checkpoint(out, &graph, &store)?;
    write(&log.unwrap_or_else(|| with_suffix(out, ".log.tsv")), &log_rows.to_tsv())?;
    match log_rows.last() {
        Some(r) => println!(
            "trained {} minibatches on {} samples; last loss {} accuracy {}",
            log_rows.rows.len(),
            ids.len(),
            r.loss,
            r.accuracy
        ),
        None => println!("no minibatches run; checkpoint holds the initialization"),
    }
    Ok(())
}

fn run_finetune(
    args: &ConfigArgs,
    trunk_path: &Path,
    spec: HeadSpec,
    warm: bool,
    field: &str,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let kv = config(args)?;
    let tc = TrainConfig::from_kv(&kv, &TrainConfig::finetune_default(), &[HOLDOUT])?;
    let (graph, trunk) = load_checkpoint(trunk_path)?;
    let manifest = DatasetManifest::load(data)?;
    let (ids, _) = split_ids(&manifest, &holdout(&kv, &[])?)?;
    let (images, labels) = manifest.load_batch(&ids, field)?;
    check_input(&graph, &images)?;
    let mut head = make_branch(&graph, &trunk, &spec, warm, tc.init_std, tc.seed)?;
    let log = finetune(&mut head, &trunk, &Dataset::new(images, labels)?, &tc)?;

    let bundle_trunk = out.join(TRUNK_FILE);
    if bundle_trunk.exists() {
        let existing = std::fs::read(&bundle_trunk)?;
        if existing != checkpoint_bytes(&graph, &trunk) {
            return Err(Error::InvalidArgument(format!(
                "bundle {} holds a different trunk",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out)?;
        save_checkpoint(&bundle_trunk, &graph, &trunk)?;
    }
    add_head_to_bundle(out, &head)?;
    write(&out.join("heads").join(format!("{}.log.tsv", spec.task)), &log.to_tsv())?;
    println!(
        "head `{}` at {}: {} trainable parameters; last accuracy {}",
        spec.task,
        spec.branch_layer,
        head.params.trainable_numel(),
        log.last().map_or(f64::NAN, |r| r.accuracy)
    );
    Ok(())
}

/// Lines of `task field loss`; `#` starts a comment.
fn parse_tasks(text: &str) -> Result<Vec<(String, String, LossKind)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            [task, field, loss] => out.push((task.to_string(), field.to_string(), loss.parse()?)),
            [task, field] => out.push((task.to_string(), field.to_string(), LossKind::Softmax)),
            _ => return Err(Error::Format(format!("task line `{line}` is not `task field [loss]`"))),
        }
    }
    Ok(out)
}

fn run_grid(
    args: &ConfigArgs,
    trunk_path: &Path,
    tasks_path: &Path,
    data: &Path,
    layers: &[String],
    report: &Path,
) -> Result<()> {
    let kv = config(args)?;
    let tc = TrainConfig::from_kv(&kv, &TrainConfig::finetune_default(), &[HOLDOUT, "warm"])?;
    let warm = kv.get_bool("warm")?.unwrap_or(false);
    let (graph, trunk) = load_checkpoint(trunk_path)?;
    let manifest = DatasetManifest::load(data)?;
    let (fit_ids, val_ids) = split_ids(&manifest, &holdout(&kv, &[0, 1])?)?;
    if val_ids.is_empty() {
        return Err(Error::InvalidArgument("branch grid needs held-out samples (split column)".into()));
    }
    let fit_images = manifest.load_images(&fit_ids)?;
    let val_images = manifest.load_images(&val_ids)?;
    check_input(&graph, &fit_images)?;
    let text = std::fs::read_to_string(tasks_path)
        .map_err(|e| Error::from(e).context(format!("reading {}", tasks_path.display())))?;
    let mut tasks = Vec::new();
    for (name, field, loss) in parse_tasks(&text)? {
        tasks.push(grid_task(
            &name,
            loss,
            Dataset::new(fit_images.clone(), manifest.labels(&fit_ids, &field)?)?,
            Dataset::new(val_images.clone(), manifest.labels(&val_ids, &field)?)?,
        )?);
    }
    let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let res = branch_grid(&graph, &trunk, &tasks, &layer_refs, &GridConfig { finetune: tc, warm })?;
    write(report, &res.to_tsv())?;
    let table = res.to_table();
    write(&with_suffix(report, ".txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn predict(bundle: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = MultiHeadModel::load_bundle(bundle)?;
    let manifest = DatasetManifest::load(data)?;
    let ids = manifest.ids();
    let mut text = String::new();
    for chunk in ids.chunks(PREDICT_CHUNK) {
        let images = manifest.load_images(chunk)?;
        let p = model.predict_all(&images)?;
        for (i, id) in chunk.iter().enumerate() {
            text.push_str(&p.line(i, id));
            text.push('\n');
        }
    }
    write(out, &text)?;
    println!("{} predictions, {} heads", ids.len(), model.heads.len());
    Ok(())
}

fn embed(trunk_path: &Path, data: &Path, layer: &str, out: &Path) -> Result<()> {
    let (graph, params) = load_checkpoint(trunk_path)?;
    let manifest = DatasetManifest::load(data)?;
    let ids = manifest.ids();
    let images = manifest.load_images(&ids)?;
    check_input(&graph, &images)?;
    let seeds = std::collections::BTreeMap::from([(INPUT.to_string(), images)]);
    let acts = infer_nodes(&graph, &params, &seeds, 0, &[layer], PREDICT_CHUNK)?;
    let t = &acts[layer];
    let (n, d) = (t.shape().n, t.shape().per_sample());
    TensorContainer::new(vec![n, d], t.data().to_vec())?.write(out)?;
    write(&with_suffix(out, ".ids"), &(ids.join("\n") + "\n"))?;
    println!("{n} embeddings of width {d}");
    Ok(())
}

/// Row lookup for an embedding matrix: names from `<file>.ids` when present,
/// otherwise row numbers.
fn embedding_rows(path: &Path, n: usize) -> Result<HashMap<String, usize>> {
    let ids = with_suffix(path, ".ids");
    if ids.exists() {
        let text = std::fs::read_to_string(&ids)?;
        let names: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if names.len() != n {
            return Err(Error::Format(format!("{} lists {} ids for {n} rows", ids.display(), names.len())));
        }
        Ok(names.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect())
    } else {
        Ok((0..n).map(|i| (i.to_string(), i)).collect())
    }
}

fn eval_verify(pairs_path: &Path, emb_path: &Path, report: &Path) -> Result<()> {
    let emb = TensorContainer::read(emb_path)?;
    let [n, d] = emb.dims[..] else {
        return Err(Error::Shape(format!("embeddings must be (n, d), got {:?}", emb.dims)));
    };
    let rows = embedding_rows(emb_path, n)?;
    let row = |id: &str| -> Result<Vec<f32>> {
        let r = rows
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no embedding for `{id}`")))?;
        Ok(emb.data[r * d..(r + 1) * d].to_vec())
    };
    let text = std::fs::read_to_string(pairs_path)
        .map_err(|e| Error::from(e).context(format!("reading {}", pairs_path.display())))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("pairs line {}: expected `id_a id_b same split`", lineno + 1));
        let t: Vec<&str> = line.split_whitespace().collect();
        let [a, b, same, split] = t[..] else {
            return Err(bad());
        };
        pairs.push(VerificationPair {
            embedding_a: row(a)?,
            embedding_b: row(b)?,
            same: match same {
                "1" | "true" | "same" => true,
                "0" | "false" | "diff" => false,
                _ => return Err(bad()),
            },
            split: split.parse().map_err(|_| bad())?,
        });
    }
    let res = verify(&pairs)?;
    write(report, &res.to_tsv())?;
    println!("mean accuracy {} over {} splits", res.mean_accuracy, res.splits.len());
    Ok(())
}

fn operating_point(scores: &Path, labels: &Path, target: f64, report: &Path) -> Result<()> {
    let s = TensorContainer::read(scores)?;
    let l = TensorContainer::read(labels)?;
    if s.dims != l.dims || s.dims.len() != 2 {
        return Err(Error::Shape(format!(
            "scores {:?} and labels {:?} must be equal (n, m) matrices",
            s.dims, l.dims
        )));
    }
    let scores: Vec<f64> = s.data.iter().map(|&v| v as f64).collect();
    let labels: Vec<bool> = l
        .data
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::InvalidArgument(format!("label {v} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    let op = select_operating_point(&scores, &labels, s.dims[1], target)?;
    let text = format!("target_fpr\t{target}\nsamples\t{}\nclasses\t{}\n{op}\n", s.dims[0], s.dims[1]);
    write(report, &text)?;
    print!("{text}");
    Ok(())
}

fn probe(
    args: &ConfigArgs,
    trunk_path: &Path,
    data: &Path,
    layers: &[String],
    factors: &[String],
    report: &Path,
) -> Result<()> {
    let kv = config(args)?;
    let base = probe_config(kv.get_or("seed", 1)?);
    let tc = TrainConfig::from_kv(&kv, &base, &[HOLDOUT])?;
    let (graph, params) = load_checkpoint(trunk_path)?;
    let manifest = DatasetManifest::load(data)?;
    let (fit_ids, test_ids) = split_ids(&manifest, &holdout(&kv, &[0, 1])?)?;
    if test_ids.is_empty() {
        return Err(Error::InvalidArgument("probe needs held-out samples (split column)".into()));
    }
    let fit = manifest.load_images(&fit_ids)?;
    let test = manifest.load_images(&test_ids)?;
    check_input(&graph, &fit)?;
    let fs = factors
        .iter()
        .map(|f| {
            Ok(ProbeFactor {
                name: f.clone(),
                train: manifest.labels(&fit_ids, f)?,
                test: manifest.labels(&test_ids, f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let res = invariance_probe(&graph, &params, &fit, &test, &fs, &layer_refs, &tc)?;
    let text = res.to_tsv();
    write(report, &text)?;
    print!("{text}");
    Ok(())
}

fn synth(spec: Option<&Path>, set: &[String], out: &Path) -> Result<()> {
    let kv = load_kv(spec, set)?;
    let spec = SynthSpec::from_kv(&kv)?;
    let set = attrnet::data::generate_synthetic(&spec)?;
    let manifest = set.write(out)?;
    println!(
        "{} samples ({} identities) written to {}",
        manifest.entries.len(),
        spec.num_identities,
        out.display()
    );
    Ok(())
}

fn flops(args: &ConfigArgs, convention: &str) -> Result<()> {
    let kv = config(args)?;
    kv.check_keys(ArchConfig::KEYS)?;
    let arch = ArchConfig::from_kv(&kv, &ArchConfig::canonical())?;
    let graph = build_trunk(&arch)?;
    let conv: FlopConvention = convention.parse()?;
    let params = count_params(&graph);
    let f = count_flops(&graph, graph.input_shape(), conv)?;
    print!("{}", f.table());
    println!("# params\t{}", params.total);
    println!("# {conv}\t{}", f.total);
    Ok(())
}
