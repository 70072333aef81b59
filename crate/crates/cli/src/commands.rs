use std::io::Write as _;
use std::path::{Path, PathBuf};

use perceptlab::backbone::{AdaptedEncoder, HeadId, MaskScope, WeightSource};
use perceptlab::data::{load_manifest, load_rgb, write_manifest, Label, Sample, SplitTag};
use perceptlab::interpret::{
    analysis_view, attention_diff_map, importance_table, render_overlay, top_effect_images,
    AblationOptions,
};
use perceptlab::metrics::{argmax, softmax};
use perceptlab::multi::run_multi_protocol;
use perceptlab::task::{TaskKind, TaskSpec};
use perceptlab::trainer::{
    cross_evaluate, evaluate, report, run_protocol, write_predictions, CheckpointBundle, RunConfig,
    SplitEvaluation,
};
use perceptlab::Error;
use serde::Serialize;

use crate::{CliError, Command, ConfigArgs, ScopeArg, SplitArg, TaskArg};

type Result<T> = std::result::Result<T, CliError>;

pub const COMMAND_SNAPSHOT: &str = "command.toml";
pub const CONFIG_SNAPSHOT: &str = "resolved_config.toml";

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::PrepareSplits { config, out } => {
            let cfg = load_config(config)?;
            snapshot(out, command, Some(&cfg))?;
            prepare_splits(&cfg, out)
        }
        Command::Train { config, out } => {
            let cfg = load_config(config)?;
            snapshot(out, command, Some(&cfg))?;
            train(&cfg, out)
        }
        Command::TrainMulti { config, out } => {
            let cfg = load_config(config)?;
            cfg.validate_multi()?;
            snapshot(out, command, Some(&cfg))?;
            for (id, r) in run_multi_protocol(&cfg, out)? {
                println!("{id}\n{}", r.to_text());
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let bundle = CheckpointBundle::load(checkpoint)?;
            snapshot(out, command, Some(bundle.config()))?;
            let task = bundle.config().task.clone();
            let samples = select(load_manifest(manifest, &dataset_id(manifest), &task)?, *split)?;
            let eval = evaluate(&bundle, &samples, split_name(*split))?;
            finish_evaluation(checkpoint, task.kind, &eval, manifest, &samples, out)
        }
        Command::CrossEvaluate {
            checkpoint,
            manifest,
            task,
            num_classes,
            split,
            out,
        } => {
            let bundle = CheckpointBundle::load(checkpoint)?;
            snapshot(out, command, Some(bundle.config()))?;
            let foreign = foreign_task(*task, *num_classes, &bundle.config().task);
            let samples = select(load_manifest(manifest, &dataset_id(manifest), &foreign)?, *split)?;
            let eval = cross_evaluate(&bundle, &foreign, &samples, split_name(*split))?;
            finish_evaluation(checkpoint, foreign.kind, &eval, manifest, &samples, out)
        }
        Command::Predict {
            checkpoint,
            out,
            per_view,
            images,
        } => {
            let bundle = CheckpointBundle::load(checkpoint)?;
            if let Some(dir) = out {
                snapshot(dir, command, Some(bundle.config()))?;
            }
            predict(&bundle, images, *per_view, out.as_deref())
        }
        Command::AnalyzeHeads {
            checkpoint,
            manifest,
            limit,
            top_k,
            top_heads,
            scope,
            exclude_cls,
            out,
        } => {
            let bundle = CheckpointBundle::load(checkpoint)?;
            snapshot(out, command, Some(bundle.config()))?;
            let options = AblationOptions {
                scope: match scope {
                    ScopeArg::ClsRow => MaskScope::ClsRow,
                    ScopeArg::FullMatrix => MaskScope::FullMatrix,
                },
                exclude_cls: *exclude_cls,
            };
            analyze_heads(&bundle, manifest, *limit, *top_k, *top_heads, options, out)
        }
        Command::RenderAttention {
            checkpoint,
            heads,
            importance,
            top_heads,
            out,
            images,
        } => {
            let bundle = CheckpointBundle::load(checkpoint)?;
            let mut selected = heads.iter().map(|h| parse_head(h)).collect::<Result<Vec<_>>>()?;
            if let Some(path) = importance {
                selected.extend(top_heads_from_table(path, *top_heads)?);
            }
            if selected.is_empty() {
                return Err(CliError::Usage("give --head LAYER:HEAD or --importance TABLE".into()));
            }
            snapshot(out, command, Some(bundle.config()))?;
            render_attention(&bundle, &selected, images, out)
        }
        Command::Params { config } => {
            let cfg = load_config(config)?;
            params(&cfg)
        }
        Command::Plot {
            history,
            predictions,
            out,
        } => {
            if history.is_none() && predictions.is_none() {
                return Err(CliError::Usage("give --history and/or --predictions".into()));
            }
            snapshot(out, command, None)?;
            if let Some(h) = history {
                let path = crate::plot::curves(h, out)?;
                println!("{}", path.display());
            }
            if let Some(p) = predictions {
                let path = crate::plot::scatter(p, out)?;
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::load(&args.config, &args.overrides)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Records the command line, and the fully resolved config when there is
/// one, in `out`.
fn snapshot(out: &Path, command: &Command, config: Option<&RunConfig>) -> Result<()> {
    create_dir(out)?;
    #[derive(Serialize)]
    struct Record<'a> {
        version: &'a str,
        command: &'a Command,
    }
    let record = Record {
        version: env!("CARGO_PKG_VERSION"),
        command,
    };
    write_text(
        &out.join(COMMAND_SNAPSHOT),
        &toml::to_string_pretty(&record).map_err(Error::from)?,
    )?;
    if let Some(cfg) = config {
        write_text(&out.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
    }
    Ok(())
}

fn prepare_splits(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.datasets.is_empty() {
        return Err(Error::config("datasets", "no datasets configured").into());
    }
    for d in &cfg.datasets {
        let ds = d.load()?;
        let splits = d.splits(&ds, cfg.seed, cfg.repeats.as_deref())?;
        let dir = out.join(&d.id);
        create_dir(&dir)?;
        for s in &splits {
            let path = dir.join(format!("{}.csv", s.name()));
            write_manifest(&path, &s.tagged(&ds.samples))?;
            println!(
                "{}: {} train / {} val / {} test",
                path.display(),
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.datasets.is_empty() {
        return Err(Error::config("datasets", "no datasets configured").into());
    }
    for d in &cfg.datasets {
        d.task.compatible_with(&cfg.task)?;
        let ds = d.load()?;
        let splits = d.splits(&ds, cfg.seed, cfg.repeats.as_deref())?;
        let mut run_cfg = cfg.clone();
        run_cfg.task = d.task.clone();
        let r = run_protocol(&run_cfg, &ds, &splits, &out.join(&d.id))?;
        println!("{}\n{}", d.id, r.to_text());
    }
    Ok(())
}

fn dataset_id(manifest: &Path) -> String {
    manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::All => "all",
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

fn select(samples: Vec<Sample>, split: SplitArg) -> Result<Vec<Sample>> {
    let tag = match split {
        SplitArg::All => return Ok(samples),
        SplitArg::Train => SplitTag::Train,
        SplitArg::Val => SplitTag::Val,
        SplitArg::Test => SplitTag::Test,
    };
    let kept: Vec<Sample> = samples.into_iter().filter(|s| s.split_tag == Some(tag)).collect();
    if kept.is_empty() {
        return Err(Error::Data(format!("manifest has no `{}` rows", tag.as_str())).into());
    }
    Ok(kept)
}

fn foreign_task(task: TaskArg, num_classes: Option<usize>, own: &TaskSpec) -> TaskSpec {
    match task {
        TaskArg::Iqa => TaskSpec::new(TaskKind::Iqa),
        TaskArg::Memorability => TaskSpec::new(TaskKind::Memorability),
        TaskArg::Emotion => TaskSpec::classification(num_classes.or(own.num_classes).unwrap_or(0)),
    }
}

fn finish_evaluation(
    checkpoint: &Path,
    kind: TaskKind,
    eval: &SplitEvaluation,
    manifest: &Path,
    samples: &[Sample],
    out: &Path,
) -> Result<()> {
    write_predictions(&out.join("predictions.csv"), samples, &eval.predictions)?;
    let r = report(
        &dataset_id(manifest),
        &checkpoint.display().to_string(),
        kind,
        std::slice::from_ref(eval),
    )?;
    r.write(out, "metrics")?;
    print!("{}", r.to_text());
    Ok(())
}

fn predict(bundle: &CheckpointBundle, images: &[PathBuf], per_view: bool, out: Option<&Path>) -> Result<()> {
    let model = bundle.build_model()?;
    let classification = model.task.kind.is_classification();
    let cfg = bundle.config();
    let mut readable = Vec::new();
    for path in images {
        match load_rgb(path) {
            Ok(_) => readable.push(Sample {
                image_path: path.clone(),
                label: Label::Score(0.0),
                dataset_id: "predict".into(),
                reference_id: None,
                split_tag: None,
            }),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    let predictions = model.predict(&readable, cfg.seed, cfg.batch_size)?;

    let width = model.head.shape().output_dim;
    let mut header = vec!["path".to_owned()];
    if classification {
        header.push("label".into());
        header.extend((0..width).map(|k| format!("prob_{k}")));
    } else {
        header.push("score".into());
    }
    let mut rows = vec![header];
    for (s, p) in readable.iter().zip(&predictions) {
        let mut row = vec![s.image_path.display().to_string()];
        if classification {
            row.push(argmax(&p.output).to_string());
            row.extend(softmax(&p.output).iter().map(|v| format!("{v:.6}")));
        } else {
            row.push(format!("{:.6}", p.score()));
        }
        rows.push(row);
        if per_view {
            for (k, v) in p.per_view.iter().enumerate() {
                let values: Vec<String> = v.iter().map(|x| format!("{x:.9}")).collect();
                eprintln!("view\t{}\t{k}\t{}", s.image_path.display(), values.join(","));
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    let mut w = csv::Writer::from_writer(&mut stdout);
    for r in &rows {
        w.write_record(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))?;
    drop(w);
    stdout.flush().map_err(|e| Error::io("<stdout>", e))?;
    if let Some(dir) = out {
        let path = dir.join("predictions.csv");
        let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
        for r in &rows {
            w.write_record(r).map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn analyze_heads(
    bundle: &CheckpointBundle,
    manifest: &Path,
    limit: Option<usize>,
    top_k: usize,
    top_heads: usize,
    options: AblationOptions,
    out: &Path,
) -> Result<()> {
    let model = bundle.build_model()?;
    let mut samples = load_manifest(manifest, &dataset_id(manifest), &model.task)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::Data("no images to analyse".into()).into());
    }
    let views = samples
        .iter()
        .map(|s| Ok(analysis_view(&s.load_image()?)))
        .collect::<perceptlab::Result<Vec<_>>>()?;
    let table = importance_table(&model, &views, options)?;
    table.write_csv(&out.join("head_importance.csv"))?;

    let path = out.join("top_images.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record(["layer", "head", "rank", "image_id", "path", "delta"])
        .map_err(Error::from)?;
    let k = top_k.min(samples.len());
    for e in table.ranked().iter().take(top_heads) {
        let i = table
            .entries
            .iter()
            .position(|x| x.layer == e.layer && x.head == e.head)
            .expect("ranked entries come from the table");
        for (rank, idx) in top_effect_images(&table.deltas[i], k)?.into_iter().enumerate() {
            w.write_record([
                e.layer.to_string(),
                e.head.to_string(),
                (rank + 1).to_string(),
                samples[idx].image_id(),
                samples[idx].image_path.display().to_string(),
                format!("{:.9e}", table.deltas[i][idx]),
            ])
            .map_err(Error::from)?;
        }
        println!("head {}:{} importance {:.6e}", e.layer, e.head, e.importance);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn parse_head(text: &str) -> Result<HeadId> {
    let parse = || -> Option<HeadId> {
        let (l, h) = text.split_once(':')?;
        Some(HeadId::new(l.trim().parse().ok()?, h.trim().parse().ok()?))
    };
    parse().ok_or_else(|| CliError::Usage(format!("`{text}` is not LAYER:HEAD")))
}

fn top_heads_from_table(path: &Path, n: usize) -> Result<Vec<HeadId>> {
    #[derive(serde::Deserialize)]
    struct Row {
        layer: usize,
        head: usize,
        importance: f64,
    }
    let mut rows: Vec<Row> = csv::Reader::from_path(path)
        .map_err(Error::from)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)?;
    rows.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    Ok(rows.into_iter().take(n).map(|r| HeadId::new(r.layer, r.head)).collect())
}

fn render_attention(bundle: &CheckpointBundle, heads: &[HeadId], images: &[PathBuf], out: &Path) -> Result<()> {
    let model = bundle.build_model()?;
    let cfg = bundle.config();
    let base = AdaptedEncoder::inject_lora(cfg.backbone, &cfg.weights, &cfg.lora, cfg.seed)?;
    for path in images {
        let img = match load_rgb(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let view = analysis_view(&img);
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        for &head in heads {
            let diff = attention_diff_map(&model.encoder, &base, &view, head)?;
            let file = render_overlay(&view, &diff, out, &id)?;
            println!("{}\tmax_abs={:.6e}", file.display(), diff.max_abs());
        }
    }
    Ok(())
}

fn params(cfg: &RunConfig) -> Result<()> {
    // Counting needs shapes only, so no weights are read.
    let mut encoder = AdaptedEncoder::inject_lora(cfg.backbone, &WeightSource::Zeros, &cfg.lora, cfg.seed)?;
    encoder.set_freeze_policy(cfg.freeze_policy);
    let head = cfg.head.resolve(encoder.embed_dim(), cfg.task.output_dim()?)?;
    let adapters = if encoder.adapters_trainable() {
        encoder.adapter_param_count()
    } else {
        0
    };
    let base = if encoder.base_trainable() {
        encoder.base_param_count()
    } else {
        0
    };
    let head_n = head.param_count();
    let total = adapters + base + head_n;
    println!("backbone: {}", cfg.backbone);
    println!("adapters: {adapters}");
    println!("encoder base (trainable): {base}");
    println!("head: {head_n}");
    println!("total trainable: {total}");
    println!("frozen: {}", encoder.base_param_count() + encoder.adapter_param_count() - adapters - base);
    Ok(())
}
