use std::fs;
use std::path::Path;

use serde::Serialize;

use ecgnn::datagen::{
    generate_task, Dataset, Split, SynthConfig, TaskKind, MANIFEST_FILE, TENSOR_DIR,
};
use ecgnn::numkit::fault::{self, Fault};
use ecgnn::numkit::suite::{primitive_suite, OpReport};
use ecgnn::pipeline::{
    evaluate, load_checkpoint, model_gradcheck, save_checkpoint, thread_pool, Model, ModelConfig,
    SampleAttention, TrainConfig, Trainer,
};

use crate::config::{resolve_seed, usage, CliError, FileConfig};
use crate::{DumpArgs, EvalArgs, FaultArg, GenArgs, GradcheckArgs, SplitArg, TrainArgs};

const PRIMITIVE_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-3;

type Result<T> = std::result::Result<T, CliError>;

fn threads(flag: Option<usize>, file: &FileConfig) -> Result<usize> {
    match flag.or(file.threads).unwrap_or(1) {
        0 => Err(usage("--threads must be at least 1")),
        n => Ok(n),
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn require_dataset(dir: &Path) -> Result<()> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(usage(format!(
            "{} is not a dataset directory (no {MANIFEST_FILE})",
            dir.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_writable_target(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Err(usage(format!("{} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        if !parent.is_dir() {
            return Err(usage(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !out.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", out.display())));
    }
    let non_empty = out.is_dir()
        && fs::read_dir(out)
            .map_err(|e| usage(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
    if non_empty {
        if !force {
            return Err(usage(format!(
                "{} is not empty (pass --force to replace its dataset)",
                out.display()
            )));
        }
        let tensors = out.join(TENSOR_DIR);
        if tensors.exists() {
            fs::remove_dir_all(&tensors)
                .map_err(|e| usage(format!("{}: {e}", tensors.display())))?;
        }
        let manifest = out.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(&manifest)
                .map_err(|e| usage(format!("{}: {e}", manifest.display())))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))
}

pub fn gen(args: GenArgs, threads_flag: Option<usize>) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let task = args
        .task
        .or(file.task)
        .ok_or_else(|| usage("missing --task (word, count or choice)"))?;
    let seed = resolve_seed(args.seed, &file)?;
    let threads = threads(threads_flag, &file)?;

    let mut cfg = SynthConfig::desk(task, seed);
    if let Some(n) = args.samples.or(file.samples) {
        cfg.train = n;
    }
    if let Some(n) = args.test_samples.or(file.test_samples) {
        cfg.test = n;
    }
    if let Some(s) = args.sizes.or(file.sizes()?) {
        cfg.sizes = s;
    }
    if let Some(d) = args.dim.or(file.dim) {
        cfg.dim = d;
    }
    if let Some(n) = args.noise.or(file.noise) {
        cfg.noise = n;
    }
    if let Some(c) = args.classes.or(file.classes) {
        cfg.classes = c;
    }
    prepare_out_dir(&args.out, args.force)?;

    let ds = thread_pool(threads)?.install(|| generate_task(task, &cfg))?;
    ds.save(&args.out)?;
    println!(
        "task={} classes={} train={} test={} dim={} seed={} out={}",
        ds.task,
        ds.classes,
        ds.train.len(),
        ds.test.len(),
        cfg.dim,
        seed,
        args.out.display()
    );
    Ok(())
}

fn model_config(args: &TrainArgs, file: &FileConfig, ds: &Dataset, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::for_dataset(ds).with_seed(seed);
    if let Some(h) = args.hidden.or(file.hidden) {
        cfg.hidden = h;
    }
    if let Some(l) = args.layers.or(file.layers) {
        cfg.layers = l;
    }
    if let Some(n) = args.fusion_steps.or(file.fusion_steps) {
        cfg.fusion_steps = n;
    }
    if let Some(r) = args.cross_modal_after.clone().or(file.cross_modal_after.clone()) {
        cfg.cross_modal_after = r;
    }
    if let Some(a) = args.ablate.or(file.ablate) {
        cfg.ablation = a;
    }
    cfg
}

pub fn train(args: TrainArgs, threads_flag: Option<usize>) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    require_dataset(&args.data)?;
    require_writable_target(&args.ckpt_out)?;
    let seed = resolve_seed(args.seed, &file)?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
        clip_norm: args.clip_norm.or(file.clip_norm),
        seed,
        threads: threads(threads_flag, &file)?,
        ..defaults
    };
    train_cfg.validate()?;

    let ds = Dataset::load(&args.data)?;
    let mut model = Model::new(model_config(&args, &file, &ds, seed))?;
    model.config.check_dataset(&ds)?;
    let mut trainer = Trainer::new(&model, train_cfg.clone())?;
    save_checkpoint(&model, &args.ckpt_out)?;
    println!(
        "task={} ablation={} params={} train={} test={} epochs={} lr={:e} batch_size={} seed={}",
        model.config.task,
        model.config.ablation,
        model.params.scalar_count(),
        ds.train.len(),
        ds.test.len(),
        train_cfg.epochs,
        train_cfg.lr,
        train_cfg.batch_size,
        seed
    );

    for epoch in 1..=train_cfg.epochs {
        let stats = trainer.train_epoch(&mut model, &ds.train).map_err(|e| match e {
            e @ ecgnn::Error::NonFinite(_) => CliError::Numeric(format!(
                "{e}; checkpoint {} keeps the parameters after epoch {}",
                args.ckpt_out.display(),
                epoch - 1
            )),
            other => other.into(),
        })?;
        let metrics = evaluate(&model, &ds, Split::Test, train_cfg.threads)?;
        save_checkpoint(&model, &args.ckpt_out)?;
        println!("epoch={epoch} loss={} metric={}", stats.loss, metrics.value);
    }
    println!("checkpoint={}", args.ckpt_out.display());
    Ok(())
}

fn load_pair(data: &Path, ckpt: &Path) -> Result<(Dataset, Model)> {
    require_dataset(data)?;
    require_file(ckpt, "checkpoint")?;
    let model = load_checkpoint(ckpt)?;
    let ds = Dataset::load(data)?;
    model.config.check_dataset(&ds)?;
    Ok((ds, model))
}

pub fn eval(args: EvalArgs, threads_flag: Option<usize>) -> Result<()> {
    let threads = threads(threads_flag, &FileConfig::default())?;
    let (ds, model) = load_pair(&args.data, &args.ckpt)?;
    let split = split(args.split);
    let metrics = evaluate(&model, &ds, split, threads)?;
    println!(
        "split={} samples={} name={} metric={}",
        match split {
            Split::Train => "train",
            Split::Test => "test",
        },
        metrics.count,
        metrics.name(),
        metrics.value
    );
    Ok(())
}

#[derive(Serialize)]
struct AttentionDump {
    sample: usize,
    split: &'static str,
    #[serde(flatten)]
    attention: SampleAttention,
}

pub fn dump_attention(args: DumpArgs, threads_flag: Option<usize>) -> Result<()> {
    threads(threads_flag, &FileConfig::default())?;
    require_writable_target(&args.out)?;
    let (ds, model) = load_pair(&args.data, &args.ckpt)?;
    let samples = ds.split(split(args.split));
    let sample = samples.get(args.sample).ok_or_else(|| {
        usage(format!(
            "sample index {} out of range ({} samples)",
            args.sample,
            samples.len()
        ))
    })?;
    let attention = model.attention(sample)?;
    let steps = attention.trace.steps.len();
    let dump = AttentionDump {
        sample: args.sample,
        split: match args.split {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        },
        attention,
    };
    let mut json = serde_json::to_string_pretty(&dump)
        .map_err(|e| usage(format!("cannot serialize attention trace: {e}")))?;
    json.push('\n');
    fs::write(&args.out, json).map_err(|e| usage(format!("{}: {e}", args.out.display())))?;
    println!("sample={} steps={steps} out={}", args.sample, args.out.display());
    Ok(())
}

fn report_line(r: &OpReport, tol: f64) {
    println!(
        "op={} coords={} max_rel_error={:e} tol={:e} status={}",
        r.op,
        r.coords,
        r.max_rel_error,
        tol,
        if r.passes(tol) { "ok" } else { "fail" }
    );
}

fn model_report(args: &GradcheckArgs, file: &FileConfig, seed: u64) -> Result<OpReport> {
    let task = args.task.or(file.task).unwrap_or(TaskKind::Word);
    let mut data = SynthConfig::desk(task, seed);
    data.train = 16;
    data.test = 1;
    let ds = generate_task(task, &data)?;
    let mut cfg = ModelConfig::for_dataset(&ds).with_seed(seed);
    if let Some(h) = file.hidden {
        cfg.hidden = h;
    }
    if let Some(a) = args.ablate.or(file.ablate) {
        cfg.ablation = a;
    }
    let mut model = Model::new(cfg)?;
    let sample = ds
        .train
        .iter()
        .min_by_key(|s| s.answer)
        .expect("generated training split is non-empty");
    let count = args.params.or(file.params).unwrap_or(20);
    let report = model_gradcheck(&mut model, sample, count, seed)?;
    Ok(OpReport::from_report(format!("model.{task}"), &report))
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &file)?;
    let points = args.points.or(file.points).unwrap_or(100);
    if points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let full = args.full || file.full.unwrap_or(false);

    if let Some(FaultArg::ReluSignFlip) = args.inject_fault {
        fault::inject(Fault::ReluBackwardSignFlip);
    }
    let run = || -> Result<Vec<(OpReport, f64)>> {
        let mut reports: Vec<(OpReport, f64)> = primitive_suite(seed, points)?
            .into_iter()
            .map(|r| (r, PRIMITIVE_TOL))
            .collect();
        if full {
            reports.push((model_report(&args, &file, seed)?, MODEL_TOL));
        }
        Ok(reports)
    };
    let reports = run();
    fault::clear();
    let reports = reports?;

    for (r, tol) in &reports {
        report_line(r, *tol);
    }
    let failed: Vec<&(OpReport, f64)> = reports.iter().filter(|(r, tol)| !r.passes(*tol)).collect();
    let worst = reports
        .iter()
        .max_by(|a, b| (a.0.max_rel_error / a.1).total_cmp(&(b.0.max_rel_error / b.1)))
        .expect("at least one primitive is checked");
    if failed.is_empty() {
        println!(
            "status=pass checked={} worst_op={} worst_rel_error={:e}",
            reports.len(),
            worst.0.op,
            worst.0.max_rel_error
        );
        Ok(())
    } else {
        println!(
            "status=fail failed={} worst_op={} worst_rel_error={:e}",
            failed.len(),
            worst.0.op,
            worst.0.max_rel_error
        );
        Err(CliError::Check(format!(
            "gradient check failed; worst offender {} (parameter {}) with relative error {:e}",
            worst.0.op,
            worst.0.worst_param.as_deref().unwrap_or("?"),
            worst.0.max_rel_error
        )))
    }
}
