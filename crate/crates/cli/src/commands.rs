//! The subcommands, as plain functions over parsed arguments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vade::datio::{
    load_checkpoint, save_checkpoint, save_labels_csv, synth_mixture, write_matrix_csv, Checkpoint,
    CheckpointMeta, LabelColumn, LabeledDataset, Standardizer, SynthConfig,
};
use vade::metrics::{clustering_accuracy, knn_error, knn_error_loo};
use vade::model::{embed, generate, mean_elbo, predict, pretrain, ModelConfig, Trainer, VadeModel};
use vade::ndgrad::Tensor;
use vade::nets::ObsKind;

use crate::config::{DataFormat, RunConfig};
use crate::data::{load, preprocess, resolve_obs};
use crate::error::CliError;

/// Seed of the noise used when assigning clusters after training, so that
/// `eval` on the training data reproduces the logged accuracy.
pub fn predict_seed(seed: u64) -> u64 {
    seed ^ 0x7072_6564_6963_7400
}

/// Seed of the noise used for the reported mean ELBO.
pub fn elbo_seed(seed: u64) -> u64 {
    seed ^ 0x656c_626f_0000_0000
}

fn predict_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(predict_seed(seed))
}

fn stamp() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", t.as_secs(), t.subsec_millis())
}

fn check_width(ds: &LabeledDataset, model: &VadeModel) -> Result<(), CliError> {
    if ds.dim() != model.input_dim() {
        return Err(CliError::Shape(format!(
            "data has {} features but the model expects {}",
            ds.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Where a dataset lives and how to read it.
#[derive(Clone, Debug)]
pub struct DataSpec {
    pub path: PathBuf,
    pub labels: Option<PathBuf>,
    pub format: DataFormat,
    pub label_column: Option<LabelColumn>,
}

impl DataSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DataSpec {
            path: path.into(),
            labels: None,
            format: DataFormat::Auto,
            label_column: None,
        }
    }

    fn load(&self) -> Result<LabeledDataset, CliError> {
        load(&self.path, self.labels.as_deref(), self.format, self.label_column)
    }

    /// Loads and applies the preprocessing stored with a checkpoint.
    fn load_for(&self, ckpt: &Checkpoint) -> Result<LabeledDataset, CliError> {
        let mut ds = self.load()?;
        check_width(&ds, &ckpt.model)?;
        preprocess(&mut ds, ckpt.meta.binarize, ckpt.meta.standardizer.as_ref())?;
        Ok(ds)
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(load_checkpoint(path)?)
}

// ---------------------------------------------------------------- train

/// Outcome of a finished `train` run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Index of the restart whose artifacts were written.
    pub restart: usize,
    pub seed: u64,
    pub final_elbo: f64,
    pub final_acc: Option<f64>,
    pub out: PathBuf,
}

struct Restart {
    seed: u64,
    rows: String,
    final_model: VadeModel,
    best_model: VadeModel,
    best_epoch: usize,
    final_elbo: f64,
    final_acc: Option<f64>,
    log: Vec<(String, String)>,
}

fn metrics_header(labeled: bool) -> String {
    let mut h = String::from("epoch,lr,recon,z_prior,c_prior,z_entropy,c_entropy,elbo");
    if labeled {
        h.push_str(",acc");
    }
    h.push('\n');
    h
}

fn accuracy(model: &VadeModel, ds: &LabeledDataset, seed: u64) -> Result<Option<f64>, CliError> {
    let Some(labels) = &ds.labels else {
        return Ok(None);
    };
    let pred = predict(model, &ds.features, &mut predict_rng(seed))?;
    Ok(Some(clustering_accuracy(&pred, labels)?))
}

/// Divergence errors gain the restart and stage they happened in.
fn in_restart(err: vade::Error, r: usize, seed: u64, stage: &str) -> CliError {
    match err {
        vade::Error::Divergence { .. } | vade::Error::NonFinite { .. } => {
            CliError::Divergence(format!("restart {r} (seed {seed}), {stage}: {err}"))
        }
        other => other.into(),
    }
}

fn run_restart(r: usize, seed: u64, cfg: &RunConfig, mcfg: &ModelConfig, ds: &LabeledDataset) -> Result<Restart, CliError> {
    let mut log = Vec::new();
    let mut note = |msg: String| log.push((stamp(), format!("restart {r} seed {seed}: {msg}")));
    let tcfg = vade::model::TrainConfig { seed, ..cfg.train.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VadeModel::new(mcfg, seed)?;
    let report = pretrain(&mut model, ds, &tcfg, &mut rng).map_err(|e| in_restart(e, r, seed, "pretraining"))?;
    note(format!(
        "pretrained, reconstruction MSE {} -> {}, layerwise {}, mixture log-likelihood {}",
        report.recon_before,
        report.recon_after,
        report.layerwise,
        report.em.trace.last().copied().unwrap_or(f64::NAN)
    ));
    for w in &report.warnings {
        note(format!("warning: {w}"));
    }
    if let Some(labels) = &ds.labels {
        note(format!("codes + mixture ACC {}", clustering_accuracy(&report.code_assignments, labels)?));
    }

    let x = &ds.features;
    let mut trainer = Trainer::new(model, tcfg)?;
    let mut rows = String::new();
    let mut best: Option<(f64, usize, VadeModel)> = None;
    for e in 0..cfg.train.epochs {
        let stats = trainer
            .train_epoch(x, e, &mut rng)
            .map_err(|err| in_restart(err, r, seed, &format!("epoch {}", e + 1)))?;
        let acc = accuracy(trainer.model(), ds, seed)?;
        let b = stats.elbo;
        let _ = write!(
            rows,
            "{},{},{},{},{},{},{},{}",
            e + 1,
            stats.lr,
            b.recon,
            b.z_prior,
            b.c_prior,
            b.z_entropy,
            b.c_entropy,
            b.total
        );
        if let Some(a) = acc {
            let _ = write!(rows, ",{a}");
        }
        rows.push('\n');
        note(format!("epoch {} elbo {}{}", e + 1, b.total, acc.map_or_else(String::new, |a| format!(" acc {a}"))));
        if best.as_ref().is_none_or(|(v, _, _)| b.total > *v) {
            best = Some((b.total, e + 1, trainer.model().clone()));
        }
    }
    let final_model = trainer.into_model();
    let final_elbo = mean_elbo(&final_model, x, &mut ChaCha8Rng::seed_from_u64(elbo_seed(seed)))?.total;
    let final_acc = accuracy(&final_model, ds, seed)?;
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, final_model.clone()),
    };
    note(format!("finished, mean ELBO {final_elbo}"));
    Ok(Restart {
        seed,
        rows,
        final_model,
        best_model,
        best_epoch,
        final_elbo,
        final_acc,
        log,
    })
}

/// Runs `f(0..n)` on at most `threads` workers; results come back in index order.
fn run_indexed<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

/// Pretrains and trains `cfg.restarts` models with seeds `seed, seed+1, …`
/// and writes the artifacts of the one with the best final mean ELBO.
pub fn train(cfg: &RunConfig, threads: usize) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset: set `data` in the config or pass --data".into()))?;
    let spec = DataSpec {
        path: data.clone(),
        labels: cfg.labels.clone(),
        format: cfg.format,
        label_column: cfg.label_column,
    };
    let mut ds = spec.load()?;
    if cfg.limit > 0 && cfg.limit < ds.len() {
        ds = ds.subset(&(0..cfg.limit).collect::<Vec<_>>());
    }
    if cfg.binarize {
        ds.binarize();
    }
    let standardizer = cfg.standardize.then(|| Standardizer::fit(&ds.features));
    preprocess(&mut ds, false, standardizer.as_ref())?;
    let obs = resolve_obs(cfg.obs, &ds)?;
    if ds.len() < cfg.clusters {
        return Err(CliError::Data(format!("{} samples cannot seed {} clusters", ds.len(), cfg.clusters)));
    }
    let mcfg = ModelConfig {
        activation: cfg.activation,
        mc_samples: cfg.mc_samples,
        prob_clamp: cfg.train.prob_clamp,
        ..ModelConfig::new(ds.dim(), cfg.latent, cfg.clusters, cfg.hidden.clone(), obs)
    };

    let started = stamp();
    let results = run_indexed(cfg.restarts, threads, |r| {
        run_restart(r, cfg.train.seed.wrapping_add(r as u64), cfg, &mcfg, &ds)
    });
    let mut restarts = Vec::with_capacity(results.len());
    for res in results {
        restarts.push(res?);
    }
    let mut pick = 0;
    for (i, r) in restarts.iter().enumerate() {
        if r.final_elbo > restarts[pick].final_elbo {
            pick = i;
        }
    }
    let chosen = &restarts[pick];

    create_dir(&cfg.out)?;
    let config_text = cfg.render();
    let meta = |epoch: usize| CheckpointMeta {
        epoch: epoch as u64,
        seed: chosen.seed,
        config: config_text.clone(),
        binarize: cfg.binarize,
        standardizer: standardizer.clone(),
    };
    let mut metrics = metrics_header(ds.labels.is_some());
    metrics.push_str(&chosen.rows);
    std::fs::write(cfg.out.join("metrics.csv"), metrics)?;
    let final_ckpt = Checkpoint {
        model: chosen.final_model.clone(),
        meta: meta(cfg.train.epochs),
    };
    save_checkpoint(&final_ckpt, &cfg.out.join("final.ckpt"))?;
    let best_ckpt = Checkpoint {
        model: chosen.best_model.clone(),
        meta: meta(chosen.best_epoch),
    };
    save_checkpoint(&best_ckpt, &cfg.out.join("best.ckpt"))?;

    let mut log = format!("{started} train {} samples x {} features, obs {}\n", ds.len(), ds.dim(), obs.name());
    for line in config_text.lines() {
        let _ = writeln!(log, "{started} config {line}");
    }
    for r in &restarts {
        for (t, msg) in &r.log {
            let _ = writeln!(log, "{t} {msg}");
        }
    }
    let _ = writeln!(log, "{} selected restart {pick} (seed {}), mean ELBO {}", stamp(), chosen.seed, chosen.final_elbo);
    std::fs::write(cfg.out.join("run.log"), log)?;

    Ok(TrainSummary {
        restart: pick,
        seed: chosen.seed,
        final_elbo: chosen.final_elbo,
        final_acc: chosen.final_acc,
        out: cfg.out.clone(),
    })
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: DataSpec,
    /// Held-out split for kNN; leave-one-out on `data` without it.
    pub test: Option<DataSpec>,
    pub knn: Vec<usize>,
    /// Defaults to the checkpoint's training seed.
    pub seed: Option<u64>,
    /// Directory receiving `eval.csv`; defaults to the checkpoint's directory.
    pub out: Option<PathBuf>,
}

/// Writes `eval.csv` as `metric,value` rows and returns its contents.
pub fn eval(args: &EvalArgs) -> Result<String, CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let ds = args.data.load_for(&ckpt)?;
    let seed = args.seed.unwrap_or(ckpt.meta.seed);
    if !args.knn.is_empty() && ds.labels.is_none() {
        return Err(CliError::Config("kNN error needs labels for the data".into()));
    }

    let pred = predict(model, &ds.features, &mut predict_rng(seed))?;
    let elbo = mean_elbo(model, &ds.features, &mut ChaCha8Rng::seed_from_u64(elbo_seed(seed)))?;
    let mut out = String::from("metric,value\n");
    if let Some(labels) = &ds.labels {
        let _ = writeln!(out, "acc,{}", clustering_accuracy(&pred, labels)?);
    }
    let _ = writeln!(out, "elbo,{}", elbo.total);
    let mut sizes = vec![0usize; model.k()];
    for &p in &pred {
        sizes[p] += 1;
    }
    for (c, n) in sizes.iter().enumerate() {
        let _ = writeln!(out, "cluster_size_{c},{n}");
    }

    if !args.knn.is_empty() {
        let labels = ds.labels.as_deref().expect("checked above");
        let emb = embed(model, &ds.features)?;
        let test = match &args.test {
            Some(spec) => {
                let t = spec.load_for(&ckpt)?;
                let tl = t
                    .labels
                    .clone()
                    .ok_or_else(|| CliError::Config("kNN test split needs labels".into()))?;
                Some((embed(model, &t.features)?, tl))
            }
            None => None,
        };
        let available = if test.is_some() { emb.rows() } else { emb.rows().saturating_sub(1) };
        for &k in &args.knn {
            if k == 0 || k > available {
                return Err(CliError::Range(format!("kNN k={k} outside [1, {available}]")));
            }
            let err = match &test {
                Some((te, tl)) => knn_error(&emb, labels, te, tl, k)?,
                None => knn_error_loo(&emb, labels, k)?,
            };
            let _ = writeln!(out, "knn_error_k{k},{err}");
        }
    }

    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&dir)?;
    std::fs::write(dir.join("eval.csv"), &out)?;
    Ok(out)
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub cluster: usize,
    pub count: usize,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pgm,
    Csv,
}

#[derive(Clone, Debug)]
pub struct GenerateSummary {
    pub format: SampleFormat,
    /// Fraction of written samples that `predict` assigns to the requested cluster.
    pub reassigned: f64,
}

fn square_side(d: usize) -> Option<usize> {
    let s = (d as f64).sqrt().round() as usize;
    (s * s == d).then_some(s)
}

/// Tiles `n` square images of side `side` into a P5 grid with `⌈√n⌉` columns.
pub fn pgm_grid(images: &Tensor, side: usize) -> Vec<u8> {
    let n = images.rows();
    let mut cols = 1;
    while cols * cols < n {
        cols += 1;
    }
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * side, rows * side);
    let mut pixels = vec![0u8; w * h];
    for i in 0..n {
        let (tr, tc) = (i / cols, i % cols);
        for (p, &v) in images.row(i).iter().enumerate() {
            let (y, x) = (tr * side + p / side, tc * side + p % side);
            pixels[y * w + x] = (255.0 * v).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    out.extend(pixels);
    out
}

fn unstandardize(t: &Tensor, s: &Standardizer) -> Tensor {
    let mut out = t.clone();
    let d = t.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * s.std[i % d] + s.mean[i % d];
    }
    out
}

/// Samples from one cluster. Square Bernoulli models produce a PGM of decoder
/// means, anything else a CSV of samples in the original feature units.
pub fn generate_samples(args: &GenerateArgs) -> Result<GenerateSummary, CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    if args.cluster >= model.k() {
        return Err(CliError::Range(format!("cluster {} outside [0, {})", args.cluster, model.k())));
    }
    if args.count == 0 {
        return Err(CliError::Range("count must be at least 1".into()));
    }
    let seed = args.seed.unwrap_or(ckpt.meta.seed);
    let g = generate(model, args.cluster, args.count, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let side = square_side(model.input_dim()).filter(|_| model.obs == ObsKind::Bernoulli);
    let (format, written) = match side {
        Some(s) => {
            std::fs::write(&args.out, pgm_grid(&g.expectations, s))?;
            (SampleFormat::Pgm, &g.expectations)
        }
        None => {
            let header: Vec<String> = (0..model.input_dim()).map(|j| format!("f{j}")).collect();
            let units = ckpt.meta.standardizer.as_ref().map(|s| unstandardize(&g.samples, s));
            write_matrix_csv(units.as_ref().unwrap_or(&g.samples), Some(&header), &args.out)?;
            (SampleFormat::Csv, &g.samples)
        }
    };
    let pred = predict(model, written, &mut predict_rng(seed))?;
    let hits = pred.iter().filter(|&&p| p == args.cluster).count();
    Ok(GenerateSummary {
        format,
        reassigned: hits as f64 / args.count as f64,
    })
}

// ---------------------------------------------------------------- synth / embed

/// Writes `features.csv` and `labels.csv` under `out` and returns the dataset.
pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<LabeledDataset, CliError> {
    let ds = synth_mixture(cfg)?;
    create_dir(out)?;
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    write_matrix_csv(&ds.features, Some(&header), &out.join("features.csv"))?;
    save_labels_csv(ds.labels.as_deref().unwrap_or_default(), &out.join("labels.csv"))?;
    Ok(ds)
}

/// Writes the `N×J` encoder means of `data` to `out` and returns them.
pub fn embed_data(checkpoint: &Path, data: &DataSpec, out: &Path) -> Result<Tensor, CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    let ds = data.load_for(&ckpt)?;
    let emb = embed(&ckpt.model, &ds.features)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let header: Vec<String> = (0..emb.cols()).map(|j| format!("z{j}")).collect();
    write_matrix_csv(&emb, Some(&header), out)?;
    Ok(emb)
}
