use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vade::datio::{load_checkpoint, load_csv, load_labels_csv, save_checkpoint, synth_mixture, Checkpoint, CheckpointMeta, SynthConfig};
use vade::model::{embed, generate, ModelConfig, VadeModel};
use vade::nets::ObsKind;

fn vade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vade"))
        .args(args)
        .env_remove("VADE_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("commands").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

struct Fixture {
    dir: PathBuf,
    features: PathBuf,
    labels: PathBuf,
    config: PathBuf,
}

fn desk_config(fx_dir: &Path, extra: &str) -> String {
    format!(
        "# desk-scale preset\ndata={}\nlabels={}\nk=3\nlatent=4\nhidden=64,64\nstandardize=true\nepochs=12\npretrain_epochs=5\nseed=3\n{extra}",
        fx_dir.join("syn/features.csv").display(),
        fx_dir.join("syn/labels.csv").display(),
    )
}

/// Synthetic data plus one trained run, shared by the tests below.
fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let dir = scratch("fixture");
        let syn = dir.join("syn");
        let o = vade(&["synth", "--seed", "3", "--n-per-cluster", "200", "--out", s(&syn)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let config = dir.join("desk.cfg");
        std::fs::write(&config, desk_config(&dir, &format!("out={}\n", dir.join("run").display()))).unwrap();
        let o = vade(&["train", "--config", s(&config)]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture {
            features: syn.join("features.csv"),
            labels: syn.join("labels.csv"),
            config,
            dir,
        }
    })
}

fn metrics(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn eval_rows(text: &str) -> Vec<(String, String)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_owned(), v.to_owned())
        })
        .collect()
}

#[test]
fn synth_files_reload_to_the_same_dataset() {
    let dir = scratch("synth");
    let o = vade(&["synth", "--k", "4", "--latent", "3", "--dim", "7", "--n-per-cluster", "25", "--seed", "11", "--out", s(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let want = synth_mixture(&SynthConfig::new(4, 3, 7, 25, 11)).unwrap();
    let feats = load_csv(&dir.join("features.csv"), None).unwrap();
    assert_eq!(feats.features, want.features);
    assert_eq!(Some(load_labels_csv(&dir.join("labels.csv")).unwrap()), want.labels);
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let fx = fixture();
    let run = fx.dir.join("run");
    let rows = metrics(&run);
    assert_eq!(rows.len(), 12 + 1);
    assert_eq!(rows[0].join(","), "epoch,lr,recon,z_prior,c_prior,z_entropy,c_entropy,elbo,acc");
    let acc: f64 = rows.last().unwrap()[8].parse().unwrap();
    assert!(acc >= 0.9, "final ACC {acc}");
    for f in ["final.ckpt", "best.ckpt", "run.log"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ckpt = load_checkpoint(&run.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.meta.epoch, 12);
    assert_eq!(ckpt.meta.seed, 3);
    assert!(ckpt.meta.standardizer.is_some());
    assert!(ckpt.meta.config.contains("hidden=64,64\n"));
    let best = load_checkpoint(&run.join("best.ckpt")).unwrap();
    assert!((1..=12).contains(&best.meta.epoch));
}

#[test]
fn eval_reproduces_logged_accuracy() {
    let fx = fixture();
    let run = fx.dir.join("run");
    let out = fx.dir.join("eval");
    let o = vade(&[
        "eval",
        s(&run.join("final.ckpt")),
        "--data",
        s(&fx.features),
        "--labels",
        s(&fx.labels),
        "--knn",
        "3,5,10",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
    let rows = eval_rows(&text);
    let logged = metrics(&run).last().unwrap()[8].clone();
    assert_eq!(rows[0], ("acc".to_owned(), logged));
    assert_eq!(rows[1].0, "elbo");
    let sizes: usize = rows.iter().filter(|(k, _)| k.starts_with("cluster_size_")).map(|(_, v)| v.parse::<usize>().unwrap()).sum();
    assert_eq!(sizes, 600);
    let knn: Vec<&str> = rows.iter().filter(|(k, _)| k.starts_with("knn_error_")).map(|(k, _)| k.as_str()).collect();
    assert_eq!(knn, ["knn_error_k3", "knn_error_k5", "knn_error_k10"]);
}

#[test]
fn eval_without_labels_omits_accuracy() {
    let fx = fixture();
    let out = fx.dir.join("eval-unlabeled");
    let o = vade(&["eval", s(&fx.dir.join("run/final.ckpt")), "--data", s(&fx.features), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = eval_rows(&std::fs::read_to_string(out.join("eval.csv")).unwrap());
    assert!(rows.iter().all(|(k, _)| k != "acc"));
    assert_eq!(rows[0].0, "elbo");
}

#[test]
fn eval_on_wrong_width_is_a_shape_error() {
    let fx = fixture();
    let dir = scratch("narrow");
    let o = vade(&["synth", "--dim", "5", "--n-per-cluster", "10", "--out", s(&dir)]);
    assert!(o.status.success());
    let o = vade(&["eval", s(&fx.dir.join("run/final.ckpt")), "--data", s(&dir.join("features.csv"))]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn knn_larger_than_the_data_is_out_of_range() {
    let fx = fixture();
    let o = vade(&[
        "eval",
        s(&fx.dir.join("run/final.ckpt")),
        "--data",
        s(&fx.features),
        "--labels",
        s(&fx.labels),
        "--knn",
        "600",
        "--out",
        s(&fx.dir.join("eval-big-k")),
    ]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn zero_epochs_writes_a_pretrained_checkpoint() {
    let fx = fixture();
    let out = scratch("zero-epochs");
    let o = vade(&["train", "--config", s(&fx.config), "--epochs", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics(&out).len(), 1);
    let ckpt = load_checkpoint(&out.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.meta.epoch, 0);
    assert!(ckpt.model.validate().is_ok());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = scratch("bad-config");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "k=3\nlearnig_rate=0.1\n").unwrap();
    let o = vade(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));

    let o = vade(&["train", "--set", "k=0", "--data", "whatever.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = vade(&["train"]);
    assert_eq!(o.status.code(), Some(2), "no dataset configured");
}

#[test]
fn unreadable_data_exits_3() {
    let dir = scratch("bad-data");
    let o = vade(&["train", "--data", s(&dir.join("missing.csv"))]);
    assert_eq!(o.status.code(), Some(3));
    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "1,2\n3,x\n").unwrap();
    let o = vade(&["train", "--data", s(&bad), "--k", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_and_names_the_term() {
    let fx = fixture();
    let out = scratch("diverge");
    let o = vade(&[
        "train",
        "--config",
        s(&fx.config),
        "--pretrain-epochs",
        "0",
        "--epochs",
        "2",
        "--lr",
        "1e200",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
    let msg = stderr(&o);
    assert!(msg.contains("non-finite encoder") && msg.contains("epoch 1"), "{msg}");
}

#[test]
fn generate_csv_and_range_check() {
    let fx = fixture();
    let ckpt = fx.dir.join("run/final.ckpt");
    let out = fx.dir.join("gen/c2.csv");
    let o = vade(&["generate", s(&ckpt), "--cluster", "2", "--count", "50", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("reassigned to cluster 2"));
    let samples = load_csv(&out, None).unwrap();
    assert_eq!((samples.len(), samples.dim()), (50, 16));

    let o = vade(&["generate", s(&ckpt), "--cluster", "3", "--count", "5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn generate_pgm_for_square_bernoulli_models() {
    let dir = scratch("pgm");
    let cfg = ModelConfig::new(784, 3, 2, vec![8], ObsKind::Bernoulli);
    let ckpt = Checkpoint {
        model: VadeModel::new(&cfg, 1).unwrap(),
        meta: CheckpointMeta {
            seed: 21,
            ..CheckpointMeta::default()
        },
    };
    let path = dir.join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();

    let one = dir.join("one.pgm");
    let o = vade(&["generate", s(&path), "--cluster", "1", "--count", "1", "--out", s(&one)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&one).unwrap();
    let header = b"P5 28 28 255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 784);
    let g = generate(&ckpt.model, 1, 1, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    for (b, mu) in bytes[header.len()..].iter().zip(g.expectations.data()) {
        assert_eq!(*b, (255.0 * mu).round().clamp(0.0, 255.0) as u8);
    }

    let grid = dir.join("grid.pgm");
    let o = vade(&["generate", s(&path), "--cluster", "0", "--count", "7", "--out", s(&grid)]);
    assert!(o.status.success());
    let bytes = std::fs::read(&grid).unwrap();
    let header = b"P5 84 84 255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 84 * 84);
}

#[test]
fn embed_matches_library_to_twelve_digits() {
    let fx = fixture();
    let out = fx.dir.join("emb/z.csv");
    let ckpt_path = fx.dir.join("run/final.ckpt");
    let o = vade(&["embed", s(&ckpt_path), "--data", s(&fx.features), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = load_csv(&out, None).unwrap().features;

    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    let mut ds = load_csv(&fx.features, None).unwrap();
    ckpt.meta.standardizer.as_ref().unwrap().apply(&mut ds).unwrap();
    let want = embed(&ckpt.model, &ds.features).unwrap();
    assert_eq!(got.rows(), 600);
    assert_eq!(got.cols(), 4);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{a} vs {b}");
    }
}

#[test]
fn restarts_are_independent_of_thread_count() {
    let fx = fixture();
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = scratch(&format!("restarts-{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_vade"))
            .args(["train", "--config", s(&fx.config), "--epochs", "3", "--restarts", "3", "--out", s(&out)])
            .env("VADE_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        // The echoed config names the output directory, so compare models.
        outputs.push((
            std::fs::read(out.join("metrics.csv")).unwrap(),
            load_checkpoint(&out.join("final.ckpt")).unwrap().model,
            load_checkpoint(&out.join("best.ckpt")).unwrap().model,
        ));
        let log = std::fs::read_to_string(out.join("run.log")).unwrap();
        assert!(log.contains("restart 2 seed 5: finished"), "{log}");
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn config_command_lists_defaults() {
    let o = vade(&["config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("batch_size=100\n") && text.contains("learning_rate=0.002\n"));
    assert!(text.contains("hidden=500,500,2000\n"));
}
