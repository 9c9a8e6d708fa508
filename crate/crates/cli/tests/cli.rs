//! End-to-end tests of the `clipkd` binary on a tiny configuration: exit
//! codes, stamped outputs, byte-identical reruns and interrupted runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {"latent_dim": 4, "classes": 4, "patches": 4, "patch_dim": 2, "tokens": 3, "token_dim": 2,
           "train_size": 64, "val_size": 16, "test_size": 16, "pretrain_size": 256, "seed": 5},
  "teacher": {"width": 8, "blocks": 1, "embed_dim": 6},
  "student": {"width": 6, "blocks": 1, "embed_dim": 4},
  "optim": {"batch_size": 16, "warmup_steps": 2},
  "teacher_steps": 6, "student_steps": 6, "eval_interval": 2, "posneg_subset": 8,
  "kd": {"enabled": ["fd", "icl", "crd"]},
  "sweep": {"values": [10, 100, 1000]}
}"#;

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs a subcommand with the tiny config and `--out <name>`.
    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_clipkd"));
        c.arg(cmd).arg("--config").arg(&self.config).arg("--out").arg(self.out(out));
        c.args(extra);
        c.env_remove("CLIPKD_THREADS");
        c.output().unwrap()
    }

    fn teacher(&self) -> PathBuf {
        let o = self.run("train-teacher", "t", &[]);
        assert_ok(&o);
        self.out("t").join("teacher.ckpt")
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn first_line(p: &Path) -> String {
    String::from_utf8(read(p)).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn gen_data_prints_default_split_sizes() {
    let env = Env::new();
    let o = Command::new(env!("CARGO_BIN_EXE_clipkd"))
        .args(["gen-data", "--out"])
        .arg(env.out("g"))
        .output()
        .unwrap();
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    for line in ["train,8192", "val,1024", "test,1024"] {
        assert!(text.lines().any(|l| l == line), "missing {line} in\n{text}");
    }
    assert!(text.starts_with("# digest="));
    assert_eq!(read(&env.out("g").join("splits.csv")), text.as_bytes());
}

#[test]
fn gen_data_is_repeatable() {
    let env = Env::new();
    let a = env.run("gen-data", "a", &[]);
    let b = env.run("gen-data", "b", &[]);
    assert_ok(&a);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let env = Env::new();
    let o = env.run("gen-data", "x", &["--set", "data.noise_std.image=-1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("noise_std"), "{}", stderr(&o));

    let o = env.run("gen-data", "x", &["--set", "bogus_key=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));

    fs::write(env.out("broken.json"), "{ not json").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_clipkd"))
        .args(["gen-data", "--config"])
        .arg(env.out("broken.json"))
        .arg("--out")
        .arg(env.out("x"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_clipkd")).arg("no-such-command").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_clipkd")).arg("distill").output().unwrap();
    assert_eq!(code(&o), 2, "missing --teacher");
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let env = Env::new();
    let o = Command::new(env!("CARGO_BIN_EXE_clipkd"))
        .args(["gen-data", "--config"])
        .arg(env.out("absent.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn grad_check_passes_by_default_and_exits_3_on_failure() {
    let env = Env::new();
    let o = env.run("grad-check", "g", &[]);
    assert_ok(&o);
    let csv = String::from_utf8(read(&env.out("g").join("grad_check.csv"))).unwrap();
    assert!(csv.starts_with("# digest="));
    assert!(csv.contains("pass=true"));
    assert!(!csv.contains("pass=false"));

    let o = env.run("grad-check", "g", &["--clip-tolerance", "0"]);
    assert_eq!(code(&o), 3);
    let o = env.run("grad-check", "g", &["--backprop-tolerance", "-1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn full_pipeline_writes_stamped_outputs() {
    let env = Env::new();
    let teacher = env.teacher();
    let t = teacher.to_str().unwrap();
    assert_ok(&env.run("distill", "s", &["--teacher", t]));
    let student = env.out("s").join("student.ckpt");
    let st = student.to_str().unwrap();
    assert_ok(&env.run("eval", "e", &["--student", st]));
    assert_ok(&env.run("eval", "et", &["--teacher", t, "--split", "val"]));
    assert_ok(&env.run("analyze", "a", &["--teacher", t, "--student", st]));
    assert_ok(&env.run("dump", "d", &["--teacher", t]));
    let image = env.out("d").join("image.ckde");
    let text = env.out("d").join("text.ckde");
    assert_ok(&env.run(
        "eval-dump",
        "ed",
        &["--image", image.to_str().unwrap(), "--text", text.to_str().unwrap()],
    ));

    let stamp = first_line(&env.out("t").join("teacher_metrics.csv"));
    assert!(stamp.starts_with("# digest=") && stamp.ends_with(" seed=0"), "{stamp}");
    for f in [
        env.out("s").join("student_metrics.csv"),
        env.out("e").join("eval.csv"),
        env.out("et").join("eval.csv"),
        env.out("a").join("analysis.csv"),
        env.out("ed").join("eval_dump.csv"),
    ] {
        assert_eq!(first_line(&f), stamp, "{}", f.display());
    }

    let eval = String::from_utf8(read(&env.out("e").join("eval.csv"))).unwrap();
    for key in ["metric,value", "i2t_r@1,", "t2i_r@10,", "zero_shot,"] {
        assert!(eval.contains(key), "{key} missing from\n{eval}");
    }
    let analysis = String::from_utf8(read(&env.out("a").join("analysis.csv"))).unwrap();
    for key in ["cosine_image,", "cosine_text,", "cka_image,", "cka_text,", "pos_neg_gap,"] {
        assert!(analysis.contains(key), "{key} missing from\n{analysis}");
    }
    let metrics = String::from_utf8(read(&env.out("s").join("student_metrics.csv"))).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 12));

    // The dumped teacher embeddings score exactly as the checkpoint does.
    let dumped = String::from_utf8(read(&env.out("ed").join("eval_dump.csv"))).unwrap();
    let direct = String::from_utf8(read(&env.out("et").join("eval.csv"))).unwrap();
    let test_eval = env.run("eval", "et2", &["--teacher", t]);
    assert_ok(&test_eval);
    let direct_test = String::from_utf8(read(&env.out("et2").join("eval.csv"))).unwrap();
    assert_ne!(direct, direct_test, "val and test splits differ");
    for line in dumped.lines().filter(|l| l.starts_with("i2t_r@1,") || l.starts_with("t2i_r@1,")) {
        assert!(direct_test.contains(line), "{line} not in\n{direct_test}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let env = Env::new();
    assert_ok(&env.run("train-teacher", "a", &[]));
    assert_ok(&env.run("train-teacher", "b", &[]));
    for f in ["teacher.ckpt", "teacher_metrics.csv"] {
        assert_eq!(read(&env.out("a").join(f)), read(&env.out("b").join(f)), "{f}");
    }
    let t = env.out("a").join("teacher.ckpt");
    let t = t.to_str().unwrap();
    assert_ok(&env.run("distill", "sa", &["--teacher", t]));
    assert_ok(&env.run("distill", "sb", &["--teacher", t]));
    for f in ["student.ckpt", "student_metrics.csv"] {
        assert_eq!(read(&env.out("sa").join(f)), read(&env.out("sb").join(f)), "{f}");
    }
    assert_ok(&env.run("train-teacher", "c", &["--seed", "1"]));
    assert_ne!(
        read(&env.out("a").join("teacher.ckpt")),
        read(&env.out("c").join("teacher.ckpt"))
    );
    assert!(first_line(&env.out("c").join("teacher_metrics.csv")).ends_with(" seed=1"));
}

#[test]
fn interrupted_runs_resume_to_identical_outputs() {
    let env = Env::new();
    let teacher = env.teacher();
    let t = teacher.to_str().unwrap();

    assert_ok(&env.run("train-teacher", "r", &["--stop-after", "3"]));
    let partial = env.out("r").join("teacher.ckpt");
    assert_ok(&env.run("train-teacher", "r", &["--resume", partial.to_str().unwrap()]));
    for f in ["teacher.ckpt", "teacher_metrics.csv"] {
        assert_eq!(read(&env.out("t").join(f)), read(&env.out("r").join(f)), "{f}");
    }

    assert_ok(&env.run("distill", "full", &["--teacher", t]));
    assert_ok(&env.run("distill", "part", &["--teacher", t, "--stop-after", "4"]));
    let partial = env.out("part").join("student.ckpt");
    assert_ok(&env.run(
        "distill",
        "part",
        &["--teacher", t, "--resume", partial.to_str().unwrap()],
    ));
    for f in ["student.ckpt", "student_metrics.csv"] {
        assert_eq!(read(&env.out("full").join(f)), read(&env.out("part").join(f)), "{f}");
    }

    // A checkpoint written under another config is refused.
    let own = env.out("r").join("teacher.ckpt");
    let o = env.run("train-teacher", "r2", &["--resume", own.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn malformed_files_fail_with_documented_codes() {
    let env = Env::new();
    let teacher = env.teacher();
    let bytes = read(&teacher);
    let t = teacher.to_str().unwrap();

    let truncated = env.out("truncated.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let o = env.run("eval", "x", &["--teacher", truncated.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("malformed file at byte"), "{}", stderr(&o));

    let flipped = env.out("flipped.ckpt");
    let mut b = bytes.clone();
    b[100] ^= 0xFF;
    fs::write(&flipped, &b).unwrap();
    let o = env.run("eval", "x", &["--teacher", flipped.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    let o = env.run("eval", "x", &["--teacher", t, "--set", "teacher.width=10"]);
    assert_eq!(code(&o), 2, "architecture mismatch is a config error");
    assert!(stderr(&o).contains("image.embed_w"), "{}", stderr(&o));

    let o = env.run("eval", "x", &["--teacher", t, "--set", "precision=f64"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("byte 5"), "{}", stderr(&o));

    let o = env.run("eval", "x", &["--teacher", env.out("missing.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 1);

    assert_ok(&env.run("dump", "d", &["--teacher", t]));
    let image = env.out("d").join("image.ckde");
    let text = env.out("d").join("text.ckde");
    let o = env.run(
        "eval-dump",
        "x",
        &["--image", text.to_str().unwrap(), "--text", text.to_str().unwrap()],
    );
    assert_eq!(code(&o), 1, "role mismatch");
    let short = env.out("short.ckde");
    fs::write(&short, &read(&image)[..20]).unwrap();
    let o = env.run(
        "eval-dump",
        "x",
        &["--image", short.to_str().unwrap(), "--text", text.to_str().unwrap()],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("malformed file at byte"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_point_independent_of_workers() {
    let env = Env::new();
    let teacher = env.teacher();
    let t = teacher.to_str().unwrap();
    assert_ok(&env.run("sweep", "seq", &["--teacher", t]));
    let mut c = Command::new(env!("CARGO_BIN_EXE_clipkd"));
    c.args(["sweep", "--config"])
        .arg(&env.config)
        .arg("--out")
        .arg(env.out("par"))
        .args(["--teacher", t, "--jobs", "3"])
        .env("CLIPKD_THREADS", "2");
    assert_ok(&c.output().unwrap());

    let summary = String::from_utf8(read(&env.out("seq").join("sweep.csv"))).unwrap();
    let rows: Vec<&str> = summary.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    for (row, value) in rows.iter().zip(["10", "100", "1000"]) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(&cells[1..4], &["weight", "fd", value]);
    }
    for i in 0..3 {
        let f = format!("sweep_{i}_metrics.csv");
        assert_eq!(read(&env.out("seq").join(&f)), read(&env.out("par").join(&f)), "{f}");
    }
    assert_eq!(read(&env.out("seq").join("sweep.csv")), read(&env.out("par").join("sweep.csv")));

    let mut c = Command::new(env!("CARGO_BIN_EXE_clipkd"));
    c.args(["sweep", "--config"])
        .arg(&env.config)
        .arg("--out")
        .arg(env.out("bad"))
        .args(["--teacher", t])
        .env("CLIPKD_THREADS", "zero");
    assert_eq!(code(&c.output().unwrap()), 2);

    let o = env.run(
        "sweep",
        "bad",
        &["--teacher", t, "--set", "sweep.param=mask_ratio", "--set", "sweep.values=[0.25,1.5]"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("mask_ratio"));
}
