use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn docnmt(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docnmt"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MANIFEST: &str = r#"
[experiment]
name = "smoke"
seed = 2

[languages]
pairs = ["en-xa", "en-xb"]

[corpora]
dir = "data"

[model]
preset = "tiny"

[train]
pretrain_steps = 12
finetune_steps = 6

[schedule]
p = 0.5
teachers = ["en-xa"]
students = ["en-xb"]

[decode]
beam = 2

[runner]
modes = ["N21"]
p_values = [0.5]
resource_threshold = 10
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = docnmt(
        dir.path(),
        &["synth", "--languages", "xa,xb", "--train-docs", "10", "--test-docs", "2", "--mono-docs", "2", "--items", "4"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(dir.path().join("manifest.toml"), MANIFEST).unwrap();
    dir
}

fn run_dir(root: &Path) -> PathBuf {
    let runs: Vec<_> = fs::read_dir(root.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs[0].clone()
}

#[test]
fn prepare_is_idempotent() {
    let w = workspace();
    let o = docnmt(w.path(), &["prepare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(w.path());
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-s2"));
    assert!(run.join("prepared/vocab.txt").exists());
    assert!(run.join("prepared/chunks.tsv").exists());
    let before = fs::metadata(run.join("prepared/vocab.txt")).unwrap().modified().unwrap();
    let o = docnmt(w.path(), &["prepare"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("up to date"), "{}", stdout(&o));
    assert_eq!(fs::metadata(run.join("prepared/vocab.txt")).unwrap().modified().unwrap(), before);

    // the stored manifest's hash matches its content and the directory name
    let stored = fs::read(run.join("manifest.json")).unwrap();
    let hash = fs::read_to_string(run.join("manifest.sha256")).unwrap().trim().to_string();
    use sha2::Digest;
    assert_eq!(format!("{:x}", sha2::Sha256::digest(&stored)), hash);
    assert!(serde_json::from_slice::<serde_json::Value>(&stored).unwrap()["seed"] == 2);
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with(&hash[..12]));
}

#[test]
fn corrupted_alignment_names_the_document() {
    let w = workspace();
    let path = w.path().join("data/en-xb/train.xb");
    let text = fs::read_to_string(&path).unwrap();
    // drop the first sentence of the second document
    let mut docs: Vec<&str> = text.split("\n\n").collect();
    let shorter = docs[1].split_once('\n').unwrap().1.to_string();
    docs[1] = &shorter;
    fs::write(&path, docs.join("\n\n")).unwrap();
    let o = docnmt(w.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("document 1"), "{}", stderr(&o));
}

#[test]
fn manifest_errors_are_validation_failures() {
    let w = workspace();
    fs::write(w.path().join("manifest.toml"), format!("{MANIFEST}\n[decode]\nwidth = 3\n")).unwrap();
    assert_eq!(docnmt(w.path(), &["prepare"]).status.code(), Some(1));
    fs::write(w.path().join("manifest.toml"), MANIFEST.replace("beam = 2", "beams = 2")).unwrap();
    let o = docnmt(w.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beams"), "{}", stderr(&o));
}

#[test]
fn missing_prerequisites_are_named() {
    let w = workspace();
    let o = docnmt(w.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("vocab.txt"), "{}", stderr(&o));
    assert!(docnmt(w.path(), &["prepare"]).status.success());
    let o = docnmt(w.path(), &["finetune"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));
}

#[test]
fn evaluate_identical_files() {
    let w = workspace();
    let o = docnmt(w.path(), &["evaluate", "--hyp", "data/en-xa/test.xa", "--ref", "data/en-xa/test.xa"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let bleu = out.lines().find(|l| l.starts_with("bleu\t")).unwrap();
    assert_eq!(bleu.split('\t').nth(1).unwrap().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn seed_flag_overrides_with_audit_line() {
    let w = workspace();
    let o = docnmt(w.path(), &["--seed", "9", "prepare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("override experiment.seed: 2 -> 9"), "{}", stderr(&o));
    assert!(run_dir(w.path()).to_str().unwrap().ends_with("-s9"));
}

#[test]
fn end_to_end() {
    let w = workspace();
    for cmd in ["prepare", "train", "finetune"] {
        let o = docnmt(w.path(), &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let run = run_dir(w.path());
    assert!(run.join("finetune/averaged.bin").exists());

    // a 7-sentence document keeps 7 sentences under doc mode
    let doc: Vec<String> = fs::read_to_string(w.path().join("data/en-xa/train.en"))
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .take(7)
        .map(str::to_string)
        .collect();
    fs::write(w.path().join("seven.en"), doc.join("\n") + "\n").unwrap();
    let o = docnmt(
        w.path(),
        &["translate", "--pair", "en-xa", "--input", "seven.en", "--mode", "doc", "--output", "seven.xa"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = fs::read_to_string(w.path().join("seven.xa")).unwrap();
    assert_eq!(out.lines().filter(|l| !l.trim().is_empty()).count(), 7, "{out}");

    let o = docnmt(w.path(), &["contrastive", "--pair", "en-xb"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("metric"), "{}", stdout(&o));

    let o = docnmt(w.path(), &["backtranslate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("bt/en-xa.en").exists());
    assert!(run.join("bt/en-xa.provenance.json").exists());

    let o = docnmt(w.path(), &["sweep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["directions.tsv", "N21_doc.tsv", "N21_sen.tsv", "manifest.json", "groups.tsv"] {
        assert!(run.join("sweep").join(f).exists(), "{f}");
    }
}
