//! Drives the `pwe` binary end to end on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pwe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_fixture(dir: &Path) {
    // three disjoint clusters of words, one document per line
    let clusters = [
        ["red", "green", "blue", "cyan", "teal", "olive"],
        ["dog", "cat", "wolf", "fox", "lynx", "otter"],
        ["oak", "pine", "birch", "elm", "ash", "cedar"],
    ];
    let mut state = 42u64;
    let mut lcg = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    let mut corpus = String::new();
    let mut cats = String::new();
    for d in 0..150 {
        let c = d % 3;
        let words: Vec<&str> = (0..30).map(|_| clusters[c][lcg() % 6]).collect();
        corpus.push_str(&words.join(" "));
        corpus.push('\n');
        cats.push_str(&format!("cat\tc{c}\n"));
    }
    fs::write(dir.join("corpus.txt"), corpus).unwrap();
    fs::write(dir.join("cats.tsv"), cats).unwrap();
    fs::write(
        dir.join("testset.tsv"),
        "# toy pairs\nred\tgreen\t9.0\ndog\tcat\t8.5\noak\tpine\t8.0\nred\tdog\t1.0\ncat\toak\t0.5\nblue\telm\t0.3\n",
    )
    .unwrap();
    fs::write(
        dir.join("config.toml"),
        r#"
[paths]
corpus = "corpus.txt"
modality_files = ["cats.tsv"]
workdir = "work"

[corpus]
drop_top = 0
keep = 1000
subsample = 0.0
seed = 3

[cooc]
window = 4
min_count = 2
weighting = "raw"
batch_size = 5

[train]
num_topics = 3
epochs = 4
seed = 3
threads = 1

[eval]
similarity_testsets = ["testset.tsv"]
coherence_top_k = [4]
metric = "dot"
"#,
    )
    .unwrap();
}

#[test]
fn pipeline_then_queries() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());

    let run = pwe(dir.path(), &["pipeline", "--config", "config.toml"]);
    assert!(run.status.success(), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("model.bin"));
    assert!(dir.path().join("work/reports/similarity_testset.tsv").exists());

    // rerun: everything cached
    let rerun = pwe(dir.path(), &["pipeline", "--config", "config.toml"]);
    let stdout = String::from_utf8_lossy(&rerun.stdout);
    assert!(stdout.lines().filter(|l| l.contains("\tbuilt\t")).count() == 0, "{stdout}");

    // neighbors stay within the cluster
    let nn = pwe(dir.path(), &["query", "nn", "--model", "work/model.bin", "red", "--k", "3"]);
    assert!(nn.status.success());
    let nn_out = String::from_utf8_lossy(&nn.stdout);
    for line in nn_out.lines() {
        let token = line.split('\t').next().unwrap();
        assert!(
            ["green", "blue", "cyan", "teal", "olive"].contains(&token),
            "unexpected neighbor {token} in:\n{nn_out}"
        );
    }

    // cross-modality neighbors: category token to words
    let cross = pwe(
        dir.path(),
        &["query", "nn", "--model", "work/model.bin", "c1", "--query-modality", "cat", "--modality", "word", "--k", "2"],
    );
    assert!(cross.status.success());
    let cross_out = String::from_utf8_lossy(&cross.stdout);
    for line in cross_out.lines() {
        let token = line.split('\t').next().unwrap();
        assert!(["dog", "cat", "wolf", "fox", "lynx", "otter"].contains(&token), "{cross_out}");
    }

    // topic listing and export
    let topic = pwe(dir.path(), &["query", "topic", "--model", "work/model.bin", "0", "--k", "3"]);
    assert!(topic.status.success());
    assert_eq!(String::from_utf8_lossy(&topic.stdout).lines().count(), 3);

    let export = pwe(
        dir.path(),
        &["query", "export", "--model", "work/model.bin", "--output", "emb.tsv"],
    );
    assert!(export.status.success());
    let exported = fs::read_to_string(dir.path().join("emb.tsv")).unwrap();
    assert_eq!(exported.lines().count(), 18, "one line per word");
    assert_eq!(exported.lines().next().unwrap().split('\t').count(), 4, "token + 3 topics");

    // eval subcommands
    let sim = pwe(dir.path(), &["eval", "similarity", "--config", "config.toml"]);
    assert!(sim.status.success());
    assert!(String::from_utf8_lossy(&sim.stdout).contains("spearman="));
    let coh = pwe(dir.path(), &["eval", "coherence", "--config", "config.toml"]);
    assert!(coh.status.success());
    assert!(String::from_utf8_lossy(&coh.stdout).contains("coherence="));
}

#[test]
fn infer_reads_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    assert!(pwe(dir.path(), &["train", "--config", "config.toml"]).status.success());

    let mut child = Command::new(env!("CARGO_BIN_EXE_pwe"))
        .current_dir(dir.path())
        .args(["query", "infer", "--model", "work/model.bin"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.as_mut().unwrap().write_all(b"red green blue unknowntoken\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let theta: Vec<f64> = String::from_utf8_lossy(&out.stdout)
        .trim()
        .split('\t')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(theta.len(), 3);
    let sum: f64 = theta.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());

    // config error: malformed TOML -> 2
    fs::write(dir.path().join("bad.toml"), "not toml at all").unwrap();
    let bad = pwe(dir.path(), &["vocab", "--config", "bad.toml"]);
    assert_eq!(bad.status.code(), Some(2));

    // data error: corpus file missing -> 3
    fs::write(
        dir.path().join("missing.toml"),
        "[paths]\ncorpus = \"nope.txt\"\nworkdir = \"w\"\n",
    )
    .unwrap();
    let missing = pwe(dir.path(), &["vocab", "--config", "missing.toml"]);
    assert_eq!(missing.status.code(), Some(3));

    // unknown token in a query -> data error
    assert!(pwe(dir.path(), &["train", "--config", "config.toml"]).status.success());
    let unknown = pwe(dir.path(), &["query", "nn", "--model", "work/model.bin", "zzz"]);
    assert_eq!(unknown.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("zzz"));
}

#[test]
fn cooc_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let run = pwe(
        dir.path(),
        &["batches", "--config", "config.toml", "--window", "2", "--min-count", "1", "--weighting", "ppmi", "--batch-size", "4", "--dump-tsv"],
    );
    assert!(run.status.success(), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("dump\t")), "{stdout}");
}
