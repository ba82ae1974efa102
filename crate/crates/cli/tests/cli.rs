use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CATS_RAN: &str = "# text = cats ran
1\tcats\tcat\tNOUN\t_\tNumber=Pl\t2\tnsubj\t_\t_
2\tran\trun\tVERB\t_\tTense=Past\t0\troot\t_\t_

";

const TOY: &str = "1\tdogs\tdog\tNOUN\t_\tNumber=Plur\t2\tnsubj\t_\t_
2\tbarked\tbark\tVERB\t_\t_\t0\troot\t_\t_

1\tthe\tthe\tDET\t_\t_\t2\tdet\t_\t_
2\tcat\tcat\tNOUN\t_\tNumber=Sing\t0\troot\t_\t_

";

fn morphclm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphclm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = morphclm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Small synthetic train/dev/test treebanks.
fn synth_data(dir: &Path) -> [PathBuf; 3] {
    [("train", 6_000, 1), ("dev", 1_000, 2), ("test", 1_000, 3)].map(|(name, chars, seed)| {
        let path = dir.join(format!("{name}.conllu"));
        ok(&[
            "synth",
            "--chars",
            &chars.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            p(&path),
        ]);
        path
    })
}

const TINY: &str = "embed_dim = 8
hidden_dim = 16
num_layers = 2
mtl_layer = 2
dropout = 0.0
batch_size = 4
seq_len = 40
max_epochs = 2
patience = 2
seed = 7
";

#[test]
fn stats_reports_inflection_rate() {
    let dir = tempfile::tempdir().unwrap();
    let tb = write(dir.path(), "toy.conllu", TOY);
    let out = ok(&["stats", "--treebank", p(&tb)]);
    assert!(out.contains("%Infl 50.0\n"), "{out}");
    assert!(out.contains("tokens\t4\n"));
    assert!(out.contains("feature\tNumber\tPlur|Sing\n"));

    let bare = write(dir.path(), "bare.conllu", "1\thi\thi\tINTJ\t_\t_\t0\troot\t_\t_\n\n");
    assert!(ok(&["stats", "--treebank", p(&bare)]).contains("schema size 0\n"));
}

#[test]
fn align_dumps_first_character_labels() {
    let dir = tempfile::tempdir().unwrap();
    let tb = write(dir.path(), "cats.conllu", CATS_RAN);
    let out = ok(&["align", "--treebank", p(&tb)]);
    assert_eq!(out, "c\tNumber=Pl\na\t-\nt\t-\ns\t-\n \t-\nr\tTense=Past\na\t-\nn\t-\n");
    let chars: String = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(chars, "cats ran");
}

#[test]
fn build_vocab_threshold_is_strict() {
    let dir = tempfile::tempdir().unwrap();
    let text = write(dir.path(), "t.txt", &format!("{}{}", "a".repeat(6), "b".repeat(5)));
    let vocab = dir.path().join("v.txt");
    ok(&["build-vocab", "--input", p(&text), "--min-count", "5", "--out", p(&vocab)]);
    assert_eq!(std::fs::read_to_string(&vocab).unwrap(), "#morphclm-vocab v1\na\n");
    ok(&["build-vocab", "--input", p(&text), "--min-count", "0", "--out", p(&vocab)]);
    assert_eq!(std::fs::read_to_string(&vocab).unwrap(), "#morphclm-vocab v1\na\nb\n");

    let missing = dir.path().join("missing.txt");
    let out = morphclm(&["build-vocab", "--input", p(&missing), "--out", p(&vocab)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_evaluate_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let [train, dev, test] = synth_data(dir.path());
    let data = format!(
        "treebank_train = {}\ntreebank_dev = {}\ntreebank_test = {}\n",
        p(&train),
        p(&dev),
        p(&test)
    );
    write(dir.path(), "base.cfg", &format!("{TINY}{data}"));
    let lm_cfg = write(dir.path(), "lm.cfg", "include = base.cfg\nregime = LM_ONLY\noutput_dir = lm\n");
    let mtl_cfg = write(
        dir.path(),
        "mtl.cfg",
        "include = base.cfg\nregime = FULLY_SUPERVISED\noutput_dir = mtl\n",
    );
    let out = ok(&["train", "--config", p(&lm_cfg), "--no-timestamp"]);
    assert!(out.contains("best_epoch\t"), "{out}");
    let log1 = std::fs::read_to_string(dir.path().join("lm/train_log.tsv")).unwrap();
    ok(&["train", "--config", p(&lm_cfg), "--no-timestamp"]);
    let log2 = std::fs::read_to_string(dir.path().join("lm/train_log.tsv")).unwrap();
    assert_eq!(log1, log2);
    assert!(log1.starts_with("epoch\tlm_loss_nats\tmorph_loss_nats\tdev_bpc\tseconds\n"));
    assert_eq!(log1.lines().count(), 3);

    ok(&["train", "--config", p(&mtl_cfg), "--no-timestamp"]);
    let mtl_log = std::fs::read_to_string(dir.path().join("mtl/train_log.tsv")).unwrap();
    let second: Vec<&str> = mtl_log.lines().nth(1).unwrap().split('\t').collect();
    assert_ne!(second[2], "-", "MTL run logs a morphology loss");

    let eval = |ckpt: &str, out: &Path| {
        ok(&[
            "evaluate",
            "--ckpt",
            ckpt,
            "--treebank",
            p(&test),
            "--no-timestamp",
            "--out",
            p(out),
        ]);
        std::fs::read_to_string(out).unwrap()
    };
    let lm_ckpt = dir.path().join("lm/best.ckpt");
    let a = eval(p(&lm_ckpt), &dir.path().join("a.tsv"));
    let b = eval(p(&lm_ckpt), &dir.path().join("b.tsv"));
    assert_eq!(a, b);
    assert!(a.contains("\ninflected\t") && a.contains("\nword\t0:"));
    // The run's own test report uses the same evaluation.
    let own = std::fs::read_to_string(dir.path().join("lm/test_report.tsv")).unwrap();
    assert_eq!(own.lines().nth(1).unwrap().split('\t').nth(3), a.lines().nth(1).unwrap().split('\t').nth(3));

    let m = eval(p(&dir.path().join("mtl/best.ckpt")), &dir.path().join("m.tsv"));
    assert!(m.starts_with("scope\t"));
    let table = ok(&[
        "compare",
        "--language",
        "synth",
        "--lm",
        p(&dir.path().join("a.tsv")),
        "--mtl",
        p(&dir.path().join("m.tsv")),
        "--treebank",
        p(&test),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "language\t%Infl\tscope\tLM\tMTL\tdelta");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("synth\t") && lines[1].contains("\ttotal\t"));

    // Timestamped output carries exactly one extra header line.
    let stamped = dir.path().join("s.tsv");
    ok(&["evaluate", "--ckpt", p(&lm_ckpt), "--treebank", p(&test), "--out", p(&stamped)]);
    let s = std::fs::read_to_string(&stamped).unwrap();
    assert!(s.starts_with("# created_unix\t"));
    assert_eq!(s.split_once('\n').unwrap().1, a);
}

#[test]
fn distant_regime_trains_on_separate_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let [train, _, _] = synth_data(dir.path());
    let lm_text = dir.path().join("lm.txt");
    ok(&["synth", "--chars", "6000", "--seed", "9", "--text", "--out", p(&lm_text)]);
    let dev_text = dir.path().join("dev.txt");
    ok(&["synth", "--chars", "1000", "--seed", "2", "--text", "--out", p(&dev_text)]);
    assert!(!std::fs::read_to_string(&lm_text).unwrap().contains('\t'));
    let cfg = write(
        dir.path(),
        "distant.cfg",
        &format!(
            "{TINY}regime = DISTANT\nlm_train = {}\nlm_dev = {}\ntreebank_train = {}\noutput_dir = out\n",
            p(&lm_text),
            p(&dev_text),
            p(&train)
        ),
    );
    ok(&["train", "--config", p(&cfg), "--no-timestamp"]);
    assert!(dir.path().join("out/best.ckpt").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let [train, dev, _] = synth_data(dir.path());
    let data = format!("treebank_train = {}\ntreebank_dev = {}\n", p(&train), p(&dev));
    let cases = [
        format!("{TINY}{data}regime = LM_ONLY\noutput_dir = o\nhiden_dim = 3\n"),
        format!("{TINY}{data}regime = SOMETHING\noutput_dir = o\n"),
        format!("{TINY}{data}regime = DISTANT\noutput_dir = o\n"),
        format!("{TINY}regime = LM_ONLY\ntreebank_train = nope.conllu\ntreebank_dev = {}\noutput_dir = o\n", p(&dev)),
        format!("{TINY}{data}regime = LM_ONLY\npatience = 9\noutput_dir = o\n"),
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("c{i}.cfg"), text);
        let out = morphclm(&["train", "--config", p(&cfg)]);
        assert_eq!(out.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!dir.path().join("o").exists(), "nothing is written for invalid configs");
}

#[test]
fn numerical_failure_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let [train, dev, _] = synth_data(dir.path());
    let cfg = write(
        dir.path(),
        "boom.cfg",
        &format!(
            "{TINY}regime = LM_ONLY\nlearning_rate = 1e38\ntreebank_train = {}\ntreebank_dev = {}\noutput_dir = o\n",
            p(&train),
            p(&dev)
        ),
    );
    let out = morphclm(&["train", "--config", p(&cfg)]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{err}");
    assert!(err.contains("epoch 1"), "{err}");
}

#[test]
fn evaluate_rejects_a_different_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let [train, dev, test] = synth_data(dir.path());
    let cfg = write(
        dir.path(),
        "lm.cfg",
        &format!(
            "{TINY}max_epochs = 1\npatience = 1\nregime = LM_ONLY\ntreebank_train = {}\ntreebank_dev = {}\noutput_dir = o\n",
            p(&train),
            p(&dev)
        ),
    );
    ok(&["train", "--config", p(&cfg)]);
    let other = write(dir.path(), "v.txt", "#morphclm-vocab v1\nq\n");
    let out = morphclm(&[
        "evaluate",
        "--ckpt",
        p(&dir.path().join("o/best.ckpt")),
        "--treebank",
        p(&test),
        "--vocab",
        p(&other),
        "--out",
        p(&dir.path().join("e.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    ok(&[
        "evaluate",
        "--ckpt",
        p(&dir.path().join("o/best.ckpt")),
        "--treebank",
        p(&test),
        "--vocab",
        p(&dir.path().join("o/vocab.txt")),
        "--carry-state",
        "--out",
        p(&dir.path().join("e.tsv")),
    ]);
}

#[test]
fn sweep_covers_the_twelve_cell_grid() {
    let dir = tempfile::tempdir().unwrap();
    let [train, dev, _] = synth_data(dir.path());
    let cfg = write(
        dir.path(),
        "sweep.cfg",
        &format!(
            "{TINY}embed_dim = 4\nhidden_dim = 6\nmax_epochs = 1\npatience = 1\nregime = FULLY_SUPERVISED\ntreebank_train = {}\ntreebank_dev = {}\noutput_dir = grid\n",
            p(&train),
            p(&dev)
        ),
    );
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_morphclm"))
            .args(["train", "--config", p(&cfg), "--sweep", "--no-timestamp"])
            .env("MORPHCLM_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(dir.path().join("grid/grid.tsv")).unwrap()
    };
    let grid = run("3");
    let rows: Vec<Vec<&str>> = grid.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 12);
    let selected: Vec<&Vec<&str>> = rows.iter().filter(|r| r[5] == "*").collect();
    assert_eq!(selected.len(), 1);
    let min = rows.iter().map(|r| r[3].parse::<f64>().unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(selected[0][3].parse::<f64>().unwrap(), min);
    assert!(dir.path().join("grid/best.ckpt").exists());
    assert!(dir.path().join("grid/l2_d1.5/train_log.tsv").exists());
    // Cells are independent, so the thread count does not matter.
    assert_eq!(run("1"), grid);
}
