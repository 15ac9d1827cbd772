use std::fs;
use std::path::{Path, PathBuf};

use lexcon::cli::run;

fn lexcon(args: &[&str]) -> i32 {
    run(std::iter::once("lexcon").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_value(path: &Path, key: &str) -> f64 {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    assert_eq!(lexcon(&["--help"]), 0);
    assert_eq!(lexcon(&[]), 1);
    assert_eq!(lexcon(&["translate", "--out", "x"]), 1);
    assert_eq!(lexcon(&["gen-toy", "--out", s(&out)]), 1, "seed is required");
    assert_eq!(lexcon(&["gen-toy", "--set", "seed=1", "--set", "toy.colour=red", "--out", s(&out)]), 1);
    assert_eq!(lexcon(&["gen-toy", "--set", "seed=1", "--set", "toy.sentences=x", "--out", s(&out)]), 1);
    let missing = dir.path().join("missing");
    assert_eq!(
        lexcon(&["learn-bpe", "--set", "seed=1", "--src", s(&missing), "--tgt", s(&missing), "--out", s(&out)]),
        2
    );
    assert_eq!(lexcon(&["evaluate", "--hyp", s(&missing), "--ref", s(&missing)]), 2);
}

struct Pipeline {
    root: PathBuf,
}

impl Pipeline {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn ok(&self, args: &[&str]) {
        assert_eq!(lexcon(args), 0, "{args:?}");
    }

    fn train(&self, out: &str) {
        let conf = self.p("run.conf");
        self.ok(&[
            "train", "--config", s(&conf),
            "--bpe", s(&self.p("bpe.txt")),
            "--src", s(&self.p("data/train.src")),
            "--tgt", s(&self.p("data/train.tgt")),
            "--constraints", s(&self.p("train.cons")),
            "--out", s(&self.p(out)),
        ]);
    }

    fn translate(&self, model: &str, cons: Option<&str>, decoder: &str, out: &str) {
        let (bpe, m, src, o) = (self.p("bpe.txt"), self.p(model), self.p("data/test.src"), self.p(out));
        let mut args = vec![
            "translate", "--bpe", s(&bpe), "--model", s(&m), "--src", s(&src),
            "--decoder", decoder, "--out", s(&o),
        ];
        let c = cons.map(|c| self.p(c));
        if let Some(c) = &c {
            args.extend(["--constraints", s(c)]);
        }
        self.ok(&args);
    }

    fn evaluate(&self, hyp: &str, cons: &str, out: &str) -> PathBuf {
        let (h, r, c, o) = (self.p(hyp), self.p("data/test.tgt"), self.p(cons), self.p(out));
        self.ok(&["evaluate", "--hyp", s(&h), "--ref", s(&r), "--constraints", s(&c), "--out", s(&o)]);
        self.p(&format!("{out}.report"))
    }
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let pl = Pipeline { root: dir.path().to_path_buf() };
    fs::write(
        pl.p("run.conf"),
        "seed = 7\ntoy.vocab_size = 40\ntoy.sentences = 300\ntoy.synonyms = 3\nbpe.merges = 200\n\
         train.stage1_steps = 20\ntrain.stage2_steps = 10\ntrain.log_interval = 5\n",
    )
    .unwrap();
    let conf = pl.p("run.conf");
    let data = pl.p("data");
    pl.ok(&["gen-toy", "--config", s(&conf), "--test-size", "40", "--out", s(&data)]);
    assert_eq!(fs::read_to_string(pl.p("data/test.src")).unwrap().lines().count(), 40);
    pl.ok(&[
        "learn-bpe", "--config", s(&conf),
        "--src", s(&pl.p("data/train.src")), "--tgt", s(&pl.p("data/train.tgt")),
        "--out", s(&pl.p("bpe.txt")),
    ]);
    for split in ["train", "test"] {
        pl.ok(&[
            "sample-constraints", "--config", s(&conf),
            "--src", s(&pl.p(&format!("data/{split}.src"))),
            "--tgt", s(&pl.p(&format!("data/{split}.tgt"))),
            "--align", s(&pl.p(&format!("data/{split}.align"))),
            "--out", s(&pl.p(&format!("{split}.cons"))),
        ]);
    }
    fs::write(pl.p("empty.cons"), "[]\n".repeat(40)).unwrap();

    pl.train("model");
    for f in ["model.ckpt", "vanilla.ckpt", "run.conf", "train_log.tsv"] {
        assert!(pl.p("model").join(f).exists(), "{f}");
    }
    pl.train("again");
    for f in ["model.ckpt", "vanilla.ckpt", "train_log.tsv"] {
        assert_eq!(fs::read(pl.p("model").join(f)).unwrap(), fs::read(pl.p("again").join(f)).unwrap(), "{f}");
    }

    pl.translate("model", None, "beam", "hyp.none");
    pl.translate("model", Some("empty.cons"), "beam", "hyp.empty");
    assert_eq!(fs::read(pl.p("hyp.none")).unwrap(), fs::read(pl.p("hyp.empty")).unwrap());
    assert_eq!(fs::read_to_string(pl.p("hyp.none")).unwrap().lines().count(), 40);

    pl.translate("model", Some("test.cons"), "vdba", "hyp.vdba");
    let rep = pl.evaluate("hyp.vdba", "test.cons", "vdba");
    assert_eq!(report_value(&rep, "csr"), 100.0);
    assert_eq!(
        fs::read_to_string(pl.p("vdba.details")).unwrap().lines().count(),
        40
    );

    fs::copy(pl.p("data/test.tgt"), pl.p("hyp.gold")).unwrap();
    let rep = pl.evaluate("hyp.gold", "test.cons", "gold");
    assert_eq!(report_value(&rep, "bleu"), 100.0);
    assert_eq!(report_value(&rep, "csr"), 100.0);

    let (h, r, c, m, b, src) = (
        pl.p("hyp.vdba"), pl.p("data/test.tgt"), pl.p("test.cons"), pl.p("model"), pl.p("bpe.txt"), pl.p("data/test.src"),
    );
    let o = pl.p("probs");
    pl.ok(&[
        "evaluate", "--hyp", s(&h), "--ref", s(&r), "--constraints", s(&c),
        "--model", s(&m), "--bpe", s(&b), "--src", s(&src), "--out", s(&o),
    ]);
    let all = report_value(&pl.p("probs.report"), "avg_prob_all");
    assert!(all > 0.0 && all < 1.0);

    pl.ok(&[
        "code-switch", "--config", s(&conf),
        "--src", s(&pl.p("data/train.src")), "--tgt", s(&pl.p("data/train.tgt")),
        "--constraints", s(&pl.p("train.cons")), "--out", s(&pl.p("cs")),
    ]);
    assert_eq!(
        fs::read_to_string(pl.p("cs.tgt")).unwrap().lines().count(),
        fs::read_to_string(pl.p("data/train.tgt")).unwrap().lines().count()
    );
}
