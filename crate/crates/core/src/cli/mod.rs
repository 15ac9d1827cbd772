//! The `lexcon` command line: toy data, subword learning, constraint
//! sampling, code-switching, training, decoding and evaluation.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::constraints::{
    parse_constraint_file, read_constraint_records, write_constraint_file, ConstraintSet,
    RawConstraint,
};
use crate::datapipe::{
    code_switch_corpus, debpe_line, extract_phrase_pairs, gen_toy_corpus, learn_bpe,
    sample_constraints, seeded_rng, BpeModel, ParallelCorpus, PhrasePair, SentencePair, ToyConfig,
    MAX_PHRASE_LEN,
};
use crate::decoding::{translate_all, Decoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, prob_stats};
use crate::model::{Example, Model};
use crate::training::{load_checkpoint, save_checkpoint, Stage, Trainer};

pub use config::{parse_override, parse_pairs, RunConfig};

/// Name of the archived run configuration inside a model directory.
pub const RUN_CONFIG: &str = "run.conf";
/// Checkpoint after both stages.
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
/// Checkpoint after stage 1 only, the unconstrained baseline.
pub const VANILLA_CHECKPOINT: &str = "vanilla.ckpt";

#[derive(Parser, Debug)]
#[command(name = "lexcon", version, about = "Lexically constrained translation on a toy task")]
struct Cli {
    /// Accepted for reproducible scripts; every numeric path is single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy parallel corpus with alignments.
    GenToy {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for train.{src,tgt,align}, test.{src,tgt,align} and lexicon.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Held-out pairs generated beyond `toy.sentences`.
        #[arg(long, default_value_t = 200)]
        test_size: usize,
    },
    /// Learn a joint subword model on both sides of a corpus.
    LearnBpe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample up to three aligned phrase constraints per sentence.
    SampleConstraints {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace constraint targets in the target text by their source side.
    CodeSwitch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        constraints: PathBuf,
        /// Output prefix for PREFIX.src, PREFIX.tgt and PREFIX.cons.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training stages and write checkpoints into a model directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a source file, one detokenized hypothesis per line.
    Translate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bpe: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Checkpoint file name inside the model directory.
        #[arg(long, default_value = FINAL_CHECKPOINT)]
        checkpoint: String,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long, value_parser = ["beam", "vdba"])]
        decoder: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses: BLEU, CSR and, given a model, gold-token probabilities.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Model directory for probability statistics; needs --bpe and --src.
        #[arg(long, requires_all = ["bpe", "src"])]
        model: Option<PathBuf>,
        #[arg(long, default_value = FINAL_CHECKPOINT)]
        checkpoint: String,
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long)]
        src: Option<PathBuf>,
        /// Prefix for PREFIX.report and PREFIX.details.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one subcommand. Returns 0 on success, 1 on a usage or configuration
/// error and 2 when input data is missing or malformed.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn load_config(args: &ConfigArgs, base: Option<&Path>) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    for p in base.into_iter().chain(args.config.as_deref()) {
        pairs.extend(parse_pairs(&read(p)?)?);
    }
    for o in &args.overrides {
        pairs.push(parse_override(o)?);
    }
    RunConfig::from_pairs(&pairs)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?.lines().map(String::from).collect())
}

fn words(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy { cfg, out, test_size } => {
            let rc = load_config(&cfg, None)?;
            gen_toy(&rc, &out, test_size)
        }
        Command::LearnBpe { cfg, src, tgt, out } => {
            let rc = load_config(&cfg, None)?;
            let text = [read(&src)?, read(&tgt)?];
            let bpe = learn_bpe(text.iter().flat_map(|t| t.lines()), rc.bpe_merges)?;
            log::info!("{} merges, vocabulary {}", bpe.merges().len(), bpe.vocab().len());
            bpe.save(&out)
        }
        Command::SampleConstraints { cfg, src, tgt, align, out } => {
            let rc = load_config(&cfg, None)?;
            let corpus = ParallelCorpus::load(&src, &tgt, Some(&align))?;
            let links = corpus.links.as_ref().expect("loaded with alignments");
            let records: Vec<Vec<RawConstraint>> = corpus
                .pairs
                .iter()
                .zip(links)
                .enumerate()
                .map(|(i, (p, l))| {
                    let phrases = extract_phrase_pairs(p, l, MAX_PHRASE_LEN);
                    let picked = sample_constraints(&phrases, &mut seeded_rng(rc.seed, i as u64));
                    picked.iter().map(RawConstraint::from).collect()
                })
                .collect();
            write_constraint_file(&out, &records)
        }
        Command::CodeSwitch { cfg, src, tgt, constraints, out } => {
            let rc = load_config(&cfg, None)?;
            code_switch(&rc, &src, &tgt, &constraints, &out)
        }
        Command::Train { cfg, bpe, src, tgt, constraints, out } => {
            let rc = load_config(&cfg, None)?;
            train(rc, &bpe, &src, &tgt, &constraints, &out)
        }
        Command::Translate { cfg, bpe, model, checkpoint, src, constraints, decoder, out } => {
            let mut rc = load_config(&cfg, Some(&model.join(RUN_CONFIG)))?;
            if let Some(d) = decoder {
                rc.decode.decoder = d.parse::<Decoder>()?;
            }
            let bpe = BpeModel::load(&bpe)?;
            let m = load_model(&rc, &bpe, &model, &checkpoint)?;
            let sources: Vec<Vec<usize>> = lines(&src)?.iter().map(|l| bpe.encode(l)).collect();
            let sets = read_sets(constraints.as_deref(), &bpe, sources.len())?;
            let inf = m.inference()?.with_word_pieces(bpe.continuation_mask());
            let outputs = translate_all(&inf, &sources, &sets, &rc.decode)?;
            let incomplete = outputs.iter().filter(|o| o.incomplete).count();
            if incomplete > 0 {
                log::warn!("{incomplete} hypotheses did not finish");
            }
            let mut text = String::new();
            for o in &outputs {
                text.push_str(&debpe_line(&bpe.vocab().tokens_for(o.best.content())));
                text.push('\n');
            }
            write(&out, &text)
        }
        Command::Evaluate { hyp, reference, constraints, model, checkpoint, bpe, src, out } => {
            let hyps: Vec<Vec<String>> = lines(&hyp)?.iter().map(|l| words(l)).collect();
            let refs: Vec<Vec<String>> = lines(&reference)?.iter().map(|l| words(l)).collect();
            let cons: Vec<Vec<Vec<String>>> = match &constraints {
                Some(p) => {
                    let recs = read_constraint_records(p)?;
                    if recs.is_empty() {
                        vec![Vec::new(); hyps.len()]
                    } else {
                        recs.iter()
                            .map(|r| r.iter().map(|c| words(&c.tgt)).collect())
                            .collect()
                    }
                }
                None => vec![Vec::new(); hyps.len()],
            };
            let probs = match (model, bpe, src) {
                (Some(dir), Some(bpe), Some(src)) => {
                    let rc = load_config(&ConfigArgs::default(), Some(&dir.join(RUN_CONFIG)))?;
                    let bpe = BpeModel::load(&bpe)?;
                    let m = load_model(&rc, &bpe, &dir, &checkpoint)?;
                    let sources = lines(&src)?;
                    let ref_lines = lines(&reference)?;
                    let sets = read_sets(constraints.as_deref(), &bpe, sources.len())?;
                    if ref_lines.len() != sources.len() {
                        return Err(Error::Format(format!(
                            "{} sources but {} references",
                            sources.len(),
                            ref_lines.len()
                        )));
                    }
                    let examples: Vec<Example> = sources
                        .iter()
                        .zip(&ref_lines)
                        .zip(sets)
                        .map(|((s, t), c)| Example {
                            source: bpe.encode(s),
                            target: bpe.encode(t),
                            constraints: c,
                        })
                        .collect();
                    Some(prob_stats(&m, &examples, 50)?)
                }
                _ => None,
            };
            let report = evaluate(&hyps, &refs, &cons, probs)?;
            print!("{}", report.summary());
            if let Some(prefix) = out {
                write(&with_suffix(&prefix, "report"), &report.summary())?;
                write(&with_suffix(&prefix, "details"), &report.details())?;
            }
            Ok(())
        }
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Constraint sets for `n` sentences; an absent or empty file means none.
fn read_sets(path: Option<&Path>, bpe: &BpeModel, n: usize) -> Result<Vec<ConstraintSet>> {
    let sets = match path {
        Some(p) => parse_constraint_file(p, bpe)?,
        None => Vec::new(),
    };
    if sets.is_empty() {
        return Ok(vec![ConstraintSet::empty(); n]);
    }
    if sets.len() != n {
        return Err(Error::Format(format!(
            "{} constraint lines for {n} sentences",
            sets.len()
        )));
    }
    Ok(sets)
}

fn load_model(rc: &RunConfig, bpe: &BpeModel, dir: &Path, name: &str) -> Result<Model> {
    let mut cfg = rc.model.clone();
    cfg.vocab_size = bpe.vocab().len();
    load_checkpoint(&dir.join(name))?.model(cfg)
}

fn gen_toy(rc: &RunConfig, out: &Path, test_size: usize) -> Result<()> {
    let toy = gen_toy_corpus(&ToyConfig {
        sentences: rc.toy.sentences + test_size,
        ..rc.toy.clone()
    })?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (pairs, links) = (&toy.corpus.pairs, toy.corpus.links.as_ref().expect("toy links"));
    let n = rc.toy.sentences;
    for (name, range) in [("train", 0..n), ("test", n..pairs.len())] {
        let part = ParallelCorpus {
            pairs: pairs[range.clone()].to_vec(),
            links: Some(links[range].to_vec()),
        };
        part.save(
            &out.join(format!("{name}.src")),
            &out.join(format!("{name}.tgt")),
            Some(&out.join(format!("{name}.align"))),
        )?;
    }
    let mut lex = String::new();
    for (s, ts) in &toy.lexicon {
        lex.push_str(&format!("{s}\t{}\n", ts.join(" ")));
    }
    write(&out.join("lexicon.tsv"), &lex)
}

fn occurrences<'a>(hay: &'a [String], needle: &'a [String]) -> impl Iterator<Item = (usize, usize)> + 'a {
    let n = needle.len();
    (0..(hay.len() + 1).saturating_sub(n))
        .filter(move |&i| n > 0 && hay[i..i + n] == *needle)
        .map(move |i| (i, i + n - 1))
}

/// Places every constraint on pairwise disjoint source and target spans,
/// preferring earlier occurrences.
fn place(pair: &SentencePair, cons: &[(Vec<String>, Vec<String>)], placed: &mut Vec<PhrasePair>) -> bool {
    let Some((s, t)) = cons.get(placed.len()) else {
        return true;
    };
    let clear = |span: (usize, usize), side: fn(&PhrasePair) -> (usize, usize)| {
        placed.iter().all(|p| span.1 < side(p).0 || side(p).1 < span.0)
    };
    let spans: Vec<_> = occurrences(&pair.source, s)
        .filter(|&a| clear(a, |p| p.source_span))
        .flat_map(|a| occurrences(&pair.target, t).map(move |b| (a, b)))
        .filter(|&(_, b)| clear(b, |p| p.target_span))
        .collect();
    for (a, b) in spans {
        placed.push(PhrasePair {
            source_span: a,
            target_span: b,
            source: s.clone(),
            target: t.clone(),
        });
        if place(pair, cons, placed) {
            return true;
        }
        placed.pop();
    }
    false
}

fn code_switch(rc: &RunConfig, src: &Path, tgt: &Path, cons: &Path, out: &Path) -> Result<()> {
    let corpus = ParallelCorpus::load(src, tgt, None)?;
    let records = read_constraint_records(cons)?;
    if records.len() != corpus.len() {
        return Err(Error::Format(format!(
            "{} constraint lines for {} sentence pairs",
            records.len(),
            corpus.len()
        )));
    }
    let mut phrases = Vec::with_capacity(records.len());
    for (i, (pair, rec)) in corpus.pairs.iter().zip(&records).enumerate() {
        let cons: Vec<_> = rec.iter().map(|r| (words(&r.src), words(&r.tgt))).collect();
        let mut ps = Vec::with_capacity(cons.len());
        if !place(pair, &cons, &mut ps) {
            return Err(Error::Format(format!(
                "sentence {i}: constraints {rec:?} do not occur disjointly in the pair"
            )));
        }
        phrases.push(ps);
    }
    let cs = code_switch_corpus(&corpus, &phrases, rc.seed, rc.switch_prob)?;
    log::info!("switched {} of {} constraints", cs.switched, cs.total);
    cs.corpus
        .save(&with_suffix(out, "src"), &with_suffix(out, "tgt"), None)?;
    let recs: Vec<Vec<RawConstraint>> = cs
        .constraints
        .iter()
        .map(|ps| ps.iter().map(RawConstraint::from).collect())
        .collect();
    write_constraint_file(&with_suffix(out, "cons"), &recs)
}

fn train(rc: RunConfig, bpe: &Path, src: &Path, tgt: &Path, cons: &Path, out: &Path) -> Result<()> {
    let bpe = BpeModel::load(bpe)?;
    let corpus = ParallelCorpus::load(src, tgt, None)?;
    let sets = read_sets(Some(cons), &bpe, corpus.len())?;
    let examples: Vec<Example> = corpus
        .pairs
        .iter()
        .zip(sets)
        .map(|(p, c)| Example {
            source: bpe.encode(&p.source_line()),
            target: bpe.encode(&p.target_line()),
            constraints: c,
        })
        .collect();
    let mut cfg = rc.model.clone();
    cfg.vocab_size = bpe.vocab().len();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(RUN_CONFIG), &rc.to_text())?;
    let mut t = Trainer::new(Model::new(cfg, rc.seed)?, rc.train.clone())?;
    t.run_stage(&examples, Stage::One, rc.train.stage1_steps)?;
    save_checkpoint(&out.join(VANILLA_CHECKPOINT), &t.model, Some(&t.adam), t.step)?;
    t.run_stage(&examples, Stage::Two, rc.train.stage2_steps)?;
    save_checkpoint(&out.join(FINAL_CHECKPOINT), &t.model, Some(&t.adam), t.step)?;
    let log_path = out.join("train_log.tsv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    t.log
        .write_tsv(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(&log_path, e))
}
