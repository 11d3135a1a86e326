use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use repsnet::checkpoint;
use repsnet::data::synth::generate_records;
use repsnet::data::{
    cap_tokens, filter_min_occurrence, read_queries, read_records, write_jsonl, AnswerType, Dataset, Record, Split,
    SynthMode, SynthSpec, Vocab, MAX_QUESTION_TOKENS,
};
use repsnet::eval::evaluate;
use repsnet::retrieval::Neighbor;
use repsnet::{Config, Error, RepsNet, Result};

use crate::{require, Common};

fn apply_overrides(config: &mut Config, c: &Common) {
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(k) = c.k {
        config.k = k;
    }
    if let Some(beam) = c.beam {
        config.beam = beam;
    }
}

fn data_path(c: &Common, fallback: &str) -> Result<PathBuf> {
    match (&c.data, fallback) {
        (Some(p), _) => Ok(p.clone()),
        (None, "") => Err(Error::Config("no data file: pass --data or set it in the config".into())),
        (None, p) => Ok(PathBuf::from(p)),
    }
}

fn load_model(c: &Common) -> Result<RepsNet> {
    let mut model = checkpoint::load(require(&c.checkpoint, "checkpoint")?)?;
    apply_overrides(&mut model.config, c);
    model.config.validate()?;
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn train(c: &Common) -> Result<()> {
    let mut config = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    apply_overrides(&mut config, c);
    let data = data_path(c, &config.train_data)?;
    config.train_data = data.display().to_string();
    config.validate()?;
    let dir = require(&c.checkpoint, "checkpoint")?;

    let records = read_records(&data)?;
    let vocab = Vocab::build(records.iter().flat_map(Record::texts), 1)?;
    let mut train = Dataset::from_records(Split::Train, &records, &vocab)?;
    let answers = if train.iter().any(|s| s.answer_type() == AnswerType::Close) {
        let f = filter_min_occurrence(&train, &train, config.min_occurrence)?;
        if f.removed_train > 0 {
            eprintln!(
                "dropped {} train samples below min_occurrence = {}",
                f.removed_train, config.min_occurrence
            );
        }
        train = f.train;
        Some(f.answers)
    } else {
        None
    };

    let mut model = RepsNet::new(config, vocab, answers)?;
    let mut log = String::new();
    model.fit(&train, |stats| {
        let line = stats.log_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    if train.iter().any(|s| s.answer_type() == AnswerType::Open) {
        model.index = Some(model.build_index(&train)?);
    } else {
        eprintln!("no open-ended train samples; answer index not built");
    }
    checkpoint::save(&model, dir)?;
    let log_path = c.out.clone().unwrap_or_else(|| dir.join("metrics.log"));
    write_text(&log_path, &log)?;
    println!(
        "saved checkpoint to {} ({} parameters, {} samples, {} answers indexed)",
        dir.display(),
        model.params.numel(),
        train.len(),
        model.index.as_ref().map_or(0, |i| i.len())
    );
    Ok(())
}

pub fn eval(c: &Common) -> Result<()> {
    let model = load_model(c)?;
    let data = data_path(c, &model.config.eval_data)?;
    let ds = Dataset::from_records(Split::Eval, &read_records(&data)?, &model.vocab)?;
    let report = evaluate(&model, &ds)?;
    print!("{}", report.to_text(&model.vocab));
    let out = match &c.out {
        Some(p) => p.clone(),
        None => require(&c.checkpoint, "checkpoint")?.join("eval.json"),
    };
    let json = serde_json::to_string_pretty(&report.to_json()).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&out, &(json + "\n"))?;
    println!("wrote {}", out.display());
    Ok(())
}

struct Query {
    id: String,
    image: repsnet::encoder::ImageGrid,
    question: Vec<repsnet::data::TokenId>,
}

fn queries(c: &Common, model: &RepsNet) -> Result<Vec<Query>> {
    let path = data_path(c, &model.config.eval_data)?;
    read_queries(&path)?
        .iter()
        .map(|r| {
            Ok(Query {
                id: r.id.clone(),
                image: r.image_grid()?,
                question: cap_tokens(&model.vocab.encode(&r.question, true), MAX_QUESTION_TOKENS),
            })
        })
        .collect()
}

fn require_index(model: &RepsNet) -> Result<usize> {
    model
        .index
        .as_ref()
        .map(|i| i.len())
        .ok_or_else(|| Error::Contract("checkpoint has no answer index".into()))
}

fn neighbour_row(out: &mut String, rank: usize, n: &Neighbor, vocab: &Vocab) -> Result<()> {
    let text = vocab.decode(&n.tokens)?;
    writeln!(out, "  {rank}\t{:.6}\t{}\t{text}", n.score, n.id).expect("write to string");
    Ok(())
}

pub fn generate(c: &Common) -> Result<()> {
    let model = load_model(c)?;
    require_index(&model)?;
    let mut out = String::new();
    for q in queries(c, &model)? {
        let ans = model.infer_open(&q.image, &q.question)?;
        writeln!(out, "id: {}", q.id).expect("write to string");
        writeln!(out, "answer: {}", model.vocab.decode(&ans.tokens)?).expect("write to string");
        writeln!(out, "tokens: {}", ans.tokens.len()).expect("write to string");
        writeln!(out, "neighbours: {}", ans.neighbors.len()).expect("write to string");
        for (i, n) in ans.neighbors.iter().enumerate() {
            neighbour_row(&mut out, i + 1, n, &model.vocab)?;
        }
    }
    print!("{out}");
    if let Some(p) = &c.out {
        write_text(p, &out)?;
    }
    Ok(())
}

pub fn retrieve(c: &Common) -> Result<()> {
    let model = load_model(c)?;
    let size = require_index(&model)?;
    let k = model.config.k;
    if k < 1 {
        return Err(Error::Contract("retrieve needs k >= 1".into()));
    }
    if k > size {
        eprintln!("warning: k = {k} exceeds the index size {size}; returning all {size} rows");
    }
    let mut out = String::new();
    for q in queries(c, &model)? {
        let enc = model.encode(&q.image, &q.question)?;
        writeln!(out, "id: {}", q.id).expect("write to string");
        for (i, n) in model.retrieve(&enc, k)?.iter().enumerate() {
            neighbour_row(&mut out, i + 1, n, &model.vocab)?;
        }
    }
    print!("{out}");
    if let Some(p) = &c.out {
        write_text(p, &out)?;
    }
    Ok(())
}

pub fn synth(c: &Common, samples: usize, concepts: usize, mode: &str, findings: usize) -> Result<()> {
    let dir = require(&c.out, "out")?;
    let spec = SynthSpec {
        samples,
        concepts,
        mode: mode.parse::<SynthMode>()?,
        findings,
        ..SynthSpec::default()
    };
    let recs = generate_records(&spec, c.seed.unwrap_or(0))?;
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &recs.train)?;
    write_jsonl(&dir.join("eval.jsonl"), &recs.eval)?;
    println!(
        "wrote {} train and {} eval records to {}",
        recs.train.len(),
        recs.eval.len(),
        dir.display()
    );
    Ok(())
}
