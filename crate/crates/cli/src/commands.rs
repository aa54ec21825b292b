use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use gramlm::corpus::{build_vocab as build_fine_vocab, count_ngrams_parallel, ingest, read_utf8, subword_tokenize, tokenize_words, FineVocab, TokenizeConfig};
use gramlm::lexicon::{extract_lexicon as extract, JointVocab, LexiconConfig, NGramLexicon};
use gramlm::maskplan::{make_plans, parse_plan_file, write_plan_file, AttnMask, MaskPlan, Objective, PlanConfig};
use gramlm::model::checkpoint::Checkpoint;
use gramlm::model::{encode, export_finetune_weights, no_dropout, Activations, FineTuneParams, ModelParams};
use gramlm::segmenter::extract_boundaries;
use gramlm::train::{eval_ngram_ppl, TrainConfig, Trainer};
use gramlm::Error;

use crate::provenance::Provenance;
use crate::{CorpusArgs, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Numeric(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn parse_order_k(s: &str) -> std::result::Result<(usize, usize), String> {
    let (l, k) = s.split_once('=').ok_or("expected ORDER=K")?;
    let l: usize = l.parse().map_err(|_| format!("bad order {l:?}"))?;
    let k: usize = k.parse().map_err(|_| format!("bad k {k:?}"))?;
    if l < 2 {
        return Err("orders start at 2".into());
    }
    Ok((l, k))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn tokenize_config(c: &CorpusArgs) -> TokenizeConfig {
    TokenizeConfig {
        lowercase: !c.no_lowercase,
        doc_per_line: !c.paragraphs,
    }
}

fn corpus_settings(c: &CorpusArgs) -> Value {
    json!({"lowercase": !c.no_lowercase, "paragraphs": c.paragraphs})
}

fn load_lexicon(path: &Path) -> Result<NGramLexicon> {
    Ok(NGramLexicon::parse_tsv(&read_utf8(path)?)?)
}

#[allow(clippy::too_many_arguments)]
pub fn extract_lexicon(
    corpus: &CorpusArgs,
    k2: usize,
    k3: usize,
    extra: &[(usize, usize)],
    min_count: u64,
    shard_size: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if shard_size == 0 {
        return Err(CliError::Usage("--shard-size must be positive".into()));
    }
    let mut k = BTreeMap::from([(2, k2), (3, k3)]);
    k.extend(extra.iter().copied());
    let config = LexiconConfig { k, min_count };
    let settings = json!({"lexicon": config.describe(), "corpus": corpus_settings(corpus)});
    let inputs: Vec<&Path> = corpus.corpus.iter().map(|p| p.as_path()).collect();
    let prov = Provenance::new("extract-lexicon", seed, &settings, &inputs)?;
    let stream = ingest(&corpus.corpus, &tokenize_config(corpus))?;
    let counts = count_ngrams_parallel(&stream, config.max_order(), shard_size)?;
    let lexicon = extract(&counts, &config)?;
    log::info!("{} n-grams kept from {} words", lexicon.len(), stream.num_words());
    write_file(out, lexicon.to_tsv(&format!("{} {}", prov.line(), config.describe())).as_bytes())
}

pub fn build_vocab(
    corpus: &CorpusArgs,
    min_count: u64,
    max_size: usize,
    max_query: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if max_query == 0 {
        return Err(CliError::Usage("--max-query must be at least 1".into()));
    }
    let settings = json!({
        "min_count": min_count,
        "max_size": max_size,
        "max_query": max_query,
        "corpus": corpus_settings(corpus),
    });
    let inputs: Vec<&Path> = corpus.corpus.iter().map(|p| p.as_path()).collect();
    let prov = Provenance::new("build-vocab", seed, &settings, &inputs)?;
    let stream = ingest(&corpus.corpus, &tokenize_config(corpus))?;
    let vocab = build_fine_vocab(&stream, min_count, max_size, max_query)?;
    write_file(out, vocab.to_file_string_with_header(&prov.line()).as_bytes())
}

pub fn segment(corpus: &CorpusArgs, lexicon: &Path, seed: u64, out: &Path) -> Result<()> {
    let mut inputs: Vec<&Path> = corpus.corpus.iter().map(|p| p.as_path()).collect();
    inputs.push(lexicon);
    let prov = Provenance::new("segment", seed, &corpus_settings(corpus), &inputs)?;
    let lex = load_lexicon(lexicon)?;
    let stream = ingest(&corpus.corpus, &tokenize_config(corpus))?;
    let mut text = format!("# {}\n", prov.line());
    for doc in &stream.documents {
        let b = extract_boundaries(doc, &lex);
        let segs: Vec<String> = b.segments().map(|r| doc[r].join(" ")).collect();
        text.push_str(&segs.join(" | "));
        text.push('\n');
    }
    write_file(out, text.as_bytes())
}

pub struct MaskArgs<'a> {
    pub corpus: &'a CorpusArgs,
    pub lexicon: &'a Path,
    pub vocab: &'a Path,
    pub objective: Objective,
    pub rate: f64,
    pub max_query: Option<usize>,
    pub max_len: usize,
    pub seed: u64,
    pub out: &'a Path,
    pub dump_json: Option<&'a Path>,
}

/// Plan-file header: provenance plus what a model needs to read the ids.
fn plan_header(prov: &Provenance, objective: Objective, jv: &JointVocab, config: &PlanConfig) -> Value {
    json!({
        "provenance": prov.json(),
        "objective": objective.name(),
        "fine_vocab": jv.fine_len(),
        "ngram_vocab": jv.ngrams.len(),
        "max_query": config.max_query,
        "rate": config.rate,
        "max_len": config.max_len,
    })
}

fn dump_plan(plan: &MaskPlan, jv: &JointVocab) -> Value {
    let surface = |ids: &[u32]| -> Vec<String> {
        ids.iter()
            .map(|&i| jv.surface(i).unwrap_or_else(|| format!("<{i}>")))
            .collect()
    };
    let mut v = serde_json::to_value(plan).expect("serializable plan");
    v["context_tokens"] = json!(surface(&plan.context_ids));
    v["query_tokens"] = json!(surface(&plan.query_ids));
    v
}

pub fn make_masks(a: MaskArgs<'_>) -> Result<()> {
    if !(a.rate > 0.0 && a.rate < 1.0) {
        return Err(CliError::Usage(format!("--rate must lie in (0, 1), got {}", a.rate)));
    }
    let fine = FineVocab::load(a.vocab)?;
    let lex = load_lexicon(a.lexicon)?;
    if a.objective.uses_ngram_identities() && lex.is_empty() {
        return Err(Error::Config(format!(
            "objective {} needs n-gram identities but the lexicon is empty",
            a.objective.name()
        ))
        .into());
    }
    let max_query = a.max_query.unwrap_or(fine.max_query());
    if max_query > fine.max_query() {
        return Err(Error::Config(format!(
            "max query {max_query} exceeds the vocabulary's {} query symbols",
            fine.max_query()
        ))
        .into());
    }
    let config = PlanConfig {
        rate: a.rate,
        max_query,
        max_len: a.max_len,
    };
    let settings = json!({
        "objective": a.objective.name(),
        "rate": a.rate,
        "max_query": max_query,
        "max_len": a.max_len,
        "corpus": corpus_settings(a.corpus),
    });
    let mut inputs: Vec<&Path> = a.corpus.corpus.iter().map(|p| p.as_path()).collect();
    inputs.extend([a.lexicon, a.vocab]);
    let prov = Provenance::new("make-masks", a.seed, &settings, &inputs)?;
    let jv = JointVocab::new(fine, lex);
    let stream = ingest(&a.corpus.corpus, &tokenize_config(a.corpus))?;
    let plans = make_plans(&stream.documents, a.objective, &jv, &config, a.seed)?;
    let header = plan_header(&prov, a.objective, &jv, &config);
    let mut w = create(a.out)?;
    write_plan_file(&mut w, &header.to_string(), &plans)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(a.out, e))?;
    if let Some(path) = a.dump_json {
        let dump = json!({
            "header": header,
            "plans": plans.iter().map(|p| dump_plan(p, &jv)).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&dump).expect("serializable dump");
        write_file(path, text.as_bytes())?;
    }
    log::info!("{} plans written", plans.len());
    Ok(())
}

struct PlanFile {
    header: Value,
    plans: Vec<MaskPlan>,
}

fn read_plans(path: &Path) -> Result<PlanFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, plans) = parse_plan_file(&bytes)?;
    let header: Value = serde_json::from_str(&header)
        .map_err(|e| Error::Config(format!("{}: plan header is not JSON: {e}", path.display())))?;
    Ok(PlanFile { header, plans })
}

fn header_usize(h: &Value, key: &str) -> Result<usize> {
    h.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Config(format!("plan header lacks {key}")).into())
}

fn header_objective(h: &Value) -> Result<Objective> {
    h.get("objective")
        .and_then(Value::as_str)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config("plan header lacks objective".into()).into())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = read_plans(&a.plans)?;
    let objective = header_objective(&file.header)?;
    let mut config = match &a.config {
        Some(p) => {
            let text = read_utf8(p)?;
            let config = TrainConfig::from_toml(&text)?;
            let explicit_objective = text
                .parse::<toml::Table>()
                .map(|t| t.contains_key("objective"))
                .unwrap_or(false);
            if explicit_objective && config.objective != objective {
                return Err(Error::Config(format!(
                    "config objective {} does not match plan objective {}",
                    config.objective.name(),
                    objective.name()
                ))
                .into());
            }
            config
        }
        None => TrainConfig::default(),
    };
    config.objective = objective;
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.warmup_steps {
        config.warmup_steps = v;
    }
    if let Some(v) = a.rtd_weight {
        config.loss.rtd = v;
    }
    if let Some(v) = a.keep_mask_prob {
        config.loss.keep_mask_prob = v;
    }
    config.deterministic |= a.deterministic;
    config.model.fine_vocab = header_usize(&file.header, "fine_vocab")?;
    config.model.ngram_vocab = header_usize(&file.header, "ngram_vocab")?;
    config.model.max_query = header_usize(&file.header, "max_query")?;
    let longest = file.plans.iter().flat_map(|p| p.positions.iter()).copied().max().unwrap_or(0);
    if longest as usize > config.model.max_positions {
        return Err(Error::Config(format!(
            "plans reach position {longest} but the model has {} positions",
            config.model.max_positions
        ))
        .into());
    }
    config.validate()?;

    let threads = if config.deterministic { 1 } else { a.threads };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }

    let mut inputs: Vec<&Path> = vec![&a.plans];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.resume.as_deref());
    let prov = Provenance::new("train", config.seed, &config, &inputs)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&Checkpoint::<f32>::load(path)?, Some(config))?,
        None => {
            let params = ModelParams::init(&config.model, config.seed)?;
            Trainer::new(config, params)?
        }
    };
    let mut log = create(&a.log)?;
    let line = json!({"provenance": prov.json()}).to_string();
    writeln!(log, "{line}").map_err(|e| Error::io(&a.log, e))?;
    let outcome = trainer.run(&file.plans, &mut log, a.checkpoint_dir.as_deref());
    log.flush().map_err(|e| Error::io(&a.log, e))?;
    if let Err(e @ Error::Numeric(_)) = &outcome {
        if a.checkpoint_dir.is_none() {
            let path = a.out.with_extension("diagnostic.ckpt");
            trainer.checkpoint().save(&path)?;
            eprintln!("gramlm: {e}; diagnostic checkpoint at {}", path.display());
        }
    }
    outcome?;
    let mut ck = trainer.checkpoint();
    ck.meta["provenance"] = prov.json();
    ck.save(&a.out)?;
    Ok(())
}

fn load_full(path: &Path) -> Result<ModelParams<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    if ck.meta.get("kind").and_then(Value::as_str) == Some("finetune") {
        return Err(Error::Config(format!(
            "{} is an exported checkpoint without prediction heads",
            path.display()
        ))
        .into());
    }
    Ok(ck.to_params()?)
}

pub fn eval_ppl(checkpoint: &Path, plans: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let prov = Provenance::new("eval-ppl", seed, &json!({}), &[checkpoint, plans])?;
    let params = load_full(checkpoint)?;
    let file = read_plans(plans)?;
    let fine = header_usize(&file.header, "fine_vocab")?;
    let ngram = header_usize(&file.header, "ngram_vocab")?;
    if fine != params.config.fine_vocab || ngram != params.config.ngram_vocab {
        return Err(Error::Config(format!(
            "plans use vocabularies {fine}+{ngram}, checkpoint {}+{}",
            params.config.fine_vocab, params.config.ngram_vocab
        ))
        .into());
    }
    let ppl = eval_ngram_ppl(&params, &file.plans)?;
    let spans: usize = file.plans.iter().map(|p| p.spans.len()).sum();
    let result = json!({
        "provenance": prov.json(),
        "objective": file.header.get("objective"),
        "ppl": ppl,
        "spans": spans,
        "plans": file.plans.len(),
    });
    let text = format!("{result}\n");
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn export(checkpoint: &Path, seed: u64, out: &Path) -> Result<()> {
    let prov = Provenance::new("export", seed, &json!({}), &[checkpoint])?;
    let params = load_full(checkpoint)?;
    let exported = export_finetune_weights(&params);
    exported.to_checkpoint(json!({"provenance": prov.json()})).save(out)?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn inspect_attention(
    checkpoint: &Path,
    vocab: &Path,
    text: Option<String>,
    input: Option<&Path>,
    lowercase: bool,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let text = match (text, input) {
        (Some(t), _) => t,
        (None, Some(p)) => read_utf8(p)?,
        (None, None) => return Err(CliError::Usage("give --text or --input".into())),
    };
    let mut inputs = vec![checkpoint, vocab];
    inputs.extend(input);
    let prov = Provenance::new("inspect-attention", seed, &json!({"text": text, "lowercase": lowercase}), &inputs)?;
    let vocab = FineVocab::load(vocab)?;
    let words = tokenize_words(&text, lowercase);
    let ids = subword_tokenize(&words, &vocab).ids;
    if ids.is_empty() {
        return Err(Error::Argument("text has no tokens".into()).into());
    }
    let positions: Vec<u32> = (1..=ids.len() as u32).collect();
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let config = ck.config()?;
    if config.fine_vocab != vocab.len() {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.len(),
            config.fine_vocab
        ))
        .into());
    }
    let act: Activations<f32> = if ck.meta.get("kind").and_then(Value::as_str) == Some("finetune") {
        FineTuneParams::from_checkpoint(&ck)?.encode(&ids, &positions)?
    } else {
        let params = ck.to_params()?;
        encode(&params.encoder, &ids, &positions, AttnMask::new(ids.len(), 0), no_dropout())?
    };
    let heads = act.attention.last().expect("at least one layer");
    let n = ids.len();
    let tokens: Vec<String> = ids
        .iter()
        .map(|&i| csv_field(vocab.token(i).unwrap_or("[UNK]")))
        .collect();
    let mut csv = format!("# {}\ntoken,{}\n", prov.line(), tokens.join(","));
    for (r, tok) in tokens.iter().enumerate() {
        let row: Vec<String> = (0..n)
            .map(|c| {
                let mean = heads.iter().map(|h| h.at(r, c) as f64).sum::<f64>() / heads.len() as f64;
                format!("{mean:.8}")
            })
            .collect();
        csv.push_str(&format!("{tok},{}\n", row.join(",")));
    }
    write_file(out, csv.as_bytes())
}
