use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use figlm_core::corpus::{
    self, RawExample, SyntheticGrammar, TokenId, TokenMode, TokenSequence, Vocab, RESERVED,
};
use figlm_core::evaluation::{self, EvalReport};
use figlm_core::generation::{DecodeMode, GenerationRequest};
use figlm_core::training::{self, Corpora, SelfTrainMode, TrainConfig, Trainer};
use figlm_core::weighting::{self, AttributionFormat};
use figlm_core::LMParams;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{
    manifest, Ablation, Command, Common, DecodeArgs, FormatArg, ModeArg, SelfTrainArg,
    TokenModeArg, UsageError,
};

/// Training and inference run in 32-bit floats.
type P = LMParams<f32>;

const LABELLED: &str = "labelled.jsonl";
const UNLABELLED: &str = "unlabelled.jsonl";
const VOCAB: &str = "vocab.json";
const IDENTIFIER: &str = "identifier";
const GENERATOR: &str = "generator";
const SCORER: &str = "scorer.ckpt";
const CLASSIFIER: &str = "classifier.ckpt";
const CLASSIFIER_INFO: &str = "classifier.json";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            n_labelled,
            n_unlabelled,
            metaphor_rate,
            token_mode,
        } => {
            let mut c = base_config(&common)?;
            set(&mut c.corpus.n_labelled, n_labelled);
            set(&mut c.corpus.n_unlabelled, n_unlabelled);
            set(&mut c.corpus.grammar.metaphor_rate, metaphor_rate);
            set(
                &mut c.corpus.token_mode,
                token_mode.map(|m| match m {
                    TokenModeArg::Word => TokenMode::Word,
                    TokenModeArg::Char => TokenMode::Char,
                }),
            );
            synth(&finish(c)?, &common.out_dir)
        }
        Command::Train {
            common,
            self_train,
            ablate,
            ident_epochs,
            gen_epochs,
            st_epochs,
            max_st_iters,
            tau,
            lr,
            batch_size,
            labelled,
            unlabelled,
        } => {
            let mut c = base_config(&common)?;
            let t = &mut c.train;
            set(
                &mut t.self_train_mode,
                self_train.map(|m| match m {
                    SelfTrainArg::Off => SelfTrainMode::Off,
                    SelfTrainArg::Classic => SelfTrainMode::Classic,
                    SelfTrainArg::Soft => SelfTrainMode::Soft,
                }),
            );
            set(&mut t.ident_epochs, ident_epochs);
            set(&mut t.gen_epochs, gen_epochs);
            set(&mut t.st_epochs, st_epochs);
            set(&mut t.max_st_iters, max_st_iters);
            set(&mut t.tau, tau);
            set(&mut t.lr, lr);
            set(&mut t.batch_size, batch_size);
            match ablate {
                Some(Ablation::NoWeighting) => t.token_weighting = false,
                Some(Ablation::NoSelftrain) => t.self_train_mode = SelfTrainMode::Off,
                None => {}
            }
            if labelled.is_some() {
                c.paths.labelled = labelled;
            }
            if unlabelled.is_some() {
                c.paths.unlabelled = unlabelled;
            }
            train(&finish(c)?, &common.out_dir, ablate)
        }
        Command::Generate {
            common,
            target,
            targets_file,
            decode,
            ablate,
            output,
        } => {
            let mut c = base_config(&common)?;
            apply_decode(&mut c.generation, &decode);
            let c = finish(c)?;
            let targets = match (target, targets_file) {
                (Some(t), None) => vec![t],
                (None, Some(path)) => read_targets(&path)?,
                _ => bail!(UsageError("give exactly one of --target and --targets-file".into())),
            };
            let output = output.unwrap_or_else(|| format!("generations{}.jsonl", Ablation::suffix(ablate)));
            generate(&c, &common.out_dir, &targets, ablate, &output)
        }
        Command::Detect {
            common,
            input,
            checkpoint,
            output,
        } => {
            let c = finish(base_config(&common)?)?;
            let output = output.unwrap_or_else(|| "detect.jsonl".into());
            detect(&c, &common.out_dir, &input, checkpoint, &output)
        }
        Command::Visualize {
            common,
            sentence,
            target,
            format,
            checkpoint,
            output,
        } => {
            let c = finish(base_config(&common)?)?;
            let format = match format {
                FormatArg::Json => AttributionFormat::Json,
                FormatArg::Html => AttributionFormat::Html,
            };
            let output = output.unwrap_or_else(|| match format {
                AttributionFormat::Json => "attribution.json".into(),
                AttributionFormat::Html => "attribution.html".into(),
            });
            visualize(&c, &common.out_dir, &sentence, target, format, checkpoint, &output)
        }
        Command::Evaluate {
            common,
            ablate,
            targets_file,
            n_targets,
            scorer_epochs,
            classifier_epochs,
            decode,
        } => {
            let mut c = base_config(&common)?;
            set(&mut c.evaluation.n_targets, n_targets);
            set(&mut c.evaluation.scorer_epochs, scorer_epochs);
            set(&mut c.evaluation.classifier_epochs, classifier_epochs);
            apply_decode(&mut c.generation, &decode);
            evaluate(&finish(c)?, &common.out_dir, ablate, targets_file)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_decode(req: &mut GenerationRequest, d: &DecodeArgs) {
    set(&mut req.beam_size, d.beam_size);
    set(&mut req.k, d.k);
    set(&mut req.max_new_tokens, d.max_new_tokens);
    set(
        &mut req.mode,
        d.mode.map(|m| match m {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Beam => DecodeMode::Beam,
            ModeArg::Topk => DecodeMode::Topk,
        }),
    );
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    set(&mut c.seed, common.seed);
    Ok(c)
}

fn finish(mut c: RunConfig) -> Result<RunConfig> {
    c.propagate_seeds();
    c.validate()?;
    Ok(c)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_name(stem: &str, ablate: Option<Ablation>) -> String {
    format!("{stem}{}.ckpt", Ablation::suffix(ablate))
}

fn grammar(c: &RunConfig) -> Result<SyntheticGrammar> {
    Ok(SyntheticGrammar::new(c.corpus.grammar.clone())?)
}

fn synth(c: &RunConfig, out_dir: &Path) -> Result<()> {
    let g = grammar(c)?;
    let (labelled, unlabelled) = g.generate(c.corpus.n_labelled, c.corpus.n_unlabelled)?;
    let with_target = |v: Vec<RawExample>| -> Vec<RawExample> {
        v.into_iter()
            .map(|e| match g.extract_target(&e.text) {
                Some(t) => e.with_target(t),
                None => e,
            })
            .collect()
    };
    let labelled = with_target(labelled);
    let unlabelled = with_target(unlabelled);
    let all: Vec<RawExample> = labelled.iter().chain(&unlabelled).cloned().collect();
    let vocab = Vocab::build(&all, c.corpus.token_mode)?;
    create_dir(out_dir)?;
    corpus::write_jsonl(&out_dir.join(LABELLED), &labelled)?;
    corpus::write_jsonl(&out_dir.join(UNLABELLED), &unlabelled)?;
    vocab.save(&out_dir.join(VOCAB))?;
    manifest::record(out_dir, "synth", c, &[LABELLED, UNLABELLED, VOCAB])?;
    let report = json!({
        "labelled": corpus::stats(&labelled, c.corpus.token_mode),
        "unlabelled": corpus::stats(&unlabelled, c.corpus.token_mode),
        "vocab_size": vocab.len(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

struct Loaded {
    labelled: Vec<RawExample>,
    unlabelled: Vec<RawExample>,
    vocab: Vocab,
    /// Set when the vocabulary was built by this command.
    vocab_written: bool,
}

fn load_corpora(c: &RunConfig, out_dir: &Path) -> Result<Loaded> {
    let lpath = c.paths.labelled.clone().unwrap_or_else(|| out_dir.join(LABELLED));
    let upath = c.paths.unlabelled.clone().unwrap_or_else(|| out_dir.join(UNLABELLED));
    require(&lpath, "labelled corpus")?;
    require(&upath, "unlabelled corpus")?;
    let labelled = corpus::load_labelled(&lpath)?;
    let unlabelled = corpus::load_unlabelled(&upath)?;
    let vpath = out_dir.join(VOCAB);
    let (vocab, vocab_written) = if vpath.is_file() {
        (Vocab::load(&vpath)?, false)
    } else {
        let all: Vec<RawExample> = labelled.iter().chain(&unlabelled).cloned().collect();
        let vocab = Vocab::build(&all, c.corpus.token_mode)?;
        create_dir(out_dir)?;
        vocab.save(&vpath)?;
        (vocab, true)
    };
    Ok(Loaded {
        labelled,
        unlabelled,
        vocab,
        vocab_written,
    })
}

fn load_vocab(out_dir: &Path) -> Result<Vocab> {
    let path = out_dir.join(VOCAB);
    require(&path, "vocabulary")?;
    Ok(Vocab::load(&path)?)
}

fn load_params(path: &Path, vocab: &Vocab) -> Result<P> {
    require(path, "checkpoint")?;
    LMParams::load_for(path, vocab).with_context(|| format!("loading {}", path.display()))
}

/// Target of an example: its own `target` field, else the grammar's subject word.
fn target_of(g: &SyntheticGrammar, e: &RawExample) -> Option<String> {
    e.target.clone().or_else(|| g.extract_target(&e.text))
}

fn train(c: &RunConfig, out_dir: &Path, ablate: Option<Ablation>) -> Result<()> {
    let data = load_corpora(c, out_dir)?;
    let g = grammar(c)?;
    let encode = |v: &[RawExample]| -> Vec<TokenSequence> {
        training::encode_examples(&data.vocab, v, |e| target_of(&g, e))
    };
    let seqs = encode(&data.labelled);
    let (train, heldout) = corpus::split(&seqs, 1.0 - c.corpus.heldout_ratio, c.component_seed("split"))?;
    let corpora = Corpora {
        train,
        heldout,
        unlabelled: encode(&data.unlabelled),
    };
    let model = c.model.build(data.vocab.len(), c.component_seed("model"));
    let mut trainer = Trainer::new(P::init(model)?, c.train.clone())?;
    let ident_name = checkpoint_name(IDENTIFIER, ablate);
    let gen_name = checkpoint_name(GENERATOR, ablate);
    let report_name = format!("train_report{}.jsonl", Ablation::suffix(ablate));
    create_dir(out_dir)?;
    trainer.run_schedule_with(&corpora, |p| p.save(&out_dir.join(&ident_name), Some(&data.vocab)))?;
    trainer.params.save(&out_dir.join(&gen_name), Some(&data.vocab))?;
    let mut report = String::new();
    for line in trainer.reports() {
        report.push_str(&serde_json::to_string(line)?);
        report.push('\n');
    }
    write(out_dir, &report_name, &report)?;
    let mut written = vec![ident_name.as_str(), gen_name.as_str(), report_name.as_str()];
    if data.vocab_written {
        written.push(VOCAB);
    }
    manifest::record(out_dir, &format!("train{}", Ablation::suffix(ablate)), c, &written)?;
    print!("{report}");
    Ok(())
}

fn read_targets(path: &Path) -> Result<Vec<String>> {
    require(path, "targets file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let targets: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if targets.is_empty() {
        bail!("targets file {} has no targets", path.display());
    }
    Ok(targets)
}

fn generate(
    c: &RunConfig,
    out_dir: &Path,
    targets: &[String],
    ablate: Option<Ablation>,
    output: &str,
) -> Result<()> {
    let vocab = load_vocab(out_dir)?;
    let params = load_params(&out_dir.join(checkpoint_name(GENERATOR, ablate)), &vocab)?;
    let lines = evaluation::generate_for_targets(&params, &vocab, targets, &c.generation)?;
    let mut body = String::new();
    for l in &lines {
        body.push_str(&serde_json::to_string(l)?);
        body.push('\n');
    }
    write(out_dir, output, &body)?;
    manifest::record(out_dir, &format!("generate{}", Ablation::suffix(ablate)), c, &[output])?;
    println!("{} sentences for {} targets -> {}", lines.len(), targets.len(), out_dir.join(output).display());
    Ok(())
}

/// Metaphor probability of `text` in the prompted training layout.
fn score(params: &P, vocab: &Vocab, target: Option<&str>, text: &str) -> Result<(Vec<TokenId>, f64)> {
    let seq = vocab.encode_prompted(target, &RawExample::unlabelled(text));
    let p = params.sentence_meta_prob(&seq.ids)?;
    Ok((seq.ids, f64::from(p)))
}

fn detect(c: &RunConfig, out_dir: &Path, input: &Path, checkpoint: Option<PathBuf>, output: &str) -> Result<()> {
    require(input, "input")?;
    let vocab = load_vocab(out_dir)?;
    let params = load_params(&checkpoint.unwrap_or_else(|| out_dir.join(checkpoint_name(IDENTIFIER, None))), &vocab)?;
    let g = grammar(c)?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut body = String::new();
    let mut n = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut obj: serde_json::Map<String, Value> = serde_json::from_str(line)
            .with_context(|| format!("{} line {}: expected a JSON object", input.display(), i + 1))?;
        let sentence = obj
            .get("text")
            .and_then(Value::as_str)
            .with_context(|| format!("{} line {}: missing string field \"text\"", input.display(), i + 1))?
            .to_string();
        let target = match obj.get("target").and_then(Value::as_str) {
            Some(t) => Some(t.to_string()),
            None => g.extract_target(&sentence),
        };
        let (_, p) = score(&params, &vocab, target.as_deref(), &sentence)?;
        obj.insert("meta_prob".into(), json!(p));
        body.push_str(&serde_json::to_string(&obj)?);
        body.push('\n');
        n += 1;
    }
    create_dir(out_dir)?;
    write(out_dir, output, &body)?;
    manifest::record(out_dir, "detect", c, &[output])?;
    println!("{n} lines scored -> {}", out_dir.join(output).display());
    Ok(())
}

fn render_token(vocab: &Vocab, id: TokenId) -> String {
    match RESERVED.get(id) {
        Some(name) => (*name).to_string(),
        None => vocab.token(id).unwrap_or("<unk>").to_string(),
    }
}

fn visualize(
    c: &RunConfig,
    out_dir: &Path,
    sentence: &str,
    target: Option<String>,
    format: AttributionFormat,
    checkpoint: Option<PathBuf>,
    output: &str,
) -> Result<()> {
    let vocab = load_vocab(out_dir)?;
    let params = load_params(&checkpoint.unwrap_or_else(|| out_dir.join(checkpoint_name(IDENTIFIER, None))), &vocab)?;
    let target = target.or_else(|| grammar(c).ok().and_then(|g| g.extract_target(sentence)));
    let seq = vocab.encode_prompted(target.as_deref(), &RawExample::unlabelled(sentence));
    let profile = weighting::profile(&params, &seq.ids)?;
    let tokens: Vec<String> = seq.ids[1..].iter().map(|&id| render_token(&vocab, id)).collect();
    weighting::export_attribution(&profile, &tokens, &out_dir.join(output), format)?;
    manifest::record(out_dir, "visualize", c, &[output])?;
    println!("meta score {:.6} -> {}", profile.sentence_prob, out_dir.join(output).display());
    Ok(())
}

/// Scorer LM trained on every corpus text, cached in the run directory.
fn scorer(c: &RunConfig, out_dir: &Path, data: &Loaded, written: &mut Vec<&'static str>) -> Result<P> {
    let path = out_dir.join(SCORER);
    if path.is_file() {
        return load_params(&path, &data.vocab);
    }
    let seed = c.component_seed("scorer");
    let texts: Vec<Vec<TokenId>> = data
        .labelled
        .iter()
        .chain(&data.unlabelled)
        .map(|e| data.vocab.encode_sentence(&e.text))
        .collect();
    let config = TrainConfig {
        seed,
        self_train_mode: SelfTrainMode::Off,
        ..c.train.clone()
    };
    let mut trainer = Trainer::new(P::init(c.model.build(data.vocab.len(), seed))?, config)?;
    trainer.train_lm(&texts, c.evaluation.scorer_epochs)?;
    trainer.params.save(&path, Some(&data.vocab))?;
    written.push(SCORER);
    Ok(trainer.params)
}

/// Metaphor classifier trained on the labelled corpus, cached with its accuracy.
fn classifier(c: &RunConfig, out_dir: &Path, data: &Loaded, written: &mut Vec<&'static str>) -> Result<(P, f64)> {
    let path = out_dir.join(CLASSIFIER);
    let info = out_dir.join(CLASSIFIER_INFO);
    if path.is_file() && info.is_file() {
        let v: Value = serde_json::from_str(&fs::read_to_string(&info)?)
            .with_context(|| format!("parsing {}", info.display()))?;
        let accuracy = v["accuracy"]
            .as_f64()
            .with_context(|| format!("{} has no accuracy", info.display()))?;
        return Ok((load_params(&path, &data.vocab)?, accuracy));
    }
    let seed = c.component_seed("classifier");
    let config = TrainConfig {
        seed,
        ident_epochs: c.evaluation.classifier_epochs,
        self_train_mode: SelfTrainMode::Off,
        ..c.train.clone()
    };
    let clf = evaluation::train_meta_classifier::<f32>(
        &data.vocab,
        &data.labelled,
        c.model.build(data.vocab.len(), seed),
        &config,
        figlm_core::seed::derive(seed, "split"),
    )?;
    clf.params.save(&path, Some(&data.vocab))?;
    write(out_dir, CLASSIFIER_INFO, &(serde_json::to_string_pretty(&json!({"accuracy": clf.accuracy}))? + "\n"))?;
    written.extend([CLASSIFIER, CLASSIFIER_INFO]);
    Ok((clf.params, clf.accuracy))
}

fn evaluate(c: &RunConfig, out_dir: &Path, ablate: Option<Ablation>, targets_file: Option<PathBuf>) -> Result<()> {
    let data = load_corpora(c, out_dir)?;
    let generator = load_params(&out_dir.join(checkpoint_name(GENERATOR, ablate)), &data.vocab)?;
    let targets = match targets_file {
        Some(path) => read_targets(&path)?,
        None => {
            let g = grammar(c)?;
            let pool: BTreeSet<String> = data
                .labelled
                .iter()
                .chain(&data.unlabelled)
                .filter_map(|e| target_of(&g, e))
                .collect();
            let pool: Vec<String> = pool.into_iter().collect();
            if pool.is_empty() {
                bail!("no targets found in the corpora; pass --targets-file");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(c.component_seed("targets"));
            (0..c.evaluation.n_targets)
                .map(|_| pool.choose(&mut rng).expect("pool is non-empty").clone())
                .collect()
        }
    };
    let mut written: Vec<&'static str> = Vec::new();
    if data.vocab_written {
        written.push(VOCAB);
    }
    let scorer = scorer(c, out_dir, &data, &mut written)?;
    let (classifier, accuracy) = classifier(c, out_dir, &data, &mut written)?;
    let mut report: EvalReport =
        evaluation::evaluate_all(&generator, &scorer, &classifier, &data.vocab, &targets, &c.generation)?;
    report.config = json!({
        "ablation": Ablation::suffix(ablate).trim_start_matches('-'),
        "classifier_accuracy": accuracy,
        "n_targets": targets.len(),
        "run": c,
    });
    let name = format!("eval_report{}.json", Ablation::suffix(ablate));
    let body = serde_json::to_string_pretty(&report)? + "\n";
    write(out_dir, &name, &body)?;
    let mut names: Vec<&str> = written;
    names.push(&name);
    manifest::record(out_dir, &format!("evaluate{}", Ablation::suffix(ablate)), c, &names)?;
    print!("{body}");
    Ok(())
}
