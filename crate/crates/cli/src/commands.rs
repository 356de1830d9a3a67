use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use swaplm_core::cluster::{kmeans, ClusterModel};
use swaplm_core::corpus::{build_vocab, encode, TokenSequence, Vocab};
use swaplm_core::embed::{train_sgns, EmbeddingTable, SgnsConfig};
use swaplm_core::flops::{self, FlopsOptions, GeneratorHead};
use swaplm_core::model::{HeadType, ModelConfig};
use swaplm_core::synth::{generate, SynthConfig};
use swaplm_core::train::{pretrain_to_dir, probe_hardness, Checkpoint, SlmAllSource};
use swaplm_core::{CountMatrix, Objective, Pretrainer, TrainConfig};

use crate::error::{CliError, Result};
use crate::keys::Settings;
use crate::manifest::{create_run_dir, RunManifest, CONFIG_FILE, MANIFEST_FILE};

/// One invocation: its resolved keys and, once started, its run directory.
pub struct Context {
    pub command: &'static str,
    pub settings: Settings,
}

impl Context {
    pub fn seed(&self) -> Result<u64> {
        self.settings.req("seed")
    }

    pub fn reference(&self) -> Result<bool> {
        self.settings.req("reference")
    }

    /// Path-valued key that must name an existing file.
    fn input(&self, key: &str) -> Result<PathBuf> {
        let p = self
            .settings
            .path(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))?;
        if !p.is_file() {
            return Err(CliError::MissingFile(p));
        }
        Ok(p)
    }

    fn optional_input(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.settings.get(key) {
            Some(_) => self.input(key).map(Some),
            None => Ok(None),
        }
    }

    /// Create the run directory and write the manifest. Called after input
    /// validation and before any computation.
    fn start(&self, inputs: &[PathBuf], artifacts: &[&str]) -> Result<PathBuf> {
        let manifest = RunManifest::new(self.command, &self.settings, inputs, artifacts)?;
        let out = self.settings.path("out").unwrap_or_else(|| PathBuf::from("runs"));
        let dir = create_run_dir(&out, manifest.seed)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest).expect("plain struct") + "\n",
        )?;
        fs::write(dir.join(CONFIG_FILE), self.settings.to_kv().to_text())?;
        println!("run directory: {}", dir.display());
        Ok(dir)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

/// Vocabulary plus its metadata sidecar, both hashed into the manifest.
fn vocab_inputs(path: &Path) -> Vec<PathBuf> {
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta");
    vec![path.to_path_buf(), PathBuf::from(meta)]
}

fn encode_corpus(vocab: &Vocab, lines: &[String]) -> Vec<TokenSequence> {
    lines.iter().map(|l| encode(vocab, l)).collect()
}

pub fn gen_corpus(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let cfg = SynthConfig {
        classes: s.req("classes")?,
        words_per_class: s.req("words_per_class")?,
        topics: s.req("topics")?,
        zipf_s: s.req("zipf_s")?,
        pool: s.req("pool")?,
        successors: s.req("successors")?,
        min_words: s.req("min_words")?,
        max_words: s.req("max_words")?,
        target_bytes: s.req("target_bytes")?,
        seed: ctx.seed()?,
    };
    let dir = ctx.start(&[], &["corpus.txt"])?;
    let docs = generate(&cfg)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("corpus.txt"))?);
    for d in &docs {
        writeln!(out, "{d}")?;
    }
    out.flush()?;
    println!("{} documents", docs.len());
    Ok(())
}

pub fn build_vocab_cmd(ctx: &Context) -> Result<()> {
    let corpus = ctx.input("corpus")?;
    let (max_size, min_freq) = (ctx.settings.req("max_size")?, ctx.settings.req("min_freq")?);
    let dir = ctx.start(std::slice::from_ref(&corpus), &["vocab.txt", "vocab.txt.meta"])?;
    let vocab = build_vocab(read_lines(&corpus)?, max_size, min_freq)?;
    vocab.save(&dir.join("vocab.txt"))?;
    println!("{} tokens", vocab.len());
    Ok(())
}

pub fn train_embeddings(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let corpus = ctx.input("corpus")?;
    let vocab_path = ctx.input("vocab")?;
    let cfg = SgnsConfig {
        dim: s.req("dim")?,
        window: s.req("window")?,
        negatives: s.req("negatives")?,
        epochs: s.req("epochs")?,
        lr: s.req("lr")?,
        seed: ctx.seed()?,
    };
    let vocab = Vocab::load(&vocab_path)?;
    let mut inputs = vec![corpus.clone()];
    inputs.extend(vocab_inputs(&vocab_path));
    let dir = ctx.start(&inputs, &["embeddings.txt"])?;
    let seqs = encode_corpus(&vocab, &read_lines(&corpus)?);
    let table = train_sgns(&seqs, &vocab, &cfg)?;
    table.save(&dir.join("embeddings.txt"))?;
    Ok(())
}

pub fn cluster(ctx: &Context) -> Result<()> {
    let emb_path = ctx.input("embeddings")?;
    let vocab_path = ctx.input("vocab")?;
    let n: usize = ctx.settings.req("clusters")?;
    let max_iter: usize = ctx.settings.req("max_iter")?;
    let table = EmbeddingTable::load(&emb_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let mut inputs = vec![emb_path];
    inputs.extend(vocab_inputs(&vocab_path));
    let dir = ctx.start(&inputs, &["clusters.txt"])?;
    let model = kmeans(&table, &vocab, n, max_iter, ctx.seed()?)?;
    model.save(&dir.join("clusters.txt"))?;
    println!("sse {:.6}", model.sse);
    Ok(())
}

fn parse_slm_all_source(v: &str) -> Result<SlmAllSource> {
    match v {
        "uniform" => Ok(SlmAllSource::Uniform),
        "generator" => Ok(SlmAllSource::Generator),
        _ => Err(CliError::Config(format!("bad value `{v}` for `slm_all_source`"))),
    }
}

/// Model and training configs from the scale preset plus any overrides.
pub fn pretrain_configs(
    s: &Settings,
    vocab_size: usize,
    seed: u64,
    reference: bool,
) -> Result<(ModelConfig, TrainConfig)> {
    let objective: Objective = s.req("objective")?;
    let scale: String = s.req("scale")?;
    let head: HeadType = s.opt("head")?.unwrap_or(objective.head());
    if head != objective.head() {
        return Err(swaplm_core::Error::HeadMismatch(format!(
            "{objective} trains a {} head, not {head}",
            objective.head()
        ))
        .into());
    }
    let steps: Option<usize> = s.opt("steps")?;
    let max_len: Option<usize> = s.opt("max_len")?;
    let (mut model, mut train) = match scale.as_str() {
        "desk" => {
            let len = max_len.unwrap_or(64);
            (
                ModelConfig::desk(vocab_size, len, head),
                TrainConfig::desk(objective, steps.unwrap_or(2000), len),
            )
        }
        "base" => {
            let mut t = TrainConfig::base(objective);
            if steps.is_some() || max_len.is_some() {
                let len = max_len.unwrap_or(128);
                let total = steps.unwrap_or(t.total_steps);
                t.total_steps = total;
                t.seq_len_schedule = vec![(total, len)];
            }
            (ModelConfig::base(vocab_size, head), t)
        }
        other => return Err(CliError::Config(format!("bad value `{other}` for `scale`"))),
    };
    macro_rules! set {
        ($target:expr, $key:literal) => {
            if let Some(v) = s.opt($key)? {
                $target = v;
            }
        };
    }
    set!(model.layers, "layers");
    set!(model.hidden, "hidden");
    set!(model.heads, "heads");
    set!(model.intermediate, "intermediate");
    set!(train.peak_lr, "peak_lr");
    set!(train.warmup_steps, "warmup_steps");
    set!(train.batch_size, "batch_size");
    set!(train.weight_decay, "weight_decay");
    set!(train.grad_clip, "grad_clip");
    set!(train.objective.replace_rate, "replace_rate");
    set!(train.log_every, "log_every");
    set!(train.checkpoint_every, "checkpoint_every");
    set!(train.eval_every, "eval_every");
    set!(train.held_out_frac, "held_out_frac");
    set!(train.disc_weight, "disc_weight");
    set!(train.gen_temperature, "gen_temperature");
    set!(train.crts_gamma, "crts_gamma");
    if let Some(v) = s.get("slm_all_source") {
        train.slm_all_source = parse_slm_all_source(v)?;
    }
    train.seed = seed;
    train.objective.seed = seed;
    train.wall_clock = !reference;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

pub fn pretrain(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let corpus = ctx.input("corpus")?;
    let vocab_path = ctx.input("vocab")?;
    let clusters_path = ctx.optional_input("clusters")?;
    let resume = ctx.optional_input("resume")?;
    let objective: Objective = s.req("objective")?;
    if objective == Objective::Crts && clusters_path.is_none() {
        return Err(swaplm_core::Error::MissingDependency("objective crts needs `clusters`".into()).into());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let (model_cfg, train_cfg) = pretrain_configs(s, vocab.len(), ctx.seed()?, ctx.reference()?)?;
    let clusters = clusters_path.as_deref().map(ClusterModel::load).transpose()?;
    // Only C-RTS consumes clusters; other runs ignore the file.
    let used_clusters = clusters.as_ref().filter(|_| objective == Objective::Crts);
    let seqs = encode_corpus(&vocab, &read_lines(&corpus)?);
    let checkpoint = resume.as_deref().map(Checkpoint::load).transpose()?;

    let mut trainer = match checkpoint {
        Some(ck) => {
            if ck.model.config != model_cfg || ck.train_config != train_cfg {
                return Err(swaplm_core::Error::CheckpointMismatch(
                    "resolved settings differ from the checkpointed run".into(),
                )
                .into());
            }
            Pretrainer::resume(ck, &seqs, &vocab, used_clusters)?
        }
        None => Pretrainer::new(&seqs, &vocab, model_cfg, None, train_cfg, used_clusters)?,
    };

    let mut inputs = vec![corpus];
    inputs.extend(vocab_inputs(&vocab_path));
    inputs.extend(clusters_path);
    inputs.extend(resume);
    let dir = ctx.start(
        &inputs,
        &["train_config.json", "metrics.jsonl", "final.ckpt", "eval.json"],
    )?;
    fs::write(
        dir.join("train_config.json"),
        serde_json::to_string_pretty(trainer.config()).expect("plain struct") + "\n",
    )?;
    pretrain_to_dir(&mut trainer, &dir)?;
    let eval = trainer.evaluate_held_out(1)?;
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&eval).expect("plain struct") + "\n",
    )?;
    if let Some(cm) = trainer.count_matrix() {
        cm.save(&dir.join("count_matrix.txt"))?;
    }
    println!(
        "step {} held-out loss {:.4} replaced accuracy {:.4}{}",
        trainer.step(),
        eval.loss,
        eval.replaced_accuracy,
        eval.balanced_accuracy
            .map_or(String::new(), |b| format!(" balanced accuracy {b:.4}"))
    );
    Ok(())
}

pub fn probe(ctx: &Context) -> Result<()> {
    let ck_path = ctx.input("checkpoint")?;
    let corpus = ctx.input("corpus")?;
    let vocab_path = ctx.input("vocab")?;
    let clusters_path = ctx.input("clusters")?;
    let passes: usize = ctx.settings.req("passes")?;
    let ck = Checkpoint::load(&ck_path)?;
    if ck.model.config.head_type != HeadType::Binary {
        return Err(swaplm_core::Error::HeadMismatch("probe needs a binary-head checkpoint".into()).into());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let clusters = ClusterModel::load(&clusters_path)?;
    let seqs = encode_corpus(&vocab, &read_lines(&corpus)?);
    let count_matrix = match &ck.count_matrix {
        Some(cm) => cm.clone(),
        None => CountMatrix::new(clusters.n(), ck.train_config.crts_gamma)?,
    };
    let trained_with_clusters = ck.count_matrix.is_some().then_some(&clusters);
    let model = ck.model.clone();
    let trainer = Pretrainer::resume(ck, &seqs, &vocab, trained_with_clusters)?;

    let mut inputs = vec![ck_path, corpus];
    inputs.extend(vocab_inputs(&vocab_path));
    inputs.push(clusters_path);
    let dir = ctx.start(&inputs, &["probe.json"])?;
    let report = probe_hardness(
        &model,
        &count_matrix,
        &clusters,
        &vocab,
        trainer.held_out(),
        passes,
        ctx.seed()?,
    )?;
    fs::write(
        dir.join("probe.json"),
        serde_json::to_string_pretty(&report).expect("plain struct") + "\n",
    )?;
    println!(
        "acc_uniform {:.4} acc_crts {:.4} over {} positions",
        report.acc_uniform, report.acc_crts, report.positions
    );
    Ok(())
}

pub fn flops_cmd(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let generator_head = match s.req::<String>("generator_head")?.as_str() {
        "all" => GeneratorHead::AllPositions,
        "selected" => GeneratorHead::SelectedPositions,
        other => return Err(CliError::Config(format!("bad value `{other}` for `generator_head`"))),
    };
    let opts = FlopsOptions {
        backward_multiplier: s.req("backward_multiplier")?,
        generator_head,
        generator_embedding: None,
    };
    let entries = match s.req::<String>("scale")?.as_str() {
        "base" => flops::base_comparison(&opts),
        "desk" => flops::desk_comparison(
            s.opt("vocab_size")?.unwrap_or(1000),
            s.opt("steps")?.unwrap_or(2000),
            s.opt("max_len")?.unwrap_or(64),
            &opts,
        ),
        other => return Err(CliError::Config(format!("bad value `{other}` for `scale`"))),
    };
    let dir = ctx.start(&[], &["flops.txt", "flops.jsonl"])?;
    let rows = flops::report(&entries);
    let text = flops::report_text(&rows);
    fs::write(dir.join("flops.txt"), &text)?;
    fs::write(dir.join("flops.jsonl"), flops::report_jsonl(&rows))?;
    print!("{text}");
    Ok(())
}
