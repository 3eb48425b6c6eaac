use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::AppConfig;
use crate::error::{Error, Result};
use crate::models::{load_draft, load_target, save_draft, save_target, DraftStack, TargetModel, Variant};
use crate::training::{
    pack_windows, pretrain_target, train_draft, Corpus, DraftTrainOutput, PretrainOutput, TeacherPool,
    TokenizedCorpus, Tokenizer,
};

/// File layout of one artifacts directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.dir.join("tokenizer.json")
    }

    pub fn target(&self) -> PathBuf {
        self.dir.join("target.ckpt")
    }

    pub fn draft(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("draft_{variant}.ckpt"))
    }

    pub fn target_log(&self) -> PathBuf {
        self.dir.join("target_train.ndjson")
    }

    pub fn draft_log(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("draft_{variant}_train.ndjson"))
    }

    pub fn load_tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::load(&self.tokenizer())
    }

    pub fn load_target(&self) -> Result<TargetModel> {
        load_target(&self.target())
    }

    pub fn load_draft(&self, variant: Variant) -> Result<DraftStack> {
        let stack = load_draft(&self.draft(variant))?;
        if stack.variant != variant {
            return Err(Error::Format(format!(
                "{} holds variant {} instead of {variant}",
                self.draft(variant).display(),
                stack.variant
            )));
        }
        Ok(stack)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Generates the synthetic corpus and learns a tokenizer sized to the model.
pub fn build_corpus(cfg: &AppConfig) -> Result<TokenizedCorpus> {
    let corpus = Corpus::generate(&cfg.training.corpus)?;
    TokenizedCorpus::build(&corpus, cfg.model.vocab_size)
}

/// Regenerates the corpus and encodes it with an existing tokenizer.
pub fn corpus_with(cfg: &AppConfig, tokenizer: Tokenizer) -> Result<TokenizedCorpus> {
    let corpus = Corpus::generate(&cfg.training.corpus)?;
    Ok(TokenizedCorpus::with_tokenizer(&corpus, tokenizer))
}

/// Pretrains the target and writes tokenizer, checkpoint and training log.
pub fn train_target_stage(cfg: &AppConfig, art: &Artifacts) -> Result<PretrainOutput> {
    art.create()?;
    let corpus = build_corpus(cfg)?;
    corpus.tokenizer.save(&art.tokenizer())?;
    let path = art.target_log();
    let mut log = create(&path)?;
    let out = pretrain_target(&cfg.model, &corpus, &cfg.training.target, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&path, e))?;
    save_target(&out.model, &art.target())?;
    Ok(out)
}

/// Teacher features over the packed training split.
pub fn teacher_pool(cfg: &AppConfig, target: &TargetModel, corpus: &TokenizedCorpus) -> Result<TeacherPool> {
    let d = &cfg.training.draft;
    let windows = pack_windows(&corpus.train, d.seq_len);
    TeacherPool::build(target, &windows, d.max_teacher_windows)
}

/// Distils each variant against the saved target, sharing one teacher pool.
pub fn train_drafts_stage(cfg: &AppConfig, art: &Artifacts, variants: &[Variant]) -> Result<Vec<DraftTrainOutput>> {
    let corpus = corpus_with(cfg, art.load_tokenizer()?)?;
    let target = art.load_target()?;
    if target.config != cfg.model {
        return Err(Error::Config("saved target does not match model section".into()));
    }
    let pool = teacher_pool(cfg, &target, &corpus)?;
    let mut outs = Vec::with_capacity(variants.len());
    for &variant in variants {
        let path = art.draft_log(variant);
        let mut log = create(&path)?;
        let out = train_draft(&target, &pool, variant, &cfg.training.draft, Some(&mut log))?;
        log.flush().map_err(|e| Error::io(&path, e))?;
        for w in &out.warnings {
            log::warn!("{variant}: {w}");
        }
        save_draft(&out.stack, &art.draft(variant))?;
        outs.push(out);
    }
    Ok(outs)
}

pub fn train_draft_stage(cfg: &AppConfig, art: &Artifacts, variant: Variant) -> Result<DraftTrainOutput> {
    Ok(train_drafts_stage(cfg, art, &[variant])?.remove(0))
}
