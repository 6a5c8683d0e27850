//! On-disk models: `model.json` (architecture and config), `vocab.txt`,
//! `phrases.txt` for the tagger, and a parameter checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_all, CrfTagger, DecodeStrategy, MiniTransformer, PointerGenConfig, PointerGenLstm, Seq2Seq};
use super::{TaggerConfig, TransformerConfig, Vocab};
use crate::corpus::Dataset;
use crate::editops::PhraseVocabulary;
use crate::error::{Error, Result};

pub const MODEL_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PHRASES_FILE: &str = "phrases.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ModelSpec {
    PointerLstm { config: PointerGenConfig },
    MiniTransformer { config: TransformerConfig, copy_head: bool },
    Tagger { config: TaggerConfig },
}

#[derive(Clone, Debug)]
pub enum AnyModel {
    PointerLstm(PointerGenLstm),
    MiniTransformer(MiniTransformer),
    Tagger(CrfTagger),
}

impl AnyModel {
    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::PointerLstm(m) => ModelSpec::PointerLstm { config: m.config.clone() },
            AnyModel::MiniTransformer(m) => {
                ModelSpec::MiniTransformer { config: m.config.clone(), copy_head: m.copy_head().is_some() }
            }
            AnyModel::Tagger(m) => ModelSpec::Tagger { config: m.config.clone() },
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            AnyModel::PointerLstm(m) => m.vocab(),
            AnyModel::MiniTransformer(m) => m.vocab(),
            AnyModel::Tagger(m) => m.vocab(),
        }
    }

    fn params(&self) -> &numcore::ParamStore {
        match self {
            AnyModel::PointerLstm(m) => m.params(),
            AnyModel::MiniTransformer(m) => m.params(),
            AnyModel::Tagger(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut numcore::ParamStore {
        match self {
            AnyModel::PointerLstm(m) => m.params_mut(),
            AnyModel::MiniTransformer(m) => m.params_mut(),
            AnyModel::Tagger(m) => m.params_mut(),
        }
    }

    fn config_json(&self) -> String {
        match self {
            AnyModel::PointerLstm(m) => m.config_json(),
            AnyModel::MiniTransformer(m) => m.config_json(),
            AnyModel::Tagger(m) => m.config_json(),
        }
    }

    /// Predicted tokens for every utterance, in dataset order. Sequence
    /// models read the marked query; the tagger edits the content span.
    pub fn predict(&self, ds: &Dataset, strategy: DecodeStrategy, max_len: usize) -> Result<Vec<Vec<String>>> {
        match self {
            AnyModel::PointerLstm(m) => decode_sources(m, ds, strategy, max_len),
            AnyModel::MiniTransformer(m) => decode_sources(m, ds, strategy, max_len),
            AnyModel::Tagger(m) => ds.iter().map(|u| m.rephrase(&u.content_surfaces())).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_FILE), serde_json::to_string_pretty(&self.spec())?)?;
        self.vocab().save(&dir.join(VOCAB_FILE))?;
        if let AnyModel::Tagger(m) = self {
            m.phrases().save(&dir.join(PHRASES_FILE))?;
        }
        numcore::checkpoint::save(dir, self.params(), &self.config_json())?;
        Ok(())
    }

    /// Rebuilds the architecture from `model.json` and the vocabularies, then
    /// loads the checkpoint, checking its config hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        if !path.exists() {
            return Err(Error::InvalidArgument(format!("{} is not a saved model directory", dir.display())));
        }
        let spec: ModelSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let mut model = match spec {
            ModelSpec::PointerLstm { config } => AnyModel::PointerLstm(PointerGenLstm::new(config, vocab)?),
            ModelSpec::MiniTransformer { config, copy_head } => {
                let mut m = MiniTransformer::new(config, vocab)?;
                if copy_head {
                    m.graft_random_copy_head(0)?;
                }
                AnyModel::MiniTransformer(m)
            }
            ModelSpec::Tagger { config } => {
                let phrases = PhraseVocabulary::load(&dir.join(PHRASES_FILE))?;
                AnyModel::Tagger(CrfTagger::new(config, vocab, phrases)?)
            }
        };
        let config = model.config_json();
        numcore::checkpoint::load_into(dir, model.params_mut(), Some(&config))?;
        Ok(model)
    }
}

fn decode_sources<M: Seq2Seq>(
    m: &M,
    ds: &Dataset,
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    let sources: Vec<Vec<String>> = ds.iter().map(|u| u.model_source()).collect();
    Ok(decode_all(m, &sources, strategy, max_len)?.into_iter().map(|h| h.tokens).collect())
}
