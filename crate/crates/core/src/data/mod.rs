//! Corpus ingestion, derived labels and the synthetic generator.

mod behaviors;
mod hashing;
mod labels;
mod news;
mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub use behaviors::{filter_short_histories, parse_behaviors, read_behaviors, write_behaviors, Impression};
pub use hashing::{fnv1a, hash_dv};
pub use labels::{
    click_counts, co_click_pairs, downsample_binary, popularity_groups, split_80_10_10, user_clicks, Split,
};
pub use news::{parse_entity_types, write_entity_types, write_news, Document, LinkedEntity, NewsReader, NewsStats};
pub use synth::{synth_corpus, SynthCorpus, ENTITY_TYPES};

use crate::config::DataConfig;
use crate::error::{KredError, Result};
use crate::kg::{mix, KnowledgeGraph, Vocab};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| KredError::io(path, e))
}

/// Raw file contents making up a corpus.
pub struct CorpusTexts<'a> {
    pub triples: &'a str,
    pub entity_types: &'a str,
    pub news: &'a str,
    pub behaviors: &'a str,
    pub doc_vectors: Option<&'a str>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub news: NewsStats,
    pub impressions_read: usize,
    pub short_history_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: KnowledgeGraph,
    pub entity_types: Vocab,
    pub categories: Vocab,
    pub docs: Vec<Document>,
    pub impressions: Vec<Impression>,
    /// Impression indices per split.
    pub split: Split<usize>,
    pub popularity: Vec<usize>,
    pub i2i: Split<(usize, usize)>,
    /// Document indices for the classification tasks.
    pub doc_split: Split<usize>,
    /// Labelled training documents for the local task after down-sampling.
    pub local_train: Vec<usize>,
    pub stats: LoadStats,
}

impl Dataset {
    pub fn load(cfg: &DataConfig, popularity_classes: usize, seed: u64) -> Result<Self> {
        let dir = PathBuf::from(&cfg.dir);
        let read = |name: &str| read_text(&dir.join(name));
        let triples = read(&cfg.triples)?;
        let types = read(&cfg.entity_types)?;
        let news = read(&cfg.news)?;
        let behaviors = read(&cfg.behaviors)?;
        let dv = cfg.doc_vectors.as_deref().map(read).transpose()?;
        let texts = CorpusTexts {
            triples: &triples,
            entity_types: &types,
            news: &news,
            behaviors: &behaviors,
            doc_vectors: dv.as_deref(),
        };
        Self::from_texts(&texts, cfg, popularity_classes, seed)
    }

    pub fn from_texts(texts: &CorpusTexts<'_>, cfg: &DataConfig, popularity_classes: usize, seed: u64) -> Result<Self> {
        let dir = PathBuf::from(&cfg.dir);
        let graph = KnowledgeGraph::parse_tsv(texts.triples, &dir.join(&cfg.triples))?;
        let entity_types = parse_entity_types(texts.entity_types, &dir.join(&cfg.entity_types))?;
        let reader = NewsReader {
            graph: &graph,
            entity_types: &entity_types,
            confidence_threshold: cfg.confidence_threshold,
            n_dv: cfg.n_dv,
        };
        let (mut docs, news_stats) = reader.parse(texts.news, &dir.join(&cfg.news))?;
        if docs.is_empty() {
            return Err(KredError::Data("news file contains no documents".into()));
        }
        if let Some(text) = texts.doc_vectors {
            let name = cfg.doc_vectors.as_deref().unwrap_or("doc_vectors");
            apply_doc_vectors(&mut docs, text, &dir.join(name), cfg.n_dv)?;
        }

        let categories = if cfg.news_categories.is_empty() {
            let mut names: Vec<&str> = docs.iter().map(|d| d.category.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            let mut v = Vocab::default();
            names.into_iter().for_each(|n| {
                v.intern(n);
            });
            v
        } else {
            let mut v = Vocab::default();
            cfg.news_categories.iter().for_each(|n| {
                v.intern(n);
            });
            v
        };
        for d in &mut docs {
            d.category_id = categories.get(&d.category).ok_or_else(|| KredError::Vocabulary {
                kind: "news category",
                name: d.category.clone(),
            })?;
        }

        let doc_index: HashMap<String, usize> = docs.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        let all = parse_behaviors(texts.behaviors, &dir.join(&cfg.behaviors), &cfg.columns, &doc_index)?;
        let impressions_read = all.len();
        let counts = click_counts(&all, docs.len());
        for (d, &c) in docs.iter_mut().zip(&counts) {
            d.click_count = c;
        }
        let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
        let popularity = popularity_groups(&counts, &ids, popularity_classes);

        let (impressions, dropped) = filter_short_histories(all, cfg.min_history);
        let split = split_impressions(&impressions, cfg, seed);
        let i2i = split_80_10_10(&co_click_pairs(&impressions, cfg.i2i_threshold), mix(seed, 0x121));

        let all_docs: Vec<usize> = (0..docs.len()).collect();
        let doc_split = split_80_10_10(&all_docs, mix(seed, 0xd0c));
        let local_labels: Vec<bool> = docs.iter().map(|d| d.local).collect();
        let local_train = match cfg.local_label_limit {
            Some(limit) => {
                let ratio = cfg.local_positive_ratio.unwrap_or_else(|| {
                    let pos = doc_split.train.iter().filter(|&&d| local_labels[d]).count();
                    pos as f64 / doc_split.train.len().max(1) as f64
                });
                downsample_binary(&doc_split.train, &local_labels, limit, ratio, mix(seed, 0x10c))
            }
            None => doc_split.train.clone(),
        };

        Ok(Self {
            graph,
            entity_types,
            categories,
            docs,
            impressions,
            split,
            popularity,
            i2i,
            doc_split,
            local_train,
            stats: LoadStats {
                news: news_stats,
                impressions_read,
                short_history_dropped: dropped,
            },
        })
    }

    /// Loads a generated corpus, taking the test boundary from the generator.
    pub fn from_synth(corpus: &SynthCorpus, cfg: &DataConfig, popularity_classes: usize, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.test_start = Some(corpus.test_start);
        let texts = CorpusTexts {
            triples: &corpus.triples,
            entity_types: &corpus.entity_types,
            news: &corpus.news,
            behaviors: &corpus.behaviors,
            doc_vectors: None,
        };
        Self::from_texts(&texts, &cfg, popularity_classes, seed)
    }

    /// Impressions of one split, as references.
    pub fn impressions_of<'a>(&'a self, ids: &'a [usize]) -> impl Iterator<Item = &'a Impression> + 'a {
        ids.iter().map(move |&i| &self.impressions[i])
    }
}

/// Test split by timestamp when `test_start` is set, otherwise by a seeded
/// hash of the impression id; validation is a seeded hash sample of the rest.
fn split_impressions(impressions: &[Impression], cfg: &DataConfig, seed: u64) -> Split<usize> {
    let unit = |salt: u64, id: &str| (mix(mix(seed, salt), fnv1a(id.as_bytes())) >> 11) as f64 / (1u64 << 53) as f64;
    let mut split = Split::default();
    for (i, imp) in impressions.iter().enumerate() {
        let is_test = match cfg.test_start {
            Some(t) => imp.time >= t,
            None => unit(0x7e57, &imp.id) < cfg.val_fraction,
        };
        if is_test {
            split.test.push(i);
        } else if unit(0xa1, &imp.id) < cfg.val_fraction {
            split.val.push(i);
        } else {
            split.train.push(i);
        }
    }
    split
}

fn apply_doc_vectors(docs: &mut [Document], text: &str, path: &Path, n_dv: usize) -> Result<()> {
    let index: HashMap<&str, usize> = docs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    let mut vectors: Vec<Option<Vec<f64>>> = vec![None; docs.len()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| KredError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, values) = line.split_once('\t').ok_or_else(|| err("expected doc_id<TAB>values".into()))?;
        let &d = index.get(id).ok_or_else(|| err(format!("unknown doc id {id:?}")))?;
        let v = values
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| err(format!("bad value {x:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != n_dv {
            return Err(KredError::dim("doc vector", &[v.len()], &[n_dv]));
        }
        vectors[d] = Some(v);
    }
    for (d, v) in docs.iter_mut().zip(vectors) {
        d.base_dv = v.ok_or_else(|| KredError::Data(format!("no document vector for {}", d.id)))?;
    }
    Ok(())
}
