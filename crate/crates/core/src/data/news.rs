//! News TSV: `doc_id  category  local_flag  title  body  entities_json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context_layer::{EntityMention, Position};
use crate::error::{KredError, Result};
use crate::kg::{KnowledgeGraph, Vocab};

use super::hashing::hash_dv;
use super::read_text;

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub category: String,
    /// Index into the dataset's category vocabulary.
    pub category_id: usize,
    pub local: bool,
    pub title: String,
    pub body: String,
    pub base_dv: Vec<f64>,
    /// One mention per distinct entity, in first-seen order.
    pub mentions: Vec<EntityMention>,
    /// Linking confidence of each mention, parallel to `mentions`.
    pub confidence: Vec<f64>,
    pub click_count: u64,
}

impl Document {
    pub fn body_words(&self) -> usize {
        self.body.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedEntity {
    pub entity_id: String,
    pub confidence: f64,
    pub in_title: bool,
    pub count: u32,
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NewsStats {
    pub documents: usize,
    pub low_confidence: usize,
    pub unknown_entities: usize,
}

pub struct NewsReader<'a> {
    pub graph: &'a KnowledgeGraph,
    pub entity_types: &'a Vocab,
    /// Mentions are kept only when confidence is strictly above this.
    pub confidence_threshold: f64,
    pub n_dv: usize,
}

impl NewsReader<'_> {
    pub fn read(&self, path: &Path) -> Result<(Vec<Document>, NewsStats)> {
        self.parse(&read_text(path)?, path)
    }

    pub fn parse(&self, text: &str, path: &Path) -> Result<(Vec<Document>, NewsStats)> {
        let mut docs = Vec::new();
        let mut stats = NewsStats::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| KredError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 tab-separated fields, found {}", fields.len())));
            }
            let local = match fields[2] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(err(format!("local flag must be 0 or 1, found {other:?}"))),
            };
            let linked: Vec<LinkedEntity> = if fields[5].trim().is_empty() {
                Vec::new()
            } else {
                serde_json::from_str(fields[5]).map_err(|e| err(format!("entities: {e}")))?
            };
            if !seen.insert(fields[0].to_string()) {
                return Err(err(format!("duplicate doc id {}", fields[0])));
            }

            let mut mentions: Vec<EntityMention> = Vec::new();
            let mut confidence: Vec<f64> = Vec::new();
            for le in linked {
                if le.count == 0 {
                    return Err(err(format!("entity {} has count 0", le.entity_id)));
                }
                if le.confidence <= self.confidence_threshold {
                    stats.low_confidence += 1;
                    continue;
                }
                let Some(entity) = self.graph.entity(&le.entity_id) else {
                    stats.unknown_entities += 1;
                    continue;
                };
                let category = self.entity_types.get(&le.kind).ok_or_else(|| KredError::Vocabulary {
                    kind: "entity type",
                    name: le.kind.clone(),
                })?;
                let position = if le.in_title { Position::Title } else { Position::Body };
                match mentions.iter().position(|m| m.entity == entity) {
                    Some(j) => {
                        let m = &mut mentions[j];
                        m.frequency += le.count;
                        if position == Position::Title {
                            m.position = Position::Title;
                        }
                        confidence[j] = confidence[j].max(le.confidence);
                    }
                    None => {
                        mentions.push(EntityMention {
                            entity,
                            position,
                            frequency: le.count,
                            category,
                        });
                        confidence.push(le.confidence);
                    }
                }
            }

            let (title, body) = (fields[3].to_string(), fields[4].to_string());
            docs.push(Document {
                id: fields[0].to_string(),
                category: fields[1].to_string(),
                category_id: 0,
                local,
                base_dv: hash_dv(&format!("{title} {body}"), self.n_dv),
                title,
                body,
                mentions,
                confidence,
                click_count: 0,
            });
        }
        stats.documents = docs.len();
        Ok((docs, stats))
    }
}

/// Serialises documents in the news TSV layout, emitting the retained
/// (merged, filtered) mentions.
pub fn write_news(docs: &[Document], graph: &KnowledgeGraph, entity_types: &Vocab) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        let linked: Vec<LinkedEntity> = d
            .mentions
            .iter()
            .zip(&d.confidence)
            .map(|(m, &c)| LinkedEntity {
                entity_id: graph.entities().name(m.entity.0).to_string(),
                confidence: c,
                in_title: m.position == Position::Title,
                count: m.frequency,
                kind: entity_types.name(m.category).to_string(),
            })
            .collect();
        let json = serde_json::to_string(&linked).map_err(|e| KredError::Data(e.to_string()))?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            d.id,
            d.category,
            u8::from(d.local),
            d.title,
            d.body,
            json
        ));
    }
    Ok(out)
}

/// Entity-type vocabulary file: `type_name<TAB>integer_id`, ids `0..n`.
pub fn parse_entity_types(text: &str, path: &Path) -> Result<Vocab> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| KredError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (name, id) = line.split_once('\t').ok_or_else(|| err("expected name<TAB>id".into()))?;
        let id: usize = id.trim().parse().map_err(|_| err(format!("bad type id {id:?}")))?;
        rows.push((id, name.to_string()));
    }
    rows.sort();
    let mut vocab = Vocab::default();
    for (expect, (id, name)) in rows.into_iter().enumerate() {
        if id != expect || vocab.get(&name).is_some() {
            return Err(KredError::Data(format!(
                "{}: entity type ids must be unique names numbered 0..n",
                path.display()
            )));
        }
        vocab.intern(&name);
    }
    Ok(vocab)
}

pub fn write_entity_types(types: &Vocab) -> String {
    types.names().iter().enumerate().map(|(i, n)| format!("{n}\t{i}\n")).collect()
}
