//! MIND-style behaviors TSV:
//! `impression_id  user_id  time  history  candidates` with candidates written
//! as `doc-label` pairs, e.g. `d12-1 d40-0`.

use std::collections::HashMap;
use std::path::Path;

use crate::config::BehaviorColumns;
use crate::error::{KredError, Result};

use super::news::Document;
use super::read_text;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub id: String,
    pub user: String,
    pub time: u64,
    /// Clicked documents before the impression, oldest first (document indices).
    pub history: Vec<usize>,
    pub candidates: Vec<(usize, bool)>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().filter(|c| c.1).map(|c| c.0)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().filter(|c| !c.1).map(|c| c.0)
    }
}

pub fn parse_behaviors(
    text: &str,
    path: &Path,
    columns: &BehaviorColumns,
    doc_index: &HashMap<String, usize>,
) -> Result<Vec<Impression>> {
    let width = 1 + [columns.impression_id, columns.user_id, columns.time, columns.history, columns.candidates]
        .into_iter()
        .max()
        .unwrap_or(0);
    let mut out = Vec::new();
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
        if fields.len() < width {
            return Err(err(format!("expected at least {width} fields, found {}", fields.len())));
        }
        let doc = |id: &str| doc_index.get(id).copied().ok_or_else(|| err(format!("unknown doc id {id:?}")));
        let time = fields[columns.time]
            .trim()
            .parse::<u64>()
            .map_err(|_| err(format!("time must be a non-negative integer, found {:?}", fields[columns.time])))?;
        let history = fields[columns.history].split_whitespace().map(doc).collect::<Result<Vec<_>>>()?;
        let candidates = fields[columns.candidates]
            .split_whitespace()
            .map(|tok| {
                let (id, label) = tok
                    .rsplit_once('-')
                    .ok_or_else(|| err(format!("candidate {tok:?} is not doc-label")))?;
                let label = match label {
                    "1" => true,
                    "0" => false,
                    _ => return Err(err(format!("candidate label must be 0 or 1 in {tok:?}"))),
                };
                Ok((doc(id)?, label))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Impression {
            id: fields[columns.impression_id].to_string(),
            user: fields[columns.user_id].to_string(),
            time,
            history,
            candidates,
        });
    }
    Ok(out)
}

pub fn read_behaviors(
    path: &Path,
    columns: &BehaviorColumns,
    doc_index: &HashMap<String, usize>,
) -> Result<Vec<Impression>> {
    parse_behaviors(&read_text(path)?, path, columns, doc_index)
}

/// Writes impressions in the default column order.
pub fn write_behaviors(impressions: &[Impression], docs: &[Document]) -> String {
    let mut out = String::new();
    for imp in impressions {
        let history: Vec<&str> = imp.history.iter().map(|&d| docs[d].id.as_str()).collect();
        let cands: Vec<String> = imp
            .candidates
            .iter()
            .map(|&(d, l)| format!("{}-{}", docs[d].id, u8::from(l)))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            imp.id,
            imp.user,
            imp.time,
            history.join(" "),
            cands.join(" ")
        ));
    }
    out
}

/// Drops impressions whose user history is shorter than `min_history`.
/// Returns the kept impressions and the number dropped.
pub fn filter_short_histories(impressions: Vec<Impression>, min_history: usize) -> (Vec<Impression>, usize) {
    let before = impressions.len();
    let kept: Vec<Impression> = impressions.into_iter().filter(|i| i.history.len() >= min_history).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(n: usize) -> HashMap<String, usize> {
        (0..n).map(|i| (format!("d{i}"), i)).collect()
    }

    #[test]
    fn parses_the_default_layout() {
        let text = "i1\tu1\t17\td0 d1 d2\td3-1 d4-0\n";
        let imps = parse_behaviors(text, Path::new("b.tsv"), &BehaviorColumns::default(), &index(5)).unwrap();
        assert_eq!(
            imps[0],
            Impression {
                id: "i1".into(),
                user: "u1".into(),
                time: 17,
                history: vec![0, 1, 2],
                candidates: vec![(3, true), (4, false)],
            }
        );
        assert_eq!(imps[0].positives().collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn column_mapping_reorders_fields() {
        let cols = BehaviorColumns {
            impression_id: 4,
            user_id: 0,
            time: 1,
            history: 2,
            candidates: 3,
        };
        let text = "u1\t5\td0\td1-0\timp9\n";
        let imps = parse_behaviors(text, Path::new("b.tsv"), &cols, &index(2)).unwrap();
        assert_eq!(imps[0].id, "imp9");
        assert_eq!(imps[0].candidates, vec![(1, false)]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let idx = index(3);
        let cols = BehaviorColumns::default();
        for bad in ["i\tu\tx\td0\td1-1", "i\tu\t1\td9\td1-1", "i\tu\t1\td0\td1-2", "i\tu\t1\td0"] {
            let text = format!("i0\tu\t0\td0\td1-0\n{bad}\n");
            match parse_behaviors(&text, Path::new("b.tsv"), &cols, &idx) {
                Err(KredError::Parse { line, .. }) => assert_eq!(line, 2, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn users_with_fewer_than_five_clicks_are_dropped() {
        let mk = |n: usize| Impression {
            id: format!("i{n}"),
            user: format!("u{n}"),
            time: 0,
            history: (0..n).collect(),
            candidates: vec![(0, true)],
        };
        let (kept, dropped) = filter_short_histories(vec![mk(4), mk(5), mk(0), mk(9)], 5);
        assert_eq!(dropped, 2);
        assert_eq!(kept.iter().map(|i| i.history.len()).collect::<Vec<_>>(), vec![5, 9]);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let docs: Vec<Document> = (0..4)
            .map(|i| Document {
                id: format!("d{i}"),
                category: "c".into(),
                category_id: 0,
                local: false,
                title: String::new(),
                body: String::new(),
                base_dv: vec![],
                mentions: vec![],
                confidence: vec![],
                click_count: 0,
            })
            .collect();
        let imps = vec![Impression {
            id: "i1".into(),
            user: "u".into(),
            time: 3,
            history: vec![2, 0],
            candidates: vec![(1, true), (3, false)],
        }];
        let text = write_behaviors(&imps, &docs);
        let back = parse_behaviors(&text, Path::new("b"), &BehaviorColumns::default(), &index(4)).unwrap();
        assert_eq!(back, imps);
    }
}
