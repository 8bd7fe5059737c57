//! Synthetic corpus whose click signal is reachable only through the
//! knowledge graph.
//!
//! Entities are split into communities. Hubs link to hubs of their own
//! community; each leaf has `member_of` edges to its own hubs and
//! `associated_with` edges to hubs elsewhere. A document belongs to one
//! community: its title mentions that community's leaves, its body mentions
//! leaves drawn from anywhere, and its text is random. Users prefer one
//! community and click matching documents far more often than others.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::error::{KredError, Result};
use crate::kg::{mix, KnowledgeGraph, Vocab};

use super::news::LinkedEntity;

pub const ENTITY_TYPES: [&str; 8] = [
    "person",
    "organization",
    "location",
    "event",
    "product",
    "work",
    "species",
    "concept",
];

const RELATIONS: [&str; 3] = ["peer_of", "member_of", "associated_with"];
const TRAIN_TIME: u64 = 1_000;
const TEST_TIME: u64 = 2_000;

/// Generated corpus in its on-disk text form plus the latent structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub triples: String,
    pub entity_types: String,
    pub news: String,
    pub behaviors: String,
    /// First timestamp of the test period.
    pub test_start: u64,
    pub doc_community: Vec<usize>,
    pub user_community: Vec<usize>,
}

struct Graph {
    kg: KnowledgeGraph,
    hubs: Vec<Vec<usize>>,
    leaves: Vec<Vec<usize>>,
    types: Vec<usize>,
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed));
    let g = build_graph(cfg, &mut rng)?;
    let types: Vocab = {
        let mut v = Vocab::default();
        for t in &ENTITY_TYPES[..cfg.n_entity_types] {
            v.intern(t);
        }
        v
    };

    let docs = build_docs(cfg, &g, &types, &mut rng);
    let (behaviors, user_community) = build_behaviors(cfg, &docs, &mut rng);

    Ok(SynthCorpus {
        triples: g.kg.to_tsv(),
        entity_types: super::news::write_entity_types(&types),
        news: docs.iter().map(|d| d.line.as_str()).collect(),
        behaviors,
        test_start: TEST_TIME,
        doc_community: docs.iter().map(|d| d.community).collect(),
        user_community,
    })
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(KredError::Config(format!("synth: {m}")));
    let c = cfg.n_communities;
    let n_hubs = (cfg.n_entities as f64 * cfg.hub_fraction).round() as usize;
    let n_leaves = cfg.n_entities.saturating_sub(n_hubs);
    if c < 2 || cfg.n_users == 0 || cfg.n_docs < 3 * c {
        return bad("need at least two communities, one user and three documents per community");
    }
    if n_hubs < 2 * c || n_leaves < c * cfg.title_entities.1.max(1) {
        return bad("too few hubs or leaves for the community count");
    }
    if cfg.signal_edges > n_hubs / c || cfg.noise_edges > n_hubs - n_hubs / c {
        return bad("more leaf edges than available hubs");
    }
    let leaf_edges = n_leaves * (cfg.signal_edges + cfg.noise_edges);
    let hub_capacity = (0..c).map(|k| {
        let size = n_hubs / c + usize::from(k < n_hubs % c);
        size * (size - 1)
    });
    if cfg.n_triples < leaf_edges || cfg.n_triples > leaf_edges + hub_capacity.sum::<usize>() {
        return bad("n_triples inconsistent with entity counts and edge settings");
    }
    if cfg.n_entity_types == 0 || cfg.n_entity_types > ENTITY_TYPES.len() {
        return bad("n_entity_types must be between 1 and 8");
    }
    if cfg.n_categories == 0 {
        return bad("n_categories must be positive");
    }
    let (lo, hi) = cfg.history_len;
    if lo == 0 || lo > hi || cfg.title_entities.0 == 0 || cfg.title_entities.0 > cfg.title_entities.1 {
        return bad("history_len and title_entities must be non-empty ranges");
    }
    if cfg.body_entities.0 > cfg.body_entities.1 || cfg.candidates_per_impression < 2 {
        return bad("body_entities must be a range and impressions need two candidates");
    }
    let (a, b, t) = cfg.doc_periods;
    if a <= 0.0 || b <= 0.0 || t <= 0.0 || ((a + b + t) - 1.0).abs() > 1e-9 {
        return bad("doc_periods must be positive and sum to 1");
    }
    for p in [cfg.click_match, cfg.click_other, cfg.local_community_rate, cfg.local_other_rate, cfg.cold_user_fraction] {
        if !(0.0..=1.0).contains(&p) {
            return bad("probabilities must lie in [0, 1]");
        }
    }
    Ok(())
}

fn build_graph(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let c = cfg.n_communities;
    let n_hubs = (cfg.n_entities as f64 * cfg.hub_fraction).round() as usize;
    let mut kg = KnowledgeGraph::new();
    for i in 0..cfg.n_entities {
        kg.add_entity(&format!("Q{i}"));
    }
    for r in RELATIONS {
        kg.add_relation(r);
    }
    // entity ids are shuffled so that id order carries no community information
    let mut ids: Vec<usize> = (0..cfg.n_entities).collect();
    ids.shuffle(rng);
    let mut hubs = vec![Vec::new(); c];
    let mut leaves = vec![Vec::new(); c];
    for (k, &e) in ids.iter().enumerate() {
        if k < n_hubs {
            hubs[k % c].push(e);
        } else {
            leaves[(k - n_hubs) % c].push(e);
        }
    }
    let types: Vec<usize> = (0..cfg.n_entities).map(|_| rng.gen_range(0..cfg.n_entity_types)).collect();

    let name = |e: usize| format!("Q{e}");
    for comm in 0..c {
        for &leaf in &leaves[comm] {
            for &hub in hubs[comm].choose_multiple(rng, cfg.signal_edges) {
                kg.add_triple(&name(leaf), RELATIONS[1], &name(hub));
            }
            let foreign: Vec<usize> = (0..c).filter(|&o| o != comm).flat_map(|o| hubs[o].iter().copied()).collect();
            for &hub in foreign.choose_multiple(rng, cfg.noise_edges) {
                kg.add_triple(&name(leaf), RELATIONS[2], &name(hub));
            }
        }
    }
    let mut hub_pairs: Vec<(usize, usize)> = Vec::new();
    for comm in &hubs {
        for &a in comm {
            for &b in comm {
                if a != b {
                    hub_pairs.push((a, b));
                }
            }
        }
    }
    let remaining = cfg.n_triples - kg.triples().len();
    for &(a, b) in hub_pairs.choose_multiple(rng, remaining) {
        kg.add_triple(&name(a), RELATIONS[0], &name(b));
    }
    Ok(Graph { kg, hubs, leaves, types })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Period {
    Profile,
    Train,
    Test,
}

struct SynthDoc {
    id: String,
    community: usize,
    period: Period,
    line: String,
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..2000))).collect::<Vec<_>>().join(" ")
}

fn build_docs(cfg: &SynthConfig, g: &Graph, types: &Vocab, rng: &mut ChaCha8Rng) -> Vec<SynthDoc> {
    let c = cfg.n_communities;
    let n = cfg.n_docs;
    let n_profile = (n as f64 * cfg.doc_periods.0).round() as usize;
    let n_train = (n as f64 * cfg.doc_periods.1).round() as usize;
    let entity = |e: usize, confidence: f64, in_title: bool, count: u32| LinkedEntity {
        entity_id: format!("Q{e}"),
        confidence,
        in_title,
        count,
        kind: types.name(g.types[e]).to_string(),
    };

    (0..n)
        .map(|i| {
            let community = i % c;
            let period = if i < n_profile {
                Period::Profile
            } else if i < n_profile + n_train {
                Period::Train
            } else {
                Period::Test
            };
            let n_title = rng.gen_range(cfg.title_entities.0..=cfg.title_entities.1);
            let n_body = rng.gen_range(cfg.body_entities.0..=cfg.body_entities.1);
            let mut chosen = BTreeSet::new();
            let mut linked = Vec::new();
            for &e in g.leaves[community].choose_multiple(rng, n_title) {
                chosen.insert(e);
                linked.push(entity(e, rng.gen_range(0.92..1.0), true, rng.gen_range(2..=4)));
            }
            while linked.len() < n_title + n_body {
                let other = rng.gen_range(0..c);
                let &e = g.leaves[other].choose(rng).expect("communities have leaves");
                if chosen.insert(e) {
                    linked.push(entity(e, rng.gen_range(0.92..1.0), false, 1));
                }
            }
            if rng.gen_bool(0.3) {
                // a weakly linked mention that ingestion must discard
                let other = rng.gen_range(0..c);
                let &e = g.hubs[other].choose(rng).expect("communities have hubs");
                linked.push(entity(e, rng.gen_range(0.5..0.9), true, 1));
            }
            linked.shuffle(rng);

            let category = if rng.gen_bool(0.8) {
                community % cfg.n_categories
            } else {
                rng.gen_range(0..cfg.n_categories)
            };
            let local = if community == 0 {
                rng.gen_bool(cfg.local_community_rate)
            } else {
                rng.gen_bool(cfg.local_other_rate)
            };
            let id = format!("N{i:05}");
            let (n_title_words, n_body_words) = (rng.gen_range(4..9), rng.gen_range(20..80));
            let title = words(rng, n_title_words);
            let body = words(rng, n_body_words);
            let json = serde_json::to_string(&linked).expect("plain records serialise");
            let line = format!(
                "{id}\tcat{category:02}\t{}\t{title}\t{body}\t{json}\n",
                u8::from(local)
            );
            SynthDoc {
                id,
                community,
                period,
                line,
            }
        })
        .collect()
}

fn build_behaviors(cfg: &SynthConfig, docs: &[SynthDoc], rng: &mut ChaCha8Rng) -> (String, Vec<usize>) {
    let c = cfg.n_communities;
    let by_period = |p: Period| -> Vec<usize> { (0..docs.len()).filter(|&d| docs[d].period == p).collect() };
    let profile = by_period(Period::Profile);
    let train = by_period(Period::Train);
    let test = by_period(Period::Test);
    let train_share = cfg.doc_periods.1 / (cfg.doc_periods.1 + cfg.doc_periods.2);
    let n_train_imps = ((cfg.impressions_per_user as f64 * train_share).round() as usize)
        .clamp(1.min(cfg.impressions_per_user), cfg.impressions_per_user);

    let click_p = |user_c: usize, d: usize| {
        if docs[d].community == user_c {
            cfg.click_match
        } else {
            cfg.click_other
        }
    };

    let mut out = String::new();
    let mut user_community = Vec::with_capacity(cfg.n_users);
    let mut imp_no = 0usize;
    for u in 0..cfg.n_users {
        let pref = rng.gen_range(0..c);
        user_community.push(pref);
        let cold = rng.gen_bool(cfg.cold_user_fraction);
        let want = if cold {
            rng.gen_range(1..cfg.history_len.0.max(2))
        } else {
            rng.gen_range(cfg.history_len.0..=cfg.history_len.1)
        };
        let mut history = Vec::new();
        let mut order = profile.clone();
        for _ in 0..50 {
            if history.len() >= want {
                break;
            }
            order.shuffle(rng);
            for &d in &order {
                if history.len() >= want {
                    break;
                }
                if !history.contains(&d) && rng.gen_bool(click_p(pref, d)) {
                    history.push(d);
                }
            }
        }

        for k in 0..cfg.impressions_per_user {
            let (pool, time) = if k < n_train_imps {
                (&train, TRAIN_TIME + (u * cfg.impressions_per_user + k) as u64)
            } else {
                (&test, TEST_TIME + (u * cfg.impressions_per_user + k) as u64)
            };
            let matching: Vec<usize> = pool.iter().copied().filter(|&d| docs[d].community == pref).collect();
            let mut candidates: Vec<(usize, bool)> = Vec::new();
            for _ in 0..10 {
                let n_match = (cfg.candidates_per_impression / 4).max(1).min(matching.len());
                let mut picked: Vec<usize> = matching.choose_multiple(rng, n_match).copied().collect();
                let rest: Vec<usize> = pool.iter().copied().filter(|d| !picked.contains(d)).collect();
                picked.extend(rest.choose_multiple(rng, cfg.candidates_per_impression - picked.len()));
                picked.shuffle(rng);
                candidates = picked.iter().map(|&d| (d, rng.gen_bool(click_p(pref, d)))).collect();
                let clicks = candidates.iter().filter(|c| c.1).count();
                if clicks > 0 && clicks < candidates.len() {
                    break;
                }
            }
            let hist: Vec<&str> = history.iter().map(|&d| docs[d].id.as_str()).collect();
            let cands: Vec<String> = candidates
                .iter()
                .map(|&(d, l)| format!("{}-{}", docs[d].id, u8::from(l)))
                .collect();
            out.push_str(&format!(
                "I{imp_no:06}\tU{u:04}\t{time}\t{}\t{}\n",
                hist.join(" "),
                cands.join(" ")
            ));
            imp_no += 1;
        }
    }
    (out, user_community)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_entities: 120,
            n_triples: 400,
            n_docs: 80,
            n_users: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_corpus(&small(), 7).unwrap();
        let b = synth_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&small(), 8).unwrap();
        assert_ne!(a.news, c.news);
    }

    #[test]
    fn graph_has_the_requested_triples() {
        let s = synth_corpus(&small(), 1).unwrap();
        assert_eq!(s.triples.lines().count(), 400);
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let mut cfg = small();
        cfg.n_triples = 10;
        assert!(synth_corpus(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.n_communities = 1;
        assert!(synth_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn default_sizes_generate() {
        let s = synth_corpus(&SynthConfig::default(), 0).unwrap();
        assert_eq!(s.news.lines().count(), 300);
        assert_eq!(s.triples.lines().count(), 2000);
        assert_eq!(s.behaviors.lines().count(), 200 * 4);
    }
}
