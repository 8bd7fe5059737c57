//! Derived labels: popularity quartiles, co-click item pairs and seeded splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::behaviors::Impression;

/// Positive candidate clicks per document.
pub fn click_counts(impressions: &[Impression], n_docs: usize) -> Vec<u64> {
    let mut counts = vec![0; n_docs];
    for imp in impressions {
        for d in imp.positives() {
            counts[d] += 1;
        }
    }
    counts
}

/// Splits documents into `groups` near-equal groups by ascending click count,
/// ties broken by doc id. Returns the group of every document.
pub fn popularity_groups(counts: &[u64], ids: &[String], groups: usize) -> Vec<usize> {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then_with(|| ids[a].cmp(&ids[b])));
    let mut label = vec![0; n];
    for (rank, &d) in order.iter().enumerate() {
        label[d] = rank * groups / n.max(1);
    }
    label
}

/// Documents clicked by each user, from histories and positive candidates.
pub fn user_clicks(impressions: &[Impression]) -> BTreeMap<&str, BTreeSet<usize>> {
    let mut by_user: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for imp in impressions {
        let set = by_user.entry(imp.user.as_str()).or_default();
        set.extend(imp.history.iter().copied());
        set.extend(imp.positives());
    }
    by_user
}

/// Unordered document pairs clicked by strictly more than `threshold`
/// common users, as `(low, high)` in ascending order.
pub fn co_click_pairs(impressions: &[Impression], threshold: usize) -> Vec<(usize, usize)> {
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for docs in user_clicks(impressions).values() {
        let docs: Vec<usize> = docs.iter().copied().collect();
        for (i, &a) in docs.iter().enumerate() {
            for &b in &docs[i + 1..] {
                *shared.entry((a, b)).or_default() += 1;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = shared.into_iter().filter(|&(_, c)| c > threshold).map(|(p, _)| p).collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded shuffle followed by an 80/10/10 cut.
pub fn split_80_10_10<T: Clone>(items: &[T], seed: u64) -> Split<T> {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Split {
        train: shuffled,
        val,
        test,
    }
}

/// Keeps at most `limit` labelled documents with roughly `positive_ratio`
/// positives, drawn with a seeded shuffle.
pub fn downsample_binary(docs: &[usize], labels: &[bool], limit: usize, positive_ratio: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = docs.iter().copied().filter(|&d| labels[d]).collect();
    let mut neg: Vec<usize> = docs.iter().copied().filter(|&d| !labels[d]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let want_pos = ((limit as f64 * positive_ratio).round() as usize).min(pos.len());
    let want_neg = (limit - want_pos).min(neg.len());
    let mut out: Vec<usize> = pos[..want_pos].iter().chain(&neg[..want_neg]).copied().collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i:03}")).collect()
    }

    #[test]
    fn eight_documents_fall_into_pairs() {
        let counts: Vec<u64> = (1..=8).collect();
        let g = popularity_groups(&counts, &ids(8), 4);
        assert_eq!(g, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn equal_counts_split_by_id() {
        let names: Vec<String> = ["e", "b", "a", "d", "c", "f", "h", "g"].iter().map(|s| s.to_string()).collect();
        let g = popularity_groups(&[5; 8], &names, 4);
        // sorted ids: a b c d e f g h
        assert_eq!(g, vec![2, 0, 0, 1, 1, 2, 3, 3]);
    }

    #[test]
    fn hundred_random_counts_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let counts: Vec<u64> = (0..100).map(|_| rng.gen_range(0..30)).collect();
        let names = ids(100);
        let g = popularity_groups(&counts, &names, 4);
        let mut keyed: Vec<(u64, &String, usize)> = (0..100).map(|i| (counts[i], &names[i], i)).collect();
        keyed.sort();
        for (rank, &(_, _, d)) in keyed.iter().enumerate() {
            assert_eq!(g[d], rank / 25);
        }
        for q in 0..4 {
            assert_eq!(g.iter().filter(|&&x| x == q).count(), 25);
        }
    }

    fn imp(user: &str, history: &[usize], clicked: &[usize]) -> Impression {
        Impression {
            id: format!("{user}-{history:?}"),
            user: user.into(),
            time: 0,
            history: history.to_vec(),
            candidates: clicked.iter().map(|&d| (d, true)).chain([(99, false)]).collect(),
        }
    }

    #[test]
    fn co_click_threshold_is_strict() {
        let mut imps: Vec<Impression> = (0..101).map(|u| imp(&format!("u{u}"), &[0, 1], &[])).collect();
        assert_eq!(co_click_pairs(&imps, 100), vec![(0, 1)]);
        imps.pop();
        assert!(co_click_pairs(&imps, 100).is_empty());
    }

    #[test]
    fn co_click_pairs_match_pairwise_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imps: Vec<Impression> = (0..40)
            .map(|i| {
                let h: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..12)).collect();
                let c: Vec<usize> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(0..12)).collect();
                imp(&format!("u{}", i % 15), &h, &c)
            })
            .collect();
        let clicks = user_clicks(&imps);
        for threshold in 0..4 {
            let mut expect = Vec::new();
            for a in 0..100 {
                for b in a + 1..100 {
                    let shared = clicks.values().filter(|s| s.contains(&a) && s.contains(&b)).count();
                    if shared > threshold {
                        expect.push((a, b));
                    }
                }
            }
            assert_eq!(co_click_pairs(&imps, threshold), expect);
        }
    }

    #[test]
    fn pair_split_is_disjoint_and_covering() {
        let pairs: Vec<(usize, usize)> = (0..57).map(|i| (i, i + 1)).collect();
        let s = split_80_10_10(&pairs, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (45, 5, 7));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, pairs);
        assert_eq!(s, split_80_10_10(&pairs, 3));
        assert_ne!(s, split_80_10_10(&pairs, 4));
    }

    #[test]
    fn downsampling_hits_the_requested_ratio() {
        let labels: Vec<bool> = (0..1000).map(|i| i % 3 == 0).collect();
        let docs: Vec<usize> = (0..1000).collect();
        let kept = downsample_binary(&docs, &labels, 200, 0.12, 5);
        assert_eq!(kept.len(), 200);
        assert_eq!(kept.iter().filter(|&&d| labels[d]).count(), 24);
    }
}
