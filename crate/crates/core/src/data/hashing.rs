//! Signed feature hashing of bag-of-words text, used as the stand-in base
//! document vector.

use std::hash::Hasher;

use fnv::FnvHasher;

/// 64-bit FNV-1a of the raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Lowercased whitespace tokens hashed into `n_dv` buckets, each with a sign
/// taken from bit 32 of the hash, then L2-normalised. Empty text maps to the
/// zero vector.
pub fn hash_dv(text: &str, n_dv: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_dv];
    if n_dv == 0 {
        return v;
    }
    for token in text.split_whitespace() {
        let h = fnv1a(token.to_lowercase().as_bytes());
        let bucket = (h % n_dv as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        assert_eq!(hash_dv("", 8), vec![0.0; 8]);
        assert_eq!(hash_dv("   \t ", 8), vec![0.0; 8]);
    }

    #[test]
    fn identical_texts_agree_and_case_is_folded() {
        assert_eq!(hash_dv("Storm hits coast", 16), hash_dv("storm  HITS coast", 16));
    }

    #[test]
    fn two_word_document_by_hand() {
        // "a" → 0xaf63dc4c8601ec8c: bucket 0x…8c % 8 = 4, bit 32 of 0xaf63dc4c_8601ec8c is 0 → +1
        // "foobar" → 0x85944171f73967e8: bucket 0 (…e8 % 8), bit 32 of 0x85944171 is 1 → −1
        let v = hash_dv("A foobar", 8);
        let s = 1.0 / 2f64.sqrt();
        let mut expect = vec![0.0; 8];
        expect[4] = s;
        expect[0] = -s;
        assert_eq!(v, expect);
    }

    #[test]
    fn repeated_tokens_accumulate() {
        let v = hash_dv("a a a", 8);
        assert_eq!(v[4], 1.0);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
    }
}
