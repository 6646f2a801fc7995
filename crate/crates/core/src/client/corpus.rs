//! Text corpora for the skip-gram harness: tokenization, windowing,
//! dictionary cutoffs and a synthetic Zipf generator.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

/// Token that stands in for everything outside a dictionary cutoff.
pub const OOV: &str = "oov";

/// Lowercased whitespace tokens, one list per non-empty line.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|l| !l.is_empty())
        .collect()
}

/// `(center, context)` pairs for every token and each neighbour within
/// `window` positions on the same line.
pub fn skipgram_pairs(lines: &[Vec<String>], window: usize) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in lines {
        for (i, center) in line.iter().enumerate() {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(line.len() - 1);
            for (j, ctx) in line.iter().enumerate().take(hi + 1).skip(lo) {
                if j != i {
                    out.push((center.clone(), ctx.clone()));
                }
            }
        }
    }
    out
}

/// Tokens ranked by corpus frequency (ties by token text).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    rank: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_lines(lines: &[Vec<String>]) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in lines.iter().flatten() {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self {
            rank: ranked
                .into_iter()
                .enumerate()
                .map(|(i, (t, _))| (t.to_string(), i))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }

    /// True if `token` is among the `cutoff` most frequent tokens (`None` = no limit).
    pub fn keeps(&self, token: &str, cutoff: Option<usize>) -> bool {
        match (self.rank.get(token), cutoff) {
            (Some(_), None) => true,
            (Some(&r), Some(c)) => r < c,
            (None, _) => false,
        }
    }

    /// The token itself if kept, [`OOV`] otherwise.
    pub fn map<'a>(&self, token: &'a str, cutoff: Option<usize>) -> &'a str {
        if self.keeps(token, cutoff) {
            token
        } else {
            OOV
        }
    }
}

/// Parameters of the synthetic corpus.
///
/// Each line is a pair `wA wB` where `A` is drawn from a Zipf law over
/// `vocab` ids and `B = A xor 1`, so every word has exactly one partner of
/// similar frequency.
#[derive(Debug, Clone, Copy)]
pub struct ZipfCorpus {
    pub vocab: usize,
    pub exponent: f64,
    pub seed: u64,
}

impl Default for ZipfCorpus {
    fn default() -> Self {
        Self {
            vocab: 5000,
            exponent: 1.0,
            seed: 20_240_611,
        }
    }
}

impl ZipfCorpus {
    pub fn partner(id: usize) -> usize {
        id ^ 1
    }

    fn draw_pairs(&self, n: usize, seed: u64) -> Vec<(usize, usize)> {
        let zipf = Zipf::new(self.vocab as f64, self.exponent).expect("valid zipf parameters");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = zipf.sample(&mut rng) as usize - 1;
                let b = Self::partner(a).min(self.vocab - 1);
                (a, b)
            })
            .collect()
    }

    /// Corpus text of roughly `target_bytes` bytes.
    pub fn generate(&self, target_bytes: usize) -> String {
        let mut out = String::with_capacity(target_bytes + 32);
        let mut batch_seed = self.seed;
        while out.len() < target_bytes {
            for (a, b) in self.draw_pairs(1024, batch_seed) {
                out.push_str(&format!("w{a} w{b}\n"));
                if out.len() >= target_bytes {
                    break;
                }
            }
            batch_seed = batch_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        }
        out
    }

    /// Held-out `(center, context)` pairs from an independent stream.
    pub fn heldout(&self, n: usize, seed: u64) -> Vec<(String, String)> {
        self.draw_pairs(n, seed ^ 0x05EE_D0F4_E1D0_u64)
            .into_iter()
            .map(|(a, b)| (format!("w{a}"), format!("w{b}")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_line_gives_both_directions() {
        let lines = tokenize("a b");
        assert_eq!(
            skipgram_pairs(&lines, 1),
            vec![("a".to_string(), "b".to_string()), ("b".to_string(), "a".to_string())]
        );
    }

    #[test]
    fn tokenization_lowercases_and_splits_lines() {
        assert_eq!(tokenize("A  b\n\nC\n"), vec![vec!["a", "b"], vec!["c"]]);
        assert!(skipgram_pairs(&tokenize("x\ny"), 2).is_empty());
    }

    #[test]
    fn cutoff_maps_rare_tokens() {
        let v = Vocabulary::from_lines(&tokenize("a a a b b c"));
        assert_eq!(v.map("a", Some(1)), "a");
        assert_eq!(v.map("b", Some(1)), OOV);
        assert_eq!(v.map("c", None), "c");
        assert_eq!(v.map("zzz", None), OOV);
    }

    #[test]
    fn zipf_corpus_is_deterministic_and_skewed() {
        let c = ZipfCorpus::default();
        let text = c.generate(20_000);
        assert_eq!(text, c.generate(20_000));
        let lines = tokenize(&text);
        let v = Vocabulary::from_lines(&lines);
        assert!(v.keeps("w0", Some(2)));
        for l in &lines {
            let a: usize = l[0][1..].parse().unwrap();
            assert_eq!(l[1], format!("w{}", ZipfCorpus::partner(a)));
        }
    }
}
