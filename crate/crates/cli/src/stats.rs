//! Word-level caption statistics.

use std::collections::HashMap;
use std::fmt::Write as _;

/// Words in a caption more than this many times across the corpus count as
/// "valid" distinct words.
pub const VALID_MIN_COUNT: usize = 10;
/// Histogram bucket width in words; the last bucket is open (`>300`).
pub const BUCKET_WIDTH: usize = 25;
pub const BUCKET_LIMIT: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub captions: usize,
    pub total_words: usize,
    pub distinct_words: usize,
    pub valid_distinct_words: usize,
    /// Average caption length in words.
    pub acl: f64,
    /// Counts for `0-25, 26-50, ..., 276-300, >300` words.
    pub histogram: Vec<usize>,
}

pub fn bucket_labels() -> Vec<String> {
    let mut labels = vec![format!("0-{BUCKET_WIDTH}")];
    let mut lo = BUCKET_WIDTH + 1;
    while lo <= BUCKET_LIMIT {
        labels.push(format!("{lo}-{}", lo + BUCKET_WIDTH - 1));
        lo += BUCKET_WIDTH;
    }
    labels.push(format!(">{BUCKET_LIMIT}"));
    labels
}

fn bucket(words: usize) -> usize {
    if words > BUCKET_LIMIT {
        BUCKET_LIMIT / BUCKET_WIDTH
    } else {
        words.saturating_sub(1) / BUCKET_WIDTH
    }
}

impl CorpusStats {
    /// One caption per line; whitespace-only lines are not captions.
    /// Words are whitespace-separated and case-folded for the distinct
    /// counts.
    pub fn from_text(text: &str) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut histogram = vec![0; BUCKET_LIMIT / BUCKET_WIDTH + 1];
        let (mut captions, mut total_words) = (0, 0);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut n = 0;
            for w in line.split_whitespace() {
                *freq.entry(w.to_lowercase()).or_default() += 1;
                n += 1;
            }
            captions += 1;
            total_words += n;
            histogram[bucket(n)] += 1;
        }
        let acl = if captions == 0 { 0.0 } else { total_words as f64 / captions as f64 };
        Self {
            captions,
            total_words,
            distinct_words: freq.len(),
            valid_distinct_words: freq.values().filter(|&&c| c > VALID_MIN_COUNT).count(),
            acl,
            histogram,
        }
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "captions,{}", self.captions);
        let _ = writeln!(s, "total_words,{}", self.total_words);
        let _ = writeln!(s, "distinct_words,{}", self.distinct_words);
        let _ = writeln!(s, "valid_distinct_words,{}", self.valid_distinct_words);
        let _ = writeln!(s, "acl,{}", self.acl);
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bucket,captions\n");
        for (label, n) in bucket_labels().iter().zip(&self.histogram) {
            let _ = writeln!(s, "{label},{n}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        let s = CorpusStats::from_text("a b\na b c d\n");
        assert_eq!((s.captions, s.total_words, s.distinct_words), (2, 6, 4));
        assert_eq!(s.acl, 3.0);
        assert_eq!(s.histogram[0], 2);
    }

    #[test]
    fn case_folding_and_blank_lines() {
        let s = CorpusStats::from_text("Cat cat CAT\n\n   \ndog\n");
        assert_eq!((s.captions, s.distinct_words), (2, 2));
        assert_eq!(s.acl, 2.0);
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(bucket_labels().len(), 13);
        assert_eq!(bucket_labels()[1], "26-50");
        assert_eq!(bucket(0), 0);
        assert_eq!(bucket(25), 0);
        assert_eq!(bucket(26), 1);
        assert_eq!(bucket(300), 11);
        assert_eq!(bucket(301), 12);
    }

    #[test]
    fn valid_words_need_more_than_ten_uses() {
        let text = "x\n".repeat(10) + &"y\n".repeat(11);
        assert_eq!(CorpusStats::from_text(&text).valid_distinct_words, 1);
    }

    #[test]
    fn empty_corpus() {
        let s = CorpusStats::from_text("");
        assert_eq!((s.captions, s.acl), (0, 0.0));
    }

    proptest::proptest! {
        #[test]
        fn counts_are_consistent(lines in proptest::collection::vec(proptest::collection::vec("[a-dA-D]{1,3}", 0..40), 0..30)) {
            let text: String = lines.iter().map(|l| l.join(" ") + "\n").collect();
            let s = CorpusStats::from_text(&text);
            proptest::prop_assert_eq!(s.histogram.iter().sum::<usize>(), s.captions);
            proptest::prop_assert!(s.valid_distinct_words <= s.distinct_words && s.distinct_words <= s.total_words);
            if s.captions > 0 {
                proptest::prop_assert_eq!(s.acl, s.total_words as f64 / s.captions as f64);
            }
            let upper = CorpusStats::from_text(&text.to_uppercase());
            proptest::prop_assert_eq!(upper, s);
        }
    }
}
