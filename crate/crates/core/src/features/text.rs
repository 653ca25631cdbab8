//! Dataset-only text statistics plus a hashed character-trigram bag.

use super::{l1_normalize, FeatureVector};

pub const TRIGRAM_BINS: usize = 1024;
pub const STAT_LEN: usize = 6;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Maximal ASCII digit runs of exactly four digits between 1500 and 2099.
fn year_count(text: &str) -> usize {
    let mut count = 0;
    let mut run = String::new();
    for ch in text.chars().chain(std::iter::once(' ')) {
        if ch.is_ascii_digit() {
            run.push(ch);
            continue;
        }
        if run.len() == 4 {
            let y: u32 = run.parse().unwrap_or(0);
            if (1500..=2099).contains(&y) {
                count += 1;
            }
        }
        run.clear();
    }
    count
}

/// `[chars, words, mean word length, digits, years, punctuation ratio]`
/// followed by the L1-normalized 1024-bin trigram bag.
pub fn text_features(text: &str) -> FeatureVector {
    let chars: Vec<char> = text.chars().collect();
    let words: Vec<&str> = text.split_whitespace().collect();
    let n_chars = chars.len() as f64;
    let mean_word = if words.is_empty() {
        0.0
    } else {
        words.iter().map(|w| w.chars().count()).sum::<usize>() as f64 / words.len() as f64
    };
    let digits = chars.iter().filter(|c| c.is_ascii_digit()).count() as f64;
    let punct = chars.iter().filter(|c| c.is_ascii_punctuation()).count() as f64;
    let punct_ratio = if chars.is_empty() { 0.0 } else { punct / n_chars };

    let mut bag = vec![0.0; TRIGRAM_BINS];
    let mut buf = [0u8; 12];
    for w in chars.windows(3) {
        let mut len = 0;
        for c in w {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        bag[(fnv1a(&buf[..len]) % TRIGRAM_BINS as u64) as usize] += 1.0;
    }
    l1_normalize(&mut bag);

    let mut values = vec![
        n_chars,
        words.len() as f64,
        mean_word,
        digits,
        year_count(text) as f64,
        punct_ratio,
    ];
    values.extend(bag);
    FeatureVector::new(values, format!("text/v1:stats{STAT_LEN}+trigram{TRIGRAM_BINS}"))
}
