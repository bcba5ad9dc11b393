use rand::Rng;
use rand_core::{CryptoRng, RngCore};

pub const WORD_COUNT: usize = 4;

static WORDLIST_TEXT: &str = include_str!("wordlist.txt");

/// The 2048-word list passphrases are drawn from (11 bits per word).
pub fn wordlist() -> &'static [&'static str] {
    static WORDS: std::sync::OnceLock<Vec<&'static str>> = std::sync::OnceLock::new();
    WORDS.get_or_init(|| WORDLIST_TEXT.lines().map(str::trim).filter(|w| !w.is_empty()).collect())
}

/// Four uniformly drawn words joined by hyphens, 44 bits of entropy.
pub fn generate_passphrase<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> String {
    let words = wordlist();
    (0..WORD_COUNT)
        .map(|_| words[rng.gen_range(0..words.len())])
        .collect::<Vec<_>>()
        .join("-")
}
