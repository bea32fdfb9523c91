use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use super::font::ALPHABET;
use crate::error::{contract, Result};
use crate::init;

/// Single-edit near miss of `word`: one substitution, one adjacent
/// transposition or one deletion. Never returns the input.
pub fn perturb_word(word: &str, seed: u64) -> Result<String> {
    perturb_word_with(word, &mut init::rng(seed))
}

pub fn perturb_word_with(word: &str, rng: &mut init::Rng) -> Result<String> {
    if word.chars().count() < 3 {
        return Err(contract("words shorter than 3 characters cannot be perturbed"));
    }
    if !word.chars().all(|c| ALPHABET.contains(c)) {
        return Err(contract("word contains characters outside the glyph alphabet"));
    }
    let mut chars: Vec<char> = word.chars().collect();
    let alphabet: Vec<char> = ALPHABET.chars().collect();
    let swappable: Vec<usize> = (0..chars.len() - 1)
        .filter(|&i| chars[i] != chars[i + 1])
        .collect();
    let edit = rng.gen_range(0..3);
    match edit {
        1 if !swappable.is_empty() => {
            let i = swappable[rng.gen_range(0..swappable.len())];
            chars.swap(i, i + 1);
        }
        2 => {
            let i = rng.gen_range(0..chars.len());
            chars.remove(i);
        }
        _ => {
            let i = rng.gen_range(0..chars.len());
            let orig = alphabet.iter().position(|&a| a == chars[i]).unwrap_or(0);
            let mut j = rng.gen_range(0..alphabet.len() - 1);
            if j >= orig {
                j += 1;
            }
            chars[i] = alphabet[j];
        }
    }
    Ok(chars.into_iter().collect())
}
