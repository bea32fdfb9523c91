//! Character-level tokenizer over printable ASCII plus three specials.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Placeholder id for image positions; its rows are filled by the patch
/// projector rather than the embedding table.
pub const IMG: usize = 2;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';
pub const VOCAB_SIZE: usize = 3 + (LAST_CHAR - FIRST_CHAR + 1) as usize;

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.bytes()
        .map(|b| {
            if (FIRST_CHAR..=LAST_CHAR).contains(&b) {
                Ok(3 + (b - FIRST_CHAR) as usize)
            } else {
                Err(contract(format!("character {:?} is outside the vocabulary", b as char)))
            }
        })
        .collect()
}

pub fn token_for(c: char) -> Option<usize> {
    let b = u8::try_from(c).ok()?;
    (FIRST_CHAR..=LAST_CHAR)
        .contains(&b)
        .then(|| 3 + (b - FIRST_CHAR) as usize)
}

/// Decodes character tokens; special tokens are dropped.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| id >= 3 && id < VOCAB_SIZE)
        .map(|&id| (FIRST_CHAR + (id - 3) as u8) as char)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_size() {
        assert_eq!(VOCAB_SIZE, 98);
        let s = "Is the text in the image 'Spencerlan'? 1; 0.";
        assert_eq!(decode(&encode(s).unwrap()), s);
        assert!(encode("é").is_err());
        assert_eq!(token_for('1'), Some(encode("1").unwrap()[0]));
    }
}
