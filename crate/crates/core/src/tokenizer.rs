//! Byte-level tokenizer: ids 0..=255 are raw bytes, 256 is end-of-text.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 257;
pub const EOT: u32 = 256;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Encodes and appends the end-of-text id.
pub fn encode_document(text: &str) -> Vec<u32> {
    let mut ids = encode(text);
    ids.push(EOT);
    ids
}

/// Decodes up to the first end-of-text id. Invalid UTF-8 is replaced lossily.
pub fn decode(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            EOT => break,
            0..=255 => bytes.push(id as u8),
            _ => {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii() {
        assert_eq!(encode("hi"), vec![104, 105]);
        assert_eq!(encode_document("a"), vec![97, EOT]);
        assert_eq!(decode(&[104, 105, EOT, 120]).unwrap(), "hi");
        assert!(decode(&[300]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(s in ".{0,64}") {
            prop_assert_eq!(decode(&encode(&s)).unwrap(), s.clone());
            prop_assert_eq!(decode(&encode_document(&s)).unwrap(), s);
        }
    }
}
