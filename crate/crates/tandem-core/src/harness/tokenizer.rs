//! Byte-level tokenizer: ids 0-255 are raw bytes, 256 is BOS, 257 is the
//! begin-of-draft marker used by the deep-tandem sketch stream.

pub const BOS: usize = 256;
pub const BEGIN_DRAFT: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// BOS followed by the raw bytes.
pub fn tokenize(text: &str) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(|b| b as usize));
    ids
}

/// Inverse of [`tokenize`] up to special ids, which are stripped.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ab_example() {
        assert_eq!(tokenize("ab"), vec![256, 97, 98]);
    }

    #[test]
    fn empty_is_bos_only() {
        assert_eq!(tokenize(""), vec![256]);
    }

    proptest! {
        #[test]
        fn round_trip_identity(s in "\\PC{0,64}") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
