//! Byte-level tokenizer: one token per byte plus two control tokens.

pub const VOCAB_SIZE: usize = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| u32::from(b)).collect()
    }

    /// Control tokens are dropped.
    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }

    /// Lossy UTF-8 rendering for display.
    pub fn decode_lossy(&self, tokens: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode(tokens)).into_owned()
    }
}

pub fn encode(text: &[u8]) -> Vec<u32> {
    ByteTokenizer.encode(text)
}

pub fn decode(tokens: &[u32]) -> Vec<u8> {
    ByteTokenizer.decode(tokens)
}
