//! Byte-level tokenizer: ids 0..=255 are bytes, followed by two specials.

pub const BOS: u32 = 256;
pub const PAD: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decode, dropping special ids and replacing invalid UTF-8.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
