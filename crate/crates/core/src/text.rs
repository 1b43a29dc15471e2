//! Small text and hashing helpers shared by the scorers, metrics and cache.

use sha2::{Digest, Sha256};
use unicode_general_category::{get_general_category, GeneralCategory};

/// True for characters in any Unicode punctuation category (Pc, Pd, Ps, Pe, Pi, Pf, Po).
pub fn is_unicode_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Builds a canonical byte string out of ordered fields: each field is an
/// 8-byte big-endian length followed by its UTF-8 bytes.
#[derive(Debug, Default, Clone)]
pub struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, value: &str) -> &mut Self {
        self.buf
            .extend_from_slice(&(value.len() as u64).to_be_bytes());
        self.buf.extend_from_slice(value.as_bytes());
        self
    }

    pub fn opt_field(&mut self, value: Option<&str>) -> &mut Self {
        match value {
            Some(v) => self.field("some").field(v),
            None => self.field("none"),
        }
    }

    pub fn digest_hex(&self) -> String {
        sha256_hex(&self.buf)
    }
}
