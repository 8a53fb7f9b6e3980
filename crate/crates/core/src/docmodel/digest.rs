use std::fmt;

use base64::engine::general_purpose::{STANDARD_NO_PAD, URL_SAFE_NO_PAD};
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Canonical, encoding-independent digest key used for lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DigestKey {
    Sha1([u8; 20]),
    Sha256([u8; 32]),
}

impl DigestKey {
    pub fn hex(&self) -> String {
        match self {
            DigestKey::Sha1(b) => hex_upper(b),
            DigestKey::Sha256(b) => hex_upper(b),
        }
    }
}

impl fmt::Display for DigestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DigestKey::Sha1(_) => write!(f, "sha1:{}", self.hex()),
            DigestKey::Sha256(_) => write!(f, "sha256:{}", self.hex()),
        }
    }
}

/// The digests known for a document. Hex is uppercase, base64 is standard
/// alphabet without padding.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DigestSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha1_hex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256_hex: Option<String>,
}

pub(crate) fn hex_upper(bytes: &[u8]) -> String {
    const HEX: &[u8; 16] = b"0123456789ABCDEF";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(HEX[(b >> 4) as usize] as char);
        s.push(HEX[(b & 0xf) as usize] as char);
    }
    s
}

pub(crate) fn decode_hex<const N: usize>(s: &str) -> Option<[u8; N]> {
    if s.len() != N * 2 {
        return None;
    }
    let mut out = [0u8; N];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16)?;
        let lo = (chunk[1] as char).to_digit(16)?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Some(out)
}

/// Decodes standard or url-safe base64, with or without padding.
pub(crate) fn decode_b64(s: &str) -> Option<Vec<u8>> {
    let trimmed = s.trim_end_matches('=');
    STANDARD_NO_PAD
        .decode(trimmed)
        .or_else(|_| URL_SAFE_NO_PAD.decode(trimmed))
        .ok()
}

fn decode_b64_exact<const N: usize>(s: &str) -> Option<[u8; N]> {
    decode_b64(s).and_then(|v| v.try_into().ok())
}

impl DigestSet {
    pub fn empty() -> Self {
        DigestSet::default()
    }

    pub fn from_sha1_bytes(b: &[u8; 20]) -> Self {
        DigestSet { sha1_hex: Some(hex_upper(b)), ..Default::default() }
    }

    pub fn from_sha256_bytes_hex(b: &[u8; 32]) -> Self {
        DigestSet { sha256_hex: Some(hex_upper(b)), ..Default::default() }
    }

    pub fn from_sha256_bytes_b64(b: &[u8; 32]) -> Self {
        DigestSet { sha256_base64: Some(STANDARD_NO_PAD.encode(b)), ..Default::default() }
    }

    pub fn with_sha1_hex(mut self, s: &str) -> Result<Self, ModelError> {
        let b: [u8; 20] = decode_hex(s).ok_or_else(|| ModelError::BadDigest(s.to_string(), "sha1 hex"))?;
        self.sha1_hex = Some(hex_upper(&b));
        Ok(self)
    }

    /// Accepts a SHA-1 digest given in base64, as found on `r` lines.
    pub fn with_sha1_base64(mut self, s: &str) -> Result<Self, ModelError> {
        let b: [u8; 20] = decode_b64_exact(s).ok_or_else(|| ModelError::BadDigest(s.to_string(), "sha1 base64"))?;
        self.sha1_hex = Some(hex_upper(&b));
        Ok(self)
    }

    pub fn with_sha256_hex(mut self, s: &str) -> Result<Self, ModelError> {
        let b: [u8; 32] = decode_hex(s).ok_or_else(|| ModelError::BadDigest(s.to_string(), "sha256 hex"))?;
        self.sha256_hex = Some(hex_upper(&b));
        Ok(self)
    }

    pub fn with_sha256_base64(mut self, s: &str) -> Result<Self, ModelError> {
        let b: [u8; 32] =
            decode_b64_exact(s).ok_or_else(|| ModelError::BadDigest(s.to_string(), "sha256 base64"))?;
        self.sha256_base64 = Some(STANDARD_NO_PAD.encode(b));
        Ok(self)
    }

    pub fn sha1_hex(&self) -> Option<&str> {
        self.sha1_hex.as_deref()
    }

    pub fn sha256_base64(&self) -> Option<&str> {
        self.sha256_base64.as_deref()
    }

    pub fn sha256_hex(&self) -> Option<&str> {
        self.sha256_hex.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.sha1_hex.is_none() && self.sha256_base64.is_none() && self.sha256_hex.is_none()
    }

    pub fn sha1_bytes(&self) -> Option<[u8; 20]> {
        self.sha1_hex.as_deref().and_then(decode_hex)
    }

    pub fn sha256_bytes(&self) -> Option<[u8; 32]> {
        self.sha256_hex
            .as_deref()
            .and_then(decode_hex)
            .or_else(|| self.sha256_base64.as_deref().and_then(decode_b64_exact))
    }

    /// SHA-256 in hex regardless of which encoding was recorded.
    pub fn sha256_as_hex(&self) -> Option<String> {
        self.sha256_bytes().map(|b| hex_upper(&b))
    }

    pub fn sha256_as_base64(&self) -> Option<String> {
        self.sha256_bytes().map(|b| STANDARD_NO_PAD.encode(b))
    }

    pub fn sha256_as_base64url(&self) -> Option<String> {
        self.sha256_bytes().map(|b| URL_SAFE_NO_PAD.encode(b))
    }

    pub fn keys(&self) -> Vec<DigestKey> {
        let mut keys = Vec::with_capacity(2);
        if let Some(b) = self.sha1_bytes() {
            keys.push(DigestKey::Sha1(b));
        }
        if let Some(b) = self.sha256_bytes() {
            keys.push(DigestKey::Sha256(b));
        }
        keys
    }

    /// SHA-1 when present (the lookup key of relay descriptors and ns
    /// consensuses), otherwise SHA-256.
    pub fn primary_key(&self) -> Option<DigestKey> {
        self.keys().into_iter().next()
    }

    pub fn intersects(&self, other: &DigestSet) -> bool {
        let mine = self.keys();
        other.keys().iter().any(|k| mine.contains(k))
    }

    /// Fills in encodings from `other` that are missing here.
    pub fn merge(mut self, other: &DigestSet) -> Self {
        if self.sha1_hex.is_none() {
            self.sha1_hex = other.sha1_hex.clone();
        }
        if self.sha256_base64.is_none() {
            self.sha256_base64 = other.sha256_base64.clone();
        }
        if self.sha256_hex.is_none() {
            self.sha256_hex = other.sha256_hex.clone();
        }
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyDigestSet);
        }
        if let Some(s) = &self.sha1_hex {
            if s.len() != 40 || !s.bytes().all(|c| c.is_ascii_digit() || (b'A'..=b'F').contains(&c)) {
                return Err(ModelError::BadDigest(s.clone(), "sha1 hex"));
            }
        }
        if let Some(s) = &self.sha256_hex {
            if s.len() != 64 || !s.bytes().all(|c| c.is_ascii_digit() || (b'A'..=b'F').contains(&c)) {
                return Err(ModelError::BadDigest(s.clone(), "sha256 hex"));
            }
        }
        if let Some(s) = &self.sha256_base64 {
            if decode_b64_exact::<32>(s).is_none() {
                return Err(ModelError::BadDigest(s.clone(), "sha256 base64"));
            }
        }
        Ok(())
    }
}
