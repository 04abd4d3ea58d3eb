use core::fmt;
use core::str::FromStr;

use sha2::{Digest, Sha256};

/// SHA-256 digest of a blob's bytes. It addresses blobs in the content
/// store and versions a manifest through its root hash.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub const ALGORITHM: &'static str = "sha256";

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        ContentHash(bytes)
    }

    pub fn digest(data: &[u8]) -> Self {
        let mut h = ContentHasher::new();
        h.update(data);
        h.finalize()
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Two-level store fan-out: the first byte and the remaining 31 bytes,
    /// both as lowercase hex.
    pub fn fanout(&self) -> (alloc::string::String, alloc::string::String) {
        let hex = alloc::format!("{self}");
        (hex[..2].into(), hex[2..].into())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HashParseError {
    #[error("expected 64 hex characters, got {0}")]
    Length(usize),
    #[error("invalid hex digit at offset {0}")]
    Digit(usize),
}

impl FromStr for ContentHash {
    type Err = HashParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return Err(HashParseError::Length(bytes.len()));
        }
        let nibble = |i: usize| -> Result<u8, HashParseError> {
            match bytes[i] {
                c @ b'0'..=b'9' => Ok(c - b'0'),
                c @ b'a'..=b'f' => Ok(c - b'a' + 10),
                _ => Err(HashParseError::Digit(i)),
            }
        };
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = (nibble(2 * i)? << 4) | nibble(2 * i + 1)?;
        }
        Ok(ContentHash(out))
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <alloc::string::String as serde::Deserialize>::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Incremental hasher for streaming file contents.
#[derive(Clone, Default)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        ContentHasher(Sha256::new())
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finalize(self) -> ContentHash {
        let out = self.0.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        ContentHash(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    // Reference values from `printf abc | sha256sum` and `sha256sum < /dev/null`.
    const ABC: &str = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
    const EMPTY: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    #[test]
    fn renders_reference_digests() {
        assert_eq!(ContentHash::digest(b"abc").to_string(), ABC);
        assert_eq!(ContentHash::digest(b"").to_string(), EMPTY);
    }

    #[test]
    fn streaming_matches_one_shot() {
        let mut h = ContentHasher::new();
        h.update(b"a");
        h.update(b"bc");
        assert_eq!(h.finalize(), ContentHash::digest(b"abc"));
    }

    #[test]
    fn parses_hex_round_trip() {
        let h: ContentHash = ABC.parse().unwrap();
        assert_eq!(h.to_string(), ABC);
        assert_eq!("abc".parse::<ContentHash>(), Err(HashParseError::Length(3)));
        let upper = ABC.to_uppercase();
        assert!(matches!(upper.parse::<ContentHash>(), Err(HashParseError::Digit(_))));
    }

    #[test]
    fn fanout_splits_first_byte() {
        let (dir, rest) = ContentHash::digest(b"abc").fanout();
        assert_eq!(dir, "ba");
        assert_eq!(rest, &ABC[2..]);
    }
}
