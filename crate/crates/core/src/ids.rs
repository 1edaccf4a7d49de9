//! Identifier newtypes shared across the federation.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("invalid site id {0:?}: expected [a-z0-9-]{{1,32}}")]
    Site(String),
    #[error("invalid hex id {0:?}")]
    Hex(String),
}

/// A gridbox identity. Total order is lexicographic and is used for every
/// federation-wide tie-break.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct SiteId(String);

impl SiteId {
    pub fn new(s: impl Into<String>) -> Result<Self, IdError> {
        let s = s.into();
        let ok = !s.is_empty()
            && s.len() <= 32
            && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
        if ok {
            Ok(SiteId(s))
        } else {
            Err(IdError::Site(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Default AE title for a site: upper-cased id truncated to 16 chars.
    pub fn default_ae(&self) -> String {
        self.0.to_ascii_uppercase().chars().take(16).collect()
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SiteId({})", self.0)
    }
}

impl FromStr for SiteId {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SiteId::new(s)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SiteId::new(s).map_err(serde::de::Error::custom)
    }
}

macro_rules! hex_id {
    ($(#[$m:meta])* $name:ident, $len:expr) => {
        $(#[$m])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, IdError> {
                let v = hex::decode(s).map_err(|_| IdError::Hex(s.to_string()))?;
                let arr: [u8; $len] = v.try_into().map_err(|_| IdError::Hex(s.to_string()))?;
                Ok($name(arr))
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(
    /// Federation-wide identity of an immutable content object, minted at ingest.
    Guid,
    16
);
hex_id!(
    /// SHA-256 digest.
    Digest,
    32
);
hex_id!(
    /// Identity of an analysis job.
    JobId,
    16
);

impl Guid {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Guid(b)
    }
}

impl JobId {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        JobId(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_id_charset() {
        assert!(SiteId::new("site-a").is_ok());
        assert!(SiteId::new("Site").is_err());
        assert!(SiteId::new("").is_err());
        assert!(SiteId::new("a".repeat(33)).is_err());
        assert_eq!(SiteId::new("udine").unwrap().default_ae(), "UDINE");
    }

    #[test]
    fn guid_hex_roundtrip() {
        let g = Guid([0xab; 16]);
        assert_eq!(Guid::from_hex(&g.to_hex()).unwrap(), g);
        assert!(Guid::from_hex("abcd").is_err());
        let j = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<Guid>(&j).unwrap(), g);
    }
}
