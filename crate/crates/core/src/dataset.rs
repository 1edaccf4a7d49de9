//! The MGD dataset model: a closed DICOM subset with a single transfer syntax
//! (explicit VR, little endian), its strict binary codec, content checksums,
//! and the pseudonymizing anonymization pass.
//!
//! File layout:
//!
//! ```text
//! 128 x 0x00 | "DICM" | element*
//! element := group u16le | element u16le | VR 2 ascii | 0u16 | len u32le | value (even length)
//! ```
//!
//! This is not Part-10 conformant: all VRs pad with 0x00 and there is no
//! file meta group.

use std::fmt;

use hmac::{Hmac, Mac};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ids::Digest;

pub const PREAMBLE_LEN: usize = 128;
pub const MAGIC: &[u8; 4] = b"DICM";
const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Self {
        Tag { group, element }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.group, self.element)
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

pub mod tags {
    use super::Tag;

    pub const SOP_INSTANCE_UID: Tag = Tag::new(0x0008, 0x0018);
    pub const STUDY_DATE: Tag = Tag::new(0x0008, 0x0020);
    pub const MODALITY: Tag = Tag::new(0x0008, 0x0060);
    pub const INSTITUTION_NAME: Tag = Tag::new(0x0008, 0x0080);
    pub const MEAN_BRIGHTNESS: Tag = Tag::new(0x0009, 0x0001);
    pub const RMS_CONTRAST: Tag = Tag::new(0x0009, 0x0002);
    pub const BREAST_DENSITY: Tag = Tag::new(0x0009, 0x0003);
    pub const MICROCALC_COUNT: Tag = Tag::new(0x0009, 0x0004);
    pub const PATIENT_NAME: Tag = Tag::new(0x0010, 0x0010);
    pub const PATIENT_ID: Tag = Tag::new(0x0010, 0x0020);
    pub const PATIENT_BIRTH_DATE: Tag = Tag::new(0x0010, 0x0030);
    pub const PATIENT_SEX: Tag = Tag::new(0x0010, 0x0040);
    pub const PATIENT_AGE: Tag = Tag::new(0x0010, 0x1010);
    pub const STUDY_INSTANCE_UID: Tag = Tag::new(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: Tag = Tag::new(0x0020, 0x000E);
    pub const ROWS: Tag = Tag::new(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag::new(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag::new(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag::new(0x0028, 0x0101);
    pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Vr {
    UI,
    LO,
    PN,
    DA,
    AS,
    CS,
    SH,
    US,
    UL,
    DS,
    OB,
}

impl Vr {
    pub fn code(self) -> [u8; 2] {
        let s = match self {
            Vr::UI => b"UI",
            Vr::LO => b"LO",
            Vr::PN => b"PN",
            Vr::DA => b"DA",
            Vr::AS => b"AS",
            Vr::CS => b"CS",
            Vr::SH => b"SH",
            Vr::US => b"US",
            Vr::UL => b"UL",
            Vr::DS => b"DS",
            Vr::OB => b"OB",
        };
        *s
    }

    pub fn from_code(code: [u8; 2]) -> Option<Vr> {
        Some(match &code {
            b"UI" => Vr::UI,
            b"LO" => Vr::LO,
            b"PN" => Vr::PN,
            b"DA" => Vr::DA,
            b"AS" => Vr::AS,
            b"CS" => Vr::CS,
            b"SH" => Vr::SH,
            b"US" => Vr::US,
            b"UL" => Vr::UL,
            b"DS" => Vr::DS,
            b"OB" => Vr::OB,
            _ => return None,
        })
    }

    pub fn is_text(self) -> bool {
        !matches!(self, Vr::US | Vr::UL | Vr::OB)
    }
}

/// The closed tag dictionary. Sorted by tag.
pub const DICTIONARY: &[(Tag, Vr, &str)] = &[
    (tags::SOP_INSTANCE_UID, Vr::UI, "SOPInstanceUID"),
    (tags::STUDY_DATE, Vr::DA, "StudyDate"),
    (tags::MODALITY, Vr::CS, "Modality"),
    (tags::INSTITUTION_NAME, Vr::LO, "InstitutionName"),
    (tags::MEAN_BRIGHTNESS, Vr::DS, "MeanBrightness"),
    (tags::RMS_CONTRAST, Vr::DS, "RmsContrast"),
    (tags::BREAST_DENSITY, Vr::DS, "BreastDensity"),
    (tags::MICROCALC_COUNT, Vr::UL, "MicrocalcCount"),
    (tags::PATIENT_NAME, Vr::PN, "PatientName"),
    (tags::PATIENT_ID, Vr::LO, "PatientID"),
    (tags::PATIENT_BIRTH_DATE, Vr::DA, "PatientBirthDate"),
    (tags::PATIENT_SEX, Vr::CS, "PatientSex"),
    (tags::PATIENT_AGE, Vr::AS, "PatientAge"),
    (tags::STUDY_INSTANCE_UID, Vr::UI, "StudyInstanceUID"),
    (tags::SERIES_INSTANCE_UID, Vr::UI, "SeriesInstanceUID"),
    (tags::ROWS, Vr::US, "Rows"),
    (tags::COLUMNS, Vr::US, "Columns"),
    (tags::BITS_ALLOCATED, Vr::US, "BitsAllocated"),
    (tags::BITS_STORED, Vr::US, "BitsStored"),
    (tags::PIXEL_DATA, Vr::OB, "PixelData"),
];

pub fn dictionary_vr(tag: Tag) -> Option<Vr> {
    DICTIONARY
        .binary_search_by_key(&tag, |(t, _, _)| *t)
        .ok()
        .map(|i| DICTIONARY[i].1)
}

pub fn tag_name(tag: Tag) -> Option<&'static str> {
    DICTIONARY
        .binary_search_by_key(&tag, |(t, _, _)| *t)
        .ok()
        .map(|i| DICTIONARY[i].2)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("dataset invariant violated: {0}")]
    InvariantViolation(String),
    #[error("bad magic: not an MGD stream")]
    BadMagic,
    #[error("unknown tag {0}")]
    UnknownTag(Tag),
    #[error("VR mismatch at {0}")]
    VrMismatch(Tag),
    #[error("truncated stream")]
    Truncated,
    #[error("duplicate tag {0}")]
    DuplicateTag(Tag),
    #[error("tag {0} out of order")]
    OutOfOrder(Tag),
    #[error("odd value length at {0}")]
    OddLength(Tag),
    #[error("non-zero reserved field at {0}")]
    NonZeroReserved(Tag),
    #[error("dataset has no PatientID")]
    MissingPatientID,
}

/// One tag/value pair. Values are stored already padded to even length.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Element {
    tag: Tag,
    vr: Vr,
    value: Vec<u8>,
}

impl Element {
    /// Builds an element without consulting the dictionary. Pads to even length.
    pub fn raw(tag: Tag, vr: Vr, mut value: Vec<u8>) -> Self {
        if value.len() % 2 == 1 {
            value.push(0);
        }
        Element { tag, vr, value }
    }

    fn typed(tag: Tag, value: Vec<u8>) -> Result<Self, DatasetError> {
        let vr = dictionary_vr(tag).ok_or(DatasetError::UnknownTag(tag))?;
        Ok(Element::raw(tag, vr, value))
    }

    pub fn text(tag: Tag, s: &str) -> Result<Self, DatasetError> {
        let e = Element::typed(tag, s.as_bytes().to_vec())?;
        if !e.vr.is_text() {
            return Err(DatasetError::VrMismatch(tag));
        }
        Ok(e)
    }

    pub fn u16(tag: Tag, v: u16) -> Result<Self, DatasetError> {
        let e = Element::typed(tag, v.to_le_bytes().to_vec())?;
        if e.vr != Vr::US {
            return Err(DatasetError::VrMismatch(tag));
        }
        Ok(e)
    }

    pub fn u32(tag: Tag, v: u32) -> Result<Self, DatasetError> {
        let e = Element::typed(tag, v.to_le_bytes().to_vec())?;
        if e.vr != Vr::UL {
            return Err(DatasetError::VrMismatch(tag));
        }
        Ok(e)
    }

    pub fn bytes(tag: Tag, v: Vec<u8>) -> Result<Self, DatasetError> {
        let e = Element::typed(tag, v)?;
        if e.vr != Vr::OB {
            return Err(DatasetError::VrMismatch(tag));
        }
        Ok(e)
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn vr(&self) -> Vr {
        self.vr
    }

    pub fn value(&self) -> &[u8] {
        &self.value
    }

    /// Text value with trailing NUL padding removed.
    pub fn as_str(&self) -> Option<&str> {
        if !self.vr.is_text() {
            return None;
        }
        let end = self.value.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        std::str::from_utf8(&self.value[..end]).ok()
    }

    pub fn as_u16(&self) -> Option<u16> {
        match (self.vr, self.value.as_slice()) {
            (Vr::US, [a, b]) => Some(u16::from_le_bytes([*a, *b])),
            _ => None,
        }
    }

    pub fn as_u32(&self) -> Option<u32> {
        match (self.vr, self.value.as_slice()) {
            (Vr::UL, [a, b, c, d]) => Some(u32::from_le_bytes([*a, *b, *c, *d])),
            _ => None,
        }
    }
}

/// Ordered set of elements, strictly ascending by tag.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Dataset {
    elements: Vec<Element>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset::default()
    }

    /// Wraps elements as given; ordering and invariants are only checked by
    /// [`Dataset::validate`] and [`encode`].
    pub fn from_elements_unchecked(elements: Vec<Element>) -> Self {
        Dataset { elements }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Inserts or replaces, keeping tag order.
    pub fn put(&mut self, e: Element) {
        match self.elements.binary_search_by_key(&e.tag, |x| x.tag) {
            Ok(i) => self.elements[i] = e,
            Err(i) => self.elements.insert(i, e),
        }
    }

    pub fn remove(&mut self, tag: Tag) -> Option<Element> {
        self.elements
            .binary_search_by_key(&tag, |x| x.tag)
            .ok()
            .map(|i| self.elements.remove(i))
    }

    pub fn get(&self, tag: Tag) -> Option<&Element> {
        self.elements
            .binary_search_by_key(&tag, |x| x.tag)
            .ok()
            .map(|i| &self.elements[i])
    }

    pub fn contains(&self, tag: Tag) -> bool {
        self.get(tag).is_some()
    }

    pub fn str(&self, tag: Tag) -> Option<&str> {
        self.get(tag).and_then(Element::as_str)
    }

    pub fn u16(&self, tag: Tag) -> Option<u16> {
        self.get(tag).and_then(Element::as_u16)
    }

    pub fn u32(&self, tag: Tag) -> Option<u32> {
        self.get(tag).and_then(Element::as_u32)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvariantViolation(m));
        for w in self.elements.windows(2) {
            if w[0].tag >= w[1].tag {
                return bad(format!("tags not strictly ascending at {}", w[1].tag));
            }
        }
        for e in &self.elements {
            match dictionary_vr(e.tag) {
                None => return Err(DatasetError::UnknownTag(e.tag)),
                Some(vr) if vr != e.vr => return Err(DatasetError::VrMismatch(e.tag)),
                _ => {}
            }
            if e.value.len() % 2 == 1 {
                return bad(format!("odd value length at {}", e.tag));
            }
            if e.vr.is_text() && !e.value.is_ascii() {
                return bad(format!("non-ASCII text at {}", e.tag));
            }
            if e.vr == Vr::US && e.value.len() != 2 {
                return bad(format!("US value at {} is not 2 bytes", e.tag));
            }
            if e.vr == Vr::UL && e.value.len() != 4 {
                return bad(format!("UL value at {} is not 4 bytes", e.tag));
            }
        }
        if let Some(bits) = self.u16(tags::BITS_ALLOCATED) {
            if bits != 8 && bits != 16 {
                return bad(format!("BitsAllocated {bits} not in {{8, 16}}"));
            }
        }
        if let Some(px) = self.get(tags::PIXEL_DATA) {
            let (rows, cols, bits) = match (
                self.u16(tags::ROWS),
                self.u16(tags::COLUMNS),
                self.u16(tags::BITS_ALLOCATED),
            ) {
                (Some(r), Some(c), Some(b)) => (r as usize, c as usize, b as usize),
                _ => return bad("PixelData without Rows/Columns/BitsAllocated".into()),
            };
            let expect = rows * cols * (bits / 8);
            // Pixel payloads are even already for 16-bit; 8-bit odd products get one pad byte.
            let padded = expect + expect % 2;
            if px.value.len() != padded {
                return bad(format!(
                    "PixelData is {} bytes, Rows x Columns x bytes = {expect}",
                    px.value.len()
                ));
            }
        }
        Ok(())
    }
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>, DatasetError> {
    ds.validate()?;
    let body: usize = ds.elements.iter().map(|e| HEADER_LEN + e.value.len()).sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + 4 + body);
    out.resize(PREAMBLE_LEN, 0);
    out.extend_from_slice(MAGIC);
    for e in &ds.elements {
        out.extend_from_slice(&e.tag.group.to_le_bytes());
        out.extend_from_slice(&e.tag.element.to_le_bytes());
        out.extend_from_slice(&e.vr.code());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(e.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&e.value);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    if bytes.len() < PREAMBLE_LEN + 4
        || bytes[..PREAMBLE_LEN].iter().any(|&b| b != 0)
        || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC
    {
        return Err(DatasetError::BadMagic);
    }
    let mut pos = PREAMBLE_LEN + 4;
    let mut elements: Vec<Element> = Vec::new();
    while pos < bytes.len() {
        let h = bytes.get(pos..pos + HEADER_LEN).ok_or(DatasetError::Truncated)?;
        let tag = Tag::new(u16::from_le_bytes([h[0], h[1]]), u16::from_le_bytes([h[2], h[3]]));
        let expected_vr = dictionary_vr(tag).ok_or(DatasetError::UnknownTag(tag))?;
        let vr = Vr::from_code([h[4], h[5]]).ok_or(DatasetError::VrMismatch(tag))?;
        if vr != expected_vr {
            return Err(DatasetError::VrMismatch(tag));
        }
        if h[6] != 0 || h[7] != 0 {
            return Err(DatasetError::NonZeroReserved(tag));
        }
        let len = u32::from_le_bytes([h[8], h[9], h[10], h[11]]) as usize;
        if len % 2 == 1 {
            return Err(DatasetError::OddLength(tag));
        }
        pos += HEADER_LEN;
        let value = bytes
            .get(pos..pos.checked_add(len).ok_or(DatasetError::Truncated)?)
            .ok_or(DatasetError::Truncated)?;
        pos += len;
        if let Some(prev) = elements.last() {
            if prev.tag == tag {
                return Err(DatasetError::DuplicateTag(tag));
            }
            if prev.tag > tag {
                return Err(DatasetError::OutOfOrder(tag));
            }
        }
        elements.push(Element { tag, vr, value: value.to_vec() });
    }
    let ds = Dataset { elements };
    ds.validate()?;
    Ok(ds)
}

pub fn checksum(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Re-identification pair kept only at the origin site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReidPair {
    pub pseudonym: String,
    pub original_id: String,
}

/// Lowercase hex of the first 8 bytes of HMAC-SHA-256(key, id).
pub fn pseudonym(federation_key: &[u8; 32], patient_id: &str) -> String {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(federation_key).expect("any key length");
    mac.update(patient_id.as_bytes());
    let tag = mac.finalize().into_bytes();
    hex::encode(&tag[..8])
}

/// Drops direct identifiers and replaces PatientID with its keyed pseudonym.
/// Must be applied exactly once per dataset; a pseudonym fed back in is
/// re-hashed to a new value.
pub fn anonymize(
    ds: &Dataset,
    federation_key: &[u8; 32],
) -> Result<(Dataset, ReidPair), DatasetError> {
    let original = ds
        .str(tags::PATIENT_ID)
        .ok_or(DatasetError::MissingPatientID)?
        .to_string();
    let pseudo = pseudonym(federation_key, &original);
    let mut out = ds.clone();
    out.remove(tags::PATIENT_NAME);
    out.remove(tags::PATIENT_BIRTH_DATE);
    out.put(Element::text(tags::PATIENT_ID, &pseudo)?);
    Ok((out, ReidPair { pseudonym: pseudo, original_id: original }))
}

pub fn is_pseudonym(s: &str) -> bool {
    s.len() == 16 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Checks the output shape of [`anonymize`]; used by gridboxes to re-verify
/// inbound datasets.
pub fn verify_anonymized(ds: &Dataset) -> Result<(), String> {
    if ds.contains(tags::PATIENT_NAME) || ds.contains(tags::PATIENT_BIRTH_DATE) {
        return Err("not anonymized".into());
    }
    match ds.str(tags::PATIENT_ID) {
        Some(id) if is_pseudonym(id) => Ok(()),
        _ => Err("not anonymized".into()),
    }
}
