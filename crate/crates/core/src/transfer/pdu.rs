use std::io::{Read, Write};

use super::TransferError;

pub const MAX_BODY: usize = 16 << 20;
pub const HEADER_LEN: usize = 6;
pub const AE_LEN: usize = 16;
pub const PROTOCOL_VERSION: u16 = 1;
/// version, calling AE, called AE, key id.
pub const ASSOC_FIXED_LEN: usize = 2 + AE_LEN + AE_LEN + 1;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum PduType {
    AssocRq = 0x01,
    AssocAc = 0x02,
    AssocRj = 0x03,
    Data = 0x04,
    ReleaseRq = 0x05,
    ReleaseRsp = 0x06,
}

impl PduType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => PduType::AssocRq,
            0x02 => PduType::AssocAc,
            0x03 => PduType::AssocRj,
            0x04 => PduType::Data,
            0x05 => PduType::ReleaseRq,
            0x06 => PduType::ReleaseRsp,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pdu {
    pub ptype: PduType,
    pub body: Vec<u8>,
}

impl Pdu {
    pub fn new(ptype: PduType, body: Vec<u8>) -> Self {
        Pdu { ptype, body }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.push(self.ptype as u8);
        out.push(0);
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes exactly one PDU occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Pdu, TransferError> {
        let (ptype, len) = parse_header(bytes.get(..HEADER_LEN).ok_or_else(|| proto("short PDU header"))?)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != len {
            return Err(proto(format!("PDU length {len} but {} body bytes", body.len())));
        }
        Ok(Pdu { ptype, body: body.to_vec() })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Pdu, TransferError> {
        let mut h = [0u8; HEADER_LEN];
        read_exact(r, &mut h)?;
        let (ptype, len) = parse_header(&h)?;
        let mut body = vec![0u8; len];
        read_exact(r, &mut body)?;
        Ok(Pdu { ptype, body })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TransferError> {
        w.write_all(&self.encode()).map_err(TransferError::from_io)?;
        w.flush().map_err(TransferError::from_io)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), TransferError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransferError::Aborted,
        _ => TransferError::from_io(e),
    })
}

fn parse_header(h: &[u8]) -> Result<(PduType, usize), TransferError> {
    let ptype = PduType::from_u8(h[0]).ok_or_else(|| proto(format!("unknown PDU type {:#04x}", h[0])))?;
    if h[1] != 0 {
        return Err(proto("non-zero reserved byte"));
    }
    let len = u32::from_le_bytes([h[2], h[3], h[4], h[5]]) as usize;
    if len > MAX_BODY {
        return Err(proto(format!("PDU body {len} exceeds {MAX_BODY}")));
    }
    Ok((ptype, len))
}

fn proto(m: impl Into<String>) -> TransferError {
    TransferError::Protocol(m.into())
}

/// Space-padded 16-byte AE title.
pub fn ae_bytes(ae: &str) -> Result<[u8; AE_LEN], TransferError> {
    if ae.is_empty() || ae.len() > AE_LEN || !ae.bytes().all(|b| (0x21..0x7f).contains(&b)) {
        return Err(proto(format!("bad AE title {ae:?}")));
    }
    let mut out = [b' '; AE_LEN];
    out[..ae.len()].copy_from_slice(ae.as_bytes());
    Ok(out)
}

pub fn ae_str(b: &[u8]) -> String {
    String::from_utf8_lossy(b).trim_end_matches(' ').to_string()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssocRq {
    pub version: u16,
    pub calling_ae: String,
    pub called_ae: String,
    pub key_id: u8,
    /// Nonce and GCM tag over an empty message, authenticating the fixed
    /// fields under the named key.
    pub proof: [u8; NONCE_LEN + TAG_LEN],
}

impl AssocRq {
    pub fn fixed_bytes(&self) -> Result<Vec<u8>, TransferError> {
        let mut out = Vec::with_capacity(ASSOC_FIXED_LEN);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&ae_bytes(&self.calling_ae)?);
        out.extend_from_slice(&ae_bytes(&self.called_ae)?);
        out.push(self.key_id);
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>, TransferError> {
        let mut out = self.fixed_bytes()?;
        out.extend_from_slice(&self.proof);
        Ok(out)
    }

    pub fn decode(b: &[u8]) -> Result<AssocRq, TransferError> {
        if b.len() != ASSOC_FIXED_LEN + NONCE_LEN + TAG_LEN {
            return Err(proto(format!("ASSOC-RQ body of {} bytes", b.len())));
        }
        Ok(AssocRq {
            version: u16::from_le_bytes([b[0], b[1]]),
            calling_ae: ae_str(&b[2..2 + AE_LEN]),
            called_ae: ae_str(&b[2 + AE_LEN..2 + 2 * AE_LEN]),
            key_id: b[ASSOC_FIXED_LEN - 1],
            proof: b[ASSOC_FIXED_LEN..].try_into().expect("length checked"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectReason {
    BadVersion = 1,
    UnknownAe = 2,
    Unauthorized = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Command {
    StoreRq = 1,
    StoreRsp = 2,
    FindRq = 3,
    FindRsp = 4,
    GetRq = 5,
    GetRsp = 6,
}

impl Command {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Command::StoreRq,
            2 => Command::StoreRsp,
            3 => Command::FindRq,
            4 => Command::FindRsp,
            5 => Command::GetRq,
            6 => Command::GetRsp,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Success = 0,
    Pending = 1,
    Failure = 2,
    Refused = 3,
}

impl Status {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Status::Success,
            1 => Status::Pending,
            2 => Status::Failure,
            3 => Status::Refused,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DimseMessage {
    pub msg_id: u16,
    pub command: Command,
    pub status: Status,
    pub payload: Vec<u8>,
}

impl DimseMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.payload.len());
        out.extend_from_slice(&self.msg_id.to_le_bytes());
        out.push(self.command as u8);
        out.push(self.status as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(b: &[u8]) -> Result<DimseMessage, TransferError> {
        if b.len() < 4 {
            return Err(proto("short DIMSE message"));
        }
        Ok(DimseMessage {
            msg_id: u16::from_le_bytes([b[0], b[1]]),
            command: Command::from_u8(b[2]).ok_or_else(|| proto(format!("unknown command {}", b[2])))?,
            status: Status::from_u8(b[3]).ok_or_else(|| proto(format!("unknown status {}", b[3])))?,
            payload: b[4..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdu_framing() {
        let p = Pdu::new(PduType::ReleaseRq, vec![]);
        assert_eq!(p.encode(), vec![0x05, 0, 0, 0, 0, 0]);
        let d = Pdu::new(PduType::Data, vec![1, 2, 3]);
        assert_eq!(d.encode(), vec![0x04, 0, 3, 0, 0, 0, 1, 2, 3]);
        assert_eq!(Pdu::decode(&d.encode()).unwrap(), d);
        assert!(Pdu::decode(&[0x09, 0, 0, 0, 0, 0]).is_err());
        assert!(Pdu::decode(&[0x04, 1, 0, 0, 0, 0]).is_err());
        assert!(Pdu::decode(&[0x04, 0, 2, 0, 0, 0, 1]).is_err());
        let huge = [0x04, 0, 0, 0, 0, 2];
        assert!(Pdu::decode(&huge).is_err());
    }

    #[test]
    fn assoc_rq_layout() {
        let rq = AssocRq {
            version: 1,
            calling_ae: "SITE-A".into(),
            called_ae: "SITE-B".into(),
            key_id: 7,
            proof: [9; NONCE_LEN + TAG_LEN],
        };
        let b = rq.encode().unwrap();
        assert_eq!(&b[..2], &[1, 0]);
        assert_eq!(&b[2..18], b"SITE-A          ");
        assert_eq!(b[34], 7);
        assert_eq!(AssocRq::decode(&b).unwrap(), rq);
        assert!(ae_bytes("").is_err());
        assert!(ae_bytes("THIS-TITLE-IS-TOO-LONG").is_err());
    }

    #[test]
    fn dimse_round_trip() {
        let m = DimseMessage { msg_id: 513, command: Command::FindRsp, status: Status::Pending, payload: b"{}".to_vec() };
        let b = m.encode();
        assert_eq!(&b[..4], &[1, 2, 4, 1]);
        assert_eq!(DimseMessage::decode(&b).unwrap(), m);
        assert!(DimseMessage::decode(&[0, 0, 9, 0]).is_err());
    }
}
