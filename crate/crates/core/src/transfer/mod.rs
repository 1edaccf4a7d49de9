//! MG-DIMSE: a small DICOM-style association protocol for moving datasets
//! between workstations and gridboxes.
//!
//! Framing is `type u8 ‖ 0u8 ‖ length u32 LE ‖ body`. After association every
//! DATA body is a secure frame: `nonce[12] ‖ AES-256-GCM(ciphertext ‖ tag)`
//! with the nonce `salt[4] ‖ counter u64 LE` and the counter bytes as
//! associated data. Counters strictly increase per direction; anything else
//! aborts the association.
//!
//! The server side is sans-IO ([`ServerSession::handle`]) so the same state
//! machine runs behind TCP and behind the in-memory [`Loopback`].

mod pdu;

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::time::Duration;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use rand::RngCore;
use thiserror::Error;

use crate::ids::Guid;

pub use pdu::{
    ae_bytes, ae_str, AssocRq, Command, DimseMessage, Pdu, PduType, RejectReason, Status, AE_LEN, ASSOC_FIXED_LEN,
    MAX_BODY, NONCE_LEN, PROTOCOL_VERSION, TAG_LEN,
};

pub const DEFAULT_PORT: u16 = 11112;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransferError {
    #[error("association rejected (reason {0})")]
    Rejected(u8),
    #[error("timed out")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote failure: {0}")]
    RemoteFailure(String),
    #[error("not found at remote: {0}")]
    NotFoundRemote(String),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("association aborted")]
    Aborted,
    #[error("i/o error: {0}")]
    Io(String),
}

impl TransferError {
    pub(crate) fn from_io(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => TransferError::Timeout,
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::BrokenPipe => TransferError::Aborted,
            _ => TransferError::Io(e.to_string()),
        }
    }
}

fn cipher(key: &[u8; 32]) -> Aes256Gcm {
    Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key))
}

/// Nonce and tag over an empty message; proves knowledge of the key and binds
/// `aad`.
fn key_proof(key: &[u8; 32], aad: &[u8], rng: &mut dyn RngCore) -> [u8; NONCE_LEN + TAG_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let tag = cipher(key)
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: &[], aad })
        .expect("gcm encrypt");
    let mut out = [0u8; NONCE_LEN + TAG_LEN];
    out[..NONCE_LEN].copy_from_slice(&nonce);
    out[NONCE_LEN..].copy_from_slice(&tag);
    out
}

fn check_proof(key: &[u8; 32], aad: &[u8], proof: &[u8]) -> bool {
    proof.len() == NONCE_LEN + TAG_LEN
        && cipher(key)
            .decrypt(Nonce::from_slice(&proof[..NONCE_LEN]), Payload { msg: &proof[NONCE_LEN..], aad })
            .is_ok()
}

/// One direction pair of counters under a shared key.
pub struct SecureChannel {
    cipher: Aes256Gcm,
    salt: [u8; 4],
    send_counter: u64,
    recv_counter: u64,
}

impl SecureChannel {
    pub fn new(key: &[u8; 32], rng: &mut dyn RngCore) -> Self {
        let mut salt = [0u8; 4];
        rng.fill_bytes(&mut salt);
        SecureChannel { cipher: cipher(key), salt, send_counter: 0, recv_counter: 0 }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        self.send_counter += 1;
        let ctr = self.send_counter.to_le_bytes();
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.salt);
        nonce[4..].copy_from_slice(&ctr);
        let ct = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &ctr })
            .expect("gcm encrypt");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&ct);
        out
    }

    /// Rejects short frames, non-increasing counters and tag failures.
    pub fn open(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransferError> {
        if frame.len() < NONCE_LEN + TAG_LEN {
            return Err(TransferError::Aborted);
        }
        let ctr_bytes: [u8; 8] = frame[4..NONCE_LEN].try_into().expect("slice of 8");
        let ctr = u64::from_le_bytes(ctr_bytes);
        if ctr <= self.recv_counter {
            return Err(TransferError::Aborted);
        }
        let pt = self
            .cipher
            .decrypt(Nonce::from_slice(&frame[..NONCE_LEN]), Payload { msg: &frame[NONCE_LEN..], aad: &ctr_bytes })
            .map_err(|_| TransferError::Aborted)?;
        self.recv_counter = ctr;
        Ok(pt)
    }
}

/// Node-side services behind the protocol.
pub trait ServiceProvider: Sync {
    /// Ingests an anonymized MGD file; the error string goes back verbatim.
    fn store(&self, mgd: &[u8]) -> Result<(), String>;
    /// Evaluates a sub-query document locally; one document per row.
    fn find(&self, query_doc: &[u8]) -> Result<Vec<Vec<u8>>, String>;
    fn get(&self, guid: &Guid) -> Result<Vec<u8>, String>;
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub ae_title: String,
    pub keys: BTreeMap<u8, [u8; 32]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    AwaitingAssociation,
    Open,
    Released,
    Rejected,
    Aborted,
}

/// Server half of one association.
pub struct ServerSession<'a> {
    provider: &'a dyn ServiceProvider,
    config: &'a ServerConfig,
    state: SessionState,
    channel: Option<SecureChannel>,
    rng: Box<dyn RngCore + Send + 'a>,
}

impl<'a> ServerSession<'a> {
    pub fn new(provider: &'a dyn ServiceProvider, config: &'a ServerConfig, rng: Box<dyn RngCore + Send + 'a>) -> Self {
        ServerSession { provider, config, state: SessionState::AwaitingAssociation, channel: None, rng }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_closed(&self) -> bool {
        !matches!(self.state, SessionState::AwaitingAssociation | SessionState::Open)
    }

    pub fn abort(&mut self) {
        self.state = SessionState::Aborted;
        self.channel = None;
    }

    /// Consumes one PDU and returns the PDUs to send back. After an abort the
    /// session is closed and returns nothing.
    pub fn handle(&mut self, pdu: Pdu) -> Vec<Pdu> {
        match (self.state, pdu.ptype) {
            (SessionState::AwaitingAssociation, PduType::AssocRq) => self.associate(&pdu.body),
            (SessionState::Open, PduType::Data) => match self.data(&pdu.body) {
                Ok(out) => out,
                Err(e) => {
                    log::warn!("aborting association: {e}");
                    self.abort();
                    Vec::new()
                }
            },
            (SessionState::Open, PduType::ReleaseRq) => {
                self.state = SessionState::Released;
                self.channel = None;
                vec![Pdu::new(PduType::ReleaseRsp, Vec::new())]
            }
            (SessionState::Released, PduType::ReleaseRq) => vec![Pdu::new(PduType::ReleaseRsp, Vec::new())],
            _ => {
                self.abort();
                Vec::new()
            }
        }
    }

    fn reject(&mut self, reason: RejectReason) -> Vec<Pdu> {
        self.state = SessionState::Rejected;
        vec![Pdu::new(PduType::AssocRj, vec![reason as u8])]
    }

    fn associate(&mut self, body: &[u8]) -> Vec<Pdu> {
        let Ok(rq) = AssocRq::decode(body) else {
            self.abort();
            return Vec::new();
        };
        if rq.version != PROTOCOL_VERSION {
            return self.reject(RejectReason::BadVersion);
        }
        if rq.called_ae != self.config.ae_title || rq.calling_ae.is_empty() {
            return self.reject(RejectReason::UnknownAe);
        }
        let Some(key) = self.config.keys.get(&rq.key_id) else {
            return self.reject(RejectReason::Unauthorized);
        };
        if !check_proof(key, &body[..ASSOC_FIXED_LEN], &rq.proof) {
            return self.reject(RejectReason::Unauthorized);
        }
        let proof = key_proof(key, body, &mut *self.rng);
        self.channel = Some(SecureChannel::new(key, &mut *self.rng));
        self.state = SessionState::Open;
        vec![Pdu::new(PduType::AssocAc, proof.to_vec())]
    }

    fn data(&mut self, frame: &[u8]) -> Result<Vec<Pdu>, TransferError> {
        let ch = self.channel.as_mut().ok_or(TransferError::Aborted)?;
        let msg = DimseMessage::decode(&ch.open(frame)?)?;
        let reply = |command, status, payload: Vec<u8>| DimseMessage { msg_id: msg.msg_id, command, status, payload };
        let replies = match msg.command {
            Command::StoreRq => vec![match self.provider.store(&msg.payload) {
                Ok(()) => reply(Command::StoreRsp, Status::Success, Vec::new()),
                Err(reason) => reply(Command::StoreRsp, Status::Failure, reason.into_bytes()),
            }],
            Command::FindRq => match self.provider.find(&msg.payload) {
                Ok(rows) => rows
                    .into_iter()
                    .map(|row| reply(Command::FindRsp, Status::Pending, row))
                    .chain(std::iter::once(reply(Command::FindRsp, Status::Success, Vec::new())))
                    .collect(),
                Err(reason) => vec![reply(Command::FindRsp, Status::Failure, reason.into_bytes())],
            },
            Command::GetRq => {
                let res = <[u8; 16]>::try_from(msg.payload.as_slice())
                    .map_err(|_| "guid must be 16 bytes".to_string())
                    .and_then(|g| self.provider.get(&Guid(g)));
                vec![match res {
                    Ok(bytes) => reply(Command::GetRsp, Status::Success, bytes),
                    Err(reason) => reply(Command::GetRsp, Status::Failure, reason.into_bytes()),
                }]
            }
            other => return Err(TransferError::Protocol(format!("unexpected command {other:?}"))),
        };
        let ch = self.channel.as_mut().ok_or(TransferError::Aborted)?;
        Ok(replies.into_iter().map(|m| Pdu::new(PduType::Data, ch.seal(&m.encode()))).collect())
    }
}

/// Transport under a client association.
pub trait PduChannel {
    fn send(&mut self, pdu: &Pdu) -> Result<(), TransferError>;
    fn recv(&mut self) -> Result<Pdu, TransferError>;
}

pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpChannel {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, TransferError> {
        use std::net::ToSocketAddrs;
        let sa = addr
            .to_socket_addrs()
            .map_err(TransferError::from_io)?
            .next()
            .ok_or_else(|| TransferError::Io(format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sa, timeout).map_err(TransferError::from_io)?;
        TcpChannel::from_stream(stream, Some(timeout))
    }

    pub fn from_stream(stream: TcpStream, timeout: Option<Duration>) -> Result<Self, TransferError> {
        stream.set_read_timeout(timeout).map_err(TransferError::from_io)?;
        stream.set_nodelay(true).map_err(TransferError::from_io)?;
        let w = stream.try_clone().map_err(TransferError::from_io)?;
        Ok(TcpChannel { reader: BufReader::new(stream), writer: BufWriter::new(w) })
    }
}

impl PduChannel for TcpChannel {
    fn send(&mut self, pdu: &Pdu) -> Result<(), TransferError> {
        pdu.write_to(&mut self.writer)
    }

    fn recv(&mut self) -> Result<Pdu, TransferError> {
        Pdu::read_from(&mut self.reader)
    }
}

/// Runs one server association over a TCP connection until it closes.
pub fn serve_tcp(stream: TcpStream, mut session: ServerSession<'_>, idle: Duration) {
    let peer = stream.peer_addr().ok();
    let Ok(mut ch) = TcpChannel::from_stream(stream, Some(idle)) else { return };
    while !session.is_closed() {
        let pdu = match ch.recv() {
            Ok(p) => p,
            Err(e) => {
                if e != TransferError::Aborted {
                    log::debug!("association from {peer:?} ended: {e}");
                }
                return;
            }
        };
        for out in session.handle(pdu) {
            if ch.send(&out).is_err() {
                return;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToServer,
    ToClient,
}

/// Observes and may rewrite every encoded PDU crossing a loopback.
pub type WireTap<'a> = Box<dyn FnMut(Direction, &mut Vec<u8>) + 'a>;

/// In-memory channel driving a server session directly.
pub struct Loopback<'a> {
    server: ServerSession<'a>,
    inbox: VecDeque<Pdu>,
    tap: Option<WireTap<'a>>,
}

impl<'a> Loopback<'a> {
    pub fn new(server: ServerSession<'a>, tap: Option<WireTap<'a>>) -> Self {
        Loopback { server, inbox: VecDeque::new(), tap }
    }

    pub fn server_state(&self) -> SessionState {
        self.server.state()
    }

    fn pass(&mut self, dir: Direction, pdu: &Pdu) -> Result<Pdu, TransferError> {
        let mut bytes = pdu.encode();
        if let Some(tap) = self.tap.as_mut() {
            tap(dir, &mut bytes);
        }
        Pdu::decode(&bytes)
    }
}

impl PduChannel for Loopback<'_> {
    fn send(&mut self, pdu: &Pdu) -> Result<(), TransferError> {
        if self.server.is_closed() {
            return Err(TransferError::Aborted);
        }
        let delivered = match self.pass(Direction::ToServer, pdu) {
            Ok(p) => p,
            Err(_) => {
                self.server.abort();
                return Ok(());
            }
        };
        for out in self.server.handle(delivered) {
            let back = self.pass(Direction::ToClient, &out)?;
            self.inbox.push_back(back);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Pdu, TransferError> {
        self.inbox.pop_front().ok_or(TransferError::Aborted)
    }
}

/// Client half of an association.
pub struct Association<C: PduChannel> {
    channel: C,
    secure: SecureChannel,
    next_msg_id: u16,
    open: bool,
}

/// Opens an association. A reject surfaces as [`TransferError::Rejected`]
/// with the reason byte.
pub fn associate<C: PduChannel>(
    mut channel: C,
    calling_ae: &str,
    called_ae: &str,
    key_id: u8,
    key: &[u8; 32],
    rng: &mut dyn RngCore,
) -> Result<Association<C>, TransferError> {
    let mut rq = AssocRq {
        version: PROTOCOL_VERSION,
        calling_ae: calling_ae.into(),
        called_ae: called_ae.into(),
        key_id,
        proof: [0; NONCE_LEN + TAG_LEN],
    };
    rq.proof = key_proof(key, &rq.fixed_bytes()?, rng);
    associate_raw(channel_send(&mut channel, &rq)?, channel, key, rng)
}

fn channel_send<C: PduChannel>(channel: &mut C, rq: &AssocRq) -> Result<Vec<u8>, TransferError> {
    let body = rq.encode()?;
    channel.send(&Pdu::new(PduType::AssocRq, body.clone()))?;
    Ok(body)
}

fn associate_raw<C: PduChannel>(
    rq_body: Vec<u8>,
    mut channel: C,
    key: &[u8; 32],
    rng: &mut dyn RngCore,
) -> Result<Association<C>, TransferError> {
    let reply = channel.recv()?;
    match reply.ptype {
        PduType::AssocAc if check_proof(key, &rq_body, &reply.body) => Ok(Association {
            channel,
            secure: SecureChannel::new(key, rng),
            next_msg_id: 1,
            open: true,
        }),
        PduType::AssocAc => Err(TransferError::Protocol("server failed key proof".into())),
        PduType::AssocRj => Err(TransferError::Rejected(reply.body.first().copied().unwrap_or(0))),
        other => Err(TransferError::Protocol(format!("unexpected {other:?} during association"))),
    }
}

/// Sends an arbitrary ASSOC-RQ; exposed for protocol tests.
pub fn associate_with<C: PduChannel>(
    mut channel: C,
    rq: &AssocRq,
    key: &[u8; 32],
    rng: &mut dyn RngCore,
) -> Result<Association<C>, TransferError> {
    let body = channel_send(&mut channel, rq)?;
    associate_raw(body, channel, key, rng)
}

impl<C: PduChannel> Association<C> {
    pub fn channel_mut(&mut self) -> &mut C {
        &mut self.channel
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    fn request(&mut self, command: Command, payload: Vec<u8>) -> Result<u16, TransferError> {
        if !self.open {
            return Err(TransferError::Aborted);
        }
        let msg_id = self.next_msg_id;
        self.next_msg_id = self.next_msg_id.wrapping_add(1).max(1);
        let msg = DimseMessage { msg_id, command, status: Status::Success, payload };
        let frame = self.secure.seal(&msg.encode());
        self.send(Pdu::new(PduType::Data, frame))?;
        Ok(msg_id)
    }

    fn send(&mut self, pdu: Pdu) -> Result<(), TransferError> {
        self.channel.send(&pdu).inspect_err(|_| self.open = false)
    }

    fn response(&mut self, msg_id: u16, command: Command) -> Result<DimseMessage, TransferError> {
        let res = (|| {
            let pdu = self.channel.recv()?;
            if pdu.ptype != PduType::Data {
                return Err(TransferError::Protocol(format!("expected DATA, got {:?}", pdu.ptype)));
            }
            let msg = DimseMessage::decode(&self.secure.open(&pdu.body)?)?;
            if msg.msg_id != msg_id || msg.command != command {
                return Err(TransferError::Protocol("response does not match request".into()));
            }
            Ok(msg)
        })();
        if res.is_err() {
            self.open = false;
        }
        res
    }

    /// Sends a raw DATA PDU; exposed for replay and tamper tests.
    pub fn send_raw(&mut self, pdu: Pdu) -> Result<(), TransferError> {
        self.send(pdu)
    }

    /// Seals a message without sending it; exposed for replay tests.
    pub fn seal_raw(&mut self, msg: &DimseMessage) -> Vec<u8> {
        self.secure.seal(&msg.encode())
    }

    pub fn c_store(&mut self, mgd: &[u8]) -> Result<(), TransferError> {
        let id = self.request(Command::StoreRq, mgd.to_vec())?;
        let rsp = self.response(id, Command::StoreRsp)?;
        match rsp.status {
            Status::Success => Ok(()),
            _ => Err(TransferError::RemoteFailure(String::from_utf8_lossy(&rsp.payload).into_owned())),
        }
    }

    pub fn c_find(&mut self, query_doc: &[u8]) -> Result<Vec<Vec<u8>>, TransferError> {
        let id = self.request(Command::FindRq, query_doc.to_vec())?;
        let mut rows = Vec::new();
        loop {
            let rsp = self.response(id, Command::FindRsp)?;
            match rsp.status {
                Status::Pending => rows.push(rsp.payload),
                Status::Success => return Ok(rows),
                _ => return Err(TransferError::RemoteFailure(String::from_utf8_lossy(&rsp.payload).into_owned())),
            }
        }
    }

    pub fn c_get(&mut self, guid: &Guid) -> Result<Vec<u8>, TransferError> {
        let id = self.request(Command::GetRq, guid.as_bytes().to_vec())?;
        let rsp = self.response(id, Command::GetRsp)?;
        match rsp.status {
            Status::Success => Ok(rsp.payload),
            _ => Err(TransferError::NotFoundRemote(String::from_utf8_lossy(&rsp.payload).into_owned())),
        }
    }

    /// Idempotent; errors are swallowed.
    pub fn release(&mut self) {
        if !self.open {
            return;
        }
        self.open = false;
        if self.channel.send(&Pdu::new(PduType::ReleaseRq, Vec::new())).is_ok() {
            let _ = self.channel.recv();
        }
    }
}

impl<C: PduChannel> Drop for Association<C> {
    fn drop(&mut self) {
        self.release();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    struct Mem {
        files: Mutex<BTreeMap<Guid, Vec<u8>>>,
    }

    impl ServiceProvider for Mem {
        fn store(&self, mgd: &[u8]) -> Result<(), String> {
            if mgd.starts_with(b"PatientName") {
                return Err("not anonymized".into());
            }
            let mut f = self.files.lock().unwrap();
            let g = Guid([f.len() as u8; 16]);
            f.insert(g, mgd.to_vec());
            Ok(())
        }
        fn find(&self, doc: &[u8]) -> Result<Vec<Vec<u8>>, String> {
            match doc {
                b"two" => Ok(vec![b"r1".to_vec(), b"r2".to_vec()]),
                b"none" => Ok(vec![]),
                _ => Err("bad document".into()),
            }
        }
        fn get(&self, guid: &Guid) -> Result<Vec<u8>, String> {
            self.files.lock().unwrap().get(guid).cloned().ok_or_else(|| "unknown guid".into())
        }
    }

    const KEY: [u8; 32] = [7; 32];

    fn config() -> ServerConfig {
        ServerConfig { ae_title: "SITE-B".into(), keys: [(1u8, KEY)].into_iter().collect() }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mem() -> Mem {
        Mem { files: Mutex::new(BTreeMap::new()) }
    }

    #[test]
    fn store_find_get_release() {
        let (p, cfg) = (mem(), config());
        let lb = Loopback::new(ServerSession::new(&p, &cfg, Box::new(rng(1))), None);
        let mut a = associate(lb, "SITE-A", "SITE-B", 1, &KEY, &mut rng(2)).unwrap();
        a.c_store(b"MGD-1").unwrap();
        assert_eq!(
            a.c_store(b"PatientName here"),
            Err(TransferError::RemoteFailure("not anonymized".into()))
        );
        assert_eq!(a.c_find(b"two").unwrap(), vec![b"r1".to_vec(), b"r2".to_vec()]);
        assert!(a.c_find(b"none").unwrap().is_empty());
        assert!(matches!(a.c_find(b"junk"), Err(TransferError::RemoteFailure(_))));
        assert_eq!(a.c_get(&Guid([0; 16])).unwrap(), b"MGD-1");
        assert!(matches!(a.c_get(&Guid([9; 16])), Err(TransferError::NotFoundRemote(_))));
        a.release();
        a.release();
        assert_eq!(a.channel_mut().server_state(), SessionState::Released);
    }

    fn rejected(rq: AssocRq, key: &[u8; 32]) -> TransferError {
        let (p, cfg) = (mem(), config());
        let lb = Loopback::new(ServerSession::new(&p, &cfg, Box::new(rng(1))), None);
        associate_with(lb, &rq, key, &mut rng(3)).err().unwrap()
    }

    fn rq(version: u16, called: &str, key_id: u8, key: &[u8; 32]) -> AssocRq {
        let mut rq = AssocRq {
            version,
            calling_ae: "SITE-A".into(),
            called_ae: called.into(),
            key_id,
            proof: [0; NONCE_LEN + TAG_LEN],
        };
        rq.proof = key_proof(key, &rq.fixed_bytes().unwrap(), &mut rng(4));
        rq
    }

    #[test]
    fn reject_reasons() {
        assert_eq!(rejected(rq(2, "SITE-B", 1, &KEY), &KEY), TransferError::Rejected(1));
        assert_eq!(rejected(rq(1, "SITE-X", 1, &KEY), &KEY), TransferError::Rejected(2));
        assert_eq!(rejected(rq(1, "SITE-B", 9, &KEY), &KEY), TransferError::Rejected(3));
        let wrong = [8u8; 32];
        assert_eq!(rejected(rq(1, "SITE-B", 1, &wrong), &wrong), TransferError::Rejected(3));
    }

    #[test]
    fn replayed_frame_aborts() {
        let (p, cfg) = (mem(), config());
        let lb = Loopback::new(ServerSession::new(&p, &cfg, Box::new(rng(1))), None);
        let mut a = associate(lb, "SITE-A", "SITE-B", 1, &KEY, &mut rng(2)).unwrap();
        let msg = DimseMessage { msg_id: 40, command: Command::FindRq, status: Status::Success, payload: b"none".to_vec() };
        let frame = a.seal_raw(&msg);
        a.send_raw(Pdu::new(PduType::Data, frame.clone())).unwrap();
        assert!(a.channel_mut().recv().is_ok());
        a.send_raw(Pdu::new(PduType::Data, frame)).unwrap();
        assert_eq!(a.channel_mut().server_state(), SessionState::Aborted);
        assert!(a.c_find(b"none").is_err());
    }

    #[test]
    fn plaintext_data_aborts() {
        let (p, cfg) = (mem(), config());
        let lb = Loopback::new(ServerSession::new(&p, &cfg, Box::new(rng(1))), None);
        let mut a = associate(lb, "SITE-A", "SITE-B", 1, &KEY, &mut rng(2)).unwrap();
        let plain = DimseMessage { msg_id: 1, command: Command::StoreRq, status: Status::Success, payload: vec![1; 40] };
        a.send_raw(Pdu::new(PduType::Data, plain.encode())).unwrap();
        assert_eq!(a.channel_mut().server_state(), SessionState::Aborted);
        assert!(p.files.lock().unwrap().is_empty());
    }

    #[test]
    fn flipped_ciphertext_aborts_without_store() {
        let (p, cfg) = (mem(), config());
        let tap: WireTap = Box::new(|dir, bytes: &mut Vec<u8>| {
            if dir == Direction::ToServer && bytes[0] == PduType::Data as u8 {
                let last = bytes.len() - 1;
                bytes[last] ^= 0x01;
            }
        });
        let lb = Loopback::new(ServerSession::new(&p, &cfg, Box::new(rng(1))), Some(tap));
        let mut a = associate(lb, "SITE-A", "SITE-B", 1, &KEY, &mut rng(2)).unwrap();
        assert_eq!(a.c_store(b"MGD"), Err(TransferError::Aborted));
        assert!(p.files.lock().unwrap().is_empty());
    }

    #[test]
    fn secure_channel_counters() {
        let mut tx = SecureChannel::new(&KEY, &mut rng(5));
        let mut rx = SecureChannel::new(&KEY, &mut rng(6));
        let f1 = tx.seal(b"one");
        let f2 = tx.seal(b"two");
        assert_eq!(rx.open(&f2).unwrap(), b"two");
        assert!(rx.open(&f1).is_err());
        assert_eq!(u64::from_le_bytes(f2[4..12].try_into().unwrap()), 2);
    }
}
