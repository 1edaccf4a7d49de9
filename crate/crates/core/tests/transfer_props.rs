use std::collections::BTreeMap;
use std::sync::Mutex;

use mammogrid::ids::Guid;
use mammogrid::transfer::{
    associate, AssocRq, Command, DimseMessage, Loopback, Pdu, PduType, SecureChannel, ServerConfig, ServerSession,
    ServiceProvider, SessionState, Status, NONCE_LEN, TAG_LEN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const KEY: [u8; 32] = [9; 32];

/// Keeps whatever it is sent, addressed by the first 16 bytes of its SHA-256.
#[derive(Default)]
struct Shelf(Mutex<BTreeMap<Guid, Vec<u8>>>);

fn guid_of(bytes: &[u8]) -> Guid {
    Guid(Sha256::digest(bytes)[..16].try_into().unwrap())
}

impl ServiceProvider for Shelf {
    fn store(&self, mgd: &[u8]) -> Result<(), String> {
        self.0.lock().unwrap().insert(guid_of(mgd), mgd.to_vec());
        Ok(())
    }
    fn find(&self, _: &[u8]) -> Result<Vec<Vec<u8>>, String> {
        Ok(vec![])
    }
    fn get(&self, guid: &Guid) -> Result<Vec<u8>, String> {
        self.0.lock().unwrap().get(guid).cloned().ok_or_else(|| "missing".into())
    }
}

fn config() -> ServerConfig {
    ServerConfig { ae_title: "GRIDBOX".into(), keys: BTreeMap::from([(1, KEY)]) }
}

fn ptype() -> impl Strategy<Value = PduType> {
    (1u8..=7).prop_filter_map("known type", PduType::from_u8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pdu_round_trips(t in ptype(), body in prop::collection::vec(any::<u8>(), 0..300)) {
        let p = Pdu::new(t, body);
        prop_assert_eq!(Pdu::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn dimse_round_trips(msg_id in any::<u16>(), cmd in 1u8..=6, st in 0u8..=3, payload in prop::collection::vec(any::<u8>(), 0..200)) {
        let m = DimseMessage {
            msg_id,
            command: Command::from_u8(cmd).unwrap(),
            status: Status::from_u8(st).unwrap(),
            payload,
        };
        prop_assert_eq!(DimseMessage::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn assoc_rq_round_trips(calling in "[!-~]{1,16}", called in "[!-~]{1,16}", key_id in any::<u8>(), proof in any::<[u8; 28]>()) {
        prop_assert_eq!(NONCE_LEN + TAG_LEN, 28);
        let rq = AssocRq { version: 1, calling_ae: calling, called_ae: called, key_id, proof };
        prop_assert_eq!(AssocRq::decode(&rq.encode().unwrap()).unwrap(), rq);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = Pdu::decode(&bytes);
        let _ = DimseMessage::decode(&bytes);
        let _ = AssocRq::decode(&bytes);
        let shelf = Shelf::default();
        let cfg = config();
        let mut s = ServerSession::new(&shelf, &cfg, Box::new(ChaCha8Rng::seed_from_u64(0)));
        if let Ok(p) = Pdu::decode(&bytes) {
            let _ = s.handle(p);
        }
    }

    #[test]
    fn sealed_frames_open_once_in_order(msgs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 1..10), flip in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tx = SecureChannel::new(&KEY, &mut rng);
        let mut rx = SecureChannel::new(&KEY, &mut rng);
        let frames: Vec<Vec<u8>> = msgs.iter().map(|m| tx.seal(m)).collect();
        let mut damaged = frames[frames.len() - 1].clone();
        let i = flip.index(damaged.len());
        damaged[i] ^= 0x80;
        // Refused without moving the counter, so the intact frames still open.
        prop_assert!(rx.open(&damaged).is_err());
        for (f, m) in frames.iter().zip(&msgs) {
            prop_assert_eq!(&rx.open(f).unwrap(), m);
        }
        for f in &frames {
            prop_assert!(rx.open(f).is_err());
        }
    }

    #[test]
    fn stored_files_come_back_identical(files in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..4000), 1..4)) {
        let shelf = Shelf::default();
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lb = Loopback::new(ServerSession::new(&shelf, &cfg, Box::new(ChaCha8Rng::seed_from_u64(3))), None);
        let mut a = associate(lb, "WORKSTATION", "GRIDBOX", 1, &KEY, &mut rng).unwrap();
        for f in &files {
            a.c_store(f).unwrap();
        }
        for f in &files {
            let back = a.c_get(&guid_of(f)).unwrap();
            prop_assert_eq!(Sha256::digest(&back), Sha256::digest(f));
        }
        a.release();
    }

    #[test]
    fn plaintext_data_is_refused(body in prop::collection::vec(any::<u8>(), 0..100)) {
        let shelf = Shelf::default();
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lb = Loopback::new(ServerSession::new(&shelf, &cfg, Box::new(ChaCha8Rng::seed_from_u64(5))), None);
        let mut a = associate(lb, "WORKSTATION", "GRIDBOX", 1, &KEY, &mut rng).unwrap();
        let m = DimseMessage { msg_id: 1, command: Command::StoreRq, status: Status::Success, payload: body };
        a.send_raw(Pdu::new(PduType::Data, m.encode())).unwrap();
        prop_assert_eq!(a.channel_mut().server_state(), SessionState::Aborted);
        prop_assert!(shelf.0.lock().unwrap().is_empty());
    }
}
