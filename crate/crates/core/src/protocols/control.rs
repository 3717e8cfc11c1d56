//! CONTROL payloads: an opcode byte followed by little-endian u32 fields.

use crate::error::{Error, Result};
use crate::transport::{client_entity, Endpoint, MsgType, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Hello { client: u32, samples: u32 },
    TurnStart { round: u32 },
    TurnEnd,
    RoundEnd { round: u32 },
    Done,
}

const HELLO: u8 = 1;
const TURN_START: u8 = 2;
const TURN_END: u8 = 3;
const ROUND_END: u8 = 4;
const DONE: u8 = 5;

impl Control {
    pub fn encode(&self) -> WireMessage {
        let (op, fields): (u8, &[u32]) = match self {
            Control::Hello { client, samples } => (HELLO, &[*client, *samples]),
            Control::TurnStart { round } => (TURN_START, std::slice::from_ref(round)),
            Control::TurnEnd => (TURN_END, &[]),
            Control::RoundEnd { round } => (ROUND_END, std::slice::from_ref(round)),
            Control::Done => (DONE, &[]),
        };
        let mut payload = vec![op];
        for f in fields {
            payload.extend_from_slice(&f.to_le_bytes());
        }
        WireMessage::new(MsgType::Control, payload)
    }

    pub fn decode(msg: &WireMessage) -> Result<Self> {
        if msg.msg_type != MsgType::Control {
            return Err(Error::Protocol(format!("expected CONTROL, got {}", msg.msg_type.name())));
        }
        let (&op, rest) = msg.payload.split_first().ok_or_else(|| Error::Decode("empty CONTROL payload".into()))?;
        let want = match op {
            HELLO => 2,
            TURN_START | ROUND_END => 1,
            TURN_END | DONE => 0,
            other => return Err(Error::Decode(format!("unknown CONTROL opcode {other}"))),
        };
        if rest.len() != 4 * want {
            return Err(Error::Decode(format!("CONTROL opcode {op} carries {} bytes", rest.len())));
        }
        let f: Vec<u32> = rest.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(match op {
            HELLO => Control::Hello { client: f[0], samples: f[1] },
            TURN_START => Control::TurnStart { round: f[0] },
            TURN_END => Control::TurnEnd,
            ROUND_END => Control::RoundEnd { round: f[0] },
            _ => Control::Done,
        })
    }

    pub fn send(&self, ep: &mut Endpoint) -> Result<()> {
        ep.send(&self.encode())
    }

    pub fn recv(ep: &mut Endpoint) -> Result<Self> {
        let msg = ep.recv_type(MsgType::Control)?;
        Self::decode(&msg)
    }

    /// Receives a control message and fails unless it equals `want`.
    pub fn expect(ep: &mut Endpoint, want: Control) -> Result<()> {
        let got = Self::recv(ep)?;
        if got != want {
            return Err(Error::Protocol(format!("{} expected {want:?} from {}, got {got:?}", ep.entity(), ep.peer())));
        }
        Ok(())
    }
}

pub fn send_hello(ep: &mut Endpoint, client: usize, samples: usize) -> Result<()> {
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")));
    Control::Hello { client: to_u32(client)?, samples: to_u32(samples)? }.send(ep)
}

/// Reads one HELLO per endpoint, names each endpoint's peer after the
/// announced client and returns them ordered by client id with `n_k`.
pub fn receive_hellos(endpoints: Vec<Endpoint>) -> Result<Vec<(Endpoint, usize)>> {
    let k = endpoints.len();
    let mut slots: Vec<Option<(Endpoint, usize)>> = (0..k).map(|_| None).collect();
    for mut ep in endpoints {
        let msg = ep.recv_unrecorded()?;
        let Control::Hello { client, samples } = Control::decode(&msg)? else {
            return Err(Error::Protocol("first message must be HELLO".into()));
        };
        let id = client as usize;
        if id >= k || slots[id].is_some() {
            return Err(Error::Protocol(format!("unexpected or duplicate HELLO from client {id}")));
        }
        ep.set_peer(client_entity(id));
        ep.record_received(&msg);
        slots[id] = Some((ep, samples as usize));
    }
    Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
}
