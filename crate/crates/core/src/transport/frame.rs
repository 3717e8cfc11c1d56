//! Length-prefixed frames: `u32 LE length of (type + payload)`, then the
//! type byte, then the payload.

use std::io::{ErrorKind, Read};

use serde::Serialize;

use super::codec;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bytes of framing added to each message (the length prefix).
pub const FRAMING_BYTES: usize = 4;
/// Largest payload whose frame length still fits the prefix.
pub const MAX_PAYLOAD: usize = (u32::MAX - 5) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum MsgType {
    Smash = 1,
    SmashGrad = 2,
    Params = 3,
    Labels = 4,
    Control = 5,
    ServerAct = 6,
    ServerActGrad = 7,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::Smash,
        MsgType::SmashGrad,
        MsgType::Params,
        MsgType::Labels,
        MsgType::Control,
        MsgType::ServerAct,
        MsgType::ServerActGrad,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        MsgType::ALL
            .into_iter()
            .find(|t| *t as u8 == v)
            .ok_or_else(|| Error::Decode(format!("unknown message type {v}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Smash => "SMASH",
            MsgType::SmashGrad => "SMASH_GRAD",
            MsgType::Params => "PARAMS",
            MsgType::Labels => "LABELS",
            MsgType::Control => "CONTROL",
            MsgType::ServerAct => "SERVER_ACT",
            MsgType::ServerActGrad => "SERVER_ACT_GRAD",
        }
    }

    /// Every type except CONTROL carries a tensor payload.
    pub fn carries_tensor(self) -> bool {
        self != MsgType::Control
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn tensor(msg_type: MsgType, t: &Tensor) -> Self {
        Self::new(msg_type, codec::encode_tensor(t))
    }

    pub fn labels(labels: &[usize]) -> Self {
        Self::new(MsgType::Labels, codec::encode_labels(labels))
    }

    /// Payload bytes as counted by the ledger: the type byte plus the payload.
    pub fn payload_bytes(&self) -> usize {
        1 + self.payload.len()
    }

    /// Non-value overhead inside the payload: the type byte plus, for
    /// tensor-bearing types, the tensor header.
    pub fn header_bytes(&self) -> usize {
        if self.msg_type.carries_tensor() {
            1 + codec::peek_header_len(&self.payload).unwrap_or(0)
        } else {
            self.payload_bytes()
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        codec::decode_tensor(&self.payload)
    }
}

pub fn check_payload_len(len: usize) -> Result<()> {
    if len >= MAX_PAYLOAD {
        Err(Error::Oversize(len))
    } else {
        Ok(())
    }
}

pub fn frame_encode(msg: &WireMessage) -> Result<Vec<u8>> {
    check_payload_len(msg.payload.len())?;
    let mut out = Vec::with_capacity(FRAMING_BYTES + msg.payload_bytes());
    out.extend_from_slice(&(msg.payload_bytes() as u32).to_le_bytes());
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn frame_decode(bytes: &[u8]) -> Result<(WireMessage, usize)> {
    if bytes.len() < FRAMING_BYTES {
        return Err(Error::Decode("partial frame: missing length prefix".into()));
    }
    let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len == 0 {
        return Err(Error::Decode("frame without a type byte".into()));
    }
    let end = FRAMING_BYTES + len;
    if bytes.len() < end {
        return Err(Error::Decode(format!("partial frame: need {end} bytes, have {}", bytes.len())));
    }
    let msg_type = MsgType::from_u8(bytes[FRAMING_BYTES])?;
    Ok((WireMessage::new(msg_type, bytes[FRAMING_BYTES + 1..end].to_vec()), end))
}

/// Reads one whole frame. `Ok(None)` on a clean end of stream at a frame
/// boundary; a stream that ends mid-frame is a decode error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; FRAMING_BYTES];
    let mut got = 0;
    while got < FRAMING_BYTES {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Decode("partial frame: stream ended inside length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    let mut frame = vec![0u8; FRAMING_BYTES + len];
    frame[..FRAMING_BYTES].copy_from_slice(&prefix);
    r.read_exact(&mut frame[FRAMING_BYTES..]).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Decode(format!("partial frame: stream ended before {len} body bytes"))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_control_frame_is_five_bytes() {
        let bytes = frame_encode(&WireMessage::new(MsgType::Control, vec![])).unwrap();
        assert_eq!(bytes, vec![1, 0, 0, 0, 5]);
    }

    #[test]
    fn serialized_names_are_wire_names() {
        for t in MsgType::ALL {
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
    }

    #[test]
    fn params_frame_length_field() {
        let msg = WireMessage::tensor(MsgType::Params, &Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let bytes = frame_encode(&msg).unwrap();
        assert_eq!(u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]), 21);
        assert_eq!(bytes.len(), 25);
        assert_eq!(msg.header_bytes(), 1 + 8);
    }

    #[test]
    fn oversize_payload_is_rejected() {
        assert!(matches!(check_payload_len(MAX_PAYLOAD), Err(Error::Oversize(_))));
        assert!(check_payload_len(MAX_PAYLOAD - 1).is_ok());
    }

    #[test]
    fn partial_frames_fail_to_decode() {
        let bytes = frame_encode(&WireMessage::new(MsgType::Smash, vec![1, 2, 3])).unwrap();
        for cut in 0..bytes.len() {
            assert!(frame_decode(&bytes[..cut]).is_err());
        }
        let mut r = &bytes[..bytes.len() - 1];
        assert!(matches!(read_frame(&mut r), Err(Error::Decode(_))));
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    #[test]
    fn unknown_type_is_rejected() {
        assert!(frame_decode(&[1, 0, 0, 0, 9]).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(t in 1u8..=7, payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let msg = WireMessage::new(MsgType::from_u8(t).unwrap(), payload);
            let bytes = frame_encode(&msg).unwrap();
            let (back, used) = frame_decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, msg);
        }
    }
}
