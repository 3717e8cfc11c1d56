//! Framed, bit-exact message exchange with a byte ledger.

pub mod channel;
pub mod codec;
pub mod frame;
pub mod ledger;

pub use channel::{connect_with_retry, inproc_pair, tcp_pair, Endpoint, FrameLink};
pub use frame::{frame_decode, frame_encode, MsgType, WireMessage};
pub use ledger::{
    client_entity, is_client_entity, CommLedger, Counters, Direction, LedgerKey, LedgerReport, LedgerSnapshot, FED_SERVER,
    MAIN_SERVER, SERVER,
};
