use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::transport::{inproc_pair, tcp_pair, CommLedger, Endpoint};

/// How an in-process orchestrator connects its roles.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportMode {
    #[default]
    Inproc,
    /// Real sockets on a loopback interface.
    Tcp {
        #[serde(default = "default_host")]
        host: String,
    },
}

fn default_host() -> String {
    "127.0.0.1".into()
}

pub struct LinkFactory {
    mode: TransportMode,
    ledger: Arc<CommLedger>,
}

impl LinkFactory {
    pub fn new(mode: TransportMode) -> Self {
        Self { mode, ledger: Arc::new(CommLedger::new()) }
    }

    pub fn ledger(&self) -> &Arc<CommLedger> {
        &self.ledger
    }

    /// Connected endpoints named `a` (first) and `b` (second).
    pub fn pair(&self, a: &str, b: &str) -> Result<(Endpoint, Endpoint)> {
        match &self.mode {
            TransportMode::Inproc => Ok(inproc_pair(a, b, &self.ledger)),
            TransportMode::Tcp { host } => tcp_pair(host, a, b, &self.ledger),
        }
    }
}
