//! Out-of-band link for two-process runs.
//!
//! On a single machine the human is simulated in-process. When the two
//! devices run as separate processes, the physical channel (what the person
//! sees and does) is carried as newline-delimited JSON over its own TCP
//! connection, separate from the in-band link so an in-band relay cannot
//! observe it unless explicitly tapped.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::coding::{PressTrace, SignalSchedule};
use crate::transport::TransportError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OobMessage {
    /// Signals emitted by the responder, relative to the start of the phase.
    Signals { session: String, schedule: SignalSchedule },
    /// Button-to-button presses as registered on the initiator.
    Presses { session: String, trace: PressTrace },
}

impl OobMessage {
    pub fn session(&self) -> &str {
        match self {
            OobMessage::Signals { session, .. } | OobMessage::Presses { session, .. } => session,
        }
    }
}

pub struct OobLink {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl OobLink {
    pub fn new(stream: TcpStream) -> Self {
        let reader = BufReader::new(stream.try_clone().expect("clone tcp stream"));
        Self { writer: stream, reader }
    }

    pub fn send(&mut self, m: &OobMessage) -> Result<(), TransportError> {
        let mut line = serde_json::to_vec(m).map_err(|e| TransportError::Malformed(e.to_string()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self, timeout_ms: u64) -> Result<OobMessage, TransportError> {
        self.reader.get_ref().set_read_timeout(Some(Duration::from_millis(timeout_ms.max(1))))?;
        self.read_line()
    }

    pub fn recv_blocking(&mut self) -> Result<OobMessage, TransportError> {
        self.reader.get_ref().set_read_timeout(None)?;
        self.read_line()
    }

    fn read_line(&mut self) -> Result<OobMessage, TransportError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(TransportError::PeerClosed);
        }
        serde_json::from_str(line.trim_end()).map_err(|e| TransportError::Malformed(e.to_string()))
    }
}
