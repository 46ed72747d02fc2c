//! Framed message IO over byte streams.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use pilot_serve_core::frame::{self, FrameError, HEADER_LEN};
use pilot_serve_core::wire::{self, Message, WireError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WireIoError {
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("{0}")]
    Malformed(String),
}

impl From<WireError> for WireIoError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Frame(f) => Self::Frame(f),
            WireError::Json(m) => Self::Malformed(m),
        }
    }
}

impl WireIoError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, Self::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
    }
}

/// Reads one frame body. A clean EOF before the first header byte is
/// reported as [`WireIoError::Closed`].
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, WireIoError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(WireIoError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = frame::decode_header(header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub fn read_message(r: &mut impl Read) -> Result<Message, WireIoError> {
    let body = read_frame(r)?;
    Ok(wire::from_json(&body)?)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<(), WireIoError> {
    let bytes = wire::encode_message(msg)?;
    w.write_all(&bytes)?;
    Ok(())
}

/// Writes `msg` and waits for the single reply frame.
pub fn call(stream: &mut TcpStream, msg: &Message) -> Result<Message, WireIoError> {
    write_message(stream, msg)?;
    read_message(stream)
}

/// Connects with a timeout and turns Nagle off.
pub fn connect(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, format!("no address for {addr}"));
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}
