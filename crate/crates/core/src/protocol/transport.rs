//! Frame transports: an in-process queue pair (default) and a byte-stream
//! socket adapter. Both ends of the classical channel speak blocking
//! send/recv over a `FramePipe`; the party logic is transport-agnostic.

use super::frame::{Frame, FrameError, HEADER_LEN};
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{Receiver, Sender};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("peer hung up")]
    Disconnected,
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
}

pub trait FramePipe {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
}

/// One end of an in-process duplex queue.
pub struct QueuePipe {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Ordered, reliable, in-process duplex message queue; returns the two ends.
pub fn queue_pair() -> (QueuePipe, QueuePipe) {
    let (tx_ab, rx_ab) = std::sync::mpsc::channel();
    let (tx_ba, rx_ba) = std::sync::mpsc::channel();
    (
        QueuePipe { tx: tx_ab, rx: rx_ba },
        QueuePipe { tx: tx_ba, rx: rx_ab },
    )
}

impl FramePipe for QueuePipe {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.tx
            .send(frame.encode())
            .map_err(|_| TransportError::Disconnected)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let bytes = self.rx.recv().map_err(|_| TransportError::Disconnected)?;
        let (frame, _) = Frame::decode(&bytes)?;
        Ok(frame)
    }
}

/// Frames over a TCP stream (length taken from the frame header).
pub struct TcpPipe {
    stream: TcpStream,
}

impl TcpPipe {
    pub fn new(stream: TcpStream) -> Self {
        TcpPipe { stream }
    }
}

impl FramePipe for TcpPipe {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.stream.write_all(&frame.encode())?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let mut header = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut header)?;
        let payload_len = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let mut rest = vec![0u8; payload_len + 4];
        self.stream.read_exact(&mut rest)?;
        let mut full = header.to_vec();
        full.extend_from_slice(&rest);
        let (frame, _) = Frame::decode(&full)?;
        Ok(frame)
    }
}

/// A pipe that mirrors every frame that passes through it into per-direction
/// logs (persistence and wiretapping hang off these logs).
pub struct TappedPipe<P: FramePipe> {
    inner: P,
    pub sent: Vec<Frame>,
    pub received: Vec<Frame>,
}

impl<P: FramePipe> TappedPipe<P> {
    pub fn new(inner: P) -> Self {
        TappedPipe { inner, sent: Vec::new(), received: Vec::new() }
    }
}

impl<P: FramePipe> FramePipe for TappedPipe<P> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.sent.push(frame.clone());
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let f = self.inner.recv()?;
        self.received.push(f.clone());
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::frame::FrameType;
    use std::net::TcpListener;

    #[test]
    fn queue_pair_delivers_in_order() {
        let (mut a, mut b) = queue_pair();
        for i in 0..10u32 {
            a.send(&Frame::new(FrameType::Timing, i, vec![i as u8])).unwrap();
        }
        for i in 0..10u32 {
            let f = b.recv().unwrap();
            assert_eq!(f.epoch, i);
        }
    }

    #[test]
    fn tcp_adapter_roundtrips_frames() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut pipe = TcpPipe::new(TcpStream::connect(addr).unwrap());
            pipe.send(&Frame::new(FrameType::SessionCtl, 7, vec![1, 2, 3])).unwrap();
            let back = pipe.recv().unwrap();
            assert_eq!(back.payload, vec![9, 9]);
        });
        let (stream, _) = listener.accept().unwrap();
        let mut pipe = TcpPipe::new(stream);
        let got = pipe.recv().unwrap();
        assert_eq!(got.epoch, 7);
        assert_eq!(got.payload, vec![1, 2, 3]);
        pipe.send(&Frame::new(FrameType::SessionCtl, 7, vec![9, 9])).unwrap();
        client.join().unwrap();
    }
}
