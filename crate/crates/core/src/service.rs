//! TCP stream service: one thread and one workflow per connection, models
//! shared read-only.

use crate::error::{Error, Result};
use crate::pipeline::{Analyzer, Frame, Pipeline};
use crate::protocol::{
    decode_client, decode_server, encode_frame, encode_hello, encode_server, error_body, read_message, write_message,
    ClientMessage, ServerKind, ServerMessage, SUPPORTED_VERSIONS,
};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

fn reply(w: &mut impl Write, kind: ServerKind, body: &str) -> Result<()> {
    write_message(w, &encode_server(kind, body))
}

/// Serves one connection until the client closes it.
pub fn handle_connection(stream: TcpStream, analyzer: Arc<Analyzer>) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut pipeline = Pipeline::new(analyzer)?;
    while let Some(msg) = read_message(&mut reader)? {
        let parsed = msg.and_then(|payload| decode_client(&payload));
        match parsed {
            Ok(ClientMessage::Hello { .. }) => {
                let body = serde_json::json!({ "supported_versions": SUPPORTED_VERSIONS }).to_string();
                reply(&mut writer, ServerKind::Welcome, &body)?;
            }
            Ok(ClientMessage::Frame(frame)) => match pipeline.process(&frame) {
                Ok(out) => {
                    for e in &out.events {
                        reply(&mut writer, ServerKind::Event, &e.to_json_line())?;
                        if let crate::workflow::Event::Command { command } = &e.event {
                            reply(&mut writer, ServerKind::Command, &command.to_json_line())?;
                        }
                    }
                    reply(&mut writer, ServerKind::Result, &out.result.to_json_line())?;
                }
                Err(e) => reply(&mut writer, ServerKind::Error, &error_body(&e))?,
            },
            Err(e) => reply(&mut writer, ServerKind::Error, &error_body(&e))?,
        }
    }
    Ok(())
}

/// Accept loop on its own thread; `stop` ends it.
pub struct Server {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, analyzer: Arc<Analyzer>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let a = analyzer.clone();
                std::thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    if let Err(e) = handle_connection(stream, a) {
                        eprintln!("connection {peer:?}: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.shutdown();
        }
    }
}

/// Everything the server sent back for one request.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameReplies {
    pub events: Vec<String>,
    pub commands: Vec<String>,
    pub result: Option<String>,
    pub error: Option<String>,
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(s.try_clone()?),
            writer: BufWriter::new(s),
        })
    }

    fn next(&mut self) -> Result<ServerMessage> {
        match read_message(&mut self.reader)? {
            Some(Ok(p)) => decode_server(&p),
            Some(Err(e)) => Err(e),
            None => Err(Error::Protocol("server closed the connection".into())),
        }
    }

    /// Sends a raw payload and collects replies up to the terminal one.
    pub fn request(&mut self, payload: &[u8]) -> Result<FrameReplies> {
        write_message(&mut self.writer, payload)?;
        let mut out = FrameReplies::default();
        loop {
            let m = self.next()?;
            match m.kind {
                ServerKind::Event => out.events.push(m.body),
                ServerKind::Command => out.commands.push(m.body),
                ServerKind::Result | ServerKind::Welcome => {
                    out.result = Some(m.body);
                    return Ok(out);
                }
                ServerKind::Error => {
                    out.error = Some(m.body);
                    return Ok(out);
                }
            }
        }
    }

    pub fn hello(&mut self, version: u16) -> Result<FrameReplies> {
        self.request(&encode_hello(version))
    }

    pub fn send_frame(&mut self, frame: &Frame) -> Result<FrameReplies> {
        self.request(&encode_frame(frame))
    }

    pub fn close(self) -> Result<()> {
        self.writer.get_ref().shutdown(Shutdown::Write)?;
        Ok(())
    }
}
