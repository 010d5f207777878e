//! WebSocket binding. The server is one tokio task that owns the protocol
//! core; connection tasks only shuttle frames. The client side is a blocking
//! transport so the controller can stay synchronous.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpStream};
use std::thread::JoinHandle;
use std::time::Duration;

use embsync_core::client::{Clock, Transport, TransportError};
use embsync_core::message::encode_message;
use embsync_core::server::{ConnId, ServerCore, ServerOutput};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message as AsyncMessage;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use crate::clock::SystemClock;

pub const SYNC_PATH: &str = "/sync";
const IDLE_POLL: Duration = Duration::from_millis(50);

enum Event {
    Open { out: mpsc::UnboundedSender<Outbound>, reply: oneshot::Sender<ConnId> },
    Frame { conn: ConnId, bytes: Vec<u8> },
    Closed { conn: ConnId },
}

enum Outbound {
    Frame(Vec<u8>),
    Close,
}

/// Owns the core. Polls back to back while operations run, otherwise at a
/// slow idle rate so heartbeats and timeouts still fire.
async fn actor(mut core: ServerCore, mut events: mpsc::UnboundedReceiver<Event>) {
    let clock = SystemClock::new();
    let mut conns: HashMap<ConnId, mpsc::UnboundedSender<Outbound>> = HashMap::new();
    loop {
        let first = if core.has_work() {
            tokio::task::yield_now().await;
            match events.try_recv() {
                Ok(e) => Some(e),
                Err(mpsc::error::TryRecvError::Empty) => None,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            }
        } else {
            match tokio::time::timeout(IDLE_POLL, events.recv()).await {
                Ok(Some(e)) => Some(e),
                Ok(None) => return,
                Err(_) => None,
            }
        };
        let mut next = first;
        while let Some(ev) = next.take() {
            match ev {
                Event::Open { out, reply } => {
                    let id = core.connect();
                    conns.insert(id, out);
                    let _ = reply.send(id);
                }
                Event::Frame { conn, bytes } => core.on_frame(conn, &bytes, clock.now()),
                Event::Closed { conn } => {
                    conns.remove(&conn);
                    core.disconnect(conn, clock.now());
                }
            }
            next = events.try_recv().ok();
        }
        core.poll(clock.now());
        for out in core.drain() {
            match out {
                ServerOutput::Frame { conn, message } => {
                    if let Some(tx) = conns.get(&conn) {
                        let _ = tx.send(Outbound::Frame(encode_message(&message)));
                    }
                }
                ServerOutput::Close { conn } => {
                    if let Some(tx) = conns.remove(&conn) {
                        let _ = tx.send(Outbound::Close);
                    }
                    core.disconnect(conn, clock.now());
                }
            }
        }
    }
}

fn outbound_message(bytes: Vec<u8>) -> AsyncMessage {
    match String::from_utf8(bytes) {
        Ok(s) => AsyncMessage::Text(s),
        Err(e) => AsyncMessage::Binary(e.into_bytes()),
    }
}

async fn connection(stream: tokio::net::TcpStream, events: mpsc::UnboundedSender<Event>) {
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == SYNC_PATH {
            Ok(resp)
        } else {
            let mut r = ErrorResponse::new(Some(format!("only {SYNC_PATH} is served")));
            *r.status_mut() = StatusCode::NOT_FOUND;
            Err(r)
        }
    };
    let ws = match tokio_tungstenite::accept_hdr_async(stream, check_path).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("handshake rejected: {e}");
            return;
        }
    };
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let (reply_tx, reply_rx) = oneshot::channel();
    if events.send(Event::Open { out: out_tx, reply: reply_tx }).is_err() {
        return;
    }
    let Ok(conn) = reply_rx.await else { return };
    let (mut sink, mut source) = ws.split();
    let writer = tokio::spawn(async move {
        while let Some(o) = out_rx.recv().await {
            match o {
                Outbound::Frame(b) => {
                    if sink.send(outbound_message(b)).await.is_err() {
                        break;
                    }
                }
                Outbound::Close => {
                    let _ = sink.close().await;
                    break;
                }
            }
        }
    });
    while let Some(msg) = source.next().await {
        let bytes = match msg {
            Ok(AsyncMessage::Text(s)) => s.into_bytes(),
            Ok(AsyncMessage::Binary(b)) => b,
            Ok(AsyncMessage::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        if events.send(Event::Frame { conn, bytes }).is_err() {
            break;
        }
    }
    let _ = events.send(Event::Closed { conn });
    writer.abort();
}

/// Accepts connections forever.
pub async fn serve(listener: TcpListener, core: ServerCore) {
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(actor(core, rx));
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                let _ = stream.set_nodelay(true);
                tokio::spawn(connection(stream, tx.clone()));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

/// A server on its own thread and runtime, for embedded runs and tests.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    _thread: JoinHandle<()>,
}

impl BackgroundServer {
    pub fn url(&self) -> String {
        format!("ws://{}{SYNC_PATH}", self.addr)
    }
}

/// Binds `addr` (port 0 picks a free one) and serves from a background thread.
pub fn spawn_background(core: ServerCore, addr: &str) -> io::Result<BackgroundServer> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let thread = std::thread::Builder::new().name("embsync-server".into()).spawn(move || {
        rt.block_on(async move {
            match TcpListener::from_std(std_listener) {
                Ok(l) => serve(l, core).await,
                Err(e) => log::error!("listener: {e}"),
            }
        })
    })?;
    Ok(BackgroundServer {
        addr: local,
        _thread: thread,
    })
}

/// Blocking client transport over one WebSocket.
pub struct WsTransport {
    url: String,
    ws: Option<WebSocket<MaybeTlsStream<TcpStream>>>,
}

fn io_err(e: impl std::fmt::Display) -> TransportError {
    TransportError::Io(e.to_string())
}

impl WsTransport {
    pub fn connect(url: &str) -> Result<Self, TransportError> {
        let mut t = Self {
            url: url.to_owned(),
            ws: None,
        };
        t.open()?;
        Ok(t)
    }

    fn open(&mut self) -> Result<(), TransportError> {
        let (ws, _) = tungstenite::connect(self.url.as_str()).map_err(io_err)?;
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_nodelay(true).map_err(io_err)?;
        }
        self.ws = Some(ws);
        Ok(())
    }
}

impl Transport for WsTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        let ws = self.ws.as_mut().ok_or(TransportError::Closed)?;
        let msg = match std::str::from_utf8(frame) {
            Ok(s) => Message::Text(s.to_owned()),
            Err(_) => Message::Binary(frame.to_vec()),
        };
        ws.send(msg).map_err(|e| {
            self.ws = None;
            io_err(e)
        })
    }

    fn recv(&mut self, wait_s: f64) -> Result<Option<Vec<u8>>, TransportError> {
        let ws = self.ws.as_mut().ok_or(TransportError::Closed)?;
        let wait = Duration::from_secs_f64(wait_s.max(1e-3));
        if let MaybeTlsStream::Plain(s) = ws.get_mut() {
            s.set_read_timeout(Some(wait)).map_err(io_err)?;
        }
        loop {
            match ws.read() {
                Ok(Message::Text(s)) => return Ok(Some(s.into_bytes())),
                Ok(Message::Binary(b)) => return Ok(Some(b)),
                Ok(Message::Close(_)) => {
                    self.ws = None;
                    return Err(TransportError::Closed);
                }
                Ok(_) => continue,
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
                {
                    return Ok(None)
                }
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    self.ws = None;
                    return Err(TransportError::Closed);
                }
                Err(e) => {
                    self.ws = None;
                    return Err(io_err(e));
                }
            }
        }
    }

    fn reconnect(&mut self) -> Result<(), TransportError> {
        if let Some(mut ws) = self.ws.take() {
            let _ = ws.close(None);
        }
        self.open()
    }
}
