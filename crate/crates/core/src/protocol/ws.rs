//! WebSocket endpoint for the operator console.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use tungstenite::{Message as WsMessage, WebSocket};

use super::json::{json_to_message, ConsoleJson};
use super::message::Message;
use super::transport::TransportError;

const POLL: Duration = Duration::from_millis(10);

type Clients = Arc<Mutex<Vec<Sender<Arc<str>>>>>;

pub struct WsBridge {
    local_addr: SocketAddr,
    clients: Clients,
    greeting: Arc<Mutex<Vec<String>>>,
    inbound: Receiver<Message>,
    stop: Arc<AtomicBool>,
}

impl WsBridge {
    /// Listens for console connections. Each new client first receives the
    /// greeting documents (typically one `model` per arm).
    pub fn bind(addr: &str, greeting: Vec<ConsoleJson>) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let clients: Clients = Arc::default();
        let greeting = Arc::new(Mutex::new(greeting.iter().map(ConsoleJson::to_text).collect()));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, inbound) = mpsc::channel();
        let (c, g, s) = (clients.clone(), Arc::clone(&greeting), stop.clone());
        thread::Builder::new()
            .name("ws-accept".into())
            .spawn(move || accept_loop(listener, c, g, tx, s))?;
        Ok(WsBridge {
            local_addr,
            clients,
            greeting,
            inbound,
            stop,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn set_greeting(&self, docs: &[ConsoleJson]) {
        *self.greeting.lock().unwrap() = docs.iter().map(ConsoleJson::to_text).collect();
    }

    pub fn client_count(&self) -> usize {
        self.clients.lock().unwrap().len()
    }

    pub fn broadcast(&self, doc: &ConsoleJson) {
        let text: Arc<str> = doc.to_text().into();
        self.clients
            .lock()
            .unwrap()
            .retain(|c| c.send(text.clone()).is_ok());
    }

    pub fn broadcast_message(&self, m: &Message) {
        self.broadcast(&ConsoleJson::from(m));
    }

    /// Next schema-valid message sent by a console.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Message> {
        self.inbound.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<Message> {
        self.inbound.try_recv().ok()
    }
}

impl Drop for WsBridge {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn accept_loop(
    listener: TcpListener,
    clients: Clients,
    greeting: Arc<Mutex<Vec<String>>>,
    inbound: Sender<Message>,
    stop: Arc<AtomicBool>,
) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (tx, rx) = mpsc::channel();
                let hello = greeting.lock().unwrap().clone();
                let (inbound, stop) = (inbound.clone(), stop.clone());
                let clients = clients.clone();
                thread::spawn(move || match handshake(stream) {
                    Ok(ws) => {
                        log::info!("console connected from {peer}");
                        clients.lock().unwrap().push(tx);
                        serve_client(ws, hello, rx, inbound, stop);
                        log::info!("console {peer} disconnected");
                    }
                    Err(e) => log::warn!("websocket handshake with {peer} failed: {e}"),
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>, String> {
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    let _ = stream.set_nodelay(true);
    let ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref().set_read_timeout(Some(POLL)).map_err(|e| e.to_string())?;
    Ok(ws)
}

fn serve_client(
    mut ws: WebSocket<TcpStream>,
    hello: Vec<String>,
    outgoing: Receiver<Arc<str>>,
    inbound: Sender<Message>,
    stop: Arc<AtomicBool>,
) {
    for text in hello {
        if ws.send(WsMessage::Text(text)).is_err() {
            return;
        }
    }
    while !stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(WsMessage::Text(text)) => match json_to_message(&text) {
                Ok(m) => {
                    let _ = inbound.send(m);
                }
                Err(e) => {
                    log::warn!("rejected console message: {e}");
                    if ws.send(WsMessage::Text(ConsoleJson::error(&e).to_text())).is_err() {
                        return;
                    }
                }
            },
            Ok(WsMessage::Close(_)) => return,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::debug!("websocket read: {e}");
                return;
            }
        }
        loop {
            match outgoing.try_recv() {
                Ok(text) => {
                    if ws.send(WsMessage::Text(text.to_string())).is_err() {
                        return;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => return,
            }
        }
    }
    let _ = ws.close(None);
}
