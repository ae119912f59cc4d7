//! Rendezvous store over TCP.
//!
//! Each request and response is one DATA frame on the stream; `seq` carries
//! the request id.
//!
//! ```text
//! get      := 0x01 key:str
//! transact := 0x02 n:u16 (key:str present:u8 [version:u64])* m:u16 (key:str present:u8 [value:u32-len bytes])*
//! reply    := 0x00 body | 0x01 reason:str
//! get body := present:u8 [version:u64 value:u32-len bytes]
//! txn body := committed:u8
//! ```

use std::net::SocketAddr;
use std::sync::Arc;

use async_trait::async_trait;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::AbortHandle;

use super::store::{KvStore, Txn, Versioned};
use crate::error::{Error, Result};
use crate::proto::wire::{put_bytes32, put_str, put_u16, put_u64, Reader};
use crate::proto::{Frame, Header, Tag, HEADER_LEN};

const OP_GET: u8 = 1;
const OP_TXN: u8 = 2;
/// Requests larger than this are refused.
const MAX_REQUEST: usize = 16 << 20;

fn encode_txn(txn: &Txn, out: &mut Vec<u8>) {
    out.push(OP_TXN);
    put_u16(out, txn.reads.len() as u16);
    for (k, v) in &txn.reads {
        put_str(out, k);
        match v {
            Some(v) => {
                out.push(1);
                put_u64(out, *v);
            }
            None => out.push(0),
        }
    }
    put_u16(out, txn.writes.len() as u16);
    for (k, w) in &txn.writes {
        put_str(out, k);
        match w {
            Some(b) => {
                out.push(1);
                put_bytes32(out, b);
            }
            None => out.push(0),
        }
    }
}

fn read_flag(r: &mut Reader<'_>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(r.fail(format!("presence byte {b}"))),
    }
}

enum Request {
    Get(String),
    Txn(Txn),
}

fn decode_request(buf: &[u8]) -> Result<Request> {
    let mut r = Reader::new(buf, Error::MalformedFrame);
    let req = match r.u8()? {
        OP_GET => Request::Get(r.str()?.to_string()),
        OP_TXN => {
            let mut txn = Txn::new();
            for _ in 0..r.u16()? {
                let k = r.str()?.to_string();
                let v = if read_flag(&mut r)? {
                    Some(r.u64()?)
                } else {
                    None
                };
                txn.reads.push((k, v));
            }
            for _ in 0..r.u16()? {
                let k = r.str()?.to_string();
                let w = if read_flag(&mut r)? {
                    Some(r.bytes32()?.to_vec())
                } else {
                    None
                };
                txn.writes.push((k, w));
            }
            Request::Txn(txn)
        }
        op => return Err(r.fail(format!("unknown op {op}"))),
    };
    r.finish()?;
    Ok(req)
}

async fn read_frame(s: &mut TcpStream) -> Result<Option<Frame>> {
    let mut hdr = [0u8; HEADER_LEN];
    match s.read_exact(&mut hdr).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let (h, len) = Header::parse(&hdr)?;
    if len > MAX_REQUEST {
        return Err(Error::PayloadTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    s.read_exact(&mut payload).await?;
    Ok(Some(Frame::new(h.tag, h.conn_id, h.seq, payload)))
}

/// Serves a store to [`TcpStore`] clients.
pub struct RendezvousServer {
    local: SocketAddr,
    task: AbortHandle,
}

impl RendezvousServer {
    pub async fn bind(addr: SocketAddr, store: Arc<dyn KvStore>) -> Result<Self> {
        let l = TcpListener::bind(addr).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => Error::AddressInUse(addr.to_string()),
            _ => e.into(),
        })?;
        let local = l.local_addr()?;
        let task = tokio::spawn(async move {
            loop {
                let Ok((s, peer)) = l.accept().await else {
                    continue;
                };
                let store = store.clone();
                tokio::spawn(async move {
                    if let Err(e) = serve(s, store).await {
                        tracing::debug!(%peer, "rendezvous client dropped: {e}");
                    }
                });
            }
        });
        Ok(RendezvousServer {
            local,
            task: task.abort_handle(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }
}

impl Drop for RendezvousServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn serve(mut s: TcpStream, store: Arc<dyn KvStore>) -> Result<()> {
    s.set_nodelay(true)?;
    while let Some(f) = read_frame(&mut s).await? {
        if f.tag != Tag::Data {
            return Err(Error::MalformedFrame(format!("unexpected {:?}", f.tag)));
        }
        let res = match decode_request(&f.payload) {
            Ok(Request::Get(k)) => store.get(&k).await.map(|v| {
                let mut b = Vec::new();
                match v {
                    Some(v) => {
                        b.push(1);
                        put_u64(&mut b, v.version);
                        put_bytes32(&mut b, &v.value);
                    }
                    None => b.push(0),
                }
                b
            }),
            Ok(Request::Txn(t)) => store.transact(t).await.map(|ok| vec![ok as u8]),
            Err(e) => Err(e),
        };
        let mut reply = Vec::new();
        match res {
            Ok(body) => {
                reply.push(0);
                reply.extend_from_slice(&body);
            }
            Err(e) => {
                reply.push(1);
                put_str(&mut reply, &e.to_string());
            }
        }
        s.write_all(&Frame::new(Tag::Data, 0, f.seq, reply).encode())
            .await?;
    }
    Ok(())
}

/// Client for a [`RendezvousServer`]. Reconnects lazily after failures.
pub struct TcpStore {
    addr: SocketAddr,
    conn: tokio::sync::Mutex<(Option<TcpStream>, u64)>,
}

impl TcpStore {
    pub async fn connect(addr: SocketAddr) -> Result<Self> {
        let s = TcpStream::connect(addr)
            .await
            .map_err(|_| Error::StoreUnavailable)?;
        s.set_nodelay(true)?;
        Ok(TcpStore {
            addr,
            conn: tokio::sync::Mutex::new((Some(s), 0)),
        })
    }

    async fn call(&self, req: Vec<u8>) -> Result<Vec<u8>> {
        let mut g = self.conn.lock().await;
        let (slot, next) = &mut *g;
        if slot.is_none() {
            let s = TcpStream::connect(self.addr)
                .await
                .map_err(|_| Error::StoreUnavailable)?;
            s.set_nodelay(true)?;
            *slot = Some(s);
        }
        *next += 1;
        let id = *next;
        let s = slot.as_mut().expect("connected above");
        let res = async {
            s.write_all(&Frame::new(Tag::Data, 0, id, req).encode())
                .await?;
            match read_frame(s).await? {
                Some(f) if f.seq == id => Ok(f.payload),
                Some(f) => Err(Error::MalformedFrame(format!(
                    "reply {} for request {id}",
                    f.seq
                ))),
                None => Err(Error::ConnectionClosed),
            }
        }
        .await;
        let body = match res {
            Ok(b) => b,
            Err(e) => {
                tracing::debug!("rendezvous store call failed: {e}");
                *slot = None;
                return Err(Error::StoreUnavailable);
            }
        };
        let mut r = Reader::new(&body, Error::MalformedFrame);
        match r.u8()? {
            0 => Ok(body[1..].to_vec()),
            _ => {
                tracing::debug!(reason = r.str().unwrap_or("?"), "store error");
                Err(Error::StoreUnavailable)
            }
        }
    }
}

#[async_trait]
impl KvStore for TcpStore {
    async fn get(&self, key: &str) -> Result<Option<Versioned>> {
        let mut req = vec![OP_GET];
        put_str(&mut req, key);
        let body = self.call(req).await?;
        let mut r = Reader::new(&body, Error::MalformedFrame);
        let v = if read_flag(&mut r)? {
            let version = r.u64()?;
            Some(Versioned {
                version,
                value: r.bytes32()?.to_vec(),
            })
        } else {
            None
        };
        r.finish()?;
        Ok(v)
    }

    async fn transact(&self, txn: Txn) -> Result<bool> {
        let mut req = Vec::new();
        encode_txn(&txn, &mut req);
        let body = self.call(req).await?;
        let mut r = Reader::new(&body, Error::MalformedFrame);
        let ok = read_flag(&mut r)?;
        r.finish()?;
        Ok(ok)
    }
}
