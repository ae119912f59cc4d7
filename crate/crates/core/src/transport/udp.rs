use std::net::SocketAddr;

use async_trait::async_trait;
use tokio::net::UdpSocket;

use super::{BaseSocket, MAX_DATAGRAM};
use crate::datapath::Endpoint;
use crate::error::{Error, Result};

/// OS datagram socket. No headers are added at this layer.
pub struct UdpSocketBase {
    sock: UdpSocket,
    local: Endpoint,
}

impl UdpSocketBase {
    pub async fn bind(addr: SocketAddr) -> Result<Self> {
        let sock = UdpSocket::bind(addr).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => Error::AddressInUse(addr.to_string()),
            _ => Error::Io(e),
        })?;
        let local = Endpoint(sock.local_addr()?);
        Ok(UdpSocketBase { sock, local })
    }
}

#[async_trait]
impl BaseSocket for UdpSocketBase {
    fn local(&self) -> Endpoint {
        self.local
    }

    async fn send_to(&self, peer: Endpoint, payload: &[u8]) -> Result<()> {
        if payload.len() > MAX_DATAGRAM {
            return Err(Error::PayloadTooLarge(payload.len()));
        }
        self.sock.send_to(payload, peer.0).await?;
        Ok(())
    }

    async fn recv_from(&self) -> Result<(Endpoint, Vec<u8>)> {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        let (n, from) = self.sock.recv_from(&mut buf).await?;
        buf.truncate(n);
        Ok((Endpoint(from), buf))
    }

    async fn recv_batch(&self, out: &mut Vec<(Endpoint, Vec<u8>)>, limit: usize) -> Result<usize> {
        out.push(self.recv_from().await?);
        let mut n = 1;
        let mut buf = vec![0u8; MAX_DATAGRAM];
        while n < limit {
            match self.sock.try_recv_from(&mut buf) {
                Ok((len, from)) => {
                    out.push((Endpoint(from), buf[..len].to_vec()));
                    n += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(n)
    }
}
