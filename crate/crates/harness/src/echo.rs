//! Request/response echo over a negotiated connection.

use std::time::Duration;

use chunnel::chunnels::tag::{take_prefix, take_suffix};
use chunnel::negotiate::{Connection, Negotiator};
use chunnel::proto::Mux;
use chunnel::transport::{SimNet, SimNetConfig, SimTransport};
use chunnel::{recv_one, CandidateStack, Datapath, Endpoint, Msg};

use crate::error::{HarnessError, Result};
use crate::presets;

#[derive(Debug, Clone)]
pub struct EchoConfig {
    pub messages: u64,
    pub msg_size: usize,
    /// The server swaps its stamping layer after this many echoes.
    pub trigger_reconfigure_after: Option<u64>,
    pub client_stack: String,
    pub server_stack: String,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig {
            messages: 100,
            msg_size: 64,
            trigger_reconfigure_after: None,
            client_stack: "echo".into(),
            server_stack: "echo".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoReport {
    pub echoed: u64,
    pub negotiated: CandidateStack,
    /// Runs of the server's sending implementation, in arrival order.
    pub regimes: Vec<(u8, u64)>,
}

impl std::fmt::Display for EchoReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "echoed {} messages over stack {}",
            self.echoed, self.negotiated
        )?;
        for (id, n) in &self.regimes {
            write!(f, "; tag impl {id} x{n}")?;
        }
        Ok(())
    }
}

/// Echo everything back to its sender; swap branches once after `trigger`
/// echoes. Returns when the connection fails.
pub async fn serve(conn: Connection, trigger: Option<u64>) -> Result<u64> {
    let mut count = 0u64;
    loop {
        let m = match recv_one(&conn).await {
            Ok(m) => m,
            Err(_) => return Ok(count),
        };
        conn.send(vec![m]).await?;
        count += 1;
        if Some(count) == trigger {
            let mut target = conn.negotiated().choice;
            if let Some(b) = target.0.first_mut() {
                *b = 1 - *b;
            }
            conn.reconfigure(&target).await?;
            tracing::info!(after = count, choice = %target, "server reconfigured");
        }
    }
}

pub async fn client(conn: &Connection, messages: u64, msg_size: usize) -> Result<EchoReport> {
    let server = conn.peer();
    let mut regimes: Vec<(u8, u64)> = Vec::new();
    for i in 0..messages {
        let mut p = vec![0u8; msg_size.max(8)];
        p[..8].copy_from_slice(&i.to_be_bytes());
        conn.send(vec![Msg::bytes(server, p.clone())]).await?;
        let reply = tokio::time::timeout(Duration::from_secs(10), recv_one(conn))
            .await
            .map_err(|_| HarnessError::Violation(format!("echo {i} never came back")))??;
        let (_, b) = reply.into_bytes("echo")?;
        // server send, client send | payload | server recv, client recv
        let (sent, rest) = take_prefix(&b, 2)?;
        let (body, _) = take_suffix(rest, 2)?;
        if body != p.as_slice() {
            return Err(HarnessError::Violation(format!(
                "echo {i} came back altered"
            )));
        }
        match regimes.last_mut() {
            Some((id, n)) if *id == sent[0].impl_id => *n += 1,
            _ => regimes.push((sent[0].impl_id, 1)),
        }
    }
    Ok(EchoReport {
        echoed: messages,
        negotiated: conn.negotiated().choice,
        regimes,
    })
}

/// Client and server in-process on the simulated network.
pub async fn run_local(cfg: &EchoConfig) -> Result<EchoReport> {
    let net = SimNet::new(SimNetConfig::lossless(Duration::from_micros(100)));
    let (cep, sep) = (Endpoint::sim(1, 7), Endpoint::sim(2, 7));
    let bottom = || SimTransport::new(net.clone(), vec![]).into();
    let listener = Negotiator::new(
        Mux::bind_sim(&net, sep)?,
        presets::echo(&cfg.server_stack, bottom())?,
    )
    .listen();
    let trigger = cfg.trigger_reconfigure_after;
    let server = tokio::spawn(async move {
        let conn = listener.accept().await?;
        let n = serve(conn, trigger).await?;
        drop(listener);
        Ok::<_, HarnessError>(n)
    });
    let neg = Negotiator::new(
        Mux::bind_sim(&net, cep)?,
        presets::echo(&cfg.client_stack, bottom())?,
    );
    let res = match neg.connect(sep).await {
        Ok(conn) => client(&conn, cfg.messages, cfg.msg_size).await,
        Err(e) => Err(e.into()),
    };
    server.abort();
    res
}
