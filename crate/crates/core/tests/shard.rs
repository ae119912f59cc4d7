use std::collections::BTreeSet;
use std::time::Duration;

use chunnel::chunnels::{Format, Serialize, Shard, ShardMap, ShardMode, ShardRole};
use chunnel::negotiate::{Connection, Negotiator};
use chunnel::proto::{Frame, Mux, Tag};
use chunnel::transport::{SimNet, SimNetConfig, SimTransport};
use chunnel::{
    make_stack, recv_one, select, Datapath, Endpoint, Error, Layer, Msg, Record, StackSpec,
};
use proptest::prelude::*;

fn ep(h: u16) -> Endpoint {
    Endpoint::sim(h, 6000)
}

const CLIENT: u16 = 1;
const CANONICAL: u16 = 10;
const SHARDS: [u16; 3] = [11, 12, 13];

fn map() -> ShardMap {
    ShardMap::new(ep(CANONICAL), SHARDS.iter().map(|&h| ep(h)).collect())
}

fn shard(mode: ShardMode, role: ShardRole) -> Layer {
    Shard::new(mode, role, map()).into()
}

fn spec(net: &SimNet, modes: &[ShardMode], role: ShardRole) -> StackSpec {
    let top: Layer = match modes {
        [m] => shard(*m, role),
        [a, b] => select(shard(*a, role), shard(*b, role)).into(),
        _ => unreachable!(),
    };
    make_stack(vec![
        top,
        Serialize::new(Format::A).into(),
        SimTransport::new(net.clone(), vec![]).into(),
    ])
    .unwrap()
}

struct Deployment {
    net: SimNet,
    client: Connection,
    backends: Vec<Connection>,
}

/// One client connection to the canonical endpoint, handed on to every shard.
async fn deploy(server_modes: &[ShardMode]) -> Deployment {
    let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(1)));
    let canonical = Negotiator::new(
        Mux::bind_sim(&net, ep(CANONICAL)).unwrap(),
        spec(&net, server_modes, ShardRole::Canonical),
    )
    .listen();
    let backend_listeners: Vec<_> = SHARDS
        .iter()
        .map(|&h| {
            Negotiator::new(
                Mux::bind_sim(&net, ep(h)).unwrap(),
                spec(&net, server_modes, ShardRole::Backend),
            )
            .listen()
        })
        .collect();
    let client = Negotiator::new(
        Mux::bind_sim(&net, ep(CLIENT)).unwrap(),
        spec(
            &net,
            &[ShardMode::ClientSide, ShardMode::ServerSide],
            ShardRole::Client,
        ),
    )
    .connect(ep(CANONICAL))
    .await
    .unwrap();
    let front = canonical.accept().await.unwrap();
    for &h in &SHARDS {
        front.forward_to(ep(h)).await.unwrap();
    }
    let mut backends = Vec::new();
    for l in &backend_listeners {
        let b = l.accept().await.unwrap();
        assert_eq!(b.conn_id(), client.conn_id());
        assert_eq!(b.negotiated().fingerprint, client.negotiated().fingerprint);
        backends.push(b);
    }
    // the canonical connection keeps forwarding in the background
    tokio::spawn(async move {
        let _keep = canonical;
        let dp = front.datapath();
        let _ = recv_one(dp.as_ref()).await;
    });
    Deployment {
        net,
        client,
        backends,
    }
}

fn keys() -> Vec<String> {
    (0..60).map(|i| format!("key-{i}")).collect()
}

async fn check_routing(d: &Deployment) {
    let m = map();
    for k in keys() {
        d.client
            .send(vec![Msg::record(
                ep(CANONICAL),
                Record::new(k, b"v".to_vec()),
            )])
            .await
            .unwrap();
    }
    for (i, b) in d.backends.iter().enumerate() {
        let want: BTreeSet<String> = keys().into_iter().filter(|k| m.index(k) == i).collect();
        let mut got = BTreeSet::new();
        while got.len() < want.len() {
            let msg = tokio::time::timeout(Duration::from_secs(5), recv_one(b))
                .await
                .expect("shard starved")
                .unwrap();
            let (_, r) = msg.into_record("test").unwrap();
            got.insert(r.key);
        }
        assert_eq!(got, want, "shard {i}");
        assert!(
            tokio::time::timeout(Duration::from_millis(200), recv_one(b))
                .await
                .is_err()
        );
    }
    // a shard answers the client directly
    d.backends[0]
        .send(vec![Msg::record(
            ep(CLIENT),
            Record::new("reply", b"ok".to_vec()),
        )])
        .await
        .unwrap();
    let back = tokio::time::timeout(Duration::from_secs(5), recv_one(&d.client))
        .await
        .unwrap()
        .unwrap();
    assert_eq!(back.addr, ep(SHARDS[0]));
}

fn data_frames(net: &SimNet, src: Endpoint, dst: Endpoint) -> usize {
    net.trace()
        .iter()
        .filter(|d| d.src == src && d.dst == dst)
        .filter(|d| Frame::decode(&d.payload).is_ok_and(|f| f.tag == Tag::Data))
        .count()
}

#[tokio::test(start_paused = true)]
async fn client_side_sharding_skips_the_canonical_endpoint() {
    let d = deploy(&[ShardMode::ClientSide, ShardMode::ServerSide]).await;
    assert_eq!(d.client.negotiated().choice.0, vec![0]);
    check_routing(&d).await;
    assert_eq!(data_frames(&d.net, ep(CLIENT), ep(CANONICAL)), 0);
    let direct: usize = SHARDS
        .iter()
        .map(|&h| data_frames(&d.net, ep(CLIENT), ep(h)))
        .sum();
    assert_eq!(direct, keys().len());
}

#[tokio::test(start_paused = true)]
async fn server_side_sharding_goes_through_the_canonical_endpoint() {
    let d = deploy(&[ShardMode::ServerSide]).await;
    assert_eq!(d.client.negotiated().choice.0, vec![1]);
    check_routing(&d).await;
    assert_eq!(data_frames(&d.net, ep(CLIENT), ep(CANONICAL)), keys().len());
    for &h in &SHARDS {
        assert_eq!(data_frames(&d.net, ep(CLIENT), ep(h)), 0);
    }
    let forwarded: usize = SHARDS
        .iter()
        .map(|&h| data_frames(&d.net, ep(CANONICAL), ep(h)))
        .sum();
    assert_eq!(forwarded, keys().len());
}

#[tokio::test(start_paused = true)]
async fn empty_key_is_refused() {
    let d = deploy(&[ShardMode::ClientSide]).await;
    let err = d
        .client
        .send(vec![Msg::record(
            ep(CANONICAL),
            Record::new("", b"v".to_vec()),
        )])
        .await
        .unwrap_err();
    assert!(matches!(err, Error::EmptyKey), "{err}");
}

fn fnv_oracle(data: &[u8]) -> u64 {
    data.iter().fold(14695981039346656037u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(1099511628211)
    })
}

proptest! {
    #[test]
    fn shard_index_is_fnv_mod_n(key in "\\PC{1,24}", n in 1usize..17) {
        let m = ShardMap::new(ep(0), (0..n as u16).map(|h| ep(100 + h)).collect());
        let want = (fnv_oracle(key.as_bytes()) % n as u64) as usize;
        prop_assert_eq!(m.index(&key), want);
        prop_assert_eq!(m.shard_for(&key), ep(100 + want as u16));
    }
}
