use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chunnel::chunnels::{
    Format, OrderMode, Ordering, Reliability, Reorder, Serialize, Shard, ShardMap, ShardMode,
    ShardRole,
};
use chunnel::negotiate::{decode_nonce, encode_nonce, Capability, MatchMode};
use chunnel::proto::{decode_stack, encode_stack, Frame, OfferPayload, Tag};
use chunnel::pubsub::{Topic, TopicConfig};
use chunnel::transport::{BaseSocket, SimNet, SimNetConfig, SimTransport};
use chunnel::{
    make_stack, select, Accepts, CandidateStack, Chunnel, Conn, Endpoint, Error, Layer, Lower, Msg,
    Produces, Record, WrapContext,
};
use proptest::prelude::*;

// ---- offers ----

fn label() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn capability() -> impl Strategy<Value = Capability> {
    (
        "[a-z]{1,8}",
        any::<bool>(),
        prop::collection::vec(label(), 1..4),
    )
        .prop_map(|(u, exact, labels)| {
            let mode = if exact {
                MatchMode::Exact
            } else {
                MatchMode::Compositional
            };
            Capability::new(u, mode, labels).unwrap()
        })
}

fn offer() -> impl Strategy<Value = Vec<Vec<Capability>>> {
    prop::collection::vec(prop::collection::vec(capability(), 0..4), 0..5)
}

/// Straight transcription of the offer layout, independent of the library.
fn oracle_offer(o: &[Vec<Capability>]) -> Vec<u8> {
    fn s(out: &mut Vec<u8>, v: &str) {
        out.extend_from_slice(&(v.len() as u16).to_be_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    let mut out = (o.len() as u16).to_be_bytes().to_vec();
    for cand in o {
        out.extend_from_slice(&(cand.len() as u16).to_be_bytes());
        for c in cand {
            s(&mut out, &c.universe);
            out.push(match c.mode {
                MatchMode::Exact => 0,
                MatchMode::Compositional => 1,
            });
            let mut labels: Vec<&String> = c.labels.iter().collect();
            labels.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
            out.extend_from_slice(&(labels.len() as u16).to_be_bytes());
            for l in labels {
                s(&mut out, l);
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn offer_round_trips_and_matches_layout(o in offer()) {
        let bytes = OfferPayload::new(o.clone()).encode();
        prop_assert_eq!(&bytes, &oracle_offer(&o));
        prop_assert_eq!(OfferPayload::decode(&bytes).unwrap().candidates, o);
    }

    #[test]
    fn label_insertion_order_is_irrelevant(
        labels in prop::collection::btree_set(label(), 1..6),
        seed in any::<u64>(),
    ) {
        let mut shuffled: Vec<String> = labels.iter().cloned().collect();
        let k = shuffled.len();
        shuffled.rotate_left((seed as usize) % k);
        if seed % 2 == 1 {
            shuffled.reverse();
        }
        let a = Capability::new("u", MatchMode::Exact, labels.iter().cloned()).unwrap();
        let b = Capability::new("u", MatchMode::Exact, shuffled).unwrap();
        prop_assert_eq!(encode_stack(&[a]), encode_stack(&[b]));
    }

    #[test]
    fn truncated_offers_are_rejected(o in offer(), cut in any::<prop::sample::Index>()) {
        let bytes = OfferPayload::new(o).encode();
        let at = cut.index(bytes.len());
        prop_assert!(OfferPayload::decode(&bytes[..at]).is_err());
    }
}

// ---- nonces and frames ----

proptest! {
    #[test]
    fn nonce_round_trips(bits in prop::collection::vec(0u8..2, 0..40), fp in any::<[u8; 32]>()) {
        let choice = CandidateStack(bits);
        let n = encode_nonce(&choice, &fp);
        prop_assert_eq!(n.len(), 32 + 2 + choice.0.len().div_ceil(8));
        let back = decode_nonce(&n).unwrap();
        prop_assert_eq!(back.choice, choice);
        prop_assert_eq!(back.fingerprint, fp);
        let mut longer = n.clone();
        longer.push(0);
        prop_assert!(decode_nonce(&longer).is_err());
    }

    #[test]
    fn frames_round_trip(
        tag in 0u8..=0x0A,
        conn in any::<u64>(),
        seq in any::<u64>(),
        payload in prop::collection::vec(any::<u8>(), 0..200),
    ) {
        let f = Frame::new(Tag::from_u8(tag).unwrap(), conn, seq, payload);
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), 22 + f.payload.len());
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn nonzero_flags_are_rejected(flags in 1u8..=255, conn in any::<u64>()) {
        let mut bytes = Frame::new(Tag::Data, conn, 0, vec![1, 2]).encode();
        bytes[1] = flags;
        prop_assert!(Frame::decode(&bytes).is_err());
    }
}

// ---- serialization ----

fn record() -> impl Strategy<Value = Record> {
    (
        "\\PC{0,20}",
        prop::collection::vec(any::<u8>(), 0..64),
        prop::option::of((any::<u32>(), any::<u64>())),
    )
        .prop_map(|(k, v, o)| {
            let r = Record::new(k, v);
            match o {
                Some((g, s)) => r.ordered(g, s),
                None => r,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]
    #[test]
    fn formats_round_trip_and_never_cross_decode(r in record()) {
        for f in [Format::A, Format::B] {
            let bytes = f.encode(&r).unwrap();
            prop_assert_eq!(f.decode(&bytes).unwrap(), r.clone());
        }
        let a = Format::A.encode(&r).unwrap();
        let b = Format::B.encode(&r).unwrap();
        prop_assert!(matches!(Format::B.decode(&a), Err(Error::Decode(_))));
        prop_assert!(matches!(Format::A.decode(&b), Err(Error::Decode(_))));
    }
}

// ---- library capabilities ----

#[test]
fn library_capabilities_survive_the_offer_encoding() {
    let topic = Topic::new(TopicConfig::default());
    let me = Endpoint::sim(1, 1);
    let map = ShardMap::new(me, vec![me]);
    let chunnels: Vec<Arc<dyn Chunnel>> = vec![
        Serialize::new(Format::A),
        Serialize::new(Format::B),
        Shard::new(ShardMode::ClientSide, ShardRole::Client, map.clone()),
        Shard::new(ShardMode::ServerSide, ShardRole::Backend, map),
        Reliability::new(),
        Ordering::recv_side(),
        Ordering::provider(topic, me),
    ];
    let caps: Vec<Capability> = chunnels.iter().flat_map(|c| c.capabilities()).collect();
    assert_eq!(caps.len(), chunnels.len());
    assert_eq!(decode_stack(&encode_stack(&caps)).unwrap(), caps);
    assert_eq!(Ordering::recv_side().mode(), OrderMode::RecvSide);
}

// ---- candidate enumeration ----

struct Named(String);

#[async_trait]
impl Chunnel for Named {
    fn name(&self) -> &str {
        &self.0
    }
    fn accepts(&self) -> Accepts {
        Accepts::Any
    }
    fn produces(&self) -> Produces {
        Produces::SameAsInput
    }
    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> chunnel::Result<Conn> {
        match lower {
            Lower::Conn(c) => Ok(c),
            Lower::Unit => Err(Error::NoBootstrapLayer),
        }
    }
}

#[derive(Debug, Clone)]
enum Item {
    Leaf,
    Sel(Vec<Item>, Vec<Item>),
}

fn items() -> impl Strategy<Value = Vec<Item>> {
    let leaf = Just(Item::Leaf);
    let item = leaf.prop_recursive(3, 12, 3, |inner| {
        prop_oneof![
            Just(Item::Leaf),
            (
                prop::collection::vec(inner.clone(), 1..3),
                prop::collection::vec(inner, 1..3)
            )
                .prop_map(|(l, r)| Item::Sel(l, r)),
        ]
    });
    prop::collection::vec(item, 1..4)
}

fn build(items: &[Item], next: &mut u32) -> Vec<Layer> {
    items
        .iter()
        .map(|i| match i {
            Item::Leaf => {
                *next += 1;
                Layer::from(Arc::new(Named(format!("c{next}"))))
            }
            Item::Sel(l, r) => {
                let l = build(l, next);
                let r = build(r, next);
                select(l, r).into()
            }
        })
        .collect()
}

/// Concrete name lists, left branches first, earlier items varying slowest.
fn oracle_expand(items: &[Item], next: &mut u32) -> Vec<Vec<String>> {
    let mut acc = vec![Vec::new()];
    for i in items {
        let options = match i {
            Item::Leaf => {
                *next += 1;
                vec![vec![format!("c{next}")]]
            }
            Item::Sel(l, r) => {
                let mut o = oracle_expand(l, next);
                o.extend(oracle_expand(r, next));
                o
            }
        };
        acc = acc
            .iter()
            .flat_map(|prefix| {
                options.iter().map(move |o| {
                    let mut p = prefix.clone();
                    p.extend(o.iter().cloned());
                    p
                })
            })
            .collect();
    }
    acc
}

proptest! {
    #[test]
    fn candidates_follow_preorder_left_first(tree in items()) {
        let mut layers = build(&tree, &mut 0);
        layers.push(SimTransport::new(SimNet::in_memory(), vec![]).into());
        let spec = make_stack(layers).unwrap();
        let got: Vec<Vec<String>> = spec
            .enumerate_candidates()
            .iter()
            .map(|c| {
                let mut names: Vec<String> =
                    spec.concrete(c).unwrap().iter().map(|l| l.name().to_string()).collect();
                names.pop();
                names
            })
            .collect();
        prop_assert_eq!(got, oracle_expand(&tree, &mut 0));
    }
}

// ---- ordering ----

proptest! {
    #[test]
    fn reorder_releases_every_group_in_sequence(
        lens in prop::collection::vec(1u64..20, 1..6),
        shuffle in any::<u64>(),
    ) {
        let mut arrivals: Vec<(u32, u64)> = lens
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| (0..n).map(move |s| (g as u32, s)))
            .collect();
        let mut rng = shuffle;
        for i in (1..arrivals.len()).rev() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            arrivals.swap(i, (rng >> 33) as usize % (i + 1));
        }
        let mut r = Reorder::default();
        let mut out = Vec::new();
        for (g, s) in arrivals {
            r.push(Msg::record(Endpoint::sim(1, 1), Record::new("k", vec![]).ordered(g, s)));
            while let Some(m) = r.pop() {
                let t = m.into_record("t").unwrap().1.order.unwrap();
                out.push((t.group, t.seq));
            }
        }
        let mut per: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for (g, s) in out {
            per.entry(g).or_default().push(s);
        }
        for (g, &n) in lens.iter().enumerate() {
            prop_assert_eq!(&per[&(g as u32)], &(0..n).collect::<Vec<_>>());
        }
        prop_assert_eq!(r.held(), 0);
    }
}

// ---- simulated network ----

fn sim_trace(
    cfg: SimNetConfig,
    sends: &[(u16, u16, Vec<u8>)],
) -> Vec<(Endpoint, Endpoint, Vec<u8>)> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .unwrap();
    rt.block_on(async {
        let net = SimNet::new(cfg.traced(true));
        let socks: Vec<_> = (0..4)
            .map(|h| net.bind(Endpoint::sim(h, 9)).unwrap())
            .collect();
        for (from, to, p) in sends {
            socks[*from as usize]
                .send_to(Endpoint::sim(*to, 9), p)
                .await
                .unwrap();
            tokio::task::yield_now().await;
        }
        tokio::time::sleep(Duration::from_secs(5)).await;
        net.trace()
            .into_iter()
            .map(|d| (d.src, d.dst, d.payload))
            .collect()
    })
}

fn sends() -> impl Strategy<Value = Vec<(u16, u16, Vec<u8>)>> {
    prop::collection::vec(
        (0u16..4, 0u16..4, prop::collection::vec(any::<u8>(), 1..32)),
        1..40,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn simnet_is_deterministic_and_never_corrupts(s in sends(), seed in any::<u64>()) {
        let cfg = SimNetConfig::lossless(Duration::from_millis(2))
            .loss(0.2)
            .duplicate(0.2)
            .reorder(0.3)
            .jitter(Duration::from_millis(3))
            .seed(seed);
        let a = sim_trace(cfg.clone(), &s);
        let b = sim_trace(cfg, &s);
        prop_assert_eq!(&a, &b);
        for (src, dst, p) in &a {
            let sent = s.iter().any(|(f, t, q)| Endpoint::sim(*f, 9) == *src && Endpoint::sim(*t, 9) == *dst && q == p);
            prop_assert!(sent, "delivered bytes were never sent");
        }
    }
}
