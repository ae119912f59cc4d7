//! Negotiation against a brute-force compatibility oracle, and the
//! round-trip counts of full and zero-RTT handshakes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chunnel::chunnels::{Format, Serialize};
use chunnel::negotiate::{Capability, MatchMode, Negotiator, ZeroRttCache};
use chunnel::proto::{Frame, Mux, Tag};
use chunnel::transport::{SimNet, SimNetConfig, SimTransport};
use chunnel::{
    make_stack, recv_one, select, Accepts, Chunnel, Conn, Data, Datapath, Endpoint, Error, Layer,
    Lower, Msg, Produces, Record, StackSpec, WrapContext,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, simulated};

/// Pass-through layer that only contributes capabilities.
struct Capped(Vec<Capability>);

#[async_trait]
impl Chunnel for Capped {
    fn name(&self) -> &str {
        "capped"
    }
    fn accepts(&self) -> Accepts {
        Accepts::Any
    }
    fn produces(&self) -> Produces {
        Produces::SameAsInput
    }
    fn capabilities(&self) -> Vec<Capability> {
        self.0.clone()
    }
    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> chunnel::Result<Conn> {
        match lower {
            Lower::Conn(c) => Ok(c),
            Lower::Unit => Err(Error::NoBootstrapLayer),
        }
    }
}

const UNIVERSES: [&str; 3] = ["u0", "u1", "u2"];
const LABELS: [&str; 3] = ["a", "b", "c"];

type Cap = (usize, BTreeSet<&'static str>);

#[derive(Debug, Clone)]
enum Node {
    Leaf(Option<Cap>),
    /// Pre-order select index, left and right branches.
    Sel(usize, Vec<Node>, Vec<Node>),
}

fn gen_items(rng: &mut ChaCha8Rng, budget: &mut usize, next: &mut usize, n: usize) -> Vec<Node> {
    (0..n)
        .map(|_| {
            if *budget > 0 && rng.gen_bool(0.6) {
                *budget -= 1;
                let idx = *next;
                *next += 1;
                let ln = rng.gen_range(1..=2);
                let l = gen_items(rng, budget, next, ln);
                let rn = rng.gen_range(1..=2);
                let r = gen_items(rng, budget, next, rn);
                Node::Sel(idx, l, r)
            } else if rng.gen_bool(0.15) {
                Node::Leaf(None)
            } else {
                let k = rng.gen_range(1..=2);
                let labels = LABELS.choose_multiple(rng, k).copied().collect();
                Node::Leaf(Some((rng.gen_range(0..3), labels)))
            }
        })
        .collect()
}

/// A side's tree: up to three selects, numbered in pre-order.
fn gen_side(rng: &mut ChaCha8Rng) -> (Vec<Node>, usize) {
    let mut budget = rng.gen_range(0..=3);
    let mut next = 0;
    let n = rng.gen_range(1..=3);
    let items = gen_items(rng, &mut budget, &mut next, n);
    (items, next)
}

fn build(items: &[Node], modes: &[MatchMode; 3]) -> Vec<Layer> {
    items
        .iter()
        .map(|n| match n {
            Node::Leaf(cap) => {
                let caps = cap
                    .iter()
                    .map(|(u, l)| {
                        Capability::new(UNIVERSES[*u], modes[*u], l.iter().copied()).unwrap()
                    })
                    .collect();
                Layer::from(Arc::new(Capped(caps)))
            }
            Node::Sel(_, l, r) => select(build(l, modes), build(r, modes)).into(),
        })
        .collect()
}

/// Every concrete stack with its branch vector, most preferred first: left
/// before right, earlier selects varying slowest.
fn oracle_candidates(items: &[Node], selects: usize) -> Vec<(Vec<u8>, Vec<Cap>)> {
    fn go(items: &[Node], acc: Vec<(Vec<u8>, Vec<Cap>)>) -> Vec<(Vec<u8>, Vec<Cap>)> {
        let mut acc = acc;
        for n in items {
            acc = match n {
                Node::Leaf(c) => acc
                    .into_iter()
                    .map(|(b, mut caps)| {
                        caps.extend(c.clone());
                        (b, caps)
                    })
                    .collect(),
                Node::Sel(i, l, r) => acc
                    .into_iter()
                    .flat_map(|(b, caps)| {
                        let mut out = Vec::new();
                        for (bit, branch) in [(0u8, l), (1u8, r)] {
                            let mut b2 = b.clone();
                            b2[*i] = bit;
                            out.extend(go(branch, vec![(b2, caps.clone())]));
                        }
                        out
                    })
                    .collect(),
            };
        }
        acc
    }
    go(items, vec![(vec![0; selects], Vec::new())])
}

/// Label union per universe.
fn collapse(caps: &[Cap]) -> BTreeMap<usize, BTreeSet<&'static str>> {
    let mut m: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for (u, l) in caps {
        m.entry(*u).or_default().extend(l.iter().copied());
    }
    m
}

fn oracle_compatible(a: &[Cap], b: &[Cap], modes: &[MatchMode; 3]) -> bool {
    let (ma, mb) = (collapse(a), collapse(b));
    (0..3).all(|u| match (ma.get(&u), mb.get(&u), modes[u]) {
        (None, None, _) => true,
        (Some(x), Some(y), MatchMode::Exact) => x == y,
        (_, _, MatchMode::Exact) => false,
        (Some(x), Some(y), MatchMode::Compositional) => !x.is_disjoint(y),
        (_, _, MatchMode::Compositional) => true,
    })
}

fn spec(items: &[Node], modes: &[MatchMode; 3], net: &SimNet) -> StackSpec {
    let mut layers = build(items, modes);
    layers.push(SimTransport::new(net.clone(), vec![]).into());
    make_stack(layers).unwrap()
}

const CASES: usize = 10_000;

pub fn soundness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rt = simulated();
    let (mut accepted, mut rejected) = (0, 0);
    for case in 0..CASES {
        let modes: [MatchMode; 3] = std::array::from_fn(|_| {
            if rng.gen() {
                MatchMode::Exact
            } else {
                MatchMode::Compositional
            }
        });
        let (client_tree, cs) = gen_side(&mut rng);
        let (server_tree, ss) = gen_side(&mut rng);
        let cc = oracle_candidates(&client_tree, cs);
        let sc = oracle_candidates(&server_tree, ss);
        let want = sc.iter().find_map(|(sb, s)| {
            cc.iter()
                .find(|(_, c)| oracle_compatible(c, s, &modes))
                .map(|(cb, _)| (cb.clone(), sb.clone()))
        });

        let got = rt.block_on(async {
            let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(1)).traced(false));
            let (c_ep, s_ep) = (Endpoint::sim(1, 1), Endpoint::sim(2, 1));
            let listener = Negotiator::new(
                Mux::bind_sim(&net, s_ep).unwrap(),
                spec(&server_tree, &modes, &net),
            )
            .listen();
            let client = Negotiator::new(
                Mux::bind_sim(&net, c_ep).unwrap(),
                spec(&client_tree, &modes, &net),
            )
            .connect(s_ep)
            .await;
            match client {
                Ok(c) => {
                    let s = listener.accept().await.map_err(|e| e.to_string())?;
                    Ok(Some((c.negotiated().choice.0, s.negotiated().choice.0)))
                }
                Err(Error::NoCompatibleStack) => Ok(None),
                Err(e) => Err(e.to_string()),
            }
        });
        let got = got.map_err(|e| format!("case {case}: {e}"))?;
        ensure(got == want, || {
            format!("case {case}: negotiated {got:?}, oracle {want:?}; client {client_tree:?}, server {server_tree:?}, modes {modes:?}")
        })?;
        if want.is_some() {
            accepted += 1;
        } else {
            rejected += 1;
        }
    }
    ensure(accepted > CASES / 10 && rejected > CASES / 10, || {
        format!("degenerate mix: {accepted} accepted, {rejected} rejected")
    })?;
    Ok(format!(
        "{CASES} cases agree ({accepted} agreed, {rejected} rejected)"
    ))
}

fn control_tags(net: &SimNet, src: Endpoint, from: usize) -> Vec<(Duration, Tag)> {
    net.trace()[from..]
        .iter()
        .filter(|d| d.src == src)
        .filter_map(|d| Frame::decode(&d.payload).ok().map(|f| (d.at, f.tag)))
        .filter(|(_, t)| *t != Tag::Ack)
        .collect()
}

async fn delivered(
    c: &chunnel::negotiate::Connection,
    s: &chunnel::negotiate::Connection,
    key: &str,
) -> Result<(), String> {
    c.send(vec![Msg::record(c.peer(), Record::new(key, b"v".to_vec()))])
        .await
        .map_err(|e| e.to_string())?;
    let m = tokio::time::timeout(Duration::from_secs(5), recv_one(s))
        .await
        .map_err(|_| format!("{key} never arrived"))?
        .map_err(|e| e.to_string())?;
    match m.data {
        Data::Record(r) if r.key == key => Ok(()),
        other => Err(format!("expected {key}, got {other:?}")),
    }
}

fn ser(f: Format) -> Layer {
    Serialize::new(f).into()
}

fn route(labels: &[&str]) -> Layer {
    Arc::new(Capped(vec![Capability::compositional(
        "route",
        labels.iter().copied(),
    )]))
    .into()
}

async fn scenario(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Duration::from_millis(rng.gen_range(1..=5));
    let net = SimNet::new(SimNetConfig::lossless(d).seed(seed));
    let base = || -> Layer { SimTransport::new(net.clone(), vec![]).into() };
    let (c_ep, s_ep, fresh_ep) = (
        Endpoint::sim(1, 9),
        Endpoint::sim(2, 9),
        Endpoint::sim(3, 9),
    );
    let mut formats = [Format::A, Format::B];
    formats.shuffle(&mut rng);
    let all = ["r1", "r2", "r3"];
    let client_routes: Vec<&str> = all.choose_multiple(&mut rng, 2).copied().collect();
    let server_routes = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let mut v = vec![*client_routes.choose(rng).unwrap()];
        if rng.gen() {
            v.push(all[rng.gen_range(0..3)]);
        }
        v
    };
    let first = formats[rng.gen_range(0..2)];
    let other = if first == Format::A {
        Format::B
    } else {
        Format::A
    };
    let client_spec = make_stack(vec![
        select(ser(formats[0]), ser(formats[1])).into(),
        route(&client_routes),
        base(),
    ])
    .unwrap();
    let server_spec = |f, routes: &[&str]| make_stack(vec![ser(f), route(routes), base()]).unwrap();
    let s1 = server_spec(first, &server_routes(&mut rng));
    let s2 = server_spec(other, &server_routes(&mut rng));

    let cache = ZeroRttCache::new();
    let neg = Negotiator::new(Mux::bind_sim(&net, c_ep).unwrap(), client_spec.clone())
        .zero_rtt(cache.clone());
    {
        let listener = Negotiator::new(Mux::bind_sim(&net, s_ep).unwrap(), s1).listen();

        // full negotiation: one HELLO out, one ACCEPT back, one round trip
        let mark = net.trace().len();
        let t0 = tokio::time::Instant::now();
        let c = neg.connect(s_ep).await.map_err(|e| e.to_string())?;
        let rtt = t0.elapsed();
        let s = listener.accept().await.map_err(|e| e.to_string())?;
        let out: Vec<Tag> = control_tags(&net, c_ep, mark)
            .into_iter()
            .map(|x| x.1)
            .collect();
        let back: Vec<Tag> = control_tags(&net, s_ep, mark)
            .into_iter()
            .map(|x| x.1)
            .collect();
        ensure(out == [Tag::Hello] && back == [Tag::Accept], || {
            format!("handshake frames {out:?} / {back:?}")
        })?;
        ensure(rtt == 2 * d, || {
            format!("handshake took {rtt:?} on a {d:?} link")
        })?;
        delivered(&c, &s, "first").await?;
        drop((c, s));
        tokio::time::sleep(Duration::from_secs(1)).await;

        // zero-RTT: data leaves in the same flight as the nonce
        let mark = net.trace().len();
        let c = neg.connect(s_ep).await.map_err(|e| e.to_string())?;
        c.send(vec![Msg::record(s_ep, Record::new("early", b"x".to_vec()))])
            .await
            .map_err(|e| e.to_string())?;
        c.confirmed().await.map_err(|e| e.to_string())?;
        let s = listener.accept().await.map_err(|e| e.to_string())?;
        let m = recv_one(&s).await.map_err(|e| e.to_string())?;
        ensure(
            matches!(m.data, Data::Record(ref r) if r.key == "early"),
            || "early data lost".into(),
        )?;
        let sent = control_tags(&net, c_ep, mark);
        let hello = sent.iter().find(|x| x.1 == Tag::ZrttHello).map(|x| x.0);
        let data = sent.iter().find(|x| x.1 == Tag::Data).map(|x| x.0);
        ensure(hello.is_some() && hello == data, || {
            format!("first flight {sent:?}")
        })?;
        ensure(sent.iter().all(|x| x.1 != Tag::Hello), || {
            "zero-RTT fell back to HELLO".into()
        })?;
        drop((c, s, listener));
    }
    tokio::time::sleep(Duration::from_secs(1)).await;

    // the server now only speaks the format the cached stack does not use
    let listener = Negotiator::new(Mux::bind_sim(&net, s_ep).unwrap(), s2).listen();
    let mark = net.trace().len();
    let c = neg.connect(s_ep).await.map_err(|e| e.to_string())?;
    c.send(vec![Msg::record(s_ep, Record::new("stale", b"x".to_vec()))])
        .await
        .map_err(|e| e.to_string())?;
    c.confirmed().await.map_err(|e| e.to_string())?;
    let s = listener.accept().await.map_err(|e| e.to_string())?;
    ensure(
        control_tags(&net, s_ep, mark)
            .iter()
            .any(|x| x.1 == Tag::ZrttFail),
        || "no ZRTT_FAIL".into(),
    )?;
    let fresh = Negotiator::new(Mux::bind_sim(&net, fresh_ep).unwrap(), client_spec)
        .connect(s_ep)
        .await
        .map_err(|e| e.to_string())?;
    let _fresh_server = listener.accept().await.map_err(|e| e.to_string())?;
    ensure(c.negotiated().choice == fresh.negotiated().choice, || {
        format!(
            "fallback chose {}, full negotiation {}",
            c.negotiated().choice,
            fresh.negotiated().choice
        )
    })?;
    ensure(
        c.negotiated().fingerprint == s.negotiated().fingerprint,
        || "fingerprints differ".into(),
    )?;
    delivered(&c, &s, "after-fallback").await
}

pub fn round_trips() -> Result<String, String> {
    let rt = simulated();
    for seed in 0..100 {
        rt.block_on(scenario(seed))
            .map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("100 of 100 seeded scenarios".into())
}
