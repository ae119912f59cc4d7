//! Golden frame and nonce bytes, and an independent offer codec.

use chunnel::negotiate::{decode_nonce, encode_nonce, Capability, MatchMode};
use chunnel::proto::{Frame, OfferPayload, Tag};
use chunnel::CandidateStack;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ensure;

const FRAMES: &str = include_str!("../golden/frames.txt");
const NONCES: &str = include_str!("../golden/nonces.txt");

const TAG_NAMES: [&str; 11] = [
    "Data",
    "Hello",
    "Accept",
    "Reject",
    "ZrttHello",
    "ZrttFail",
    "Prepare",
    "Vote",
    "Commit",
    "Abort",
    "Ack",
];

fn hex(s: &str) -> Vec<u8> {
    if s == "-" {
        return Vec::new();
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).expect("hex"))
        .collect()
}

/// Non-comment lines split into fields before and after `=>`.
fn vectors(text: &str) -> Vec<(Vec<&str>, &str)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (lhs, rhs) = l.split_once("=>").expect("=> in vector");
            (lhs.split_whitespace().collect(), rhs.trim())
        })
        .collect()
}

fn frames() -> Result<usize, String> {
    let vs = vectors(FRAMES);
    for (f, want) in &vs {
        let t = TAG_NAMES.iter().position(|n| *n == f[0]).expect("tag name") as u8;
        let tag = Tag::from_u8(t).ok_or(format!("tag {t} unknown"))?;
        let frame = Frame::new(tag, f[1].parse().unwrap(), f[2].parse().unwrap(), hex(f[3]));
        let want = hex(want);
        ensure(frame.encode() == want, || {
            format!("{} frame encodes differently", f[0])
        })?;
        let back = Frame::decode(&want).map_err(|e| format!("golden {} rejected: {e}", f[0]))?;
        ensure(back == frame, || {
            format!("golden {} decodes differently", f[0])
        })?;
        let mut flagged = want.clone();
        flagged[1] = 1;
        ensure(Frame::decode(&flagged).is_err(), || {
            "nonzero flags accepted".into()
        })?;
        ensure(Frame::decode(&want[..want.len() - 1]).is_err(), || {
            "truncated frame accepted".into()
        })?;
    }
    Ok(vs.len())
}

fn nonces() -> Result<usize, String> {
    let vs = vectors(NONCES);
    for (f, want) in &vs {
        let bits: Vec<u8> = f[0]
            .bytes()
            .filter(|b| *b != b'-')
            .map(|b| b - b'0')
            .collect();
        let fp: [u8; 32] = hex(f[1]).try_into().expect("32-byte fingerprint");
        let want = hex(want);
        let choice = CandidateStack(bits);
        ensure(encode_nonce(&choice, &fp) == want, || {
            format!("nonce for {} differs", f[0])
        })?;
        let n = decode_nonce(&want).map_err(|e| format!("golden nonce rejected: {e}"))?;
        ensure(n.choice == choice && n.fingerprint == fp, || {
            format!("nonce {} decodes differently", f[0])
        })?;
    }
    Ok(vs.len())
}

type Offer = Vec<Vec<Capability>>;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn oracle_encode(o: &Offer) -> Vec<u8> {
    let mut out = (o.len() as u16).to_be_bytes().to_vec();
    for cand in o {
        out.extend_from_slice(&(cand.len() as u16).to_be_bytes());
        for c in cand {
            put_str(&mut out, &c.universe);
            out.push(u8::from(c.mode == MatchMode::Compositional));
            let mut labels: Vec<&String> = c.labels.iter().collect();
            labels.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
            out.extend_from_slice(&(labels.len() as u16).to_be_bytes());
            for l in labels {
                put_str(&mut out, l);
            }
        }
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.0.len() < n {
            return None;
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Some(a)
    }
    fn u16(&mut self) -> Option<usize> {
        self.take(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as usize)
    }
    fn str(&mut self) -> Option<String> {
        let n = self.u16()?;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

fn oracle_decode(bytes: &[u8]) -> Option<Offer> {
    let mut r = Reader(bytes);
    let mut o = Vec::new();
    for _ in 0..r.u16()? {
        let mut cand = Vec::new();
        for _ in 0..r.u16()? {
            let universe = r.str()?;
            let mode = match r.take(1)?[0] {
                0 => MatchMode::Exact,
                1 => MatchMode::Compositional,
                _ => return None,
            };
            let labels: Vec<String> = (0..r.u16()?).map(|_| r.str()).collect::<Option<_>>()?;
            cand.push(Capability::new(universe, mode, labels).ok()?);
        }
        o.push(cand);
    }
    r.0.is_empty().then_some(o)
}

fn random_offer(rng: &mut ChaCha8Rng) -> Offer {
    const ALPHABET: [char; 9] = ['a', 'b', 'c', 'x', 'y', 'z', '-', '_', 'é'];
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(1..8);
        (0..n)
            .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
            .collect()
    };
    (0..rng.gen_range(0..5))
        .map(|_| {
            (0..rng.gen_range(0..4))
                .map(|_| {
                    let mode = if rng.gen() {
                        MatchMode::Exact
                    } else {
                        MatchMode::Compositional
                    };
                    let labels: Vec<String> = (0..rng.gen_range(1..4)).map(|_| word(rng)).collect();
                    Capability::new(word(rng), mode, labels).unwrap()
                })
                .collect()
        })
        .collect()
}

fn offers() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..1000 {
        let o = random_offer(&mut rng);
        let ours = OfferPayload::new(o.clone()).encode();
        let theirs = oracle_encode(&o);
        ensure(ours == theirs, || format!("offer {i}: encodings differ"))?;
        ensure(oracle_decode(&ours).as_ref() == Some(&o), || {
            format!("offer {i}: independent decoder disagrees")
        })?;
        let back = OfferPayload::decode(&theirs).map_err(|e| format!("offer {i}: {e}"))?;
        ensure(
            OfferPayload::new(back.candidates).encode() == theirs,
            || format!("offer {i}: re-encoding is not byte-identical"),
        )?;
    }
    Ok(1000)
}

pub fn conformance() -> Result<String, String> {
    let f = frames()?;
    let n = nonces()?;
    let o = offers()?;
    Ok(format!(
        "{f} golden frames, {n} golden nonces, {o} offers round-tripped byte-identically"
    ))
}
