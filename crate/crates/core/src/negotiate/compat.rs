//! Stack compatibility: exact-match universes need equal label sets on both
//! sides, compositional universes need presence on at least one side and an
//! intersection when present on both.

use std::collections::BTreeSet;

use super::capability::{by_universe, Capability, MatchMode, UniverseMap};
use crate::error::{Error, Result};

/// Labels agreed per universe. For a compositional universe present on both
/// sides this is the intersection.
pub type Agreed = UniverseMap;

pub fn stacks_compatible(a: &[Capability], b: &[Capability]) -> Option<Agreed> {
    let ma = by_universe(a).ok()?;
    let mb = by_universe(b).ok()?;
    let universes: BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
    let mut agreed = Agreed::new();
    for u in universes {
        let entry = match (ma.get(u), mb.get(u)) {
            (Some((m1, l1)), Some((m2, l2))) => {
                if m1 != m2 {
                    return None;
                }
                match m1 {
                    MatchMode::Exact if l1 == l2 => (*m1, l1.clone()),
                    MatchMode::Exact => return None,
                    MatchMode::Compositional => {
                        let both: BTreeSet<String> = l1.intersection(l2).cloned().collect();
                        if both.is_empty() {
                            return None;
                        }
                        (*m1, both)
                    }
                }
            }
            (Some((MatchMode::Compositional, l)), None)
            | (None, Some((MatchMode::Compositional, l))) => (MatchMode::Compositional, l.clone()),
            _ => return None,
        };
        agreed.insert(u.clone(), entry);
    }
    Some(agreed)
}

/// Outcome of [`check_compat`]: indices into the server and client candidate lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatChoice {
    pub server: usize,
    pub client: usize,
    pub agreed: Agreed,
}

/// First compatible pair, scanning server candidates in preference order and,
/// for each, client candidates in preference order.
pub fn check_compat(
    client: &[Vec<Capability>],
    server: &[Vec<Capability>],
) -> Result<CompatChoice> {
    for (si, s) in server.iter().enumerate() {
        for (ci, c) in client.iter().enumerate() {
            if let Some(agreed) = stacks_compatible(c, s) {
                return Ok(CompatChoice {
                    server: si,
                    client: ci,
                    agreed,
                });
            }
        }
    }
    Err(Error::NoCompatibleStack)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(l: &str) -> Capability {
        Capability::exact("serialize", [l])
    }

    fn sh(l: &str) -> Capability {
        Capability::compositional("shard", [l])
    }

    #[test]
    fn identical_exact_stacks_agree() {
        let c = check_compat(&[vec![ex("fmtA")]], &[vec![ex("fmtA")]]).unwrap();
        assert_eq!((c.server, c.client), (0, 0));
        assert_eq!(
            c.agreed["serialize"].1,
            BTreeSet::from(["fmtA".to_string()])
        );
    }

    #[test]
    fn unequal_exact_sets_reject() {
        assert!(matches!(
            check_compat(&[vec![ex("fmtA")]], &[vec![ex("fmtB")]]),
            Err(Error::NoCompatibleStack)
        ));
    }

    #[test]
    fn server_preference_picks_client_second() {
        let client = vec![vec![sh("client-shard")], vec![sh("server-shard")]];
        let server = vec![vec![sh("server-shard")]];
        let c = check_compat(&client, &server).unwrap();
        assert_eq!((c.server, c.client), (0, 1));
        assert_eq!(
            c.agreed["shard"].1,
            BTreeSet::from(["server-shard".to_string()])
        );
    }

    #[test]
    fn one_sided_universes() {
        // compositional on one side only is fine, exact on one side only is not
        assert!(stacks_compatible(&[sh("client-shard")], &[]).is_some());
        assert!(stacks_compatible(&[], &[ex("fmtA")]).is_none());
    }

    #[test]
    fn intersection_is_agreed() {
        let a = Capability::compositional("shard", ["client-shard", "server-shard"]);
        let b = sh("server-shard");
        let agreed = stacks_compatible(&[a], &[b]).unwrap();
        assert_eq!(agreed["shard"].1.len(), 1);
    }

    #[test]
    fn mixed_modes_are_incompatible() {
        let a = Capability::exact("order", ["x"]);
        let b = Capability::compositional("order", ["x"]);
        assert!(stacks_compatible(std::slice::from_ref(&a), std::slice::from_ref(&b)).is_none());
        assert!(stacks_compatible(&[a, b], &[]).is_none());
    }

    #[test]
    fn empty_lists_reject() {
        assert!(check_compat(&[], &[vec![]]).is_err());
    }
}
