//! Stack declaration, validation, candidate enumeration and instantiation.
//!
//! A stack is an ordered list of layers, top first. Each layer is a single
//! chunnel or a binary [`SelectNode`] whose branches are themselves layer
//! lists. The bottom layer must bootstrap from [`Lower::Unit`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::chunnel::{Accepts, ChunnelRef, Lower, Produces, ReconfigClass, WrapContext};
use crate::datapath::{Conn, DataType};
use crate::error::{Error, LayerId, Result};
use crate::negotiate::Capability;
use crate::reconfig::{ReconfigHandle, SelectSlot, SwapMechanism};

#[derive(Clone)]
pub enum Layer {
    Chunnel(ChunnelRef),
    Select(SelectNode),
}

impl<C: crate::chunnel::Chunnel> From<Arc<C>> for Layer {
    fn from(c: Arc<C>) -> Self {
        Layer::Chunnel(c)
    }
}

impl From<SelectNode> for Layer {
    fn from(s: SelectNode) -> Self {
        Layer::Select(s)
    }
}

impl fmt::Debug for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Chunnel(c) => write!(f, "{}", c.name()),
            Layer::Select(s) => write!(f, "select#{}({:?} | {:?})", s.index, s.left, s.right),
        }
    }
}

/// A preference-ordered choice: `left` is always preferred over `right`.
#[derive(Clone, Debug)]
pub struct SelectNode {
    pub left: Vec<Layer>,
    pub right: Vec<Layer>,
    pub mechanism: SwapMechanism,
    /// Pre-order position, assigned by [`make_stack`].
    pub(crate) index: usize,
}

impl SelectNode {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn branch(&self, b: u8) -> &[Layer] {
        if b == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn reconfig_class(&self) -> ReconfigClass {
        fn any_multi(ls: &[Layer]) -> bool {
            ls.iter().any(|l| match l {
                Layer::Chunnel(c) => c.reconfig_class() == ReconfigClass::Multilateral,
                Layer::Select(s) => s.reconfig_class() == ReconfigClass::Multilateral,
            })
        }
        if any_multi(&self.left) || any_multi(&self.right) {
            ReconfigClass::Multilateral
        } else {
            ReconfigClass::Unilateral
        }
    }
}

/// Choice between two chunnels or sub-stacks, swapped under a lock.
pub fn select(left: impl IntoLayers, right: impl IntoLayers) -> SelectNode {
    SelectNode {
        left: left.into_layers(),
        right: right.into_layers(),
        mechanism: SwapMechanism::Locked,
        index: 0,
    }
}

impl SelectNode {
    pub fn with_mechanism(mut self, m: SwapMechanism) -> Self {
        self.mechanism = m;
        self
    }
}

pub trait IntoLayers {
    fn into_layers(self) -> Vec<Layer>;
}

impl IntoLayers for Vec<Layer> {
    fn into_layers(self) -> Vec<Layer> {
        self
    }
}

impl IntoLayers for Layer {
    fn into_layers(self) -> Vec<Layer> {
        vec![self]
    }
}

impl IntoLayers for SelectNode {
    fn into_layers(self) -> Vec<Layer> {
        vec![Layer::Select(self)]
    }
}

impl<C: crate::chunnel::Chunnel> IntoLayers for Arc<C> {
    fn into_layers(self) -> Vec<Layer> {
        vec![Layer::Chunnel(self)]
    }
}

impl IntoLayers for ChunnelRef {
    fn into_layers(self) -> Vec<Layer> {
        vec![Layer::Chunnel(self)]
    }
}

/// A validated stack declaration.
#[derive(Clone, Debug)]
pub struct StackSpec {
    layers: Arc<Vec<Layer>>,
    selects: usize,
    output: DataType,
}

/// Branch choice for every select, in pre-order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CandidateStack(pub Vec<u8>);

impl CandidateStack {
    pub fn branches(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for CandidateStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Validate a layer list (top first) and number its selects.
pub fn make_stack(mut layers: Vec<Layer>) -> Result<StackSpec> {
    if layers.is_empty() {
        return Err(Error::EmptyStack);
    }
    let mut next = 0;
    number_selects(&mut layers, &mut next);
    let output = infer(&layers, DataType::Unit, None)?;
    Ok(StackSpec {
        layers: Arc::new(layers),
        selects: next,
        output,
    })
}

fn number_selects(layers: &mut [Layer], next: &mut usize) {
    for l in layers {
        if let Layer::Select(s) = l {
            s.index = *next;
            *next += 1;
            number_selects(&mut s.left, next);
            number_selects(&mut s.right, next);
        }
    }
}

/// Output type of `layers` when placed on a connection of type `input`.
/// `top` is the enclosing top-level index when checking a select branch.
fn infer(layers: &[Layer], input: DataType, top: Option<usize>) -> Result<DataType> {
    let mut t = input;
    for (i, layer) in layers.iter().enumerate().rev() {
        let pos = top.unwrap_or(i);
        t = match layer {
            Layer::Chunnel(c) => match apply(c.accepts(), c.produces(), t) {
                Some(out) => out,
                None if t == DataType::Unit => return Err(Error::NoBootstrapLayer),
                None => {
                    return Err(Error::TypeMismatch {
                        upper: pos,
                        lower: pos + 1,
                    })
                }
            },
            Layer::Select(s) => {
                let l = infer(&s.left, t, Some(pos))?;
                let r = infer(&s.right, t, Some(pos))?;
                if l != r {
                    return Err(Error::TypeMismatch {
                        upper: pos.saturating_sub(1),
                        lower: pos,
                    });
                }
                l
            }
        };
    }
    Ok(t)
}

fn apply(accepts: Accepts, produces: Produces, t: DataType) -> Option<DataType> {
    let ok = match accepts {
        Accepts::Unit => t == DataType::Unit,
        Accepts::Exactly(d) => t == d,
        Accepts::Any => t != DataType::Unit,
    };
    if !ok {
        return None;
    }
    Some(match produces {
        Produces::Exactly(d) => d,
        Produces::SameAsInput => t,
    })
}

impl StackSpec {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn select_count(&self) -> usize {
        self.selects
    }

    pub fn output_type(&self) -> DataType {
        self.output
    }

    /// All concrete stacks, most preferred first.
    pub fn enumerate_candidates(&self) -> Vec<CandidateStack> {
        let seed = vec![vec![0u8; self.selects]];
        expand(&self.layers, seed)
            .into_iter()
            .map(CandidateStack)
            .collect()
    }

    pub fn validate(&self, choice: &CandidateStack) -> Result<()> {
        if choice.0.len() != self.selects {
            return Err(Error::InvalidCandidate(format!(
                "expected {} branch entries, got {}",
                self.selects,
                choice.0.len()
            )));
        }
        if choice.0.iter().any(|&b| b > 1) {
            return Err(Error::InvalidCandidate("branch index > 1".into()));
        }
        Ok(())
    }

    /// The select-free layer list picked by `choice`.
    pub fn concrete(&self, choice: &CandidateStack) -> Result<Vec<ChunnelRef>> {
        self.validate(choice)?;
        let mut out = Vec::new();
        flatten(&self.layers, &choice.0, &mut out);
        Ok(out)
    }

    /// Capabilities of the concrete stack picked by `choice`, top first.
    pub fn capabilities(&self, choice: &CandidateStack) -> Result<Vec<Capability>> {
        Ok(self
            .concrete(choice)?
            .iter()
            .flat_map(|c| c.capabilities())
            .collect())
    }

    /// Candidates paired with their capability lists, in preference order.
    pub fn offer(&self) -> Vec<(CandidateStack, Vec<Capability>)> {
        self.enumerate_candidates()
            .into_iter()
            .map(|c| {
                let caps = self
                    .capabilities(&c)
                    .expect("enumerated candidate is valid");
                (c, caps)
            })
            .collect()
    }

    pub fn select_node(&self, index: usize) -> Option<&SelectNode> {
        find_select(&self.layers, index)
    }

    /// Build a connection for `choice` bottom-up over `base`.
    pub async fn instantiate(
        &self,
        choice: &CandidateStack,
        base: Lower,
        cx: &WrapContext,
    ) -> Result<Instance> {
        self.validate(choice)?;
        let registry: SlotRegistry = Default::default();
        let conn = build_layers(&self.layers, base, &choice.0, cx, &registry, None).await?;
        let handle = ReconfigHandle::new(self.clone(), choice.clone(), registry, cx.clone());
        Ok(Instance { conn, handle })
    }
}

fn find_select(layers: &[Layer], index: usize) -> Option<&SelectNode> {
    for l in layers {
        if let Layer::Select(s) = l {
            if s.index == index {
                return Some(s);
            }
            if let Some(f) = find_select(&s.left, index).or_else(|| find_select(&s.right, index)) {
                return Some(f);
            }
        }
    }
    None
}

fn expand(layers: &[Layer], mut acc: Vec<Vec<u8>>) -> Vec<Vec<u8>> {
    for l in layers {
        if let Layer::Select(s) = l {
            let mut next = Vec::new();
            for a in acc {
                for b in 0..2u8 {
                    let mut a2 = a.clone();
                    a2[s.index] = b;
                    next.extend(expand(s.branch(b), vec![a2]));
                }
            }
            acc = next;
        }
    }
    acc
}

fn flatten(layers: &[Layer], choice: &[u8], out: &mut Vec<ChunnelRef>) {
    for l in layers {
        match l {
            Layer::Chunnel(c) => out.push(c.clone()),
            Layer::Select(s) => flatten(s.branch(choice[s.index]), choice, out),
        }
    }
}

/// A built connection plus the handle that can swap its select branches.
pub struct Instance {
    pub conn: Conn,
    pub handle: ReconfigHandle,
}

pub(crate) type SlotRegistry = Arc<Mutex<BTreeMap<usize, Arc<SelectSlot>>>>;

/// Build `layers` bottom-up over `lower`. `top` is the enclosing top-level
/// layer index when building a select branch.
pub(crate) fn build_layers<'a>(
    layers: &'a [Layer],
    lower: Lower,
    choice: &'a [u8],
    cx: &'a WrapContext,
    registry: &'a SlotRegistry,
    top: Option<usize>,
) -> futures_lite::BoxFuture<'a, Result<Conn>> {
    Box::pin(async move {
        let mut cur = lower;
        for (i, layer) in layers.iter().enumerate().rev() {
            let index = top.unwrap_or(i);
            let conn = match layer {
                Layer::Chunnel(c) => c.connect_wrap(cur, cx).await.map_err(|e| match e {
                    e @ Error::InitFailure { .. } => e,
                    e => Error::InitFailure {
                        layer: LayerId {
                            index,
                            name: c.name().to_string(),
                        },
                        reason: e.to_string(),
                    },
                })?,
                Layer::Select(s) => {
                    let b = choice[s.index];
                    let inner =
                        build_layers(s.branch(b), cur.clone(), choice, cx, registry, Some(index))
                            .await?;
                    let slot = SelectSlot::new(s.clone(), cur, b, inner);
                    registry.lock().insert(s.index, slot.clone());
                    slot
                }
            };
            cur = Lower::Conn(conn);
        }
        match cur {
            Lower::Conn(c) => Ok(c),
            Lower::Unit => Err(Error::EmptyStack),
        }
    })
}

pub(crate) mod futures_lite {
    use std::future::Future;
    use std::pin::Pin;
    pub type BoxFuture<'a, T> = Pin<Box<dyn Future<Output = T> + Send + 'a>>;
}
