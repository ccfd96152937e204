use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockAttr {
    Number,
    Timestamp,
    Coinbase,
    Prevrandao,
    Gaslimit,
    Blockhash,
}

/// Identifies a crypto call: the transaction within the case and the call's
/// position among the trace's crypto calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CryptoCallId {
    pub tx: u32,
    pub seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaintLabel {
    /// Byte `offset` of the calldata of transaction `tx`.
    CalldataSlot { tx: u32, offset: u32 },
    BlockAttr(BlockAttr),
    SelfAddress,
    CryptoOutput(CryptoCallId),
    SenderAddr,
}

/// An immutable label set. Clones share storage; the empty set allocates
/// nothing.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct TaintSet(Option<Arc<BTreeSet<TaintLabel>>>);

impl TaintSet {
    pub fn empty() -> Self {
        TaintSet(None)
    }

    pub fn single(label: TaintLabel) -> Self {
        TaintSet(Some(Arc::new(BTreeSet::from([label]))))
    }

    pub fn from_labels<I: IntoIterator<Item = TaintLabel>>(labels: I) -> Self {
        let set: BTreeSet<TaintLabel> = labels.into_iter().collect();
        if set.is_empty() {
            TaintSet(None)
        } else {
            TaintSet(Some(Arc::new(set)))
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn len(&self) -> usize {
        self.0.as_ref().map_or(0, |s| s.len())
    }

    pub fn contains(&self, label: &TaintLabel) -> bool {
        self.0.as_ref().is_some_and(|s| s.contains(label))
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaintLabel> {
        self.0.iter().flat_map(|s| s.iter())
    }

    pub fn union(&self, other: &TaintSet) -> TaintSet {
        TaintSet::union_all([self, other])
    }

    /// Union of many sets. Returns a shared clone when every non-empty input
    /// is the same allocation.
    pub fn union_all<'a, I: IntoIterator<Item = &'a TaintSet>>(sets: I) -> TaintSet {
        let mut first: Option<&Arc<BTreeSet<TaintLabel>>> = None;
        let mut merged: Option<BTreeSet<TaintLabel>> = None;
        for s in sets {
            let Some(arc) = &s.0 else { continue };
            match (&mut merged, first) {
                (Some(m), _) => m.extend(arc.iter().copied()),
                (None, None) => first = Some(arc),
                (None, Some(f)) if Arc::ptr_eq(f, arc) => {}
                (None, Some(f)) => {
                    let mut m = (**f).clone();
                    m.extend(arc.iter().copied());
                    merged = Some(m);
                }
            }
        }
        match (merged, first) {
            (Some(m), _) => TaintSet(Some(Arc::new(m))),
            (None, Some(f)) => TaintSet(Some(f.clone())),
            (None, None) => TaintSet(None),
        }
    }

    pub fn with(&self, label: TaintLabel) -> TaintSet {
        if self.contains(&label) {
            return self.clone();
        }
        let mut s = self.0.as_deref().cloned().unwrap_or_default();
        s.insert(label);
        TaintSet(Some(Arc::new(s)))
    }

    pub fn calldata_offsets(&self, tx: u32) -> BTreeSet<u32> {
        self.iter()
            .filter_map(|l| match l {
                TaintLabel::CalldataSlot { tx: t, offset } if *t == tx => Some(*offset),
                _ => None,
            })
            .collect()
    }

    pub fn has_calldata(&self) -> bool {
        self.iter().any(|l| matches!(l, TaintLabel::CalldataSlot { .. }))
    }

    pub fn block_attrs(&self) -> BTreeSet<BlockAttr> {
        self.iter()
            .filter_map(|l| match l {
                TaintLabel::BlockAttr(a) => Some(*a),
                _ => None,
            })
            .collect()
    }

    pub fn crypto_outputs(&self) -> BTreeSet<CryptoCallId> {
        self.iter()
            .filter_map(|l| match l {
                TaintLabel::CryptoOutput(id) => Some(*id),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Debug for TaintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<TaintLabel> for TaintSet {
    fn from_iter<I: IntoIterator<Item = TaintLabel>>(iter: I) -> Self {
        TaintSet::from_labels(iter)
    }
}
