//! Identifiers, operations, transactions and the replication map.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_newtype {
    ($(#[$m:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$m])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// A participating site.
    SiteId,
    u32,
    "s"
);
id_newtype!(
    /// A replicated data item.
    ItemId,
    u32,
    "x"
);
id_newtype!(
    /// A transaction. The numeric order is the tie-break order used on every site.
    TxnId,
    u64,
    "T"
);

/// Operation identifier: the owning transaction plus the position inside it.
///
/// Ordering is lexicographic, so `trans(o)` is recoverable from the id alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId {
    pub txn: TxnId,
    pub idx: u32,
}

impl OpId {
    pub fn new(txn: TxnId, idx: u32) -> Self {
        Self { txn, idx }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.txn, self.idx)
    }
}

/// Opaque update value. Serialized as a hex string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Value(pub Vec<u8>);

impl Value {
    pub fn from_str_bytes(s: &str) -> Self {
        Self(s.as_bytes().to_vec())
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map(Value).map_err(serde::de::Error::custom)
    }
}

/// What an operation does to its item. A write always carries its update value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Access {
    Read,
    Write(Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operation {
    pub id: OpId,
    pub item: ItemId,
    pub access: Access,
}

impl Operation {
    pub fn read(id: OpId, item: ItemId) -> Self {
        Self { id, item, access: Access::Read }
    }

    pub fn write(id: OpId, item: ItemId, value: Value) -> Self {
        Self { id, item, access: Access::Write(value) }
    }

    pub fn txn(&self) -> TxnId {
        self.id.txn
    }

    pub fn is_read(&self) -> bool {
        matches!(self.access, Access::Read)
    }

    pub fn is_write(&self) -> bool {
        matches!(self.access, Access::Write(_))
    }

    pub fn value(&self) -> Option<&Value> {
        match &self.access {
            Access::Write(v) => Some(v),
            Access::Read => None,
        }
    }
}

/// Two operations conflict when they touch the same item and at least one writes.
pub fn conflict(a: &Operation, b: &Operation) -> bool {
    a.item == b.item && (a.is_write() || b.is_write())
}

/// A submitted (or executed) transaction together with its initial-execution metadata.
///
/// `snapshot` is the set of transactions committed at the origin site when the
/// initial execution started. It is what makes the concurrency relation decidable
/// at every site from the transaction alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxnId,
    pub origin: SiteId,
    pub start: u64,
    pub end: u64,
    pub ops: Vec<Operation>,
    pub snapshot: BTreeSet<TxnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("transaction {0} has no operations")]
    EmptyTransaction(TxnId),
    #[error("operation {op} does not belong to transaction {txn}")]
    ForeignOperation { txn: TxnId, op: OpId },
    #[error("duplicate operation id {0}")]
    DuplicateOperation(OpId),
    #[error("transaction {txn} has an empty execution interval [{start}, {end}]")]
    BadInterval { txn: TxnId, start: u64, end: u64 },
}

impl Transaction {
    pub fn new(
        id: TxnId,
        origin: SiteId,
        start: u64,
        end: u64,
        mut ops: Vec<Operation>,
        snapshot: BTreeSet<TxnId>,
    ) -> Result<Self, ModelError> {
        if ops.is_empty() {
            return Err(ModelError::EmptyTransaction(id));
        }
        if start >= end {
            return Err(ModelError::BadInterval { txn: id, start, end });
        }
        ops.sort_by_key(|o| o.id);
        for w in ops.windows(2) {
            if w[0].id == w[1].id {
                return Err(ModelError::DuplicateOperation(w[0].id));
            }
        }
        if let Some(o) = ops.iter().find(|o| o.id.txn != id) {
            return Err(ModelError::ForeignOperation { txn: id, op: o.id });
        }
        Ok(Self { id, origin, start, end, ops, snapshot })
    }

    pub fn reads(&self) -> impl Iterator<Item = &Operation> {
        self.ops.iter().filter(|o| o.is_read())
    }

    pub fn writes(&self) -> impl Iterator<Item = &Operation> {
        self.ops.iter().filter(|o| o.is_write())
    }

    pub fn is_update(&self) -> bool {
        self.ops.iter().any(Operation::is_write)
    }

    pub fn items(&self) -> BTreeSet<ItemId> {
        self.ops.iter().map(|o| o.item).collect()
    }

    pub fn written_items(&self) -> BTreeSet<ItemId> {
        self.writes().map(|o| o.item).collect()
    }

    pub fn op_ids(&self) -> BTreeSet<OpId> {
        self.ops.iter().map(|o| o.id).collect()
    }

    pub fn op(&self, id: OpId) -> Option<&Operation> {
        self.ops.binary_search_by_key(&id, |o| o.id).ok().map(|i| &self.ops[i])
    }
}

/// `T cc T'`: neither transaction was committed at the other's origin before the
/// other started its initial execution.
pub fn concurrent(a: &Transaction, b: &Transaction) -> bool {
    a.id != b.id && !a.snapshot.contains(&b.id) && !b.snapshot.contains(&a.id)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("item {0} has no replica")]
    NoReplica(ItemId),
    #[error("item {item} placed on unknown site {site}")]
    UnknownSite { item: ItemId, site: SiteId },
}

/// Which sites hold which items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationMap {
    sites: BTreeSet<SiteId>,
    placement: BTreeMap<ItemId, BTreeSet<SiteId>>,
}

impl ReplicationMap {
    pub fn new(
        sites: BTreeSet<SiteId>,
        placement: BTreeMap<ItemId, BTreeSet<SiteId>>,
    ) -> Result<Self, PlacementError> {
        for (item, reps) in &placement {
            if reps.is_empty() {
                return Err(PlacementError::NoReplica(*item));
            }
            if let Some(s) = reps.iter().find(|s| !sites.contains(s)) {
                return Err(PlacementError::UnknownSite { item: *item, site: *s });
            }
        }
        Ok(Self { sites, placement })
    }

    pub fn sites(&self) -> &BTreeSet<SiteId> {
        &self.sites
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.placement.keys().copied()
    }

    pub fn placement(&self) -> &BTreeMap<ItemId, BTreeSet<SiteId>> {
        &self.placement
    }

    /// `replicas(x)`. Unknown items have no replicas.
    pub fn replicas(&self, item: ItemId) -> &BTreeSet<SiteId> {
        static EMPTY: BTreeSet<SiteId> = BTreeSet::new();
        self.placement.get(&item).unwrap_or(&EMPTY)
    }

    pub fn replicates(&self, site: SiteId, item: ItemId) -> bool {
        self.replicas(item).contains(&site)
    }

    pub fn replicas_of_items<I: IntoIterator<Item = ItemId>>(&self, items: I) -> BTreeSet<SiteId> {
        items.into_iter().flat_map(|x| self.replicas(x).iter().copied()).collect()
    }

    /// `replicas(T)`: union over the transaction's items.
    pub fn replicas_of_txn(&self, txn: &Transaction) -> BTreeSet<SiteId> {
        self.replicas_of_items(txn.ops.iter().map(|o| o.item))
    }

    /// `replicas(wo(T))`.
    pub fn replicas_of_writes(&self, txn: &Transaction) -> BTreeSet<SiteId> {
        self.replicas_of_items(txn.writes().map(|o| o.item))
    }

    pub fn items_at(&self, site: SiteId) -> BTreeSet<ItemId> {
        self.placement
            .iter()
            .filter(|(_, reps)| reps.contains(&site))
            .map(|(x, _)| *x)
            .collect()
    }
}
