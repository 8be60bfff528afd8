//! Per-site lock table with read, write and intention-to-write modes.
//!
//! Locks are held by operations and owned by their transaction: holders that
//! belong to the requesting transaction never block it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{ItemId, OpId, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LockMode {
    R,
    W,
    IW,
}

impl LockMode {
    pub const ALL: [LockMode; 3] = [LockMode::R, LockMode::W, LockMode::IW];
}

/// Lock conflict table: `true` means granted, `false` means the request queues.
pub fn compatible(requested: LockMode, held: LockMode) -> bool {
    use LockMode::*;
    matches!((requested, held), (R, R) | (IW, IW))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grant {
    Granted,
    Enqueued,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LockError {
    #[error("operation {op} already holds or waits for a lock on {item}")]
    DuplicateRequest { item: ItemId, op: OpId },
    #[error("operation {op} holds no lock on {item}")]
    NotHolding { item: ItemId, op: OpId },
    #[error("operation {op} holds no write lock on {item}")]
    NotHoldingW { item: ItemId, op: OpId },
}

#[derive(Debug, Clone, Default)]
struct ItemLocks {
    holders: Vec<(OpId, LockMode)>,
    queue: VecDeque<(OpId, LockMode)>,
}

impl ItemLocks {
    fn admits(&self, op: OpId, mode: LockMode) -> bool {
        self.holders
            .iter()
            .filter(|(h, _)| h.txn != op.txn)
            .all(|(_, held)| compatible(mode, *held))
    }

    fn contains(&self, op: OpId) -> bool {
        self.holders.iter().any(|(h, _)| *h == op) || self.queue.iter().any(|(q, _)| *q == op)
    }

    /// Grants waiters from the head of the queue until the first one that does not fit.
    fn drain_queue(&mut self) -> Vec<OpId> {
        let mut granted = Vec::new();
        while let Some(&(op, mode)) = self.queue.front() {
            if !self.admits(op, mode) {
                break;
            }
            self.queue.pop_front();
            self.holders.push((op, mode));
            granted.push(op);
        }
        granted
    }

    fn is_empty(&self) -> bool {
        self.holders.is_empty() && self.queue.is_empty()
    }
}

/// Result of a forced intention-to-write grant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForceOutcome {
    /// Transactions whose read or write locks (held or requested) on the item were revoked.
    pub victims: BTreeSet<TxnId>,
    /// Queued requests that were dropped because their transaction became a victim.
    pub dequeued: Vec<OpId>,
}

#[derive(Debug, Clone, Default)]
pub struct LockTable {
    items: BTreeMap<ItemId, ItemLocks>,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&mut self, item: ItemId, op: OpId, mode: LockMode) -> Result<Grant, LockError> {
        let locks = self.items.entry(item).or_default();
        if locks.contains(op) {
            return Err(LockError::DuplicateRequest { item, op });
        }
        if locks.queue.is_empty() && locks.admits(op, mode) {
            locks.holders.push((op, mode));
            Ok(Grant::Granted)
        } else {
            locks.queue.push_back((op, mode));
            Ok(Grant::Enqueued)
        }
    }

    /// Releases a held lock and returns the waiters granted as a consequence.
    pub fn release(&mut self, item: ItemId, op: OpId) -> Result<Vec<OpId>, LockError> {
        let locks = self.items.get_mut(&item).ok_or(LockError::NotHolding { item, op })?;
        let pos = locks
            .holders
            .iter()
            .position(|(h, _)| *h == op)
            .ok_or(LockError::NotHolding { item, op })?;
        locks.holders.remove(pos);
        let granted = locks.drain_queue();
        self.gc(item);
        Ok(granted)
    }

    pub fn convert_w_to_iw(&mut self, item: ItemId, op: OpId) -> Result<Vec<OpId>, LockError> {
        let locks = self.items.get_mut(&item).ok_or(LockError::NotHoldingW { item, op })?;
        let holder = locks
            .holders
            .iter_mut()
            .find(|(h, m)| *h == op && *m == LockMode::W)
            .ok_or(LockError::NotHoldingW { item, op })?;
        holder.1 = LockMode::IW;
        Ok(locks.drain_queue())
    }

    /// Gives `op` an IW lock on `item` without ever queueing.
    ///
    /// Every read or write lock of another transaction on the item is revoked and
    /// its transaction reported as a victim; only transactions still in initial
    /// execution hold such locks. IW holders share. The caller must release the
    /// victims' remaining locks.
    pub fn force_write_lock(&mut self, item: ItemId, op: OpId) -> ForceOutcome {
        let locks = self.items.entry(item).or_default();
        let mut out = ForceOutcome::default();
        if let Some(h) = locks.holders.iter_mut().find(|(h, _)| *h == op) {
            h.1 = LockMode::IW;
        }
        locks.holders.retain(|(h, m)| {
            let victim = h.txn != op.txn && *m != LockMode::IW;
            if victim {
                out.victims.insert(h.txn);
            }
            !victim
        });
        locks.queue.retain(|(q, m)| {
            let victim = q.txn != op.txn && *m != LockMode::IW;
            if victim {
                out.victims.insert(q.txn);
                out.dequeued.push(*q);
            }
            !victim
        });
        // Queued entries of already-chosen victims go too, whatever their mode.
        locks.queue.retain(|(q, _)| {
            let drop = out.victims.contains(&q.txn);
            if drop {
                out.dequeued.push(*q);
            }
            !drop
        });
        locks.holders.retain(|(h, _)| !out.victims.contains(&h.txn));
        if !locks.holders.iter().any(|(h, _)| *h == op) {
            locks.queue.retain(|(q, _)| *q != op);
            locks.holders.push((op, LockMode::IW));
        }
        out
    }

    /// Releases every lock held or requested by `txn`, in operation order.
    /// Returns the newly granted waiters with their items.
    pub fn release_txn(&mut self, txn: TxnId) -> Vec<(ItemId, OpId)> {
        let mut granted = Vec::new();
        let items: Vec<ItemId> = self.items.keys().copied().collect();
        for item in items {
            let locks = self.items.get_mut(&item).expect("item present");
            let mut held: Vec<OpId> =
                locks.holders.iter().filter(|(h, _)| h.txn == txn).map(|(h, _)| *h).collect();
            held.sort();
            let before = locks.queue.len();
            locks.queue.retain(|(q, _)| q.txn != txn);
            let touched = !held.is_empty() || locks.queue.len() != before;
            for op in held {
                if let Some(pos) = locks.holders.iter().position(|(h, _)| *h == op) {
                    locks.holders.remove(pos);
                }
            }
            if touched {
                granted.extend(locks.drain_queue().into_iter().map(|op| (item, op)));
            }
            self.gc(item);
        }
        granted
    }

    /// Releases all read locks held by `txn`.
    pub fn release_reads(&mut self, txn: TxnId) -> Vec<(ItemId, OpId)> {
        let targets: Vec<(ItemId, OpId)> = self
            .items
            .iter()
            .flat_map(|(item, l)| {
                l.holders
                    .iter()
                    .filter(|(h, m)| h.txn == txn && *m == LockMode::R)
                    .map(move |(h, _)| (*item, *h))
            })
            .collect();
        let mut granted = Vec::new();
        for (item, op) in targets {
            let g = self.release(item, op).expect("holder listed above");
            granted.extend(g.into_iter().map(|o| (item, o)));
        }
        granted
    }

    pub fn mode_held(&self, item: ItemId, op: OpId) -> Option<LockMode> {
        self.items
            .get(&item)?
            .holders
            .iter()
            .find(|(h, _)| *h == op)
            .map(|(_, m)| *m)
    }

    pub fn is_queued(&self, item: ItemId, op: OpId) -> bool {
        self.items.get(&item).is_some_and(|l| l.queue.iter().any(|(q, _)| *q == op))
    }

    pub fn holders(&self, item: ItemId) -> Vec<(OpId, LockMode)> {
        self.items.get(&item).map(|l| l.holders.clone()).unwrap_or_default()
    }

    pub fn queue(&self, item: ItemId) -> Vec<(OpId, LockMode)> {
        self.items.get(&item).map(|l| l.queue.iter().copied().collect()).unwrap_or_default()
    }

    fn gc(&mut self, item: ItemId) {
        if self.items.get(&item).is_some_and(ItemLocks::is_empty) {
            self.items.remove(&item);
        }
    }
}
