//! Minimal account-model chain: signed transfers, a mempool, and blocks.
//!
//! Balances only move at confirmation. Submission reserves the spent amount
//! so the mempool can never over-commit a key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use thiserror::Error;

use crate::canonical_struct;
use crate::codec::{Encode, Writer};
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("key {0} has insufficient funds")]
    InsufficientFunds(PublicKey),
    #[error("missing or invalid signature for input key {0}")]
    BadSignature(PublicKey),
    #[error("inputs sum {inputs} but outputs sum {outputs}")]
    ValueMismatch { inputs: u128, outputs: u128 },
    #[error("transaction has no inputs or no outputs")]
    Empty,
    #[error("tx_id does not match transaction contents")]
    TxIdMismatch,
    #[error("transaction {0} already known")]
    Duplicate(Digest),
    #[error("transaction {0} not found")]
    NotFound(Digest),
}

/// One side of a transfer: a key and an amount in integer minor units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Leg {
    pub key: PublicKey,
    pub amount: u64,
}

canonical_struct!(Leg { key, amount });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerTx {
    pub tx_id: Digest,
    pub inputs: Vec<Leg>,
    pub outputs: Vec<Leg>,
    pub memo_tag: Option<[u8; 32]>,
    /// One per distinct input key, in order of first appearance.
    pub signatures: Vec<Signature>,
    /// 0 while unconfirmed.
    pub block_height: u64,
}

canonical_struct!(LedgerTx {
    tx_id,
    inputs,
    outputs,
    memo_tag,
    signatures,
    block_height,
});

impl LedgerTx {
    /// Builds and signs a transfer. `signers` must cover every input key.
    pub fn new_signed(
        inputs: Vec<Leg>,
        outputs: Vec<Leg>,
        memo_tag: Option<[u8; 32]>,
        signers: &[&KeyPair],
    ) -> Self {
        let mut tx = LedgerTx {
            tx_id: Digest::default(),
            inputs,
            outputs,
            memo_tag,
            signatures: Vec::new(),
            block_height: 0,
        };
        let msg = tx.unsigned_bytes();
        tx.tx_id = crypto::hash(&msg);
        tx.signatures = tx
            .input_keys()
            .iter()
            .map(|k| {
                signers
                    .iter()
                    .find(|s| &s.public_key == k)
                    .map(|s| s.sign(&msg))
                    .unwrap_or(Signature([0; 64]))
            })
            .collect();
        tx
    }

    /// Builds an unsigned transfer whose signatures are filled in later,
    /// e.g. by a hardware wallet.
    pub fn new_unsigned(inputs: Vec<Leg>, outputs: Vec<Leg>, memo_tag: Option<[u8; 32]>) -> Self {
        let mut tx = LedgerTx {
            tx_id: Digest::default(),
            inputs,
            outputs,
            memo_tag,
            signatures: Vec::new(),
            block_height: 0,
        };
        tx.tx_id = crypto::hash(&tx.unsigned_bytes());
        tx
    }

    /// Canonical bytes of the unsigned transaction; both the id preimage and
    /// the signed message.
    pub fn unsigned_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_field(b"vtn/ledger-tx/v1");
        w.put(&self.inputs);
        w.put(&self.outputs);
        w.put(&self.memo_tag);
        w.into_bytes()
    }

    pub fn input_keys(&self) -> Vec<PublicKey> {
        let mut seen = BTreeSet::new();
        self.inputs
            .iter()
            .filter(|l| seen.insert(l.key))
            .map(|l| l.key)
            .collect()
    }

    pub fn is_batch(&self) -> bool {
        let distinct: BTreeSet<_> = self.outputs.iter().map(|l| l.key).collect();
        self.outputs.len() > 1 && distinct.len() == self.outputs.len()
    }

    pub fn is_confirmed(&self) -> bool {
        self.block_height > 0
    }

    /// Checks structure, conservation, id and signatures.
    pub fn check(&self) -> Result<(), LedgerError> {
        if self.inputs.is_empty() || self.outputs.is_empty() {
            return Err(LedgerError::Empty);
        }
        let inputs: u128 = self.inputs.iter().map(|l| l.amount as u128).sum();
        let outputs: u128 = self.outputs.iter().map(|l| l.amount as u128).sum();
        if inputs != outputs {
            return Err(LedgerError::ValueMismatch { inputs, outputs });
        }
        let msg = self.unsigned_bytes();
        if crypto::hash(&msg) != self.tx_id {
            return Err(LedgerError::TxIdMismatch);
        }
        let keys = self.input_keys();
        if keys.len() != self.signatures.len() {
            return Err(LedgerError::BadSignature(keys[self.signatures.len().min(keys.len() - 1)]));
        }
        for (k, s) in keys.iter().zip(&self.signatures) {
            if !crypto::verify(k, &msg, s) {
                return Err(LedgerError::BadSignature(*k));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub tx_ids: Vec<Digest>,
    pub block_hash: Digest,
}

impl Block {
    fn seal(height: u64, prev_hash: Digest, tx_ids: Vec<Digest>) -> Self {
        let block_hash = block_hash(height, &prev_hash, &tx_ids);
        Block {
            height,
            prev_hash,
            tx_ids,
            block_hash,
        }
    }
}

pub fn block_hash(height: u64, prev_hash: &Digest, tx_ids: &[Digest]) -> Digest {
    let mut w = Writer::new();
    w.put_field(b"vtn/block/v1");
    w.put_u64(height);
    w.put(prev_hash);
    w.put(&tx_ids.to_vec());
    crypto::hash(&w.into_bytes())
}

/// Shared simulated chain. Single writer.
#[derive(Debug, Clone)]
pub struct Ledger {
    balances: BTreeMap<PublicKey, u64>,
    reserved: BTreeMap<PublicKey, u64>,
    mempool: Vec<Digest>,
    txs: BTreeMap<Digest, LedgerTx>,
    blocks: Vec<Block>,
    /// Confirmed tx ids per input key, for history checks.
    spends_by_key: BTreeMap<PublicKey, Vec<Digest>>,
}

impl Ledger {
    /// Height-0 block minting the given allocations.
    pub fn genesis(allocations: &[(PublicKey, u64)]) -> Self {
        let mut balances = BTreeMap::new();
        for (k, amt) in allocations {
            *balances.entry(*k).or_insert(0u64) += amt;
        }
        let alloc_digest = crypto::hash_value(
            &balances
                .iter()
                .map(|(k, v)| Leg { key: *k, amount: *v })
                .collect::<Vec<_>>(),
        );
        Ledger {
            balances,
            reserved: BTreeMap::new(),
            mempool: Vec::new(),
            txs: BTreeMap::new(),
            blocks: vec![Block::seal(0, Digest::default(), vec![alloc_digest])],
            spends_by_key: BTreeMap::new(),
        }
    }

    pub fn balance(&self, key: &PublicKey) -> u64 {
        self.balances.get(key).copied().unwrap_or(0)
    }

    /// Balance minus amounts reserved by pending transactions.
    pub fn available(&self, key: &PublicKey) -> u64 {
        self.balance(key) - self.reserved.get(key).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> u128 {
        self.balances.values().map(|&v| v as u128).sum()
    }

    pub fn height(&self) -> u64 {
        self.blocks.last().map_or(0, |b| b.height)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn genesis_hash(&self) -> Digest {
        self.blocks[0].block_hash
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn submit_transfer(&mut self, tx: LedgerTx) -> Result<Digest, LedgerError> {
        tx.check()?;
        if self.txs.contains_key(&tx.tx_id) {
            return Err(LedgerError::Duplicate(tx.tx_id));
        }
        let mut debits: BTreeMap<PublicKey, u64> = BTreeMap::new();
        for leg in &tx.inputs {
            let d = debits.entry(leg.key).or_insert(0);
            *d = d
                .checked_add(leg.amount)
                .ok_or(LedgerError::InsufficientFunds(leg.key))?;
        }
        for (k, amt) in &debits {
            if self.available(k) < *amt {
                return Err(LedgerError::InsufficientFunds(*k));
            }
        }
        for (k, amt) in debits {
            *self.reserved.entry(k).or_insert(0) += amt;
        }
        let id = tx.tx_id;
        let mut tx = tx;
        tx.block_height = 0;
        self.txs.insert(id, tx);
        self.mempool.push(id);
        Ok(id)
    }

    /// Confirms every mempool transaction, in submission order, at the next
    /// height.
    pub fn confirm_block(&mut self) -> Block {
        let height = self.height() + 1;
        let prev = self.blocks.last().expect("genesis exists").block_hash;
        let ids = std::mem::take(&mut self.mempool);
        for id in &ids {
            let tx = self.txs.get_mut(id).expect("mempool tx stored");
            tx.block_height = height;
            for leg in &tx.inputs {
                *self.balances.get_mut(&leg.key).expect("reserved key has balance") -= leg.amount;
                let r = self.reserved.get_mut(&leg.key).expect("reservation exists");
                *r -= leg.amount;
                if *r == 0 {
                    self.reserved.remove(&leg.key);
                }
            }
            for leg in &tx.outputs {
                *self.balances.entry(leg.key).or_insert(0) += leg.amount;
            }
            for k in tx.input_keys() {
                self.spends_by_key.entry(k).or_default().push(*id);
            }
        }
        self.balances.retain(|_, v| *v > 0);
        let block = Block::seal(height, prev, ids);
        self.blocks.push(block.clone());
        block
    }

    pub fn query_tx(&self, tx_id: &Digest) -> Result<&LedgerTx, LedgerError> {
        self.txs.get(tx_id).ok_or(LedgerError::NotFound(*tx_id))
    }

    /// Confirmed transactions with height in `window`, in chain order.
    pub fn confirmed_in(&self, window: RangeInclusive<u64>) -> impl Iterator<Item = &LedgerTx> {
        let lo = (*window.start()).max(1);
        let hi = (*window.end()).min(self.height());
        self.blocks
            .iter()
            .filter(move |b| b.height >= lo && b.height <= hi)
            .flat_map(|b| b.tx_ids.iter())
            .map(|id| &self.txs[id])
    }

    /// Confirmed transactions spending from `key`.
    pub fn confirmed_spends_from(&self, key: &PublicKey) -> impl Iterator<Item = &LedgerTx> {
        self.spends_by_key
            .get(key)
            .into_iter()
            .flatten()
            .map(|id| &self.txs[id])
    }

    /// Structured text export, one record per line.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "block height={} hash={} prev={} txs={}",
                b.height,
                b.block_hash,
                b.prev_hash,
                b.tx_ids.len()
            );
            for id in &b.tx_ids {
                let Some(tx) = self.txs.get(id) else { continue };
                let legs = |ls: &[Leg]| {
                    ls.iter()
                        .map(|l| format!("{}:{}", l.key, l.amount))
                        .collect::<Vec<_>>()
                        .join(",")
                };
                let _ = writeln!(
                    out,
                    "tx id={} height={} inputs={} outputs={} memo={}",
                    tx.tx_id,
                    tx.block_height,
                    legs(&tx.inputs),
                    legs(&tx.outputs),
                    tx.memo_tag.map_or("-".to_string(), hex::encode)
                );
            }
        }
        out
    }

    /// Canonical bytes of the full chain state, for determinism checks.
    pub fn state_digest(&self) -> Digest {
        let mut w = Writer::new();
        for b in &self.blocks {
            w.put(&b.block_hash);
        }
        for (k, v) in &self.balances {
            w.put(k);
            w.put_u64(*v);
        }
        crypto::hash(&w.into_bytes())
    }
}

impl Encode for Block {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u64(self.height);
        w.put(&self.prev_hash);
        w.put(&self.tx_ids);
        w.put(&self.block_hash);
    }
}
