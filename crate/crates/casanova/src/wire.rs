//! Canonical binary serialization.
//!
//! Hashes are derived from these bytes, so the encoding is length-prefixed,
//! field-ordered and little-endian everywhere. Changing anything here changes
//! every block hash; the format carries a version tag to make that explicit.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{Block, BlockHash, ConflictIndex, Transaction, TxHash, ValidatorId, Vote};

const TX_TAG: u8 = 0x01;
const BLOCK_TAG: u8 = 0x02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated at byte {0}")]
    Truncated(usize),
    #[error("trailing {0} bytes after value")]
    Trailing(usize),
    #[error("malformed field: {0}")]
    Malformed(&'static str),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn put_hash(&mut self, v: &[u8; 32]) {
        self.buf.extend_from_slice(v);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.get_u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn get_hash(&mut self) -> Result<[u8; 32], WireError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Trailing(self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_index(w: &mut Writer, i: &ConflictIndex) {
    w.put_bytes(i.as_str().as_bytes());
}

fn get_index(r: &mut Reader) -> Result<ConflictIndex, WireError> {
    let raw = r.get_bytes()?;
    let s = String::from_utf8(raw).map_err(|_| WireError::Malformed("conflict index utf8"))?;
    Ok(ConflictIndex(s))
}

fn put_tx_fields(w: &mut Writer, payload: &[u8], index: &ConflictIndex, parents: &BTreeSet<TxHash>) {
    w.put_u8(TX_TAG);
    w.put_bytes(payload);
    put_index(w, index);
    w.put_u32(parents.len() as u32);
    for p in parents {
        w.put_hash(p.as_bytes());
    }
}

pub fn encode_transaction(tx: &Transaction) -> Vec<u8> {
    let mut w = Writer::new();
    put_tx_fields(&mut w, tx.payload(), tx.index(), tx.requested_parents());
    w.finish()
}

pub fn decode_transaction(buf: &[u8]) -> Result<Transaction, WireError> {
    let mut r = Reader::new(buf);
    let tx = read_transaction(&mut r)?;
    r.finish()?;
    Ok(tx)
}

fn read_transaction(r: &mut Reader) -> Result<Transaction, WireError> {
    if r.get_u8()? != TX_TAG {
        return Err(WireError::Malformed("transaction tag"));
    }
    let payload = r.get_bytes()?;
    let index = get_index(r)?;
    let n = r.get_u32()? as usize;
    let mut parents = BTreeSet::new();
    for _ in 0..n {
        parents.insert(TxHash(r.get_hash()?));
    }
    if parents.len() != n {
        return Err(WireError::Malformed("duplicate requested parent"));
    }
    Ok(Transaction::new(payload, index, parents))
}

pub(crate) fn transaction_hash(
    payload: &[u8],
    index: &ConflictIndex,
    parents: &BTreeSet<TxHash>,
) -> TxHash {
    let mut w = Writer::new();
    put_tx_fields(&mut w, payload, index, parents);
    TxHash(Sha256::digest(w.finish()).into())
}

fn put_vote(w: &mut Writer, v: &Vote) {
    put_index(w, &v.index);
    w.put_hash(v.choice.as_bytes());
    w.put_u32(v.round);
    match v.lock_evidence {
        None => w.put_u8(0),
        Some(p) => {
            w.put_u8(1);
            w.put_i64(p);
        }
    }
}

fn get_vote(r: &mut Reader) -> Result<Vote, WireError> {
    let index = get_index(r)?;
    let choice = TxHash(r.get_hash()?);
    let round = r.get_u32()?;
    let lock_evidence = match r.get_u8()? {
        0 => None,
        1 => Some(r.get_i64()?),
        _ => return Err(WireError::Malformed("lock evidence flag")),
    };
    if lock_evidence.is_some_and(|p| p >= round as i64) {
        return Err(WireError::Malformed("lock evidence round"));
    }
    Ok(Vote {
        index,
        choice,
        round,
        lock_evidence,
    })
}

pub fn encode_block(b: &Block) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(BLOCK_TAG);
    w.put_u32(b.creator().0);
    w.put_u64(b.seq());
    w.put_u32(b.parents().len() as u32);
    for p in b.parents() {
        w.put_hash(p.as_bytes());
    }
    w.put_u32(b.transactions().len() as u32);
    for tx in b.transactions() {
        put_tx_fields(&mut w, tx.payload(), tx.index(), tx.requested_parents());
    }
    w.put_u32(b.votes().len() as u32);
    for v in b.votes() {
        put_vote(&mut w, v);
    }
    w.put_u32(b.conflict_attestations().len() as u32);
    for (i, round) in b.conflict_attestations() {
        put_index(&mut w, i);
        w.put_i64(*round);
    }
    w.finish()
}

pub fn decode_block(buf: &[u8]) -> Result<Block, WireError> {
    let mut r = Reader::new(buf);
    if r.get_u8()? != BLOCK_TAG {
        return Err(WireError::Malformed("block tag"));
    }
    let creator = ValidatorId(r.get_u32()?);
    let seq = r.get_u64()?;
    let np = r.get_u32()? as usize;
    let mut parents = BTreeSet::new();
    for _ in 0..np {
        parents.insert(BlockHash(r.get_hash()?));
    }
    if parents.len() != np {
        return Err(WireError::Malformed("duplicate parent"));
    }
    let nt = r.get_u32()? as usize;
    let mut transactions = Vec::with_capacity(nt);
    for _ in 0..nt {
        transactions.push(read_transaction(&mut r)?);
    }
    let nv = r.get_u32()? as usize;
    let mut votes = Vec::with_capacity(nv);
    for _ in 0..nv {
        votes.push(get_vote(&mut r)?);
    }
    let na = r.get_u32()? as usize;
    let mut attests = Vec::with_capacity(na);
    for _ in 0..na {
        let i = get_index(&mut r)?;
        let round = r.get_i64()?;
        attests.push((i, round));
    }
    r.finish()?;
    Ok(Block::new(creator, seq, parents, transactions, votes, attests))
}

pub(crate) fn block_hash(b: &Block) -> BlockHash {
    BlockHash(Sha256::digest(encode_block(b)).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_block() -> Block {
        let g = Block::genesis();
        let tx = Transaction::new(b"pay".to_vec(), "acct".into(), BTreeSet::new());
        let tx2 = Transaction::new(
            b"spend".to_vec(),
            "acct".into(),
            [tx.hash()].into_iter().collect(),
        );
        let vote = Vote::new("acct".into(), tx.hash(), 1, Some(0));
        Block::new(
            ValidatorId(2),
            7,
            [g.hash()].into_iter().collect(),
            vec![tx, tx2],
            vec![vote],
            vec![("acct".into(), 0)],
        )
    }

    #[test]
    fn block_roundtrip() {
        let b = sample_block();
        let bytes = encode_block(&b);
        let back = decode_block(&bytes).unwrap();
        assert_eq!(b, back);
        assert_eq!(b.hash(), back.hash());
    }

    #[test]
    fn transaction_roundtrip() {
        let tx = Transaction::new(b"x".to_vec(), "i".into(), BTreeSet::new());
        let back = decode_transaction(&encode_transaction(&tx)).unwrap();
        assert_eq!(tx, back);
    }

    #[test]
    fn truncated_input_rejected() {
        let b = sample_block();
        let bytes = encode_block(&b);
        assert!(decode_block(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert_eq!(decode_block(&extended), Err(WireError::Trailing(1)));
    }

    // Frozen bytes: the genesis hash anchors the whole format. If this test
    // breaks, every persisted trace and hash in the corpus is invalidated.
    #[test]
    fn genesis_encoding_is_stable() {
        let g = Block::genesis();
        let bytes = encode_block(&g);
        assert_eq!(
            hex::encode(&bytes),
            "02ffffffff000000000000000000000000000000000000000000000000"
        );
        assert_eq!(
            g.hash().to_hex(),
            "bf9d453b0a9a72afc621a23b13734db6f14f694f185d0f91aa280c9655559c1c"
        );
    }
}
