// SPDX-License-Identifier: Apache-2.0

//! Memoization caches for side-effect-free enclave functions.
//!
//! Entries and their eviction order live in untrusted memory so that clients
//! can answer repeated calls without crossing the boundary. The trusted side
//! keeps one 64-bit accumulator per cache, the wrapping sum of the hashes of
//! all entries, and the worker periodically recomputes the sum from the
//! untrusted entries to detect tampering. Detection is eventual: a value that
//! is modified and restored between two verifications goes unnoticed.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use crate::registry::FunctionId;
use crate::value::{TypeTag, Value, ValueError};

/// Index of a cache within its enclave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoCacheId(pub u32);

impl fmt::Display for MemoCacheId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvictionPolicy {
    Lru,
    Fifo,
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvictionPolicy::Lru => "lru",
            EvictionPolicy::Fifo => "fifo",
        })
    }
}

impl FromStr for EvictionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(EvictionPolicy::Lru),
            "fifo" => Ok(EvictionPolicy::Fifo),
            other => Err(format!("unknown eviction policy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoError {
    #[error("no memo cache with id {0}")]
    UnknownCache(MemoCacheId),
    #[error("memo cache capacity must be at least 1")]
    ZeroCapacity,
    #[error("verification period must be at least 1")]
    ZeroPeriod,
    #[error("cached value is corrupt: {0}")]
    Corrupt(ValueError),
}

/// One cached input/output pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemoEntry {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub tag: TypeTag,
}

impl MemoEntry {
    pub fn new(key: Vec<u8>, value: &Value) -> Self {
        Self { key, value: value.to_le_bytes(), tag: value.tag() }
    }

    pub fn decode(&self) -> Result<Value, ValueError> {
        Value::from_le_bytes(self.tag, &self.value)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `key || tag || value`.
pub fn entry_hash(entry: &MemoEntry) -> u64 {
    let mut h = FNV_OFFSET;
    let tag = [entry.tag.as_char() as u8];
    for b in entry.key.iter().chain(&tag).chain(&entry.value) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Canonical key of a call: each input as its tag byte followed by its
/// little-endian encoding, in declaration order.
pub fn fingerprint(inputs: &[Value]) -> Vec<u8> {
    let mut key = Vec::with_capacity(inputs.len() * 9);
    for v in inputs {
        key.push(v.tag().as_char() as u8);
        key.extend(v.to_le_bytes());
    }
    key
}

/// Additive cache hash: the wrapping sum of entry hashes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheHash(pub u64);

impl CacheHash {
    pub fn of<'a>(entries: impl IntoIterator<Item = &'a MemoEntry>) -> Self {
        let mut h = CacheHash::default();
        for e in entries {
            h.add(e);
        }
        h
    }

    pub fn add(&mut self, e: &MemoEntry) {
        self.0 = self.0.wrapping_add(entry_hash(e));
    }

    pub fn sub(&mut self, e: &MemoEntry) {
        self.0 = self.0.wrapping_sub(entry_hash(e));
    }
}

#[derive(Debug, Default)]
struct Untrusted {
    entries: HashMap<Vec<u8>, MemoEntry>,
    // front is most recently inserted (or used, under LRU); victims come off the back
    order: VecDeque<Vec<u8>>,
}

impl Untrusted {
    fn promote(&mut self, key: &[u8]) {
        if let Some(pos) = self.order.iter().position(|k| k == key) {
            let k = self.order.remove(pos).expect("position is in range");
            self.order.push_front(k);
        }
    }

    fn unlink(&mut self, key: &[u8]) {
        if let Some(pos) = self.order.iter().position(|k| k == key) {
            self.order.remove(pos);
        }
    }
}

/// Counters kept by a cache for the client side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoStats {
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub evictions: u64,
}

/// Untrusted half of a memoization cache.
#[derive(Debug)]
pub struct MemoCache {
    function_id: FunctionId,
    capacity: usize,
    policy: EvictionPolicy,
    inner: Mutex<Untrusted>,
    stats: Mutex<MemoStats>,
}

impl MemoCache {
    pub fn new(function_id: FunctionId, capacity: usize, policy: EvictionPolicy) -> Result<Self, MemoError> {
        if capacity == 0 {
            return Err(MemoError::ZeroCapacity);
        }
        Ok(Self {
            function_id,
            capacity,
            policy,
            inner: Mutex::new(Untrusted::default()),
            stats: Mutex::new(MemoStats::default()),
        })
    }

    pub fn function_id(&self) -> FunctionId {
        self.function_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    fn lock(&self) -> MutexGuard<'_, Untrusted> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stats_mut(&self) -> MutexGuard<'_, MemoStats> {
        self.stats.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stats(&self) -> MemoStats {
        *self.stats_mut()
    }

    /// Client-side lookup. Never crosses the boundary; under LRU a hit moves
    /// the key to the front of the eviction order.
    pub fn lookup(&self, key: &[u8]) -> Result<Option<Value>, MemoError> {
        let mut u = self.lock();
        let found = match u.entries.get(key) {
            Some(e) => Some(e.decode().map_err(MemoError::Corrupt)?),
            None => None,
        };
        if found.is_some() && self.policy == EvictionPolicy::Lru {
            u.promote(key);
        }
        drop(u);
        let mut s = self.stats_mut();
        match found {
            Some(_) => s.hits += 1,
            None => s.misses += 1,
        }
        Ok(found)
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.lock().entries.contains_key(key)
    }

    /// Keys from most to least recently inserted/used.
    pub fn order(&self) -> Vec<Vec<u8>> {
        self.lock().order.iter().cloned().collect()
    }

    pub fn entries(&self) -> Vec<MemoEntry> {
        let u = self.lock();
        u.order.iter().filter_map(|k| u.entries.get(k).cloned()).collect()
    }

    /// Direct access to the untrusted entry map, as any code outside the
    /// enclave could obtain. Used to model tampering.
    pub fn with_untrusted_entries<R>(&self, f: impl FnOnce(&mut HashMap<Vec<u8>, MemoEntry>) -> R) -> R {
        f(&mut self.lock().entries)
    }

    fn recompute(&self) -> CacheHash {
        CacheHash::of(self.lock().entries.values())
    }
}

/// How a mutating call affects a cached result.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoWrite {
    Invalidate,
    Update(Value),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationAction {
    Flag,
    FlagAndClear,
    Halt,
}

impl FromStr for ViolationAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flag" => Ok(ViolationAction::Flag),
            "clear" | "flag-and-clear" => Ok(ViolationAction::FlagAndClear),
            "halt" => Ok(ViolationAction::Halt),
            other => Err(format!("unknown violation action '{other}'")),
        }
    }
}

/// Default number of worker polls between verifications.
pub const DEFAULT_VERIFY_PERIOD: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationSchedule {
    pub period: u64,
    pub on_violation: ViolationAction,
}

impl Default for VerificationSchedule {
    fn default() -> Self {
        Self { period: DEFAULT_VERIFY_PERIOD, on_violation: ViolationAction::FlagAndClear }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyStatus {
    Ok,
    Violation,
}

/// Outcome of verifying one cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyReport {
    pub cache: FunctionId,
    pub status: VerifyStatus,
    pub period: u64,
    /// Worker poll count at which the check ran (0 for on-demand checks).
    pub at_poll: u64,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            VerifyStatus::Ok => "ok",
            VerifyStatus::Violation => "violation",
        };
        write!(f, "memo-verify cache={} status={} period={}", self.cache, status, self.period)
    }
}

/// Verification reports, readable from untrusted code.
#[derive(Debug, Clone, Default)]
pub struct VerifyLog(Arc<Mutex<Vec<VerifyReport>>>);

impl VerifyLog {
    fn push(&self, r: VerifyReport) {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).push(r);
    }

    pub fn reports(&self) -> Vec<VerifyReport> {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn violations(&self) -> usize {
        self.reports().iter().filter(|r| r.status == VerifyStatus::Violation).count()
    }
}

#[derive(Debug)]
struct TrustedCache {
    cache: Arc<MemoCache>,
    hash: CacheHash,
}

/// Trusted half of every cache of an enclave: hash accumulators and the
/// verification schedule.
#[derive(Debug, Default)]
pub struct MemoTrusted {
    caches: Vec<TrustedCache>,
    schedule: VerificationSchedule,
    polls: u64,
    halted: bool,
    log: VerifyLog,
}

impl MemoTrusted {
    pub fn register(&mut self, cache: Arc<MemoCache>) -> MemoCacheId {
        let hash = cache.recompute();
        self.caches.push(TrustedCache { cache, hash });
        MemoCacheId(self.caches.len() as u32 - 1)
    }

    pub fn set_schedule(&mut self, schedule: VerificationSchedule) -> Result<(), MemoError> {
        if schedule.period == 0 {
            return Err(MemoError::ZeroPeriod);
        }
        self.schedule = schedule;
        Ok(())
    }

    pub fn schedule(&self) -> VerificationSchedule {
        self.schedule
    }

    pub fn log(&self) -> VerifyLog {
        self.log.clone()
    }

    pub fn cache(&self, id: MemoCacheId) -> Result<&Arc<MemoCache>, MemoError> {
        self.slot(id).map(|c| &c.cache)
    }

    /// Untrusted handles of every registered cache, indexed by id.
    pub fn handles(&self) -> Vec<Arc<MemoCache>> {
        self.caches.iter().map(|c| Arc::clone(&c.cache)).collect()
    }

    pub fn hash(&self, id: MemoCacheId) -> Result<CacheHash, MemoError> {
        self.slot(id).map(|c| c.hash)
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    fn slot(&self, id: MemoCacheId) -> Result<&TrustedCache, MemoError> {
        self.caches.get(id.0 as usize).ok_or(MemoError::UnknownCache(id))
    }

    fn slot_mut(&mut self, id: MemoCacheId) -> Result<&mut TrustedCache, MemoError> {
        self.caches.get_mut(id.0 as usize).ok_or(MemoError::UnknownCache(id))
    }

    /// Stores a result, evicting per policy when full. Re-inserting an
    /// existing key replaces its value and counts as a use.
    pub fn insert(&mut self, id: MemoCacheId, key: Vec<u8>, value: Value) -> Result<(), MemoError> {
        let tc = self.slot_mut(id)?;
        let cache = Arc::clone(&tc.cache);
        let entry = MemoEntry::new(key, &value);
        let mut u = cache.lock();
        let mut evicted = false;
        if let Some(old) = u.entries.remove(&entry.key) {
            tc.hash.sub(&old);
            if cache.policy == EvictionPolicy::Lru {
                u.promote(&entry.key);
            }
        } else {
            if u.entries.len() >= cache.capacity {
                if let Some(victim) = u.order.pop_back() {
                    if let Some(old) = u.entries.remove(&victim) {
                        tc.hash.sub(&old);
                    }
                    evicted = true;
                }
            }
            u.order.push_front(entry.key.clone());
        }
        tc.hash.add(&entry);
        u.entries.insert(entry.key.clone(), entry);
        drop(u);
        let mut s = cache.stats_mut();
        s.inserts += 1;
        s.evictions += evicted as u64;
        Ok(())
    }

    /// Applies a write to a cached key. Absent keys are left alone.
    pub fn on_write(&mut self, id: MemoCacheId, key: &[u8], write: MemoWrite) -> Result<(), MemoError> {
        let tc = self.slot_mut(id)?;
        let cache = Arc::clone(&tc.cache);
        let mut u = cache.lock();
        let Some(old) = u.entries.remove(key) else {
            return Ok(());
        };
        tc.hash.sub(&old);
        match write {
            MemoWrite::Invalidate => u.unlink(key),
            MemoWrite::Update(v) => {
                let e = MemoEntry::new(key.to_vec(), &v);
                tc.hash.add(&e);
                u.entries.insert(e.key.clone(), e);
            }
        }
        Ok(())
    }

    /// Recomputes every cache hash from the untrusted entries and compares
    /// it with the trusted accumulator, applying the violation action.
    pub fn verify_all(&mut self) -> Vec<VerifyReport> {
        let mut out = Vec::with_capacity(self.caches.len());
        for tc in &mut self.caches {
            let ok = tc.cache.recompute() == tc.hash;
            let report = VerifyReport {
                cache: tc.cache.function_id,
                status: if ok { VerifyStatus::Ok } else { VerifyStatus::Violation },
                period: self.schedule.period,
                at_poll: self.polls,
            };
            if !ok {
                match self.schedule.on_violation {
                    ViolationAction::Flag => {}
                    ViolationAction::FlagAndClear => {
                        let mut u = tc.cache.lock();
                        u.entries.clear();
                        u.order.clear();
                        tc.hash = CacheHash::default();
                    }
                    ViolationAction::Halt => self.halted = true,
                }
            }
            self.log.push(report);
            out.push(report);
        }
        out
    }

    /// Called by the worker on every idle poll. Verifies once every
    /// `period` polls and reports whether a verification ran.
    pub fn on_poll(&mut self) -> bool {
        self.polls += 1;
        if self.caches.is_empty() || !self.polls.is_multiple_of(self.schedule.period) {
            return false;
        }
        self.verify_all();
        true
    }

    pub fn polls(&self) -> u64 {
        self.polls
    }
}
