// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::memo::MemoCacheId;

/// Exact match tuple: in_port, eth_src, eth_dst, ip_src, ip_dst, proto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FlowMatch(pub [u64; 6]);

impl FlowMatch {
    pub fn in_port(&self) -> u64 {
        self.0[0]
    }

    pub fn proto(&self) -> u64 {
        self.0[5]
    }
}

impl fmt::Display for FlowMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e, g] = self.0;
        write!(f, "{a},{b},{c},{d},{e},{g}")
    }
}

impl FromStr for FlowMatch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields = s
            .split(',')
            .map(|t| t.trim().parse::<u64>().map_err(|e| format!("bad match field '{t}': {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let arr: [u64; 6] =
            fields.try_into().map_err(|v: Vec<u64>| format!("match needs 6 fields, got {}", v.len()))?;
        Ok(FlowMatch(arr))
    }
}

/// Selector for delete and modify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    Exact(FlowMatch),
    All,
}

impl Pattern {
    pub fn matches(&self, m: &FlowMatch) -> bool {
        match self {
            Pattern::All => true,
            Pattern::Exact(p) => p == m,
        }
    }

    /// `(kind, fields)` as passed to trusted functions: kind 0 is exact,
    /// 1 is match-all.
    pub fn encode(&self) -> (u64, [u64; 6]) {
        match self {
            Pattern::Exact(m) => (0, m.0),
            Pattern::All => (1, [0; 6]),
        }
    }

    pub fn decode(kind: u64, fields: [u64; 6]) -> Option<Pattern> {
        match kind {
            0 => Some(Pattern::Exact(FlowMatch(fields))),
            1 => Some(Pattern::All),
            _ => None,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::All => f.write_str("*"),
            Pattern::Exact(m) => m.fmt(f),
        }
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "*" {
            Ok(Pattern::All)
        } else {
            s.parse().map(Pattern::Exact)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowRule {
    pub id: u64,
    pub matcher: FlowMatch,
    pub priority: u64,
    pub actions: u64,
    pub created_at: u64,
    pub last_used: u64,
}

impl FlowRule {
    /// Eviction order key; the smallest key is evicted first.
    pub fn eviction_key(&self) -> (u64, u64) {
        (self.priority, self.last_used)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertStatus {
    Inserted(u64),
    Replaced(u64),
    Full,
}

impl InsertStatus {
    pub fn code(&self) -> u64 {
        match self {
            InsertStatus::Inserted(_) => 0,
            InsertStatus::Replaced(_) => 1,
            InsertStatus::Full => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddStatus {
    Added(u64),
    Replaced(u64),
}

/// Result of adding a rule; `evicted` is set when room had to be made.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddResult {
    pub status: AddStatus,
    pub evicted: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub rule_count: u64,
    pub lookups: u64,
}

/// Rule set of a software switch. Rule ids start at 1 and are never reused.
#[derive(Debug, Clone)]
pub struct FlowTable {
    rules: BTreeMap<u64, FlowRule>,
    index: BTreeMap<(FlowMatch, u64), u64>,
    next_id: u64,
    clock: u64,
    capacity: usize,
    stats: FlowStats,
    pub(crate) count_memo: Option<MemoCacheId>,
    pub(crate) actions_memo: Option<MemoCacheId>,
}

impl FlowTable {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "flow table capacity must be positive");
        Self {
            rules: BTreeMap::new(),
            index: BTreeMap::new(),
            next_id: 1,
            clock: 0,
            capacity,
            stats: FlowStats::default(),
            count_memo: None,
            actions_memo: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rules.len() >= self.capacity
    }

    pub fn stats(&self) -> FlowStats {
        self.stats
    }

    pub fn get(&self, id: u64) -> Option<&FlowRule> {
        self.rules.get(&id)
    }

    /// Rules in id order.
    pub fn rules(&self) -> Vec<FlowRule> {
        self.rules.values().copied().collect()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Inserts a rule or replaces the actions of the rule with the same
    /// match and priority. Never evicts.
    pub fn insert(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> InsertStatus {
        if let Some(&id) = self.index.get(&(matcher, priority)) {
            let now = self.tick();
            let r = self.rules.get_mut(&id).expect("index points at a live rule");
            r.actions = actions;
            r.last_used = now;
            return InsertStatus::Replaced(id);
        }
        if self.is_full() {
            return InsertStatus::Full;
        }
        let now = self.tick();
        let id = self.next_id;
        self.next_id += 1;
        self.rules.insert(id, FlowRule { id, matcher, priority, actions, created_at: now, last_used: now });
        self.index.insert((matcher, priority), id);
        self.stats.rule_count = self.rules.len() as u64;
        InsertStatus::Inserted(id)
    }

    pub fn count_matches(&mut self, p: &Pattern) -> u64 {
        self.stats.lookups += 1;
        self.rules.values().filter(|r| p.matches(&r.matcher)).count() as u64
    }

    /// Ids of matching rules, ascending.
    pub fn collect(&mut self, p: &Pattern) -> Vec<u64> {
        self.stats.lookups += 1;
        self.rules.values().filter(|r| p.matches(&r.matcher)).map(|r| r.id).collect()
    }

    pub fn remove(&mut self, id: u64) -> Option<FlowRule> {
        let r = self.rules.remove(&id)?;
        self.index.remove(&(r.matcher, r.priority));
        self.stats.rule_count = self.rules.len() as u64;
        Some(r)
    }

    pub fn set_actions(&mut self, id: u64, actions: u64) -> bool {
        let now = self.clock + 1;
        match self.rules.get_mut(&id) {
            Some(r) => {
                r.actions = actions;
                r.last_used = now;
                self.clock = now;
                true
            }
            None => false,
        }
    }

    /// Rule with the smallest `(priority, last_used)`.
    pub fn eviction_victim(&self) -> Option<u64> {
        self.rules.values().min_by_key(|r| r.eviction_key()).map(|r| r.id)
    }

    pub fn evict(&mut self) -> Option<u64> {
        let id = self.eviction_victim()?;
        self.remove(id);
        Some(id)
    }

    /// Adds a rule, evicting first when the table is full.
    pub fn add(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> AddResult {
        match self.insert(matcher, priority, actions) {
            InsertStatus::Inserted(id) => AddResult { status: AddStatus::Added(id), evicted: None },
            InsertStatus::Replaced(id) => AddResult { status: AddStatus::Replaced(id), evicted: None },
            InsertStatus::Full => {
                let evicted = self.evict();
                match self.insert(matcher, priority, actions) {
                    InsertStatus::Inserted(id) => AddResult { status: AddStatus::Added(id), evicted },
                    other => unreachable!("insert after eviction returned {other:?}"),
                }
            }
        }
    }

    pub fn delete(&mut self, p: &Pattern) -> u64 {
        let ids = self.collect(p);
        for id in &ids {
            self.remove(*id);
        }
        ids.len() as u64
    }

    pub fn modify(&mut self, p: &Pattern, actions: u64) -> u64 {
        let ids = self.collect(p);
        for id in &ids {
            self.set_actions(*id, actions);
        }
        ids.len() as u64
    }
}
