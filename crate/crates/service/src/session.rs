//! In-memory refinement sessions.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use gms_core::inquiry::ConditionClass;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Turn {
    pub text: String,
    pub parsed: ConditionClass,
    /// Decisions returned by sample requests made after this turn.
    pub decision_ids: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub triple: ConditionClass,
    pub history: Vec<Turn>,
    touched: Instant,
}

/// Slots present in `newer` replace those in `older`; absent slots keep the
/// older value. Applying the same `newer` twice changes nothing.
pub fn merge(older: &ConditionClass, newer: &ConditionClass) -> ConditionClass {
    ConditionClass {
        capacity: newer.capacity.or(older.capacity),
        skill: newer.skill.or(older.skill),
        max_machines: newer.max_machines.or(older.max_machines),
    }
}

#[derive(Debug)]
pub struct SessionStore {
    ttl: Duration,
    sessions: HashMap<String, Session>,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            sessions: HashMap::new(),
        }
    }

    fn expire(&mut self, now: Instant) {
        let ttl = self.ttl;
        self.sessions.retain(|_, s| now.duration_since(s.touched) < ttl);
    }

    /// Live session by id; touching it restarts its time to live.
    pub fn get_mut(&mut self, id: &str) -> Option<&mut Session> {
        let now = Instant::now();
        self.expire(now);
        let s = self.sessions.get_mut(id)?;
        s.touched = now;
        Some(s)
    }

    pub fn get(&mut self, id: &str) -> Option<&Session> {
        self.get_mut(id).map(|s| &*s)
    }

    /// Start a session whose first turn is `text` parsed as `parsed`.
    pub fn create(&mut self, id: String, text: String, parsed: ConditionClass) -> &Session {
        let now = Instant::now();
        self.expire(now);
        let session = Session {
            triple: parsed.clone(),
            history: vec![Turn {
                text,
                parsed,
                decision_ids: Vec::new(),
            }],
            touched: now,
        };
        self.sessions.entry(id).insert_entry(session).into_mut()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

impl Session {
    pub fn refine(&mut self, text: String, parsed: ConditionClass) {
        self.triple = merge(&self.triple, &parsed);
        self.history.push(Turn {
            text,
            parsed,
            decision_ids: Vec::new(),
        });
    }

    pub fn record_decisions(&mut self, ids: &[u64]) {
        if let Some(last) = self.history.last_mut() {
            last.decision_ids.extend_from_slice(ids);
        }
    }
}
