use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;

use crate::cost::OpTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Party {
    P0,
    P1,
    P2,
}

impl Party {
    pub fn as_str(&self) -> &'static str {
        match self {
            Party::P0 => "P0",
            Party::P1 => "P1",
            Party::P2 => "P2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub round: u64,
    pub sender: Party,
    pub receiver: Party,
    pub bytes: u64,
    pub tag: OpTag,
}

/// Per-message byte ledger of a simulated run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageLog {
    element_bytes: u64,
    records: Vec<MessageRecord>,
    rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogSummary {
    pub rounds: u64,
    pub messages: usize,
    pub total_bytes: u64,
    pub total_mb: f64,
    pub bytes_by_tag: BTreeMap<OpTag, u64>,
    pub bytes_by_sender: BTreeMap<Party, u64>,
}

impl MessageLog {
    pub fn new(element_bytes: u64) -> Self {
        MessageLog {
            element_bytes,
            records: Vec::new(),
            rounds: 0,
        }
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    /// Completed communication rounds.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn bytes_by_tag(&self) -> BTreeMap<OpTag, u64> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.tag).or_insert(0) += r.bytes;
        }
        out
    }

    pub fn summary(&self) -> LogSummary {
        let mut by_sender = BTreeMap::new();
        for r in &self.records {
            *by_sender.entry(r.sender).or_insert(0) += r.bytes;
        }
        LogSummary {
            rounds: self.rounds,
            messages: self.records.len(),
            total_bytes: self.total_bytes(),
            total_mb: self.total_bytes() as f64 / 1e6,
            bytes_by_tag: self.bytes_by_tag(),
            bytes_by_sender: by_sender,
        }
    }

    pub(crate) fn push_round(&mut self, mut records: Vec<MessageRecord>) {
        records.sort_by_key(|r| (r.sender, r.receiver));
        self.records.extend(records);
        self.rounds += 1;
    }

    /// Records a zero-byte bookkeeping entry against the latest round.
    pub(crate) fn note(&mut self, sender: Party, receiver: Party, tag: OpTag) {
        self.records.push(MessageRecord {
            round: self.rounds.saturating_sub(1),
            sender,
            receiver,
            bytes: 0,
            tag,
        });
    }

    /// Round indices never decrease, every round index is below the round
    /// count, and every byte count is a whole number of ring elements.
    pub fn check_invariants(&self) -> Result<()> {
        let mut last = 0;
        for (i, r) in self.records.iter().enumerate() {
            if r.round < last {
                return Err(Error::Reconciliation(format!("record {i} goes back to round {}", r.round)));
            }
            if r.round >= self.rounds.max(1) {
                return Err(Error::Reconciliation(format!("record {i} names unfinished round {}", r.round)));
            }
            if r.bytes % self.element_bytes != 0 {
                return Err(Error::Reconciliation(format!(
                    "record {i} carries {} bytes, not a multiple of {}",
                    r.bytes, self.element_bytes
                )));
            }
            if r.sender == r.receiver {
                return Err(Error::Reconciliation(format!("record {i} is a self-message")));
            }
            last = r.round;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,sender,receiver,bytes,tag\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round,
                r.sender.as_str(),
                r.receiver.as_str(),
                r.bytes,
                r.tag.as_str()
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

type Mailbox = VecDeque<(OpTag, Vec<u64>)>;

/// In-memory mailboxes driven in lockstep rounds. Messages sent during a
/// round are delivered when the round ends; every delivered message must be
/// received before the next round ends.
#[derive(Debug)]
pub struct Network {
    element_bytes: u64,
    outbox: Vec<(Party, Party, OpTag, Vec<u64>)>,
    inbox: BTreeMap<(Party, Party), Mailbox>,
    log: MessageLog,
    capture: Option<Party>,
    transcript: Vec<Vec<u64>>,
}

impl Network {
    pub fn new(element_bytes: u64) -> Self {
        Network {
            element_bytes,
            outbox: Vec::new(),
            inbox: BTreeMap::new(),
            log: MessageLog::new(element_bytes),
            capture: None,
            transcript: Vec::new(),
        }
    }

    /// Keeps a copy of every payload delivered to `party`.
    pub fn capture(&mut self, party: Party) {
        self.capture = Some(party);
    }

    pub fn transcript(&self) -> &[Vec<u64>] {
        &self.transcript
    }

    pub fn log(&self) -> &MessageLog {
        &self.log
    }

    pub fn into_log(self) -> MessageLog {
        self.log
    }

    pub fn send(&mut self, from: Party, to: Party, tag: OpTag, payload: Vec<u64>) {
        assert_ne!(from, to, "parties do not message themselves");
        self.outbox.push((from, to, tag, payload));
    }

    pub fn end_round(&mut self) -> Result<()> {
        if let Some(((from, to), _)) = self.inbox.iter().find(|(_, q)| !q.is_empty()) {
            return Err(Error::Reconciliation(format!(
                "round {} ends with an unread message from {} to {}",
                self.log.rounds(),
                from.as_str(),
                to.as_str()
            )));
        }
        let round = self.log.rounds();
        let mut records = Vec::with_capacity(self.outbox.len());
        for (from, to, tag, payload) in self.outbox.drain(..) {
            records.push(MessageRecord {
                round,
                sender: from,
                receiver: to,
                bytes: payload.len() as u64 * self.element_bytes,
                tag,
            });
            if self.capture == Some(to) {
                self.transcript.push(payload.clone());
            }
            self.inbox.entry((from, to)).or_default().push_back((tag, payload));
        }
        self.log.push_round(records);
        Ok(())
    }

    pub fn recv(&mut self, to: Party, from: Party, tag: OpTag) -> Result<Vec<u64>> {
        match self.inbox.get_mut(&(from, to)).and_then(VecDeque::pop_front) {
            Some((t, payload)) if t == tag => Ok(payload),
            Some((t, _)) => Err(Error::Reconciliation(format!(
                "{} expected a {} message from {}, got {}",
                to.as_str(),
                tag.as_str(),
                from.as_str(),
                t.as_str()
            ))),
            None => Err(Error::Reconciliation(format!(
                "{} has no message from {}",
                to.as_str(),
                from.as_str()
            ))),
        }
    }

    pub fn note(&mut self, sender: Party, receiver: Party, tag: OpTag) {
        self.log.note(sender, receiver, tag);
    }
}
