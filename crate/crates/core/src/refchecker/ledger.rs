use std::collections::HashSet;

use crate::docmodel::{DigestKey, DocType, DocumentIdentifier, Timestamp};
use crate::scheduler::PhaseInstance;

/// What an attempt was for: a concrete digest, or a guessed period document.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AttemptKey {
    Digest(DigestKey),
    Guess { doctype: DocType, subject: String, datetime: Timestamp },
}

impl AttemptKey {
    pub fn of(id: &DocumentIdentifier) -> AttemptKey {
        match id.digests.primary_key() {
            Some(k) => AttemptKey::Digest(k),
            None => AttemptKey::Guess { doctype: id.doctype, subject: id.subject.clone(), datetime: id.datetime },
        }
    }
}

/// One attempt per (document, server) per phase.
///
/// A server that failed at the connection level is also remembered as
/// unreachable until the phase changes, so that no further request goes to
/// it within the phase.
#[derive(Debug)]
pub struct AttemptLedger {
    phase: PhaseInstance,
    attempts: HashSet<(AttemptKey, String)>,
    unreachable: HashSet<String>,
}

impl Default for AttemptLedger {
    fn default() -> Self {
        AttemptLedger { phase: PhaseInstance::BOOTSTRAP, attempts: HashSet::new(), unreachable: HashSet::new() }
    }
}

impl AttemptLedger {
    pub fn phase(&self) -> PhaseInstance {
        self.phase
    }

    /// Clears the ledger when the phase changes. Learning the first
    /// consensus while in the bootstrap alpha phase is not a change.
    pub fn reset_phase(&mut self, new: PhaseInstance) -> bool {
        if new == self.phase {
            return false;
        }
        let continues_bootstrap = self.phase.start.is_none() && self.phase.phase == new.phase;
        self.phase = new;
        if continues_bootstrap {
            return false;
        }
        self.attempts.clear();
        self.unreachable.clear();
        true
    }

    pub fn record_key(&mut self, key: AttemptKey, server: &str, phase: PhaseInstance) -> bool {
        self.reset_phase(phase);
        if self.unreachable.contains(server) {
            return false;
        }
        self.attempts.insert((key, server.to_string()))
    }

    pub fn record_attempt(&mut self, id: &DocumentIdentifier, server: &str, phase: PhaseInstance) -> bool {
        self.record_key(AttemptKey::of(id), server, phase)
    }

    pub fn was_attempted(&self, key: &AttemptKey, server: &str) -> bool {
        self.attempts.contains(&(key.clone(), server.to_string()))
    }

    pub fn mark_unreachable(&mut self, server: &str, phase: PhaseInstance) {
        self.reset_phase(phase);
        self.unreachable.insert(server.to_string());
    }

    pub fn is_unreachable(&mut self, server: &str, phase: PhaseInstance) -> bool {
        self.reset_phase(phase);
        self.unreachable.contains(server)
    }

    pub fn len(&self) -> usize {
        self.attempts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attempts.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::docmodel::DigestSet;
    use crate::scheduler::Phase;

    fn id(b: u8) -> DocumentIdentifier {
        DocumentIdentifier::new(DocType::ServerDescriptor, "", Timestamp::EPOCH, DigestSet::from_sha1_bytes(&[b; 20]))
    }

    fn alpha(start: i64) -> PhaseInstance {
        PhaseInstance { phase: Phase::Alpha, start: Some(Timestamp::from_unix(start)) }
    }

    fn beta(start: i64) -> PhaseInstance {
        PhaseInstance { phase: Phase::Beta, start: Some(Timestamp::from_unix(start)) }
    }

    #[test]
    fn once_per_phase() {
        let mut l = AttemptLedger::default();
        assert!(l.record_attempt(&id(1), "a", alpha(0)));
        assert!(!l.record_attempt(&id(1), "a", alpha(0)));
        assert!(l.record_attempt(&id(1), "b", alpha(0)));
        assert!(l.record_attempt(&id(1), "a", beta(30)));
        assert!(!l.record_attempt(&id(1), "a", beta(30)));
        assert!(l.record_attempt(&id(1), "a", alpha(53)));
    }

    #[test]
    fn bootstrap_carries_into_first_alpha() {
        let mut l = AttemptLedger::default();
        assert!(l.record_attempt(&id(1), "a", PhaseInstance::BOOTSTRAP));
        assert!(!l.record_attempt(&id(1), "a", alpha(0)));
        assert!(l.record_attempt(&id(1), "a", beta(30)));
    }

    #[test]
    fn unreachable_servers_are_skipped_until_phase_change() {
        let mut l = AttemptLedger::default();
        l.mark_unreachable("down", alpha(0));
        assert!(!l.record_attempt(&id(2), "down", alpha(0)));
        assert!(l.is_unreachable("down", alpha(0)));
        assert!(!l.is_unreachable("down", beta(30)));
        assert!(l.record_attempt(&id(2), "down", beta(30)));
    }

    #[test]
    fn guesses_keyed_by_period() {
        let mut l = AttemptLedger::default();
        let g = DocumentIdentifier::guessed(DocType::ConsensusNs, "", Timestamp::from_unix(60));
        let h = DocumentIdentifier::guessed(DocType::ConsensusNs, "", Timestamp::from_unix(120));
        assert!(l.record_attempt(&g, "a", alpha(0)));
        assert!(!l.record_attempt(&g, "a", alpha(0)));
        assert!(l.record_attempt(&h, "a", alpha(0)));
    }

    proptest! {
        #[test]
        fn never_true_twice_within_a_phase(ops in proptest::collection::vec((0u8..5, 0u8..3), 0..200)) {
            let mut l = AttemptLedger::default();
            let mut seen = HashSet::new();
            for (d, s) in ops {
                let server = format!("s{s}");
                let allowed = l.record_attempt(&id(d), &server, alpha(0));
                prop_assert_eq!(allowed, seen.insert((d, s)));
            }
        }
    }
}
