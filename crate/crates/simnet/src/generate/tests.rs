use std::collections::HashSet;

use dircollect::docmodel::RawDocument;
use proptest::prelude::*;
use dircollect::docparse as refs;
use dircollect::docparse;

use super::*;
use crate::scenario::Fault;

fn scenario() -> SimScenario {
    SimScenario { n_relays: 6, ..SimScenario::default() }
}

#[test]
fn generation_is_deterministic() {
    let s = scenario();
    assert_eq!(generate_period(&s, 1), generate_period(&s, 1));
    assert_ne!(generate_period(&s, 1).votes, generate_period(&s, 2).votes);
    let other = SimScenario { seed: 2, ..scenario() };
    assert_ne!(identities(&s), identities(&other));
}

#[test]
fn census_per_period() {
    let p = generate_period(&scenario(), 0);
    let c = p.census();
    assert_eq!(c[&DocType::Vote], 9);
    assert_eq!(c[&DocType::ConsensusNs], 1);
    assert_eq!(c[&DocType::ConsensusMicrodesc], 1);
    assert_eq!(c[&DocType::DetachedSignature], 9);
    assert_eq!(c[&DocType::BandwidthList], 9);
    assert_eq!(c[&DocType::ServerDescriptor], 6);
    assert_eq!(c[&DocType::ExtraInfoDescriptor], 6);
    assert_eq!(c[&DocType::Microdescriptor], 6);
}

#[test]
fn documents_parse_and_references_close() {
    let corpus = Corpus::generate(&scenario());
    let mut keys = HashSet::new();
    for p in &corpus.periods {
        for d in p.all() {
            for k in d.digests.keys() {
                assert!(keys.insert((d.doctype, k)), "duplicate {}", d.doctype);
            }
        }
    }
    for p in &corpus.periods {
        for d in p.all() {
            assert_eq!(docparse::detect_type(&d.body).unwrap(), d.doctype);
            let raw = RawDocument::new(d.doctype, d.body.clone(), "sim", p.valid_after).unwrap();
            let parsed = docparse::parse(&raw).unwrap();
            let r = refs::extract_references(&parsed);
            assert_eq!(r.skipped, 0, "{}", d.doctype);
            for id in r.ids {
                let found = id.digests.keys().iter().any(|k| keys.contains(&(id.doctype, *k)));
                assert!(found, "{} refers to missing {}", d.doctype, id);
            }
            if matches!(d.doctype, DocType::Vote | DocType::ConsensusNs | DocType::ConsensusMicrodesc) {
                assert_eq!(refs::extract_timings(&parsed).unwrap(), corpus.scenario.timings(p.index));
            }
        }
    }
}

#[test]
fn detached_signatures_name_their_signer() {
    let s = scenario();
    let ids = identities(&s);
    let p = generate_period(&s, 0);
    for (a, d) in ids.authorities.iter().zip(&p.signatures) {
        let text = std::str::from_utf8(&d.body).unwrap();
        assert!(text.contains(&format!("directory-signature {} {}", a.fingerprint, a.signing_key)));
        assert!(text.contains(p.consensus_ns[0].digests.sha1_hex().unwrap()));
    }
}

#[test]
fn split_consensus_has_two_signer_sets() {
    let s = SimScenario { split_consensus: true, ..scenario() };
    let ids = identities(&s);
    let p = generate_period(&s, 0);
    assert_eq!(p.consensus_ns.len(), 2);
    assert_ne!(p.consensus_ns[0].key(), p.consensus_ns[1].key());
    let b = std::str::from_utf8(&p.consensus_ns[1].body).unwrap();
    assert_eq!(b.matches("directory-signature ").count(), 4);
    assert!(b.contains(&ids.authorities[8].fingerprint));
    assert!(!b.contains(&format!("directory-signature sha256 {}", ids.authorities[0].fingerprint)));
    assert_eq!(p.consensus(DocType::ConsensusNs, 8), &p.consensus_ns[1]);
}

#[test]
fn published_set_of_default_run() {
    let s = SimScenario::default();
    let published = Corpus::generate(&s).published();
    let count = |t| published.iter().filter(|p| p.doctype == t).count();
    assert_eq!(count(DocType::Vote), 27);
    assert_eq!(count(DocType::ConsensusNs), 3);
    assert_eq!(count(DocType::ConsensusMicrodesc), 3);
    assert_eq!(count(DocType::DetachedSignature), 18);
    assert_eq!(count(DocType::BandwidthList), 27);
    assert_eq!(count(DocType::ServerDescriptor), 120);
    assert_eq!(published.len(), 438);
}

#[test]
fn down_authorities_shrink_the_published_set() {
    let faults = (0..4).map(|authority| Fault { authority, down_from: None, down_until: None }).collect();
    let s = SimScenario { faults, ..SimScenario::default() };
    let published = Corpus::generate(&s).published();
    let count = |t| published.iter().filter(|p| p.doctype == t).count();
    assert_eq!(count(DocType::Vote), 15);
    assert_eq!(count(DocType::ServerDescriptor), 120);
    assert!(published.iter().all(|p| p.servers.iter().all(|&a| a >= 4)));
}

#[test]
fn torperf_files_identify_their_day() {
    let s = scenario();
    let day = s.onionperf.first_day;
    let body = torperf_file(&s, "op-hk", 51_200, day);
    assert_eq!(body, torperf_file(&s, "op-hk", 51_200, day));
    assert_eq!(body.lines().count(), s.onionperf.measurements_per_file);
    assert_eq!(docparse::detect_type(body.as_bytes()).unwrap(), DocType::TorperfResults);
    let raw = RawDocument::new(DocType::TorperfResults, body, "sim", day).unwrap();
    let parsed = docparse::parse(&raw).unwrap();
    assert_eq!(refs::document_subject(&parsed), "op-hk-51200");
    assert_eq!(refs::document_datetime(&parsed), Some(day));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_vote_reference_resolves(seed in any::<u64>(), relays in 1usize..6, authorities in 1usize..5, split in any::<bool>()) {
        let s = SimScenario { seed, n_relays: relays, n_authorities: authorities.max(2), split_consensus: split, ..SimScenario::default() };
        let p = generate_period(&s, 1);
        let servers: HashSet<_> = p.servers.iter().map(SimDoc::key).collect();
        let micros: HashSet<_> = p.micros.iter().map(SimDoc::key).collect();
        for v in p.votes.iter().chain(&p.consensus_ns).chain(&p.consensus_md) {
            let raw = RawDocument::new(v.doctype, v.body.clone(), "sim", p.valid_after).unwrap();
            let r = refs::extract_references(&docparse::parse(&raw).unwrap());
            prop_assert_eq!(r.skipped, 0);
            for id in r.ids {
                let key = id.digests.primary_key().unwrap();
                match id.doctype {
                    DocType::ServerDescriptor => prop_assert!(servers.contains(&key)),
                    DocType::Microdescriptor => prop_assert!(micros.contains(&key)),
                    DocType::BandwidthList => prop_assert!(p.bandwidth.iter().any(|b| b.digests.intersects(&id.digests))),
                    other => prop_assert!(false, "unexpected reference to {}", other),
                }
            }
        }
        prop_assert_eq!(p.consensus_ns.len(), if split { 2 } else { 1 });
    }
}
