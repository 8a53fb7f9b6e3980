use std::collections::BTreeMap;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD_NO_PAD;
use base64::Engine;

use super::*;

fn ts(s: &str) -> Timestamp {
    Timestamp::parse(s).unwrap()
}

fn server_desc(i: u32) -> String {
    format!(
        "router relay{i} 10.0.{}.{} 9001 0 0\npublished 2018-11-15 18:00:00\n\
         fingerprint {:040X}\nbandwidth 1 2 3\n\
         router-signature\n-----BEGIN SIGNATURE-----\nAAAA\n-----END SIGNATURE-----\n",
        i / 256,
        i % 256,
        i
    )
}

fn raw(t: DocType, body: &str) -> RawDocument {
    RawDocument::new(t, body.as_bytes().to_vec(), "test", ts("2018-11-15 19:05:00")).unwrap()
}

fn consensus(sd_digests: &[&DigestSet]) -> String {
    let mut s = String::from(
        "network-status-version 3\nvote-status consensus\nvalid-after 2018-11-15 19:00:00\n\
         fresh-until 2018-11-15 20:00:00\nvalid-until 2018-11-15 22:00:00\nvoting-delay 300 300\n",
    );
    for (n, d) in sd_digests.iter().enumerate() {
        let sha1 = d.sha1_bytes().unwrap();
        s.push_str(&format!(
            "r r{n} {} {} 2018-11-15 18:00:00 10.0.0.1 9001 0\n",
            STANDARD_NO_PAD.encode([n as u8; 20]),
            STANDARD_NO_PAD.encode(sha1)
        ));
    }
    s.push_str("directory-footer\ndirectory-signature A B\n-----BEGIN SIGNATURE-----\nAA\n-----END SIGNATURE-----\n");
    s
}

fn open() -> (tempfile::TempDir, Archive) {
    let dir = tempfile::tempdir().unwrap();
    let a = Archive::open(dir.path()).unwrap();
    (dir, a)
}

#[test]
fn duplicate_store_is_noop() {
    let (dir, a) = open();
    let c = raw(DocType::ConsensusNs, &consensus(&[]));
    let e1 = a.store(&c).unwrap();
    let e2 = a.store(&c).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(a.len(), 1);
    let files: Vec<_> = walk_files(&dir.path().join("archive"));
    assert_eq!(files.len(), 1);
    let manifest = std::fs::read_to_string(dir.path().join("meta/2018-11.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

fn walk_files(p: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    if p.is_dir() {
        for e in std::fs::read_dir(p).unwrap().flatten() {
            out.extend(walk_files(&e.path()));
        }
    } else {
        out.push(p.to_path_buf());
    }
    out
}

#[test]
fn malformed_blob_goes_to_unrecognized() {
    let (_dir, a) = open();
    let e = a.store_bytes(None, Bytes::from_static(b"zzzz garbage"), "t", ts("2018-11-15 19:00:00")).unwrap();
    assert!(e.path.starts_with("archive/unrecognized/2018/11/"));
    assert_eq!(e.doctype, None);
    let back = a.load_unrecognized(&e.file_sha256).unwrap().unwrap();
    assert_eq!(&back[..], b"zzzz garbage");
    // a server descriptor without its signature line cannot be digested
    let e = a
        .store_bytes(Some(DocType::ServerDescriptor), Bytes::from_static(b"router x\n"), "t", Timestamp::EPOCH)
        .unwrap();
    assert_eq!(e.doctype, None);
}

#[test]
fn server_descriptor_layout_and_size() {
    let (_dir, a) = open();
    let r = raw(DocType::ServerDescriptor, &server_desc(1));
    let e = a.store(&r).unwrap();
    let d = r.digests.sha1_hex().unwrap();
    assert_eq!(e.path, format!("archive/server-descriptor/2018/11/{}/{}/{d}", &d[..1], &d[1..2]));
    assert_eq!(e.size_bytes as usize, "@type server-descriptor 1.0\n".len() + r.body.len());
    assert_eq!(e.subject, format!("{:040X}", 1));
}

#[test]
fn round_trip_every_type() {
    let (_dir, a) = open();
    let docs = vec![
        raw(DocType::ServerDescriptor, &server_desc(7)),
        raw(DocType::ConsensusNs, &consensus(&[])),
        raw(DocType::Microdescriptor, "onion-key\nntor-onion-key AAAA\n").with_context_datetime(Some(ts("2018-11-15 19:00:00"))),
        raw(DocType::BandwidthList, "1542308400\nversion=1.4.0\n"),
        raw(DocType::TorperfResults, "FILESIZE=51200 SOURCE=op-ab START=1542240003.25\n"),
        raw(
            DocType::ExtraInfoDescriptor,
            "extra-info r 0000000000000000000000000000000000000001\npublished 2018-11-15 18:00:00\nrouter-signature\n",
        ),
    ];
    for d in &docs {
        a.store(d).unwrap();
        let id = docparse::identify(d);
        let back = a.load(&id).unwrap().unwrap();
        assert_eq!(back.body, d.body, "{:?}", d.doctype);
        assert_eq!(back.digests, d.digests);
    }
    let unknown = DocumentIdentifier::new(DocType::ServerDescriptor, "", Timestamp::EPOCH, DigestSet::from_sha1_bytes(&[9; 20]));
    assert!(a.load(&unknown).unwrap().is_none());
}

#[test]
fn bit_flip_detected_inside_and_outside_signed_range() {
    for offset_from_end in [3usize, 60] {
        let (dir, a) = open();
        let r = raw(DocType::ServerDescriptor, &server_desc(2));
        let e = a.store(&r).unwrap();
        let p = dir.path().join(&e.path);
        let mut bytes = std::fs::read(&p).unwrap();
        let i = bytes.len() - offset_from_end;
        bytes[i] ^= 0x01;
        std::fs::write(&p, bytes).unwrap();
        let err = a.load(&docparse::identify(&r)).unwrap_err();
        assert!(matches!(err, ArchiveError::CorruptEntry(_)));
        let rep = a.verify_integrity(None, 0.005);
        assert_eq!(rep.corrupt, vec![e.path.clone()]);
    }
}

#[test]
fn reopen_restores_index() {
    let dir = tempfile::tempdir().unwrap();
    let r = raw(DocType::ServerDescriptor, &server_desc(3));
    let status = BTreeMap::from([("bootstrap".to_string(), ts("2018-11-15 19:10:00"))]);
    let first = {
        let a = Archive::open(dir.path()).unwrap();
        a.store(&r).unwrap();
        a.build_index(&status).to_json()
    };
    let a = Archive::open(dir.path()).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a.build_index(&status).to_json(), first);
    assert_eq!(a.load(&docparse::identify(&r)).unwrap().unwrap().body, r.body);
}

#[test]
fn interrupted_store_leaves_nothing_visible() {
    let dir = tempfile::tempdir().unwrap();
    {
        let a = Archive::open(dir.path()).unwrap();
        a.store(&raw(DocType::ServerDescriptor, &server_desc(4))).unwrap();
    }
    // a staging file that never got renamed, and a manifest line whose
    // file never appeared
    std::fs::write(dir.path().join("tmp/999-0"), b"router half").unwrap();
    let ghost = ArchiveEntry {
        path: "archive/server-descriptor/2018/11/0/0/00".into(),
        doctype: Some(DocType::ServerDescriptor),
        subject: String::new(),
        digests: DigestSet::from_sha1_bytes(&[0; 20]),
        size_bytes: 1,
        stored_at: Timestamp::EPOCH,
        doc_datetime: ts("2018-11-15 00:00:00"),
        file_sha256: String::new(),
    };
    let mut m = std::fs::read_to_string(dir.path().join("meta/2018-11.jsonl")).unwrap();
    m.push_str(&serde_json::to_string(&ghost).unwrap());
    m.push('\n');
    std::fs::write(dir.path().join("meta/2018-11.jsonl"), m).unwrap();
    let a = Archive::open(dir.path()).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a.build_index(&BTreeMap::new()).entries.len(), 1);
    assert!(std::fs::read_dir(dir.path().join("tmp")).unwrap().next().is_none());
}

#[test]
fn recent_snapshot_concatenates_and_prunes() {
    let (dir, a) = open();
    let run = ts("2018-11-15 19:10:00");
    assert!(a.recent_snapshot(run).unwrap().is_empty());
    for i in 0..25 {
        a.store(&raw(DocType::ServerDescriptor, &server_desc(100 + i))).unwrap();
    }
    let written = a.recent_snapshot(run).unwrap();
    assert_eq!(written.len(), 1);
    assert_eq!(written[0], dir.path().join("recent/server-descriptor/2018-11-15-19-10-00-server-descriptor"));
    let text = std::fs::read_to_string(&written[0]).unwrap();
    assert_eq!(text.matches("@type server-descriptor 1.0\n").count(), 25);
    // the next run has nothing new
    assert!(a.recent_snapshot(run + 60).unwrap().is_empty());
    assert_eq!(a.prune_recent(run + 72 * 3600).unwrap(), 0);
    assert_eq!(a.prune_recent(run + 73 * 3600).unwrap(), 1);
    assert!(!written[0].exists());
}

#[test]
fn index_sorted_deterministic_and_formatted() {
    let (dir, a) = open();
    let empty = a.build_index(&BTreeMap::new());
    assert!(empty.entries.is_empty());
    assert_eq!(empty.generated_at, Timestamp::EPOCH);
    a.store(&raw(DocType::ServerDescriptor, &server_desc(9))).unwrap();
    a.store(&raw(DocType::ConsensusNs, &consensus(&[]))).unwrap();
    a.store(&raw(DocType::ServerDescriptor, &server_desc(8))).unwrap();
    let status = BTreeMap::from([("eager-votes".to_string(), ts("2018-11-15 19:52:30"))]);
    let p = a.write_index(&status).unwrap();
    let first = std::fs::read(&p).unwrap();
    a.write_index(&status).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
    let idx: IndexFile = serde_json::from_slice(&first).unwrap();
    assert_eq!(idx.entries.len(), 3);
    assert_eq!(idx.entries[0].doc_type, "network-status-consensus-3");
    let sds: Vec<_> = idx.entries[1..].iter().map(|e| e.sha1.clone().unwrap()).collect();
    let mut sorted = sds.clone();
    sorted.sort();
    assert_eq!(sds, sorted);
    assert_eq!(idx.generated_at, ts("2018-11-15 19:52:30"));
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("{\n  \"generated_at\": \"2018-11-15 19:52:30\",\n  \"task_status\""));
    let keys: Vec<usize> = ["\"path\"", "\"type\"", "\"sha1\"", "\"sha256\"", "\"size\"", "\"stored_at\"", "\"datetime\""]
        .iter()
        .map(|k| text.find(k).unwrap())
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    drop(dir);
}

#[test]
fn verify_counts_missing_references() {
    let (_dir, a) = open();
    let sds: Vec<RawDocument> = (0..4).map(|i| raw(DocType::ServerDescriptor, &server_desc(200 + i))).collect();
    let c = raw(DocType::ConsensusNs, &consensus(&sds.iter().map(|r| &r.digests).collect::<Vec<_>>()));
    a.store(&c).unwrap();
    for r in &sds {
        a.store(r).unwrap();
    }
    let rep = a.verify_integrity(None, 0.005);
    assert_eq!((rep.corrupt.len(), rep.missing, rep.referenced, rep.warn), (0, 0, 4, false));

    let (_dir2, b) = open();
    b.store(&c).unwrap();
    for r in &sds[1..] {
        b.store(r).unwrap();
    }
    let rep = b.verify_integrity(None, 0.005);
    assert_eq!(rep.missing, 1);
    assert!(rep.warn);
    let rep = b.verify_integrity(None, 0.5);
    assert!(!rep.warn);
    let window = Some((ts("2018-11-16 00:00:00"), ts("2018-11-17 00:00:00")));
    assert_eq!(b.verify_integrity(window, 0.005).checked, 0);
}

#[test]
fn threshold_rule() {
    // 1 missing of 100 referenced: 1% against 0.5%
    let (_dir, a) = open();
    let sds: Vec<RawDocument> = (0..100).map(|i| raw(DocType::ServerDescriptor, &server_desc(1000 + i))).collect();
    a.store(&raw(DocType::ConsensusNs, &consensus(&sds.iter().map(|r| &r.digests).collect::<Vec<_>>())))
        .unwrap();
    for r in &sds[1..] {
        a.store(r).unwrap();
    }
    let rep = a.verify_integrity(None, 0.005);
    assert_eq!(rep.referenced, 100);
    assert!((rep.missing_ratio - 0.01).abs() < 1e-9);
    assert!(rep.warn);
}

#[test]
fn import_annotated_tree_and_cached_descriptors() {
    let src = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(src.path().join("a/b")).unwrap();
    for i in 0..3 {
        let r = raw(DocType::ServerDescriptor, &server_desc(300 + i));
        std::fs::write(src.path().join(format!("a/b/sd{i}")), docparse::annotate(&r)).unwrap();
    }
    let mut cached = String::new();
    for i in 0..10 {
        cached.push_str("@downloaded-at 2018-11-15 18:00:00\n@source \"1.2.3.4\"\n");
        cached.push_str(&server_desc(400 + i));
    }
    std::fs::write(src.path().join("cached-descriptors"), cached).unwrap();
    let (_dir, a) = open();
    let rep = a.import_path(src.path(), ts("2018-11-15 20:00:00")).unwrap();
    assert_eq!(rep.files, 4);
    assert_eq!(rep.documents.get("server-descriptor"), Some(&13));
    assert_eq!(rep.newly_stored, 13);
    assert!(rep.errors.is_empty());
    let again = a.import_path(src.path(), ts("2018-11-15 20:00:00")).unwrap();
    assert_eq!(again.newly_stored, 0);

    let empty = tempfile::tempdir().unwrap();
    let rep = a.import_path(empty.path(), Timestamp::EPOCH).unwrap();
    assert_eq!((rep.files, rep.total()), (0, 0));
    assert!(a.import_path(&empty.path().join("nope"), Timestamp::EPOCH).is_err());
}

#[test]
fn current_consensus_tie_break() {
    let (_dir, a) = open();
    let x = raw(DocType::ConsensusNs, &consensus(&[]));
    let y = raw(DocType::ConsensusNs, &consensus(&[]).replace("voting-delay 300 300\n", "voting-delay 300 300\nknown-flags Running\n"));
    a.store(&x).unwrap();
    a.store(&y).unwrap();
    let want = if x.digests.sha256_hex() > y.digests.sha256_hex() { &x } else { &y };
    let got = a.current_consensus(DocType::ConsensusNs, ts("2018-11-15 19:30:00")).unwrap();
    assert_eq!(got.body, want.body);
    assert!(a.current_consensus(DocType::ConsensusNs, ts("2018-11-15 22:00:00")).is_none());
    assert!(a.current_consensus(DocType::ConsensusNs, ts("2018-11-15 18:59:59")).is_none());
}

#[test]
fn open_files_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let a = Arc::new(Archive::open_with_limit(dir.path(), 8).unwrap());
    let threads: Vec<_> = (0..64u32)
        .map(|t| {
            let a = a.clone();
            std::thread::spawn(move || {
                for i in 0..10 {
                    a.store(&raw(DocType::ServerDescriptor, &server_desc(10_000 + t * 10 + i))).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(a.len(), 640);
    assert!(a.gate().high_water() <= 8);
    assert_eq!(a.gate().open(), 0);
}
