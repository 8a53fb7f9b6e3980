use std::path::Path;

use dircollect::docmodel::DocType;
use dircollect::fetcher::paths;
use dircollect_simnet::generate::Corpus;
use dircollect_simnet::harness::{relay_plugins, SimRun};
use dircollect_simnet::scenario::SimScenario;
use dircollect_simnet::server::ABORTED;

fn load(name: &str) -> SimScenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    SimScenario::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bundled_scenarios_load() {
    assert_eq!(load("closure.toml"), SimScenario::default());
    assert_eq!(load("faults.toml").faults.len(), 4);
    assert!(load("split.toml").split_consensus);
    assert_eq!(load("greedy.toml").http_errors[0].status, 503);
    assert_eq!(load("onionperf.toml").onionperf.missing.len(), 1);
}

#[tokio::test]
async fn small_network_closes() {
    let dir = tempfile::tempdir().unwrap();
    let s = SimScenario { n_relays: 5, n_authorities: 3, ..SimScenario::default() };
    let run = SimRun::start(&s, dir.path(), &relay_plugins()).await.unwrap();
    run.run().await.unwrap();
    let archive = run.collector.archive();
    let published = Corpus::generate(&s).published();
    assert!(published.iter().all(|p| archive.find(p.doctype, &p.digests).is_some()));
    assert_eq!(archive.len(), published.len());
    assert!(run.net.requests().iter().all(|r| r.status == 200 || r.status == 404));
}

#[tokio::test]
async fn late_recovery_is_picked_up() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = load("faults.toml");
    s.n_relays = 4;
    let back = s.valid_after(1);
    for f in &mut s.faults {
        f.down_until = Some(back);
    }
    let run = SimRun::start(&s, dir.path(), &relay_plugins()).await.unwrap();
    run.run().await.unwrap();
    let p2 = run.net.corpus().period(2).unwrap();
    for v in &p2.votes {
        assert!(run.collector.archive().find(DocType::Vote, &v.digests).is_some());
    }
    let log = run.net.requests();
    assert!(log.iter().any(|r| r.status == ABORTED));
    assert!(log.iter().any(|r| r.path == paths::NEXT_AUTHORITY && r.server == run.net.authority_id(0) && r.status == 200));
}
