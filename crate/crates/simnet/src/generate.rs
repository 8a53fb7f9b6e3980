//! Deterministic synthetic directory documents.
//!
//! Every period gets one vote, bandwidth list and detached signature per
//! authority, one consensus per flavor (two of each when split) and fresh
//! server, extra-info and microdescriptors for every relay. All cross
//! references are real digests of the generated bodies; signatures are
//! random base64.

use std::collections::{BTreeMap, HashSet};

use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD};
use base64::Engine;
use bytes::Bytes;
use dircollect::docmodel::{DigestKey, DigestSet, DocType, Timestamp};
use dircollect::docparse;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::{SimScenario, Window};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimDoc {
    pub doctype: DocType,
    pub body: Bytes,
    pub digests: DigestSet,
}

impl SimDoc {
    fn new(doctype: DocType, body: String) -> SimDoc {
        let digests = docparse::compute_digests(body.as_bytes(), doctype).expect("generated document has a digest");
        SimDoc { doctype, body: Bytes::from(body), digests }
    }

    pub fn key(&self) -> DigestKey {
        self.digests.primary_key().expect("generated document has a digest")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorityId {
    pub nickname: String,
    pub fingerprint: String,
    pub signing_key: String,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayId {
    pub nickname: String,
    pub identity: [u8; 20],
    pub fingerprint: String,
    pub address: String,
    pub ed25519: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identities {
    pub authorities: Vec<AuthorityId>,
    pub relays: Vec<RelayId>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect()
}

fn random<const N: usize>(rng: &mut ChaCha8Rng) -> [u8; N] {
    let mut b = [0u8; N];
    rng.fill_bytes(&mut b);
    b
}

/// A PEM-style object with `n` random bytes of content.
fn object(rng: &mut ChaCha8Rng, tag: &str, n: usize) -> String {
    let mut b = vec![0u8; n];
    rng.fill_bytes(&mut b);
    let enc = STANDARD.encode(b);
    let mut s = format!("-----BEGIN {tag}-----\n");
    for chunk in enc.as_bytes().chunks(64) {
        s.push_str(std::str::from_utf8(chunk).expect("base64 is ascii"));
        s.push('\n');
    }
    s.push_str(&format!("-----END {tag}-----\n"));
    s
}

pub fn identities(s: &SimScenario) -> Identities {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let authorities = (0..s.n_authorities)
        .map(|i| AuthorityId {
            nickname: format!("simauth{i}"),
            fingerprint: hex(&random::<20>(&mut rng)),
            signing_key: hex(&random::<20>(&mut rng)),
            address: format!("10.9.{}.{}", i / 250, i % 250 + 1),
        })
        .collect();
    let relays = (0..s.n_relays)
        .map(|i| {
            let identity = random::<20>(&mut rng);
            RelayId {
                nickname: format!("simrelay{i}"),
                identity,
                fingerprint: hex(&identity),
                address: format!("10.{}.{}.{}", 10 + i / 62_500, (i / 250) % 250, i % 250 + 1),
                ed25519: random::<32>(&mut rng),
            }
        })
        .collect();
    Identities { authorities, relays }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodDocs {
    pub index: i64,
    pub valid_after: Timestamp,
    pub servers: Vec<SimDoc>,
    pub extras: Vec<SimDoc>,
    pub micros: Vec<SimDoc>,
    /// Indexed by authority.
    pub bandwidth: Vec<SimDoc>,
    pub votes: Vec<SimDoc>,
    pub signatures: Vec<SimDoc>,
    /// Indexed by variant.
    pub consensus_ns: Vec<SimDoc>,
    pub consensus_md: Vec<SimDoc>,
    /// Variant each authority signs and serves.
    pub variant_of: Vec<usize>,
}

impl PeriodDocs {
    pub fn all(&self) -> impl Iterator<Item = &SimDoc> {
        self.votes
            .iter()
            .chain(&self.consensus_ns)
            .chain(&self.consensus_md)
            .chain(&self.signatures)
            .chain(&self.bandwidth)
            .chain(&self.servers)
            .chain(&self.extras)
            .chain(&self.micros)
    }

    pub fn census(&self) -> BTreeMap<DocType, usize> {
        let mut m = BTreeMap::new();
        for d in self.all() {
            *m.entry(d.doctype).or_insert(0) += 1;
        }
        m
    }

    pub fn consensus(&self, flavor: DocType, authority: usize) -> &SimDoc {
        let v = self.variant_of[authority];
        match flavor {
            DocType::ConsensusMicrodesc => &self.consensus_md[v],
            _ => &self.consensus_ns[v],
        }
    }
}

fn ts_pair(t: Timestamp) -> String {
    t.to_string()
}

fn fingerprint_groups(fp: &str) -> String {
    fp.as_bytes().chunks(4).map(|c| std::str::from_utf8(c).unwrap()).collect::<Vec<_>>().join(" ")
}

struct RelayPeriod {
    published: Timestamp,
    bandwidth: u64,
    server: SimDoc,
    extra: SimDoc,
    micro: SimDoc,
}

fn relay_docs(rng: &mut ChaCha8Rng, r: &RelayId, published: Timestamp) -> RelayPeriod {
    let bandwidth: u64 = rng.random_range(20_000..5_000_000);
    let day = published.format("%Y-%m-%d %H:%M:%S");
    let history: Vec<String> = (0..8).map(|_| rng.random_range(0..9_000_000u64).to_string()).collect();
    let mut extra = format!(
        "extra-info {} {}\npublished {day}\nwrite-history {day} (900 s) {}\nread-history {day} (900 s) {}\n\
         geoip-db-digest {}\ngeoip6-db-digest {}\n",
        r.nickname,
        r.fingerprint,
        history[..4].join(","),
        history[4..].join(","),
        hex(&random::<20>(rng)),
        hex(&random::<20>(rng)),
    );
    extra.push_str(&format!("router-sig-ed25519 {}\nrouter-signature\n", STANDARD_NO_PAD.encode(random::<64>(rng))));
    extra.push_str(&object(rng, "SIGNATURE", 128));
    let extra = SimDoc::new(DocType::ExtraInfoDescriptor, extra);

    let ntor = STANDARD_NO_PAD.encode(random::<32>(rng));
    let onion_key = object(rng, "RSA PUBLIC KEY", 140);
    let mut server = format!(
        "router {} {} 9001 0 0\nidentity-ed25519\n{}master-key-ed25519 {}\nplatform Tor 0.3.4.9 on Linux\n\
         proto Cons=1-2 Desc=1-2 DirCache=1-2 HSDir=1-2 HSIntro=3-4 HSRend=1-2 Link=1-5 LinkAuth=1,3 Microdesc=1-2 Relay=1-2\n\
         published {day}\nfingerprint {}\nuptime {}\nbandwidth {bandwidth} {} {bandwidth}\nextra-info-digest {} {}\n\
         onion-key\n{onion_key}signing-key\n{}onion-key-crosscert\n{}ntor-onion-key {ntor}\nreject *:*\n\
         tunnelled-dir-server\nrouter-sig-ed25519 {}\nrouter-signature\n",
        r.nickname,
        r.address,
        object(rng, "ED25519 CERT", 140),
        STANDARD_NO_PAD.encode(r.ed25519),
        fingerprint_groups(&r.fingerprint),
        rng.random_range(0..10_000_000u64),
        bandwidth * 2,
        extra.digests.sha1_hex().unwrap(),
        extra.digests.sha256_base64().unwrap(),
        object(rng, "RSA PUBLIC KEY", 140),
        object(rng, "CROSSCERT", 128),
        STANDARD_NO_PAD.encode(random::<64>(rng)),
    );
    server.push_str(&object(rng, "SIGNATURE", 128));
    let server = SimDoc::new(DocType::ServerDescriptor, server);

    let micro = format!("onion-key\n{onion_key}ntor-onion-key {ntor}\nid ed25519 {}\n", STANDARD_NO_PAD.encode(r.ed25519));
    let micro = SimDoc::new(DocType::Microdescriptor, micro);
    RelayPeriod { published, bandwidth, server, extra, micro }
}

/// Status line, `extra` lines, then the timing lines.
fn header(s: &SimScenario, k: i64, microdesc: bool, status: &str, extra: &str) -> String {
    let t = s.timings(k);
    format!(
        "network-status-version 3{}\nvote-status {status}\n{extra}",
        if microdesc { " microdesc" } else { "" }
    ) + &format!(
        "valid-after {}\nfresh-until {}\nvalid-until {}\nvoting-delay {} {}\n",
        ts_pair(t.valid_after),
        ts_pair(t.fresh_until),
        ts_pair(t.valid_until),
        t.vote_seconds,
        t.dist_seconds
    )
}

const VERSIONS: &str = "client-versions 0.2.9.16,0.3.3.10,0.3.4.9\nserver-versions 0.2.9.16,0.3.3.10,0.3.4.9\n\
known-flags Exit Fast Guard Running Stable V2Dir Valid\n\
recommended-client-protocols Cons=1-2 Desc=1-2 DirCache=1 HSDir=1 HSIntro=3 HSRend=1 Link=4 Microdesc=1-2 Relay=2\n";

const PROTO: &str = "pr Cons=1-2 Desc=1-2 DirCache=1-2 HSDir=1-2 HSIntro=3-4 HSRend=1-2 Link=1-5 LinkAuth=1,3 Microdesc=1-2 Relay=1-2\n";

/// Documents of period `k`.
pub fn generate_period(s: &SimScenario, k: i64) -> PeriodDocs {
    generate_with(s, &identities(s), k)
}

fn generate_with(s: &SimScenario, ids: &Identities, k: i64) -> PeriodDocs {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).wrapping_add(1));
    let va = s.valid_after(k);
    let published = va - s.lead() - 5;
    let relays: Vec<RelayPeriod> = ids.relays.iter().map(|r| relay_docs(&mut rng, r, published)).collect();

    let bw_time = va - s.lead();
    let bandwidth: Vec<SimDoc> = ids
        .authorities
        .iter()
        .map(|_| {
            let iso = bw_time.format("%Y-%m-%dT%H:%M:%S");
            let mut b = format!(
                "{}\nversion=1.4.0\nsoftware=sbws\nsoftware_version=1.0.2\nlatest_bandwidth={iso}\nfile_created={iso}\n=====\n",
                bw_time.unix()
            );
            for (r, rp) in ids.relays.iter().zip(&relays) {
                let measured = rp.bandwidth / 1000 + rng.random_range(0..500);
                b.push_str(&format!(
                    "bw={measured} node_id=${} nick={} measured_at={} success=4 error_circ=0\n",
                    r.fingerprint,
                    r.nickname,
                    bw_time.unix() - rng.random_range(60..3600)
                ));
            }
            SimDoc::new(DocType::BandwidthList, b)
        })
        .collect();

    let votes: Vec<SimDoc> = ids
        .authorities
        .iter()
        .zip(&bandwidth)
        .map(|(a, bw)| {
            let mut v = header(s, k, false, "vote", &format!("consensus-methods 25 26 27 28\npublished {}\n", ts_pair(va - s.lead())));
            v.push_str(VERSIONS);
            v.push_str("flag-thresholds stable-uptime=693369 fast-speed=102400 guard-wfu=98.000% guard-tk=691200\n");
            v.push_str(&format!(
                "bandwidth-file-headers timestamp={}\nbandwidth-file-digest sha256={}\n",
                bw_time.unix(),
                STANDARD_NO_PAD.encode(bw.digests.sha256_bytes().unwrap())
            ));
            v.push_str(&format!(
                "dir-source {} {} {} {} 80 443\ncontact sim operator {}\ndir-key-certificate-version 3\nfingerprint {}\n\
                 dir-key-published {}\ndir-key-expires {}\ndir-identity-key\n{}dir-signing-key\n{}dir-key-crosscert\n{}\
                 dir-key-certification\n{}",
                a.nickname,
                a.fingerprint,
                a.address,
                a.address,
                a.nickname,
                a.fingerprint,
                ts_pair(s.epoch - 86_400 * 30),
                ts_pair(s.epoch + 86_400 * 300),
                object(&mut rng, "RSA PUBLIC KEY", 270),
                object(&mut rng, "RSA PUBLIC KEY", 140),
                object(&mut rng, "ID SIGNATURE", 128),
                object(&mut rng, "SIGNATURE", 256),
            ));
            for (r, rp) in ids.relays.iter().zip(&relays) {
                v.push_str(&format!(
                    "r {} {} {} {} {} 9001 0\nm 25,26,27,28 sha256={}\ns Fast Running Stable V2Dir Valid\nv Tor 0.3.4.9\n{PROTO}\
                     w Bandwidth={} Measured={}\np reject 1-65535\nid ed25519 {}\n",
                    r.nickname,
                    STANDARD_NO_PAD.encode(r.identity),
                    STANDARD_NO_PAD.encode(rp.server.digests.sha1_bytes().unwrap()),
                    ts_pair(rp.published),
                    r.address,
                    rp.micro.digests.sha256_base64().unwrap(),
                    rp.bandwidth / 1000,
                    rp.bandwidth / 1000 + rng.random_range(0..500),
                    STANDARD_NO_PAD.encode(r.ed25519),
                ));
            }
            v.push_str(&format!("directory-footer\ndirectory-signature {} {}\n", a.fingerprint, a.signing_key));
            v.push_str(&object(&mut rng, "SIGNATURE", 256));
            SimDoc::new(DocType::Vote, v)
        })
        .collect();

    let variant_of: Vec<usize> = (0..ids.authorities.len()).map(|a| s.variant_of(a)).collect();
    let mut consensus_ns = Vec::new();
    let mut consensus_md = Vec::new();
    for variant in 0..s.variants() {
        let signers: Vec<&AuthorityId> =
            ids.authorities.iter().enumerate().filter(|(i, _)| variant_of[*i] == variant).map(|(_, a)| a).collect();
        for microdesc in [false, true] {
            let method = 28 - variant;
            let mut c = header(s, k, microdesc, "consensus", &format!("consensus-method {method}\n"));
            c.push_str(VERSIONS);
            for (a, vote) in ids.authorities.iter().zip(&votes) {
                c.push_str(&format!(
                    "dir-source {} {} {} {} 80 443\ncontact sim operator {}\nvote-digest {}\n",
                    a.nickname,
                    a.fingerprint,
                    a.address,
                    a.address,
                    a.nickname,
                    vote.digests.sha1_hex().unwrap()
                ));
            }
            for (r, rp) in ids.relays.iter().zip(&relays) {
                if microdesc {
                    c.push_str(&format!(
                        "r {} {} {} {} 9001 0\nm {}\n",
                        r.nickname,
                        STANDARD_NO_PAD.encode(r.identity),
                        ts_pair(rp.published),
                        r.address,
                        rp.micro.digests.sha256_base64().unwrap()
                    ));
                } else {
                    c.push_str(&format!(
                        "r {} {} {} {} {} 9001 0\n",
                        r.nickname,
                        STANDARD_NO_PAD.encode(r.identity),
                        STANDARD_NO_PAD.encode(rp.server.digests.sha1_bytes().unwrap()),
                        ts_pair(rp.published),
                        r.address
                    ));
                }
                c.push_str(&format!("s Fast Running Stable V2Dir Valid\nv Tor 0.3.4.9\n{PROTO}w Bandwidth={}\n", rp.bandwidth / 1000));
                if !microdesc {
                    c.push_str("p reject 1-65535\n");
                }
            }
            c.push_str("directory-footer\nbandwidth-weights Wbd=0 Wbe=0 Wbg=4131 Wbm=10000 Wdb=10000 Web=10000 Wed=10000 Wee=10000 Weg=10000 Wem=10000 Wgb=10000 Wgd=0 Wgg=5869 Wgm=5869 Wmb=10000 Wmd=0 Wme=0 Wmg=4131 Wmm=10000\n");
            for a in &signers {
                c.push_str(&format!("directory-signature sha256 {} {}\n", a.fingerprint, a.signing_key));
                c.push_str(&object(&mut rng, "SIGNATURE", 256));
            }
            let doc = SimDoc::new(if microdesc { DocType::ConsensusMicrodesc } else { DocType::ConsensusNs }, c);
            if microdesc {
                consensus_md.push(doc);
            } else {
                consensus_ns.push(doc);
            }
        }
    }

    let t = s.timings(k);
    let signatures: Vec<SimDoc> = ids
        .authorities
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let ns = &consensus_ns[variant_of[i]];
            let md = &consensus_md[variant_of[i]];
            let mut d = format!(
                "consensus-digest {}\nvalid-after {}\nfresh-until {}\nvalid-until {}\n\
                 additional-digest microdesc sha256 {}\nadditional-signature microdesc sha256 {} {}\n",
                ns.digests.sha1_hex().unwrap(),
                ts_pair(t.valid_after),
                ts_pair(t.fresh_until),
                ts_pair(t.valid_until),
                md.digests.sha256_hex().unwrap(),
                a.fingerprint,
                a.signing_key
            );
            d.push_str(&object(&mut rng, "SIGNATURE", 256));
            d.push_str(&format!("directory-signature {} {}\n", a.fingerprint, a.signing_key));
            d.push_str(&object(&mut rng, "SIGNATURE", 256));
            SimDoc::new(DocType::DetachedSignature, d)
        })
        .collect();

    PeriodDocs {
        index: k,
        valid_after: va,
        servers: relays.iter().map(|r| r.server.clone()).collect(),
        extras: relays.iter().map(|r| r.extra.clone()).collect(),
        micros: relays.iter().map(|r| r.micro.clone()).collect(),
        bandwidth,
        votes,
        signatures,
        consensus_ns,
        consensus_md,
        variant_of,
    }
}

/// Torperf results of `source` for files of `size` bytes measured on `day`.
pub fn torperf_file(s: &SimScenario, source: &str, size: u64, day: Timestamp) -> String {
    let tag = source.bytes().fold(size, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ tag ^ (day.unix() as u64).rotate_left(17));
    let n = s.onionperf.measurements_per_file.max(1);
    let step = 86_400 / n as i64;
    let mut out = String::new();
    for i in 0..n as i64 {
        let start = day.unix() + i * step + rng.random_range(0..step.max(2) / 2);
        let cs: u32 = rng.random_range(0..100);
        let took = rng.random_range(1..60) + (size / 100_000) as i64;
        out.push_str(&format!(
            "BUILDTIMES=0.31,0.62,0.93 CIRC_ID={} DATACOMPLETE={}.{cs:02} DATAPERC100={}.{cs:02} FILESIZE={size} \
             LAUNCH={}.00 QUANTILE=0.800000 READBYTES={} SOURCE={source} START={start}.{cs:02} WRITEBYTES=82\n",
            rng.random_range(1..90_000),
            start + took,
            start + took,
            start - 1,
            size + 350,
        ));
    }
    out
}

/// One published document and where it can be obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Published {
    pub doctype: DocType,
    pub digests: DigestSet,
    pub period: i64,
    pub window: Window,
    /// Authorities serving it.
    pub servers: Vec<usize>,
}

/// Every period's documents for a scenario.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub scenario: SimScenario,
    pub identities: Identities,
    pub periods: Vec<PeriodDocs>,
}

impl Corpus {
    pub fn generate(s: &SimScenario) -> Corpus {
        let identities = identities(s);
        let periods = (0..s.generated_periods() as i64).map(|k| generate_with(s, &identities, k)).collect();
        Corpus { scenario: s.clone(), identities, periods }
    }

    pub fn period(&self, k: i64) -> Option<&PeriodDocs> {
        usize::try_from(k).ok().and_then(|i| self.periods.get(i))
    }

    /// Every generated document with its availability.
    pub fn availability(&self) -> Vec<(SimDoc, Window, Vec<usize>)> {
        let s = &self.scenario;
        let all: Vec<usize> = (0..s.n_authorities).collect();
        let mut out = Vec::new();
        for p in &self.periods {
            let k = p.index;
            let vote_window = Window { from: s.next_vote_window(k).from, until: s.current_window(k).until };
            let consensus_window = Window { from: s.distribution_window(k).from, until: s.current_window(k).until };
            for (a, v) in p.votes.iter().enumerate() {
                out.push((v.clone(), vote_window, vec![a]));
            }
            for (a, b) in p.bandwidth.iter().enumerate() {
                out.push((b.clone(), s.bandwidth_window(k), vec![a]));
            }
            for (a, d) in p.signatures.iter().enumerate() {
                out.push((d.clone(), s.distribution_window(k), vec![a]));
            }
            for v in 0..p.consensus_ns.len() {
                let servers: Vec<usize> = all.iter().copied().filter(|&a| p.variant_of[a] == v).collect();
                out.push((p.consensus_ns[v].clone(), consensus_window, servers.clone()));
                out.push((p.consensus_md[v].clone(), consensus_window, servers));
            }
            for d in p.servers.iter().chain(&p.extras).chain(&p.micros) {
                out.push((d.clone(), s.descriptor_window(k), all.clone()));
            }
        }
        out
    }

    /// Documents some up server offers at some instant of the run.
    pub fn published(&self) -> Vec<Published> {
        let s = &self.scenario;
        let (start, end) = (s.run_start(), s.run_end());
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (doc, window, servers) in self.availability() {
            if !window.intersects(start, end) {
                continue;
            }
            let from = window.from.max(start);
            let until = window.until.map_or(end, |u| (u - 1).min(end));
            let up: Vec<usize> = servers
                .into_iter()
                .filter(|&a| (from.unix()..=until.unix()).any(|t| !s.is_down(a, Timestamp::from_unix(t))))
                .collect();
            if up.is_empty() || !seen.insert((doc.doctype, doc.key())) {
                continue;
            }
            let period = s.period_at(window.from + s.lead());
            out.push(Published { doctype: doc.doctype, digests: doc.digests, period, window, servers: up });
        }
        out
    }
}

#[cfg(test)]
mod tests;
