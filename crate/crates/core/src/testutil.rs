//! Test helpers: a scriptable directory server.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex as StdMutex};

use axum::body::Body;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::response::Response;
use base64::engine::general_purpose::STANDARD_NO_PAD;
use base64::Engine;
use flate2::write::GzEncoder;

use crate::docmodel::DocType;
use crate::docparse;
use crate::fetcher::{paths, Role, ServerEndpoint};

#[derive(Default)]
pub struct MockState {
    pub fixed: HashMap<String, (u16, Vec<u8>)>,
    pub descriptors: HashMap<String, Vec<u8>>,
    pub extra_bodies: Vec<u8>,
    pub gzip: bool,
    pub log: StdMutex<Vec<String>>,
}

async fn handler(State(st): State<Arc<MockState>>, req: Request) -> Response {
    let path = req.uri().path().to_string();
    st.log.lock().unwrap().push(path.clone());
    let (status, mut body) = if let Some((s, b)) = st.fixed.get(&path) {
        (*s, b.clone())
    } else if let Some(list) = path.strip_prefix("/tor/server/d/") {
        let mut out = Vec::new();
        for d in list.split('+') {
            if let Some(b) = st.descriptors.get(d) {
                out.extend_from_slice(b);
            }
        }
        out.extend_from_slice(&st.extra_bodies);
        (if out.is_empty() { 404 } else { 200 }, out)
    } else {
        (404, Vec::new())
    };
    let mut resp = Response::builder().status(StatusCode::from_u16(status).unwrap());
    if st.gzip {
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&body).unwrap();
        body = enc.finish().unwrap();
        resp = resp.header(header::CONTENT_ENCODING, "gzip");
    }
    resp.body(Body::from(body)).unwrap()
}

pub async fn mock(state: MockState) -> (ServerEndpoint, Arc<MockState>) {
    let st = Arc::new(state);
    let app = axum::Router::new().fallback(handler).with_state(st.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let ep = ServerEndpoint::new(format!("mock{}", addr.port()), &format!("http://{addr}"), [Role::Authority]).unwrap();
    (ep, st)
}

pub async fn dead_endpoint(id: &str) -> ServerEndpoint {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    ServerEndpoint::new(id, &format!("http://{addr}"), [Role::Authority]).unwrap()
}


pub fn server_desc(i: u32) -> String {
    format!(
        "router relay{i} 10.0.0.{i} 9001 0 0\npublished 2018-11-15 18:00:00\nfingerprint {i:040X}\n\
         router-signature\n-----BEGIN SIGNATURE-----\nAAAA\n-----END SIGNATURE-----\n"
    )
}

/// An ns consensus for 2018-11-15 19:00 referencing `server_desc(0..n)`.
pub fn consensus_with(n: u32) -> String {
    let mut s = String::from(
        "network-status-version 3\nvote-status consensus\nvalid-after 2018-11-15 19:00:00\n\
         fresh-until 2018-11-15 20:00:00\nvalid-until 2018-11-15 22:00:00\nvoting-delay 300 300\n",
    );
    for i in 0..n {
        let d = docparse::compute_digests(server_desc(i).as_bytes(), DocType::ServerDescriptor).unwrap();
        let mut id = [0u8; 20];
        id[16..].copy_from_slice(&i.to_be_bytes());
        s.push_str(&format!(
            "r relay{i} {} {} 2018-11-15 18:00:00 10.0.0.{i} 9001 0\n",
            STANDARD_NO_PAD.encode(id),
            STANDARD_NO_PAD.encode(d.sha1_bytes().unwrap())
        ));
    }
    s.push_str("directory-footer\ndirectory-signature A B\n-----BEGIN SIGNATURE-----\nAA\n-----END SIGNATURE-----\n");
    s
}

/// A mock authority serving `consensus_with(n)` and its descriptors.
pub fn relay_state(n: u32) -> MockState {
    let mut st = MockState::default();
    st.fixed.insert(paths::CURRENT_CONSENSUS.into(), (200, consensus_with(n).into_bytes()));
    st.descriptors = (0..n)
        .map(|i| {
            let d = docparse::compute_digests(server_desc(i).as_bytes(), DocType::ServerDescriptor).unwrap();
            (d.sha1_hex().unwrap().to_string(), server_desc(i).into_bytes())
        })
        .collect();
    st
}
