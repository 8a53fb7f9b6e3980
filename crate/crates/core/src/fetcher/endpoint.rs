use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use url::Url;

use crate::docmodel::DocType;
use crate::scheduler::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Authority,
    DirectoryCache,
    ExtraInfoCache,
    CollectorPeer,
    OnionperfHost,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("bad base url {0:?}: {1}")]
    BadUrl(String, String),
    #[error("endpoint {0:?} has no roles")]
    NoRoles(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEndpoint {
    pub server_id: String,
    pub base_url: Url,
    pub roles: BTreeSet<Role>,
}

impl ServerEndpoint {
    /// Builds an endpoint and closes its roles upward: an authority serves
    /// extra-info, an extra-info cache is a directory cache, and a peer
    /// archive serves everything a cache does.
    pub fn new(server_id: impl Into<String>, base_url: &str, roles: impl IntoIterator<Item = Role>) -> Result<Self, EndpointError> {
        let server_id = server_id.into();
        let base_url = Url::parse(base_url).map_err(|e| EndpointError::BadUrl(base_url.to_string(), e.to_string()))?;
        if !matches!(base_url.scheme(), "http" | "https") || base_url.host().is_none() {
            return Err(EndpointError::BadUrl(base_url.to_string(), "expected http://host:port".into()));
        }
        let roles: BTreeSet<Role> = roles.into_iter().collect();
        if roles.is_empty() {
            return Err(EndpointError::NoRoles(server_id));
        }
        Ok(ServerEndpoint { server_id, base_url, roles }.normalized())
    }

    pub fn normalized(mut self) -> Self {
        if self.roles.contains(&Role::Authority) || self.roles.contains(&Role::CollectorPeer) {
            self.roles.insert(Role::ExtraInfoCache);
        }
        if self.roles.contains(&Role::ExtraInfoCache) {
            self.roles.insert(Role::DirectoryCache);
        }
        self
    }

    pub fn has(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    pub fn url(&self, path: &str) -> String {
        let base = self.base_url.as_str().trim_end_matches('/');
        format!("{base}{path}")
    }

    /// Whether this endpoint can be asked for documents of `doctype`.
    pub fn serves(&self, doctype: DocType) -> bool {
        match doctype {
            DocType::ExtraInfoDescriptor => self.has(Role::ExtraInfoCache),
            DocType::TorperfResults => self.has(Role::OnionperfHost),
            DocType::Vote | DocType::DetachedSignature | DocType::BandwidthList => self.has(Role::Authority),
            _ => self.has(Role::DirectoryCache),
        }
    }
}

impl fmt::Display for ServerEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.server_id, self.base_url)
    }
}

/// Servers to ask for `doctype` in `phase`, in order of preference. Alpha
/// uses authorities only. Beta prefers peers, then caches, then
/// authorities.
pub fn select_servers(phase: Phase, doctype: DocType, endpoints: &[ServerEndpoint]) -> Vec<ServerEndpoint> {
    let eligible = endpoints.iter().filter(|e| e.serves(doctype));
    match phase {
        Phase::Alpha => eligible.filter(|e| e.has(Role::Authority)).cloned().collect(),
        Phase::Beta => {
            let mut v: Vec<&ServerEndpoint> = eligible.collect();
            v.sort_by_key(|e| {
                if e.has(Role::Authority) {
                    2
                } else if e.has(Role::CollectorPeer) {
                    0
                } else {
                    1
                }
            });
            v.into_iter().cloned().collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(id: &str, roles: &[Role]) -> ServerEndpoint {
        ServerEndpoint::new(id, "http://127.0.0.1:9030", roles.iter().copied()).unwrap()
    }

    #[test]
    fn roles_close_upward() {
        let a = ep("a", &[Role::Authority]);
        assert!(a.has(Role::ExtraInfoCache) && a.has(Role::DirectoryCache));
        let c = ep("c", &[Role::DirectoryCache]);
        assert!(!c.has(Role::ExtraInfoCache));
        let p = ep("p", &[Role::CollectorPeer]);
        assert!(p.serves(DocType::ExtraInfoDescriptor));
        assert!(!p.serves(DocType::Vote));
    }

    #[test]
    fn rejects_bad_urls_and_empty_roles() {
        assert!(ServerEndpoint::new("x", "not a url", [Role::Authority]).is_err());
        assert!(ServerEndpoint::new("x", "ftp://h:1", [Role::Authority]).is_err());
        assert!(ServerEndpoint::new("x", "http://h:1", []).is_err());
        assert_eq!(ep("x", &[Role::Authority]).url("/tor/server/all"), "http://127.0.0.1:9030/tor/server/all");
    }

    #[test]
    fn selection_by_phase() {
        let all = vec![
            ep("auth", &[Role::Authority]),
            ep("cache", &[Role::DirectoryCache]),
            ep("extra", &[Role::ExtraInfoCache]),
            ep("peer", &[Role::CollectorPeer]),
            ep("op", &[Role::OnionperfHost]),
        ];
        let ids = |v: Vec<ServerEndpoint>| v.into_iter().map(|e| e.server_id).collect::<Vec<_>>();
        assert_eq!(ids(select_servers(Phase::Alpha, DocType::ServerDescriptor, &all)), ["auth"]);
        assert_eq!(ids(select_servers(Phase::Beta, DocType::ServerDescriptor, &all)), ["peer", "cache", "extra", "auth"]);
        assert_eq!(ids(select_servers(Phase::Beta, DocType::ExtraInfoDescriptor, &all)), ["peer", "extra", "auth"]);
        assert_eq!(ids(select_servers(Phase::Beta, DocType::TorperfResults, &all)), ["op"]);
    }
}
