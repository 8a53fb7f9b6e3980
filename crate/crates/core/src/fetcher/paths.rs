//! Directory-protocol URL paths, shared by the client and the server side.

use base64::engine::general_purpose::STANDARD_NO_PAD;
use base64::Engine;

use crate::docmodel::{DigestSet, DocType};

pub const CURRENT_CONSENSUS: &str = "/tor/status-vote/current/consensus";
pub const CURRENT_CONSENSUS_MICRODESC: &str = "/tor/status-vote/current/consensus-microdesc";
pub const CURRENT_AUTHORITY: &str = "/tor/status-vote/current/authority";
pub const NEXT_AUTHORITY: &str = "/tor/status-vote/next/authority";
pub const NEXT_SIGNATURES: &str = "/tor/status-vote/next/consensus-signatures";
pub const NEXT_CONSENSUS: &str = "/tor/status-vote/next/consensus";
pub const NEXT_CONSENSUS_MICRODESC: &str = "/tor/status-vote/next/consensus-microdesc";
pub const NEXT_BANDWIDTH: &str = "/tor/status-vote/next/bandwidth";
pub const SERVER_ALL: &str = "/tor/server/all";
pub const EXTRA_ALL: &str = "/tor/extra/all";
pub const SERVER_D: &str = "/tor/server/d/";
pub const EXTRA_D: &str = "/tor/extra/d/";
pub const MICRO_D: &str = "/tor/micro/d/";

pub fn current_consensus(flavor: DocType) -> Option<&'static str> {
    match flavor {
        DocType::ConsensusNs => Some(CURRENT_CONSENSUS),
        DocType::ConsensusMicrodesc => Some(CURRENT_CONSENSUS_MICRODESC),
        _ => None,
    }
}

pub fn next_consensus(flavor: DocType) -> Option<&'static str> {
    match flavor {
        DocType::ConsensusNs => Some(NEXT_CONSENSUS),
        DocType::ConsensusMicrodesc => Some(NEXT_CONSENSUS_MICRODESC),
        _ => None,
    }
}

pub fn all_descriptors(doctype: DocType) -> Option<&'static str> {
    match doctype {
        DocType::ServerDescriptor => Some(SERVER_ALL),
        DocType::ExtraInfoDescriptor => Some(EXTRA_ALL),
        _ => None,
    }
}

/// `/tor/server/d/<hex>+<hex>`, `/tor/extra/d/...` or
/// `/tor/micro/d/<b64>-<b64>`. `None` for other types or when a digest
/// lacks the needed algorithm.
pub fn by_digest(doctype: DocType, digests: &[&DigestSet]) -> Option<String> {
    let (prefix, sep, parts) = match doctype {
        DocType::ServerDescriptor | DocType::ExtraInfoDescriptor => {
            let parts: Option<Vec<String>> = digests.iter().map(|d| d.sha1_hex().map(str::to_string)).collect();
            (if doctype == DocType::ServerDescriptor { SERVER_D } else { EXTRA_D }, "+", parts?)
        }
        DocType::Microdescriptor => {
            let parts: Option<Vec<String>> =
                digests.iter().map(|d| d.sha256_bytes().map(|b| STANDARD_NO_PAD.encode(b))).collect();
            (MICRO_D, "-", parts?)
        }
        _ => return None,
    };
    if parts.is_empty() {
        return None;
    }
    Some(format!("{prefix}{}", parts.join(sep)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_lists() {
        let a = DigestSet::from_sha1_bytes(&[0xAB; 20]);
        let b = DigestSet::from_sha1_bytes(&[0x01; 20]);
        assert_eq!(
            by_digest(DocType::ServerDescriptor, &[&a, &b]).unwrap(),
            format!("/tor/server/d/{}+{}", "AB".repeat(20), "01".repeat(20))
        );
        assert!(by_digest(DocType::ExtraInfoDescriptor, &[&a]).unwrap().starts_with("/tor/extra/d/ABAB"));
        let m = DigestSet::from_sha256_bytes_b64(&[0xFF; 32]);
        let n = DigestSet::from_sha256_bytes_b64(&[0; 32]);
        let path = by_digest(DocType::Microdescriptor, &[&m, &n]).unwrap();
        assert_eq!(path, format!("/tor/micro/d/{}-{}", STANDARD_NO_PAD.encode([0xFF; 32]), STANDARD_NO_PAD.encode([0; 32])));
        assert!(by_digest(DocType::Microdescriptor, &[&a]).is_none());
        assert!(by_digest(DocType::Vote, &[&a]).is_none());
        assert!(by_digest(DocType::ServerDescriptor, &[]).is_none());
    }

    #[test]
    fn consensus_flavors() {
        assert_eq!(current_consensus(DocType::ConsensusMicrodesc), Some("/tor/status-vote/current/consensus-microdesc"));
        assert_eq!(current_consensus(DocType::Vote), None);
    }
}
