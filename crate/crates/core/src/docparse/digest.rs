use sha1::Sha1;
use sha2::{Digest, Sha256};

use super::DocError;
use crate::docmodel::{DigestSet, DocType};

fn find_line_start(body: &[u8], from: usize, token: &[u8]) -> Option<usize> {
    if from == 0 && body.starts_with(token) {
        return Some(0);
    }
    let mut i = from;
    while i < body.len() {
        let nl = body[i..].iter().position(|&b| b == b'\n')? + i;
        let next = nl + 1;
        if body[next..].starts_with(token) {
            return Some(next);
        }
        i = next;
    }
    None
}

/// Byte range covered by the document's identity digest.
///
/// Server and extra-info descriptors: from the `router` / `extra-info`
/// keyword through the newline ending `router-signature`. Votes and
/// consensuses: from the start through the space after the first
/// `directory-signature`. Every other type: the whole body.
pub fn signed_range(body: &[u8], doctype: DocType) -> Result<std::ops::Range<usize>, DocError> {
    match doctype {
        DocType::ServerDescriptor | DocType::ExtraInfoDescriptor => {
            let start_kw: &[u8] = if doctype == DocType::ServerDescriptor { b"router " } else { b"extra-info " };
            let start = find_line_start(body, 0, start_kw).ok_or(DocError::DigestRangeNotFound(
                if doctype == DocType::ServerDescriptor { "router" } else { "extra-info" },
            ))?;
            let sig = find_line_start(body, start, b"router-signature\n")
                .ok_or(DocError::DigestRangeNotFound("router-signature"))?;
            Ok(start..sig + b"router-signature\n".len())
        }
        DocType::Vote | DocType::ConsensusNs | DocType::ConsensusMicrodesc => {
            let sig = find_line_start(body, 0, b"directory-signature ")
                .ok_or(DocError::DigestRangeNotFound("directory-signature"))?;
            Ok(0..sig + b"directory-signature ".len())
        }
        DocType::Microdescriptor | DocType::DetachedSignature | DocType::BandwidthList | DocType::TorperfResults => {
            Ok(0..body.len())
        }
    }
}

/// Computes the identity digests of a document body.
pub fn compute_digests(body: &[u8], doctype: DocType) -> Result<DigestSet, DocError> {
    if body.is_empty() {
        return Err(DocError::Empty);
    }
    let range = signed_range(body, doctype)?;
    let signed = &body[range];
    let sha256: [u8; 32] = Sha256::digest(signed).into();
    let set = match doctype {
        DocType::ServerDescriptor | DocType::ExtraInfoDescriptor => {
            let sha1: [u8; 20] = Sha1::digest(signed).into();
            DigestSet::from_sha1_bytes(&sha1).merge(&DigestSet::from_sha256_bytes_b64(&sha256))
        }
        DocType::Vote | DocType::ConsensusNs | DocType::ConsensusMicrodesc => {
            let sha1: [u8; 20] = Sha1::digest(signed).into();
            DigestSet::from_sha1_bytes(&sha1).merge(&DigestSet::from_sha256_bytes_hex(&sha256))
        }
        DocType::Microdescriptor => DigestSet::from_sha256_bytes_b64(&sha256),
        DocType::DetachedSignature | DocType::BandwidthList | DocType::TorperfResults => {
            DigestSet::from_sha256_bytes_hex(&sha256)
        }
    };
    Ok(set)
}

/// SHA-256 over the complete byte string, uppercase hex.
pub(crate) fn full_sha256_hex(bytes: &[u8]) -> String {
    crate::docmodel::hex_upper(&Sha256::digest(bytes))
}
