//! Relative storage paths. A path depends only on the document type, its
//! datetime and its digest (Torperf files additionally on the subject).

use crate::docmodel::{DigestSet, DocType, Timestamp};

pub const ARCHIVE_DIR: &str = "archive";
pub const UNRECOGNIZED_DIR: &str = "unrecognized";

/// The digest a type is addressed by: SHA-1 hex for relay descriptors,
/// SHA-256 base64url for microdescriptors, SHA-256 hex for the rest.
pub fn primary_digest(doctype: DocType, digests: &DigestSet) -> Option<String> {
    match doctype {
        DocType::ServerDescriptor | DocType::ExtraInfoDescriptor => digests.sha1_hex().map(str::to_string),
        DocType::Microdescriptor => digests.sha256_as_base64url(),
        _ => digests.sha256_as_hex(),
    }
}

fn fan_out(digest: &str) -> (char, char) {
    let mut c = digest.chars();
    (c.next().unwrap_or('_'), c.next().unwrap_or('_'))
}

pub fn relative_path(doctype: DocType, datetime: Timestamp, digests: &DigestSet, subject: &str) -> Option<String> {
    let digest = primary_digest(doctype, digests)?;
    let dir = doctype.dir_name();
    let ym = datetime.format("%Y/%m");
    Some(if doctype.is_period_document() {
        format!(
            "{ARCHIVE_DIR}/{dir}/{}/{dir}-{}-{}",
            datetime.format("%Y/%m/%d"),
            datetime.file_stamp(),
            &digest[..8.min(digest.len())]
        )
    } else if doctype == DocType::TorperfResults {
        let subject = if subject.is_empty() { "unknown" } else { subject };
        format!("{ARCHIVE_DIR}/{dir}/{ym}/{subject}-{}.tpf", datetime.format("%Y-%m-%d"))
    } else {
        let (h0, h1) = fan_out(&digest);
        format!("{ARCHIVE_DIR}/{dir}/{ym}/{h0}/{h1}/{digest}")
    })
}

/// Alternative Torperf path used when a different file already occupies
/// the natural one.
pub fn torperf_alternate(path: &str, digests: &DigestSet) -> String {
    let d8: String = digests.sha256_as_hex().unwrap_or_default().chars().take(8).collect();
    match path.strip_suffix(".tpf") {
        Some(stem) => format!("{stem}-{d8}.tpf"),
        None => format!("{path}-{d8}"),
    }
}

pub fn unrecognized_path(stored_at: Timestamp, sha256_hex: &str) -> String {
    let (h0, h1) = fan_out(sha256_hex);
    format!("{ARCHIVE_DIR}/{UNRECOGNIZED_DIR}/{}/{h0}/{h1}/{sha256_hex}", stored_at.format("%Y/%m"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    #[test]
    fn server_descriptor_fan_out() {
        let d = DigestSet::empty().with_sha1_hex("ABCD000000000000000000000000000000000000").unwrap();
        assert_eq!(
            relative_path(DocType::ServerDescriptor, ts("2018-11-15 18:00:00"), &d, "").unwrap(),
            "archive/server-descriptor/2018/11/A/B/ABCD000000000000000000000000000000000000"
        );
    }

    #[test]
    fn period_documents_by_date() {
        let d = DigestSet::from_sha256_bytes_hex(&[0xAB; 32]);
        assert_eq!(
            relative_path(DocType::Vote, ts("2018-11-15 19:00:00"), &d, "X").unwrap(),
            "archive/vote/2018/11/15/vote-2018-11-15-19-00-00-ABABABAB"
        );
    }

    #[test]
    fn microdescriptor_base64url() {
        let d = DigestSet::from_sha256_bytes_b64(&[0xFB; 32]);
        let p = relative_path(DocType::Microdescriptor, ts("2018-11-15 19:00:00"), &d, "").unwrap();
        assert!(p.starts_with("archive/microdescriptor/2018/11/-/_/-_v7"), "{p}");
        assert!(!p.contains('+'));
    }

    #[test]
    fn torperf_name() {
        let d = DigestSet::from_sha256_bytes_hex(&[1; 32]);
        let p = relative_path(DocType::TorperfResults, ts("2018-11-15 00:00:00"), &d, "op-ab-51200").unwrap();
        assert_eq!(p, "archive/torperf/2018/11/op-ab-51200-2018-11-15.tpf");
        assert_eq!(torperf_alternate(&p, &d), "archive/torperf/2018/11/op-ab-51200-2018-11-15-01010101.tpf");
    }

    #[test]
    fn missing_digest_has_no_path() {
        assert_eq!(relative_path(DocType::ServerDescriptor, Timestamp::EPOCH, &DigestSet::empty(), ""), None);
    }
}
