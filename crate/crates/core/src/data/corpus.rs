use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, DomainId, Vocab};
use crate::data::protocol::SequenceRecord;

/// One parsed dataset line before id assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub domain: String,
    pub user: String,
    pub tokens: Vec<String>,
}

/// Token sequences of one domain, in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSequences {
    pub name: String,
    pub sequences: Vec<(String, Vec<String>)>,
}

/// Multi-domain interaction sequences over one unified vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub records: Vec<SequenceRecord>,
}

/// Domain names, one per line; the first line is the target domain.
pub fn read_manifest(path: &Path) -> Result<Vec<String>, DataError> {
    let text = read(path)?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(names)
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses `<domain> TAB <user> TAB <tok1,tok2,...>` lines.
pub fn parse_records(text: &str) -> Result<Vec<RawRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(domain), Some(user), Some(toks), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "expected three tab-separated fields".into(),
            });
        };
        let tokens: Vec<String> = toks.split(',').map(str::to_string).collect();
        if tokens.iter().any(String::is_empty) {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "empty token".into(),
            });
        }
        if tokens.len() < 2 {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "a sequence needs at least one input item and a next item".into(),
            });
        }
        out.push(RawRecord {
            domain: domain.to_string(),
            user: user.to_string(),
            tokens,
        });
    }
    Ok(out)
}

impl Corpus {
    /// Groups raw records by manifest domain and assigns global ids.
    pub fn from_raw(manifest: &[String], raw: Vec<RawRecord>) -> Result<Self, DataError> {
        let mut grouped: Vec<DomainSequences> = manifest
            .iter()
            .map(|n| DomainSequences {
                name: n.clone(),
                sequences: Vec::new(),
            })
            .collect();
        for r in raw {
            let d = manifest
                .iter()
                .position(|n| *n == r.domain)
                .ok_or_else(|| DataError::UnknownDomain(r.domain.clone()))?;
            grouped[d].sequences.push((r.user, r.tokens));
        }
        Self::from_domains(&grouped)
    }

    pub fn from_domains(domains: &[DomainSequences]) -> Result<Self, DataError> {
        let vocab = Vocab::build(domains.iter().map(|d| {
            (
                d.name.as_str(),
                d.sequences.iter().flat_map(|(_, t)| t.iter().map(String::as_str)),
            )
        }))?;
        let mut records = Vec::new();
        for (di, d) in domains.iter().enumerate() {
            let dom = DomainId(di);
            for (user, toks) in &d.sequences {
                let ids: Vec<u32> = toks
                    .iter()
                    .map(|t| vocab.id(dom, t).expect("token registered by build"))
                    .collect();
                if let Some(r) = SequenceRecord::from_sequence(dom, user.clone(), &ids) {
                    records.push(r);
                }
            }
        }
        if records.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        Ok(Self { vocab, records })
    }

    pub fn load(manifest: &Path, data: &Path) -> Result<Self, DataError> {
        let names = read_manifest(manifest)?;
        let raw = parse_records(&read(data)?)?;
        Self::from_raw(&names, raw)
    }

    pub fn manifest_text(&self) -> String {
        self.vocab.domain_names().fold(String::new(), |mut s, n| {
            let _ = writeln!(s, "{n}");
            s
        })
    }

    /// Serializes records in the dataset wire format, in record order.
    pub fn data_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let toks: Vec<&str> = r
                .full_sequence()
                .into_iter()
                .map(|id| self.vocab.token(id).expect("id in vocab"))
                .collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                self.vocab.domain_name(r.domain),
                r.user,
                toks.join(",")
            );
        }
        s
    }

    pub fn records_in(&self, d: DomainId) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(move |r| r.domain == d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DATA: &str = "T\tu1\ta,b,c\nS1\tu9\ta,x\nT\tu2\tb,d\n";

    #[test]
    fn parses_and_assigns_disjoint_ids() {
        let manifest = vec!["T".to_string(), "S1".to_string()];
        let c = Corpus::from_raw(&manifest, parse_records(DATA).unwrap()).unwrap();
        assert_eq!(c.vocab.num_items(), 6);
        assert_eq!(c.records[0].items, vec![1, 2]);
        assert_eq!(c.records[0].target, 3);
        // records are grouped by domain in manifest order
        assert_eq!(c.records[1].items, vec![2]);
        assert_eq!(c.records[1].target, 4);
        assert_eq!(c.records[2].items, vec![5]);
        assert_eq!(c.records[2].domain, DomainId(1));
    }

    #[test]
    fn round_trips_wire_format() {
        let manifest = vec!["T".to_string(), "S1".to_string()];
        let c = Corpus::from_raw(&manifest, parse_records(DATA).unwrap()).unwrap();
        assert_eq!(c.data_text(), "T\tu1\ta,b,c\nT\tu2\tb,d\nS1\tu9\ta,x\n");
        let again = Corpus::from_raw(&manifest, parse_records(&c.data_text()).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(parse_records("T\tu1\n"), Err(DataError::Parse { line: 1, .. })));
        assert!(matches!(parse_records("T\tu1\ta,,b\n"), Err(DataError::Parse { .. })));
        assert!(matches!(parse_records("T\tu1\ta\n"), Err(DataError::Parse { .. })));
        let manifest = vec!["T".to_string()];
        assert!(matches!(
            Corpus::from_raw(&manifest, parse_records("Z\tu\ta,b\n").unwrap()),
            Err(DataError::UnknownDomain(_))
        ));
    }
}
