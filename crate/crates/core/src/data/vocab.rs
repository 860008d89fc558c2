use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Global padding id; never assigned to an item.
pub const PAD: u32 = 0;

/// Domain index: 0 is the target domain, 1.. are the sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub usize);

impl DomainId {
    pub const TARGET: DomainId = DomainId(0);

    pub fn is_target(self) -> bool {
        self.0 == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DomainEntry {
    name: String,
    start: u32,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Disjoint per-domain id ranges over `1..=n`; id 0 is PAD.
///
/// The same token string in two domains maps to two different ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    domains: Vec<DomainEntry>,
    total: u32,
}

impl Vocab {
    /// Assigns ids domain by domain in the given order, tokens in order of
    /// first appearance within each domain.
    pub fn build<'a, D, S>(domains: D) -> Result<Self, DataError>
    where
        D: IntoIterator<Item = (&'a str, S)>,
        S: IntoIterator<Item = &'a str>,
    {
        let mut entries = Vec::new();
        let mut next = 1u32;
        for (name, tokens) in domains {
            let mut entry = DomainEntry {
                name: name.to_string(),
                start: next,
                tokens: Vec::new(),
                index: HashMap::new(),
            };
            for tok in tokens {
                if !entry.index.contains_key(tok) {
                    entry.index.insert(tok.to_string(), next);
                    entry.tokens.push(tok.to_string());
                    next += 1;
                }
            }
            entries.push(entry);
        }
        if entries.is_empty() || next == 1 {
            return Err(DataError::EmptyCorpus);
        }
        Ok(Self {
            domains: entries,
            total: next - 1,
        })
    }

    /// Number of real items `n` (PAD excluded).
    pub fn num_items(&self) -> usize {
        self.total as usize
    }

    /// Table size including PAD, `n + 1`.
    pub fn size(&self) -> usize {
        self.total as usize + 1
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_name(&self, d: DomainId) -> &str {
        &self.domains[d.0].name
    }

    pub fn domain_by_name(&self, name: &str) -> Option<DomainId> {
        self.domains.iter().position(|e| e.name == name).map(DomainId)
    }

    pub fn domain_names(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|e| e.name.as_str())
    }

    /// Global id range of a domain.
    pub fn range(&self, d: DomainId) -> Range<u32> {
        let e = &self.domains[d.0];
        e.start..e.start + e.tokens.len() as u32
    }

    pub fn target_range(&self) -> Range<u32> {
        self.range(DomainId::TARGET)
    }

    pub fn domain_of(&self, id: u32) -> Option<DomainId> {
        if id == PAD {
            return None;
        }
        (0..self.domains.len())
            .map(DomainId)
            .find(|&d| self.range(d).contains(&id))
    }

    pub fn id(&self, d: DomainId, token: &str) -> Option<u32> {
        self.domains.get(d.0)?.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let d = self.domain_of(id)?;
        let e = &self.domains[d.0];
        Some(e.tokens[(id - e.start) as usize].as_str())
    }
}
