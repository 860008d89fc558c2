use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{sparsify_target, SequenceRecord};
use super::{Corpus, DataError, DomainId, DomainSequences};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub name: String,
    pub items: usize,
    pub sequences: usize,
    /// Inclusive range of raw sequence lengths (before sparsification).
    pub min_len: usize,
    pub max_len: usize,
}

/// Corpus generator with a genre-level Markov chain shared by all domains.
/// Item `j` of a domain belongs to genre `j mod G`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub genres: usize,
    pub transition: Vec<Vec<f64>>,
    /// First entry is the target domain.
    pub domains: Vec<SyntheticDomain>,
    pub sparsify: (usize, usize),
    pub seed: u64,
}

/// Generated corpus plus the genre of every global item id (index 0 unused).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub genre_of: Vec<usize>,
}

/// Each row puts `concentration` on one random successor genre and spreads
/// the rest evenly over all genres.
pub fn peaked_transition<R: Rng + ?Sized>(genres: usize, concentration: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let base = (1.0 - concentration) / genres as f64;
    (0..genres)
        .map(|_| {
            let mut row = vec![base; genres];
            row[rng.random_range(0..genres)] += concentration;
            row
        })
        .collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let g = self.genres;
        if g == 0 {
            return Err(DataError::Spec("need at least one genre".into()));
        }
        if self.transition.len() != g || self.transition.iter().any(|r| r.len() != g) {
            return Err(DataError::Spec(format!("transition matrix must be {g}x{g}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(DataError::Spec(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(DataError::Spec(format!("row {i} sums to {s}")));
            }
        }
        if self.domains.is_empty() {
            return Err(DataError::Spec("no domains".into()));
        }
        for d in &self.domains {
            if d.items < g {
                return Err(DataError::Spec(format!(
                    "domain {} has {} items, so some of the {g} genres have none",
                    d.name, d.items
                )));
            }
            if d.min_len < 2 || d.max_len < d.min_len {
                return Err(DataError::Spec(format!(
                    "domain {} needs 2 <= min_len <= max_len",
                    d.name
                )));
            }
        }
        let (lo, hi) = self.sparsify;
        if lo < 2 || hi < lo {
            return Err(DataError::Spec("sparsify range must satisfy 2 <= lo <= hi".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last genre with non-zero mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    let g = spec.genres;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut domains = Vec::with_capacity(spec.domains.len());
    for (di, d) in spec.domains.iter().enumerate() {
        let mut sequences = Vec::with_capacity(d.sequences);
        for s in 0..d.sequences {
            let len = rng.random_range(d.min_len..=d.max_len);
            let mut genre = rng.random_range(0..g);
            let mut locals = Vec::with_capacity(len);
            for _ in 0..len {
                let per_genre = (d.items - genre).div_ceil(g);
                locals.push(genre + g * rng.random_range(0..per_genre));
                genre = draw(&spec.transition[genre], &mut rng);
            }
            sequences.push((format!("{}-u{s}", d.name), locals));
        }
        domains.push((di, d, sequences));
    }

    // Target sequences are sparsified on local indices; ids are assigned after.
    let (lo, hi) = spec.sparsify;
    let mut named = Vec::with_capacity(domains.len());
    for (di, d, sequences) in domains {
        let sequences = sequences
            .into_iter()
            .map(|(user, locals)| {
                let locals = if di == 0 {
                    let ids: Vec<u32> = locals.iter().map(|&l| l as u32).collect();
                    let rec = SequenceRecord::from_sequence(DomainId::TARGET, user.clone(), &ids)
                        .expect("min_len >= 2");
                    let kept = sparsify_target(&rec, lo..=hi, &mut rng)?.record.full_sequence();
                    kept.into_iter().map(|l| l as usize).collect()
                } else {
                    locals
                };
                Ok((user, locals))
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        named.push((d, sequences));
    }

    let domain_seqs: Vec<DomainSequences> = named
        .iter()
        .map(|(d, seqs)| DomainSequences {
            name: d.name.clone(),
            sequences: seqs
                .iter()
                .map(|(u, locals)| (u.clone(), locals.iter().map(|l| format!("i{l}")).collect()))
                .collect(),
        })
        .collect();
    let corpus = Corpus::from_domains(&domain_seqs)?;
    let mut genre_of = vec![0; corpus.vocab.size()];
    for id in 1..corpus.vocab.size() as u32 {
        let tok = corpus.vocab.token(id).expect("id in vocab");
        let local: usize = tok[1..].parse().expect("generated token");
        genre_of[id as usize] = local % g;
    }
    Ok(SyntheticCorpus { corpus, genre_of })
}
