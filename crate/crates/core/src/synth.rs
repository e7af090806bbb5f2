//! Synthetic session logs with planted item chains.
//!
//! Items are shuffled and cut into disjoint chains. Each session picks a
//! chain and walks a contiguous window of it; every position is replaced by
//! a uniformly random item with probability `noise`.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, DatasetBundle, Holdout, PreprocessConfig, RawEvent, TrainExample};
use crate::error::{Error, Result};
use crate::eval::rank_target;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_items: usize,
    pub sessions: usize,
    pub chains: usize,
    pub noise: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            sessions: 2000,
            chains: 20,
            noise: 0.2,
            seed: 7,
            min_len: 2,
            max_len: 8,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.chains > self.n_items {
            return Err(Error::Config("chains must be in 1..=n_items".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 1]".into()));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        Ok(())
    }
}

pub fn item_key(i: usize) -> String {
    format!("i{i}")
}

/// Raw events plus the planted chains (as item keys).
#[derive(Debug, Clone)]
pub struct SynthLog {
    pub events: Vec<RawEvent>,
    pub chains: Vec<Vec<String>>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthLog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items: Vec<usize> = (0..spec.n_items).collect();
    items.shuffle(&mut rng);
    let base = spec.n_items / spec.chains;
    let extra = spec.n_items % spec.chains;
    let mut chains = Vec::with_capacity(spec.chains);
    let mut start = 0;
    for c in 0..spec.chains {
        let len = base + usize::from(c < extra);
        chains.push(items[start..start + len].to_vec());
        start += len;
    }

    let mut events = Vec::new();
    for s in 0..spec.sessions {
        let chain = &chains[rng.random_range(0..chains.len())];
        let hi = spec.max_len.min(chain.len()).max(1);
        let lo = spec.min_len.min(hi);
        let len = rng.random_range(lo..=hi);
        let offset = rng.random_range(0..=chain.len() - len);
        for t in 0..len {
            let item = if rng.random::<f64>() < spec.noise {
                rng.random_range(0..spec.n_items)
            } else {
                chain[offset + t]
            };
            events.push(RawEvent {
                session_key: format!("s{s}"),
                item_key: item_key(item),
                timestamp: (s * 1000 + t) as i64,
            });
        }
    }
    Ok(SynthLog {
        events,
        chains: chains
            .into_iter()
            .map(|c| c.into_iter().map(item_key).collect())
            .collect(),
    })
}

/// Default preprocessing for synthetic logs.
pub fn synth_preprocess_config() -> PreprocessConfig {
    PreprocessConfig {
        holdout: Holdout::Fraction(0.1),
        ..PreprocessConfig::default()
    }
}

pub fn synth_dataset(spec: &SynthSpec, config: &PreprocessConfig) -> Result<(DatasetBundle, SynthLog)> {
    let log = generate(spec)?;
    let bundle = preprocess(&log.events, config)?;
    Ok((bundle, log))
}

pub fn write_tsv<W: Write>(events: &[RawEvent], mut w: W) -> std::io::Result<()> {
    for e in events {
        writeln!(w, "{}\t{}\t{}", e.session_key, e.item_key, e.timestamp)?;
    }
    Ok(())
}

/// Ranks targets by "planted successor of the last item first, then
/// training popularity". The reference ceiling for learned models.
pub fn chain_oracle_ranks(
    bundle: &DatasetBundle,
    chains: &[Vec<String>],
    examples: &[TrainExample],
) -> Vec<usize> {
    let mut successor: HashMap<usize, usize> = HashMap::new();
    for chain in chains {
        for w in chain.windows(2) {
            if let (Some(a), Some(b)) = (bundle.vocab.index_of(&w[0]), bundle.vocab.index_of(&w[1])) {
                successor.insert(a, b);
            }
        }
    }
    let base: Vec<f64> = bundle
        .train_item_counts()
        .into_iter()
        .map(|c| c as f64)
        .collect();
    examples
        .iter()
        .map(|ex| {
            let last = *ex.prefix.last().expect("nonempty prefix");
            match successor.get(&last) {
                Some(&next) => {
                    let mut scores = base.clone();
                    scores[next] = f64::INFINITY;
                    rank_target(&scores, ex.target)
                }
                None => rank_target(&base, ex.target),
            }
        })
        .collect()
}

/// Twenty sessions over twelve items in which every item has exactly one
/// successor, so every training prefix determines its target.
pub fn memorization_fixture() -> Result<DatasetBundle> {
    const N: usize = 12;
    let successor = |i: usize| (5 * i + 1) % N;
    let mut events = Vec::new();
    for s in 0..20usize {
        let len = 3 + s % 4;
        let mut item = (s * 7) % N;
        for t in 0..len {
            events.push(RawEvent {
                session_key: format!("m{s}"),
                item_key: item_key(item),
                timestamp: (s * 100 + t) as i64,
            });
            item = successor(item);
        }
    }
    preprocess(
        &events,
        &PreprocessConfig {
            min_item_freq: 1,
            min_session_len: 2,
            holdout: Holdout::Fraction(0.1),
            min_prefix_len: 1,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_sessions;
    use crate::eval::{popularity_ranks, precision_at_k};

    #[test]
    fn noiseless_single_chain_sessions_are_chain_windows() {
        let spec = SynthSpec {
            n_items: 3,
            sessions: 50,
            chains: 1,
            noise: 0.0,
            seed: 1,
            min_len: 2,
            max_len: 3,
        };
        let log = generate(&spec).unwrap();
        let chain = &log.chains[0];
        for s in build_sessions(&log.events) {
            let pos = chain.iter().position(|k| *k == s.items[0]).unwrap();
            assert_eq!(&chain[pos..pos + s.items.len()], s.items.as_slice());
        }
    }

    #[test]
    fn full_noise_is_uniform() {
        let spec = SynthSpec {
            n_items: 10,
            sessions: 4000,
            noise: 1.0,
            chains: 2,
            ..SynthSpec::default()
        };
        let log = generate(&spec).unwrap();
        let mut counts = [0usize; 10];
        for e in &log.events {
            counts[e.item_key[1..].parse::<usize>().unwrap()] += 1;
        }
        let mean = log.events.len() as f64 / 10.0;
        // 5σ band for a binomial count
        let sd = (mean * 0.9).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - mean).abs() < 5.0 * sd), "{counts:?}");
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&SynthSpec::default()).unwrap();
        let b = generate(&SynthSpec::default()).unwrap();
        assert_eq!(a.events, b.events);
        let c = generate(&SynthSpec { seed: 8, ..SynthSpec::default() }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn default_data_has_learnable_signal() {
        let (bundle, log) = synth_dataset(&SynthSpec::default(), &synth_preprocess_config()).unwrap();
        let pop = precision_at_k(&popularity_ranks(&bundle, &bundle.test).unwrap(), 10).unwrap();
        let oracle = precision_at_k(&chain_oracle_ranks(&bundle, &log.chains, &bundle.test), 10).unwrap();
        assert!(oracle > pop + 0.3, "oracle {oracle} vs popularity {pop}");
    }

    #[test]
    fn memorization_targets_are_determined_by_prefix() {
        let b = memorization_fixture().unwrap();
        assert_eq!(b.n_items(), 12);
        let mut seen: HashMap<&[usize], usize> = HashMap::new();
        for ex in &b.train {
            let t = *seen.entry(ex.prefix.as_slice()).or_insert(ex.target);
            assert_eq!(t, ex.target);
        }
    }
}
