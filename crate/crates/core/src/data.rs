//! Interaction logs, sequence datasets and the synthetic long-tailed
//! generator.
//!
//! Items are remapped to dense ids `1..=num_items`; id 0 is padding. Each
//! user's chronologically ordered sequence keeps its last item for testing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;

use crate::effective::FrequencyTable;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    /// Parses `user_id<TAB>item_id<TAB>timestamp` lines; blank lines are skipped.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: expected user<TAB>item<TAB>timestamp", n + 1));
            let mut it = line.split('\t');
            let (u, i, t) = (
                it.next().ok_or_else(bad)?,
                it.next().ok_or_else(bad)?,
                it.next().ok_or_else(bad)?,
            );
            records.push(Interaction {
                user: u.trim().parse().map_err(|_| bad())?,
                item: i.trim().parse().map_err(|_| bad())?,
                timestamp: t.trim().parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { records })
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    /// Chronological item ids per user, test item last.
    pub sequences: Vec<Vec<usize>>,
    pub num_items: usize,
    /// Per-sequence occurrence probability over the training prefixes.
    pub frequency: FrequencyTable,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<Vec<usize>>, num_items: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &sequences {
            if s.len() < 2 {
                return Err(Error::InvalidArgument(
                    "every sequence needs a training and a test item".into(),
                ));
            }
            if let Some(&bad) = s.iter().find(|&&t| t == 0 || t > num_items) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    size: num_items + 1,
                });
            }
        }
        let frequency = FrequencyTable::from_sequences(sequences.iter().map(|s| &s[..s.len() - 1]), num_items + 1)?;
        Ok(Self {
            sequences,
            num_items,
            frequency,
        })
    }

    /// Items plus the padding id.
    pub fn vocab_size(&self) -> usize {
        self.num_items + 1
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn train_prefix(&self, user: usize) -> &[usize] {
        let s = &self.sequences[user];
        &s[..s.len() - 1]
    }

    pub fn test_item(&self, user: usize) -> usize {
        *self.sequences[user].last().unwrap()
    }

    /// Log with one record per position, timestamps equal to positions.
    pub fn to_log(&self) -> InteractionLog {
        let mut records = Vec::new();
        for (u, s) in self.sequences.iter().enumerate() {
            for (t, &i) in s.iter().enumerate() {
                records.push(Interaction {
                    user: u as u64,
                    item: i as u64,
                    timestamp: t as i64,
                });
            }
        }
        InteractionLog { records }
    }

    /// One training example per user: a random cut point inside the
    /// training prefix, predicting the item after the cut.
    pub fn epoch_examples(&self, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        (0..self.num_users())
            .map(|u| {
                let n = self.train_prefix(u).len();
                let cut = if n >= 2 { rng.random_range(1..n) } else { 0 };
                (u, cut)
            })
            .collect()
    }

    /// Shuffled fixed-size batches for `epoch`. The trailing partial batch is
    /// dropped when at least one full batch exists.
    pub fn epoch_batches(&self, batch_size: usize, max_len: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut ex = self.epoch_examples(&mut rng);
        ex.retain(|&(_, cut)| cut >= 1);
        ex.shuffle(&mut rng);
        let bs = batch_size.max(1);
        let full = ex.len() / bs;
        let n_batches = if full == 0 { usize::from(!ex.is_empty()) } else { full };
        let mut out = Vec::with_capacity(n_batches);
        for chunk in ex.chunks(bs).take(n_batches) {
            let hist: Vec<&[usize]> = chunk.iter().map(|&(u, cut)| &self.train_prefix(u)[..cut]).collect();
            let targets = chunk.iter().map(|&(u, cut)| self.train_prefix(u)[cut]).collect();
            out.push(Batch::from_histories(&hist, targets, max_len)?);
        }
        Ok(out)
    }

    /// Test batches: full training prefix as history, test item as target.
    pub fn test_batches(&self, batch_size: usize, max_len: usize) -> Result<Vec<Batch>> {
        let users: Vec<usize> = (0..self.num_users()).collect();
        users
            .chunks(batch_size.max(1))
            .map(|c| {
                let hist: Vec<&[usize]> = c.iter().map(|&u| self.train_prefix(u)).collect();
                Batch::from_histories(&hist, c.iter().map(|&u| self.test_item(u)).collect(), max_len)
            })
            .collect()
    }

    /// Writes `sequences.bin` (lengths then ids, tensor format) and a
    /// `manifest.txt`.
    pub fn write_cache(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let lens: Vec<f64> = self.sequences.iter().map(|s| s.len() as f64).collect();
        let ids: Vec<f64> = self.sequences.iter().flatten().map(|&t| t as f64).collect();
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("sequences.bin"))?);
        Tensor::<f64>::new(vec![lens.len()], lens)?.write_to(&mut f)?;
        Tensor::<f64>::new(vec![ids.len()], ids)?.write_to(&mut f)?;
        f.flush()?;
        fs::write(
            dir.join("manifest.txt"),
            format!(
                "format=sequence-cache-v1\nnum_users={}\nnum_items={}\nfile=sequences.bin\n",
                self.num_users(),
                self.num_items
            ),
        )?;
        Ok(())
    }

    pub fn read_cache(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let kv: BTreeMap<&str, &str> = manifest.lines().filter_map(|l| l.split_once('=')).collect();
        if kv.get("format") != Some(&"sequence-cache-v1") {
            return Err(Error::Format("unrecognized dataset cache".into()));
        }
        let num_items: usize = kv
            .get("num_items")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("manifest lacks num_items".into()))?;
        let file = kv.get("file").copied().unwrap_or("sequences.bin");
        let mut f = std::io::BufReader::new(fs::File::open(dir.join(file))?);
        let lens = Tensor::<f64>::read_from(&mut f)?;
        let ids = Tensor::<f64>::read_from(&mut f)?;
        let mut sequences = Vec::with_capacity(lens.numel());
        let mut pos = 0usize;
        for &l in lens.data() {
            let l = l as usize;
            let end = pos + l;
            if end > ids.numel() {
                return Err(Error::Format("sequence cache truncated".into()));
            }
            sequences.push(ids.data()[pos..end].iter().map(|&v| v as usize).collect());
            pos = end;
        }
        Self::new(sequences, num_items)
    }
}

/// Iterated `min_count`-core filter, chronological sort and dense remap.
pub fn preprocess(log: &InteractionLog, min_count: usize) -> Result<SequenceDataset> {
    let mut recs = log.records.clone();
    loop {
        let mut users: BTreeMap<u64, usize> = BTreeMap::new();
        let mut items: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &recs {
            *users.entry(r.user).or_default() += 1;
            *items.entry(r.item).or_default() += 1;
        }
        let before = recs.len();
        recs.retain(|r| users[&r.user] >= min_count && items[&r.item] >= min_count);
        if recs.len() == before {
            break;
        }
    }
    if recs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items: BTreeSet<u64> = recs.iter().map(|r| r.item).collect();
    let dense: BTreeMap<u64, usize> = items.iter().enumerate().map(|(i, &id)| (id, i + 1)).collect();
    let mut by_user: BTreeMap<u64, Vec<(i64, usize, usize)>> = BTreeMap::new();
    for (k, r) in recs.iter().enumerate() {
        by_user
            .entry(r.user)
            .or_default()
            .push((r.timestamp, k, dense[&r.item]));
    }
    let sequences = by_user
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            v.into_iter().map(|(_, _, i)| i).collect()
        })
        .collect();
    SequenceDataset::new(sequences, items.len())
}

/// Item `i` (1-based) drawn with probability proportional to `i^-exponent`.
pub struct ZipfSampler {
    dist: WeightedIndex<f64>,
}

impl ZipfSampler {
    pub fn new(num_items: usize, exponent: f64) -> Result<Self> {
        if num_items == 0 || !(exponent >= 0.0) {
            return Err(Error::InvalidArgument("need items and a nonnegative exponent".into()));
        }
        let w: Vec<f64> = (1..=num_items).map(|r| (r as f64).powf(-exponent)).collect();
        let dist = WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng) + 1
    }
}

/// Users with uniformly drawn lengths in `seq_len` and i.i.d. Zipf items.
pub fn generate_zipf(
    num_users: usize,
    num_items: usize,
    seq_len: (usize, usize),
    exponent: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    let (lo, hi) = seq_len;
    if lo < 2 || hi < lo {
        return Err(Error::InvalidArgument(format!(
            "sequence length range {lo}..={hi} needs 2 <= min <= max"
        )));
    }
    let z = ZipfSampler::new(num_items, exponent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..num_users)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            (0..n).map(|_| z.sample(&mut rng)).collect()
        })
        .collect();
    SequenceDataset::new(sequences, num_items)
}
