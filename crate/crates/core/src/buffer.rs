//! Replay memory partitioned by domain. Each partition is filled by
//! reservoir sampling and stores `(x, y, z)` triples, where `z` is whatever
//! auxiliary vector the method captured at insertion time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::DomainId;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub x: Vec<f64>,
    pub y: usize,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Partition {
    entries: Vec<Entry>,
    seen: u64,
}

/// A batch drawn from one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub domain: DomainId,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub z: Tensor,
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    per_domain: usize,
    partitions: BTreeMap<DomainId, Partition>,
    x_dim: Option<usize>,
    z_dim: Option<usize>,
    rng: Rng,
}

impl MemoryBuffer {
    /// Empty buffer; until the first rebalance a single domain may use the
    /// whole capacity.
    pub fn new(capacity: usize, seed: u64) -> Self {
        MemoryBuffer {
            capacity,
            per_domain: capacity,
            partitions: BTreeMap::new(),
            x_dim: None,
            z_dim: None,
            rng: rng::stream(seed, rng::STREAM_BUFFER),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn per_domain_capacity(&self) -> usize {
        self.per_domain
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(|p| p.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition_len(&self, domain: DomainId) -> usize {
        self.partitions.get(&domain).map_or(0, |p| p.entries.len())
    }

    pub fn entries(&self, domain: DomainId) -> &[Entry] {
        self.partitions.get(&domain).map_or(&[], |p| &p.entries)
    }

    /// Domains with at least one stored entry, ascending.
    pub fn domains(&self) -> Vec<DomainId> {
        self.partitions
            .iter()
            .filter(|(_, p)| !p.entries.is_empty())
            .map(|(&d, _)| d)
            .collect()
    }

    fn check_dims(&mut self, x: usize, z: usize) -> Result<()> {
        for (slot, got, what) in [(&mut self.x_dim, x, "x"), (&mut self.z_dim, z, "z")] {
            match *slot {
                Some(want) if want != got => {
                    return Err(Error::Shape(format!(
                        "buffer stores {what} of width {want}, got {got}"
                    )))
                }
                _ => *slot = Some(got),
            }
        }
        Ok(())
    }

    /// Reservoir insertion: the first `cap` items of a domain are kept, item
    /// number `i` afterwards overwrites a uniform slot with probability
    /// `cap / i`.
    pub fn insert(&mut self, domain: DomainId, x: &[f64], y: usize, z: &[f64]) -> Result<()> {
        if self.per_domain == 0 {
            return Ok(());
        }
        self.check_dims(x.len(), z.len())?;
        let cap = self.per_domain;
        let part = self.partitions.entry(domain).or_default();
        part.seen += 1;
        let entry = Entry {
            x: x.to_vec(),
            y,
            z: z.to_vec(),
        };
        if part.entries.len() < cap {
            part.entries.push(entry);
        } else {
            let j = self.rng.random_range(0..part.seen);
            if (j as usize) < cap {
                part.entries[j as usize] = entry;
            }
        }
        Ok(())
    }

    /// Inserts every row of `x` in order.
    pub fn insert_rows(&mut self, domain: DomainId, x: &Tensor, y: &[usize], z: &Tensor) -> Result<()> {
        if x.rows() != y.len() || z.rows() != y.len() {
            return Err(Error::Shape(format!(
                "insert of {} labels with x {:?}, z {:?}",
                y.len(),
                x.shape(),
                z.shape()
            )));
        }
        for (i, &label) in y.iter().enumerate() {
            self.insert(domain, x.row_slice(i), label, z.row_slice(i))?;
        }
        Ok(())
    }

    /// `n` entries of one partition: uniform with replacement when the
    /// partition holds fewer than `n`, a uniform subset otherwise.
    pub fn sample_batch(&self, domain: DomainId, n: usize, rng: &mut Rng) -> Result<ReplayBatch> {
        let entries = self.entries(domain);
        if entries.is_empty() {
            return Err(Error::EmptyPartition(domain));
        }
        let picks: Vec<usize> = if entries.len() < n {
            (0..n).map(|_| rng.random_range(0..entries.len())).collect()
        } else {
            index::sample(rng, entries.len(), n).into_vec()
        };
        Ok(Self::gather(domain, entries, &picks))
    }

    /// Every entry of a partition, in storage order.
    pub fn partition_batch(&self, domain: DomainId) -> Result<ReplayBatch> {
        let entries = self.entries(domain);
        if entries.is_empty() {
            return Err(Error::EmptyPartition(domain));
        }
        Ok(Self::gather(domain, entries, &(0..entries.len()).collect::<Vec<_>>()))
    }

    fn gather(domain: DomainId, entries: &[Entry], picks: &[usize]) -> ReplayBatch {
        let xd = entries[0].x.len();
        let zd = entries[0].z.len();
        let mut x = Vec::with_capacity(picks.len() * xd);
        let mut z = Vec::with_capacity(picks.len() * zd);
        let mut y = Vec::with_capacity(picks.len());
        for &i in picks {
            x.extend_from_slice(&entries[i].x);
            z.extend_from_slice(&entries[i].z);
            y.push(entries[i].y);
        }
        ReplayBatch {
            domain,
            x: Tensor::from_rows(picks.len(), xd, x).unwrap(),
            y,
            z: Tensor::from_rows(picks.len(), zd, z).unwrap(),
        }
    }

    /// Sets the per-domain capacity to `floor(capacity / active_domains)` and
    /// evicts uniformly chosen entries from oversized partitions. Survivors
    /// keep their relative order.
    pub fn rebalance_capacity(&mut self, active_domains: usize) -> Result<()> {
        if active_domains == 0 {
            return Err(Error::Config("rebalance over zero domains".into()));
        }
        self.per_domain = self.capacity / active_domains;
        for part in self.partitions.values_mut() {
            if part.entries.len() > self.per_domain {
                let mut keep = index::sample(&mut self.rng, part.entries.len(), self.per_domain).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(&mut part.entries);
                let mut old: Vec<Option<Entry>> = old.into_iter().map(Some).collect();
                part.entries = keep.into_iter().map(|i| old[i].take().unwrap()).collect();
            }
        }
        Ok(())
    }

    /// Replaces the stored `z` of every entry of a partition, row by row.
    pub fn refresh_z(&mut self, domain: DomainId, z: &Tensor) -> Result<()> {
        let part = self
            .partitions
            .get_mut(&domain)
            .ok_or(Error::EmptyPartition(domain))?;
        if z.rows() != part.entries.len() || Some(z.cols()) != self.z_dim {
            return Err(Error::Shape(format!(
                "refresh of {} entries with z {:?}",
                part.entries.len(),
                z.shape()
            )));
        }
        for (i, e) in part.entries.iter_mut().enumerate() {
            e.z.copy_from_slice(z.row_slice(i));
        }
        Ok(())
    }

    /// Text dump: a header, then one line per entry holding
    /// `domain y z... x...`.
    pub fn dump(&self) -> String {
        let mut out = String::from("dicl-buffer 1\n");
        let _ = writeln!(
            out,
            "capacity {} per_domain {} x_dim {} z_dim {}",
            self.capacity,
            self.per_domain,
            self.x_dim.unwrap_or(0),
            self.z_dim.unwrap_or(0)
        );
        for (d, p) in &self.partitions {
            let _ = writeln!(out, "partition {d} seen {}", p.seen);
        }
        for (d, p) in &self.partitions {
            for e in &p.entries {
                let _ = write!(out, "{d} {}", e.y);
                for v in e.z.iter().chain(&e.x) {
                    let _ = write!(out, " {v:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Inverse of [`dump`](Self::dump). The restored buffer draws fresh
    /// randomness from `seed`.
    pub fn restore(text: &str, seed: u64) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("buffer dump: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some("dicl-buffer 1") {
            return Err(bad("missing header"));
        }
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing sizes"))?.split(' ').collect();
        let num = |i: usize| -> Result<usize> {
            head.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed sizes line"))
        };
        let (capacity, per_domain, x_dim, z_dim) = (num(1)?, num(3)?, num(5)?, num(7)?);
        let mut buf = MemoryBuffer::new(capacity, seed);
        buf.per_domain = per_domain;
        for line in lines {
            let fields: Vec<&str> = line.split(' ').collect();
            if fields[0] == "partition" {
                let d: DomainId = fields.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
                let seen: u64 = fields.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
                buf.partitions.entry(d).or_default().seen = seen;
                continue;
            }
            if fields.len() != 2 + x_dim + z_dim {
                return Err(bad(line));
            }
            let d: DomainId = fields[0].parse().map_err(|_| bad(line))?;
            let y: usize = fields[1].parse().map_err(|_| bad(line))?;
            let vals = fields[2..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(line))?;
            buf.x_dim = Some(x_dim);
            buf.z_dim = Some(z_dim);
            buf.partitions.entry(d).or_default().entries.push(Entry {
                z: vals[..z_dim].to_vec(),
                x: vals[z_dim..].to_vec(),
                y,
            });
        }
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.dump()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::restore(&text, seed)
    }
}
