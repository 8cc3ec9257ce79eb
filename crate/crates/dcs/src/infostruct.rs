//! Information structures: who may use which measurements, and when.
//!
//! Over a horizon of `N` steps, the input at time `k` is formed from the
//! measurements `y_0, ..., y_k`. The block `S_{k,j}` (inputs x sensors) marks
//! which entries of `y_j` the input at time `k` may depend on. This module
//! provides the standard families — constant, delay-based, and
//! communication-propagation structures — plus fully custom block maps, and
//! assembles the stacked pattern used by the synthesis layers.

use std::collections::BTreeMap;

use rand::prelude::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binmat::BinaryMatrix;
use crate::error::{Error, Result};

/// How long a measurement takes to reach a controller; `Never` means it is
/// never seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delay {
    Finite(usize),
    Never,
}

impl Delay {
    /// True when data delayed by `self` at time `k` includes time `j`.
    fn admits(self, k: usize, j: usize) -> bool {
        match self {
            Delay::Finite(d) => j + d <= k,
            Delay::Never => false,
        }
    }
}

/// An `m x p` matrix of delays, entry `(a, b)` being the delay from sensor
/// `b` to actuator `a`.
#[derive(Clone, Debug)]
pub struct DelayMatrix {
    m: usize,
    p: usize,
    entries: Vec<Delay>,
}

impl DelayMatrix {
    pub fn from_rows(rows: &[Vec<Delay>]) -> Result<Self> {
        let m = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(m * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::RaggedRows {
                    row: i,
                    expected: p,
                    found: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Ok(DelayMatrix { m, p, entries })
    }

    /// All actuator/sensor pairs share one delay.
    pub fn uniform(d: Delay, m: usize, p: usize) -> Self {
        DelayMatrix {
            m,
            p,
            entries: vec![d; m * p],
        }
    }

    pub fn get(&self, a: usize, b: usize) -> Delay {
        self.entries[a * self.p + b]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.p)
    }
}

/// A communication graph on the `m` actuator nodes: `Z[i,j] = 1` when node
/// `j` passes information to node `i` in one step. The diagonal is forced to
/// be 1 (every node knows its own data).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommTopology {
    z: BinaryMatrix,
}

impl CommTopology {
    pub fn new(z: BinaryMatrix) -> Result<Self> {
        if z.nrows() != z.ncols() {
            return Err(Error::dims(
                "CommTopology::new",
                "square matrix".to_string(),
                format!("{}x{}", z.nrows(), z.ncols()),
            ));
        }
        for i in 0..z.nrows() {
            if !z.get(i, i) {
                return Err(Error::BadTopology { node: i });
            }
        }
        Ok(CommTopology { z })
    }

    pub fn matrix(&self) -> &BinaryMatrix {
        &self.z
    }

    pub fn nodes(&self) -> usize {
        self.z.nrows()
    }

    /// Stabilization index of the boolean powers: the smallest `D` with
    /// `Z^D = Z^(D+1)`. Because the diagonal is 1, powers only grow, so this
    /// exists and is at most `nodes - 1`. `Z^D` is the reachability closure.
    pub fn diameter(&self) -> usize {
        let mut d = 0;
        let mut current = BinaryMatrix::identity(self.z.nrows());
        loop {
            let next = current.bool_mul(&self.z).expect("square");
            if next == current {
                return d;
            }
            current = next;
            d += 1;
        }
    }
}

/// The complete family of blocks `S_{k,j}` for `0 <= j <= k <= N-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InformationStructure {
    n_steps: usize,
    m: usize,
    p: usize,
    blocks: BTreeMap<(usize, usize), BinaryMatrix>,
}

impl InformationStructure {
    /// Builds from an explicit block map; every causal pair `(k, j)` must be
    /// present with an `m x p` pattern, and no other keys are allowed.
    pub fn custom(
        blocks: BTreeMap<(usize, usize), BinaryMatrix>,
        n_steps: usize,
        m: usize,
        p: usize,
    ) -> Result<Self> {
        assert!(n_steps >= 1, "horizon must be at least 1");
        for (&(k, j), block) in &blocks {
            if j > k || k >= n_steps {
                return Err(Error::BadBlockKey { k, j, n_steps });
            }
            if block.shape() != (m, p) {
                return Err(Error::dims(
                    "InformationStructure::custom",
                    format!("{m}x{p} block at ({k},{j})"),
                    format!("{}x{}", block.nrows(), block.ncols()),
                ));
            }
        }
        for k in 0..n_steps {
            for j in 0..=k {
                if !blocks.contains_key(&(k, j)) {
                    return Err(Error::MissingBlock { k, j });
                }
            }
        }
        Ok(InformationStructure {
            n_steps,
            m,
            p,
            blocks,
        })
    }

    /// The same pattern `S` at every causal pair.
    pub fn constant(s: &BinaryMatrix, n_steps: usize) -> Self {
        Self::from_fn(n_steps, s.nrows(), s.ncols(), |_, _| s.clone())
    }

    /// Sparsity induced by per-pair transmission delays: actuator `a` sees
    /// sensor `b`'s measurement from time `j` at time `k` iff
    /// `d(a,b) <= k - j`.
    pub fn fixed_delay(d: &DelayMatrix, n_steps: usize) -> Self {
        let (m, p) = d.shape();
        Self::time_varying_delay(|_, a, b| d.get(a, b), n_steps, m, p)
    }

    /// Delays that may depend on the decision time `k`: entry `(a, b)` of
    /// `S_{k,j}` is 1 iff `e(k, a, b) <= k - j`.
    pub fn time_varying_delay(
        e: impl Fn(usize, usize, usize) -> Delay,
        n_steps: usize,
        m: usize,
        p: usize,
    ) -> Self {
        Self::from_fn(n_steps, m, p, |k, j| {
            BinaryMatrix::from_fn(m, p, |a, b| e(k, a, b).admits(k, j))
        })
    }

    /// Information spreading over a communication graph: a measurement
    /// pattern `S` propagates one hop per step, saturating once the age of
    /// the data exceeds the graph diameter:
    /// `S_{k,j} = Z^min(diameter, k-j) * S`.
    pub fn comm_propagation(s: &BinaryMatrix, z: &CommTopology, n_steps: usize) -> Result<Self> {
        if s.nrows() != z.nodes() {
            return Err(Error::dims(
                "comm_propagation",
                format!("{} rows to match the topology", z.nodes()),
                format!("{}", s.nrows()),
            ));
        }
        let diam = z.diameter();
        let mut spread = Vec::with_capacity(diam + 1);
        spread.push(s.clone());
        for a in 1..=diam {
            spread.push(z.matrix().bool_mul(&spread[a - 1])?);
        }
        Ok(Self::from_fn(n_steps, s.nrows(), s.ncols(), |k, j| {
            spread[(k - j).min(diam)].clone()
        }))
    }

    /// Draws every block uniformly (per pair, seeded) from a shared list of
    /// candidate patterns.
    pub fn sample(choices: &[BinaryMatrix], n_steps: usize, seed: u64) -> Result<Self> {
        let first = choices
            .first()
            .ok_or_else(|| Error::Schema("sample requires at least one candidate pattern".into()))?;
        let (m, p) = first.shape();
        for c in choices {
            if c.shape() != (m, p) {
                return Err(Error::dims(
                    "InformationStructure::sample",
                    format!("{m}x{p}"),
                    format!("{}x{}", c.nrows(), c.ncols()),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_fn(n_steps, m, p, |_, _| {
            choices.choose(&mut rng).unwrap().clone()
        }))
    }

    fn from_fn(
        n_steps: usize,
        m: usize,
        p: usize,
        mut f: impl FnMut(usize, usize) -> BinaryMatrix,
    ) -> Self {
        assert!(n_steps >= 1, "horizon must be at least 1");
        let mut blocks = BTreeMap::new();
        for k in 0..n_steps {
            for j in 0..=k {
                blocks.insert((k, j), f(k, j));
            }
        }
        InformationStructure {
            n_steps,
            m,
            p,
            blocks,
        }
    }

    pub fn horizon(&self) -> usize {
        self.n_steps
    }

    pub fn num_inputs(&self) -> usize {
        self.m
    }

    pub fn num_outputs(&self) -> usize {
        self.p
    }

    /// The block `S_{k,j}`; panics unless `j <= k < N`.
    pub fn block(&self, k: usize, j: usize) -> &BinaryMatrix {
        self.blocks
            .get(&(k, j))
            .unwrap_or_else(|| panic!("no block ({k},{j}) in a horizon-{} structure", self.n_steps))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &BinaryMatrix)> {
        self.blocks.iter()
    }

    /// The stacked pattern for controllers mapping `(y_0..y_N)` to
    /// `(u_0..u_N)`: block `(k, j)` is `S_{k,j}` for causal pairs, zero
    /// elsewhere. Block row `N` and block column `N` are zero — no input is
    /// applied at the final time, and no input may use the final measurement.
    pub fn big_s(&self) -> BinaryMatrix {
        let (n, m, p) = (self.n_steps, self.m, self.p);
        let mut big = BinaryMatrix::zeros(m * (n + 1), p * (n + 1));
        for (&(k, j), block) in &self.blocks {
            big.insert_block(k * m, j * p, block);
        }
        big
    }
}

/// One entry of a delay table as it appears in JSON: a nonnegative integer
/// or the string `"inf"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DelayEntry {
    Finite(usize),
    Symbol(String),
}

impl DelayEntry {
    fn to_delay(&self) -> Result<Delay> {
        match self {
            DelayEntry::Finite(d) => Ok(Delay::Finite(*d)),
            DelayEntry::Symbol(s) if s == "inf" => Ok(Delay::Never),
            DelayEntry::Symbol(s) => Err(Error::Schema(format!(
                "delay entries must be integers or \"inf\", got {s:?}"
            ))),
        }
    }
}

fn delay_rows(rows: &[Vec<DelayEntry>]) -> Result<DelayMatrix> {
    let parsed: Vec<Vec<Delay>> = rows
        .iter()
        .map(|r| r.iter().map(DelayEntry::to_delay).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    DelayMatrix::from_rows(&parsed)
}

/// JSON description of an information structure, dispatching on `kind`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum InfoStructSpec {
    #[serde(rename = "constant")]
    Constant {
        #[serde(rename = "N")]
        n_steps: usize,
        m: usize,
        p: usize,
        #[serde(rename = "S")]
        s: BinaryMatrix,
    },
    #[serde(rename = "fixed_delay")]
    FixedDelay {
        #[serde(rename = "N")]
        n_steps: usize,
        m: usize,
        p: usize,
        d: Vec<Vec<DelayEntry>>,
    },
    #[serde(rename = "time_varying_delay")]
    TimeVaryingDelay {
        #[serde(rename = "N")]
        n_steps: usize,
        m: usize,
        p: usize,
        /// One `m x p` delay table per decision time `k = 0..N-1`.
        e: Vec<Vec<Vec<DelayEntry>>>,
    },
    #[serde(rename = "comm")]
    Comm {
        #[serde(rename = "N")]
        n_steps: usize,
        m: usize,
        p: usize,
        #[serde(rename = "S")]
        s: BinaryMatrix,
        #[serde(rename = "Z")]
        z: BinaryMatrix,
    },
    #[serde(rename = "custom")]
    Custom {
        #[serde(rename = "N")]
        n_steps: usize,
        m: usize,
        p: usize,
        /// Keys are `"k,j"` with `0 <= j <= k <= N-1`.
        blocks: BTreeMap<String, BinaryMatrix>,
    },
}

impl InfoStructSpec {
    pub fn horizon(&self) -> usize {
        match self {
            InfoStructSpec::Constant { n_steps, .. }
            | InfoStructSpec::FixedDelay { n_steps, .. }
            | InfoStructSpec::TimeVaryingDelay { n_steps, .. }
            | InfoStructSpec::Comm { n_steps, .. }
            | InfoStructSpec::Custom { n_steps, .. } => *n_steps,
        }
    }

    /// Validates the description and builds the structure.
    pub fn build(&self) -> Result<InformationStructure> {
        let check_dims = |what: &str, got: (usize, usize), m: usize, p: usize| -> Result<()> {
            if got != (m, p) {
                return Err(Error::Schema(format!(
                    "info.{what} must be {m}x{p}, got {}x{}",
                    got.0, got.1
                )));
            }
            Ok(())
        };
        if self.horizon() == 0 {
            return Err(Error::Schema("info.N must be at least 1".into()));
        }
        match self {
            InfoStructSpec::Constant { n_steps, m, p, s } => {
                check_dims("S", s.shape(), *m, *p)?;
                Ok(InformationStructure::constant(s, *n_steps))
            }
            InfoStructSpec::FixedDelay { n_steps, m, p, d } => {
                let d = delay_rows(d)?;
                check_dims("d", d.shape(), *m, *p)?;
                Ok(InformationStructure::fixed_delay(&d, *n_steps))
            }
            InfoStructSpec::TimeVaryingDelay { n_steps, m, p, e } => {
                if e.len() != *n_steps {
                    return Err(Error::Schema(format!(
                        "info.e must list one delay table per step: expected {n_steps}, got {}",
                        e.len()
                    )));
                }
                let tables: Vec<DelayMatrix> =
                    e.iter().map(|t| delay_rows(t)).collect::<Result<_>>()?;
                for t in &tables {
                    check_dims("e[k]", t.shape(), *m, *p)?;
                }
                Ok(InformationStructure::time_varying_delay(
                    |k, a, b| tables[k].get(a, b),
                    *n_steps,
                    *m,
                    *p,
                ))
            }
            InfoStructSpec::Comm { n_steps, m, p, s, z } => {
                check_dims("S", s.shape(), *m, *p)?;
                if z.shape() != (*m, *m) {
                    return Err(Error::Schema(format!(
                        "info.Z must be {m}x{m}, got {}x{}",
                        z.nrows(),
                        z.ncols()
                    )));
                }
                let topo = CommTopology::new(z.clone())?;
                InformationStructure::comm_propagation(s, &topo, *n_steps)
            }
            InfoStructSpec::Custom {
                n_steps,
                m,
                p,
                blocks,
            } => {
                let mut parsed = BTreeMap::new();
                for (key, block) in blocks {
                    let (k, j) = parse_block_key(key)?;
                    parsed.insert((k, j), block.clone());
                }
                InformationStructure::custom(parsed, *n_steps, *m, *p)
            }
        }
    }
}

pub(crate) fn parse_block_key(key: &str) -> Result<(usize, usize)> {
    let bad = || Error::Schema(format!("block keys must look like \"k,j\", got {key:?}"));
    let (k, j) = key.split_once(',').ok_or_else(bad)?;
    Ok((
        k.trim().parse().map_err(|_| bad())?,
        j.trim().parse().map_err(|_| bad())?,
    ))
}
