//! Layer and token sampling, and assembly of the flattened row matrix.
//!
//! Layers are taken at a fixed interval starting from layer 1. Tokens are
//! chosen by one of three strategies: the four boundary positions (first
//! and last generated token, first and last code token), one random
//! interior token, or every token up to a fixed length with zero padding.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::repr_store::{Dataset, HiddenBlock, PositionsSchema, SampleRecord};
use crate::{Error, Result};

/// Default sequence length for the full-token strategy.
pub const FULL_TOKEN_LEN: usize = 256;

/// What a token position stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRole {
    First,
    Last,
    FirstCode,
    LastCode,
    /// A plain token index (random and full strategies).
    Token,
}

impl PositionRole {
    /// Boundary positions in schema order.
    pub const BOUNDARY: [PositionRole; 4] = [
        PositionRole::First,
        PositionRole::Last,
        PositionRole::FirstCode,
        PositionRole::LastCode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PositionRole::First => "first",
            PositionRole::Last => "last",
            PositionRole::FirstCode => "first_code",
            PositionRole::LastCode => "last_code",
            PositionRole::Token => "token",
        }
    }

    pub fn boundary_slot(self) -> Option<usize> {
        Self::BOUNDARY.iter().position(|r| *r == self)
    }
}

impl fmt::Display for PositionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositionRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(PositionRole::First),
            "last" => Ok(PositionRole::Last),
            "first_code" | "fc" => Ok(PositionRole::FirstCode),
            "last_code" | "lc" => Ok(PositionRole::LastCode),
            "token" => Ok(PositionRole::Token),
            other => Err(Error::Config(format!("unknown position '{other}'"))),
        }
    }
}

/// A selected token: its role, its 0-based index into the generated
/// sequence, and whether it lies past the end of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPosition {
    pub role: PositionRole,
    pub token: usize,
    pub padding: bool,
}

impl TokenPosition {
    pub fn new(role: PositionRole, token: usize) -> Self {
        Self {
            role,
            token,
            padding: false,
        }
    }
}

impl fmt::Display for TokenPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            PositionRole::Token if self.padding => write!(f, "t{}(pad)", self.token),
            PositionRole::Token => write!(f, "t{}", self.token),
            role => f.write_str(role.name()),
        }
    }
}

/// Token sampling strategy. Config names: `boundary4`, `random[:seed]`,
/// `full<len>` (`full` alone means `full256`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TokenStrategy {
    #[default]
    BoundaryAware,
    Random {
        seed: u64,
    },
    Full {
        fixed_len: usize,
    },
}

impl TokenStrategy {
    /// Positions per layer this strategy yields.
    pub fn positions_per_layer(&self) -> usize {
        match self {
            TokenStrategy::BoundaryAware => 4,
            TokenStrategy::Random { .. } => 1,
            TokenStrategy::Full { fixed_len } => *fixed_len,
        }
    }
}

impl fmt::Display for TokenStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenStrategy::BoundaryAware => f.write_str("boundary4"),
            TokenStrategy::Random { seed } => write!(f, "random:{seed}"),
            TokenStrategy::Full { fixed_len } => write!(f, "full{fixed_len}"),
        }
    }
}

impl FromStr for TokenStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown token strategy '{s}'"));
        match s {
            "boundary4" | "boundary_aware" => Ok(TokenStrategy::BoundaryAware),
            "random" => Ok(TokenStrategy::Random { seed: 0 }),
            "full" => Ok(TokenStrategy::Full {
                fixed_len: FULL_TOKEN_LEN,
            }),
            _ => {
                if let Some(seed) = s.strip_prefix("random:") {
                    let seed = seed.parse().map_err(|_| bad())?;
                    Ok(TokenStrategy::Random { seed })
                } else if let Some(len) = s.strip_prefix("full") {
                    let fixed_len: usize = len.parse().map_err(|_| bad())?;
                    if fixed_len == 0 {
                        return Err(Error::Config("full token length must be >= 1".into()));
                    }
                    Ok(TokenStrategy::Full { fixed_len })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl TryFrom<String> for TokenStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TokenStrategy> for String {
    fn from(s: TokenStrategy) -> String {
        s.to_string()
    }
}

/// Layer sampling interval `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerConfig {
    pub k: usize,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self { k: 1 }
    }
}

impl LayerConfig {
    pub fn layers(&self, model_layers: usize) -> Result<Vec<usize>> {
        select_layers(model_layers, self.k)
    }
}

/// 1-based layers `{1, 1+k, ..., 1 + floor((L-1)/k) * k}`.
///
/// The number of selected layers is the size of this set, which can exceed
/// `floor(L/k)` (e.g. `L = 33, k = 4` gives 9 layers).
pub fn select_layers(model_layers: usize, k: usize) -> Result<Vec<usize>> {
    if model_layers == 0 {
        return Err(Error::Config("model layer count must be >= 1".into()));
    }
    if k == 0 || k > model_layers {
        return Err(Error::Config(format!(
            "layer interval k={k} outside 1..={model_layers}"
        )));
    }
    Ok((1..=model_layers).step_by(k).collect())
}

/// The four boundary positions of a sample in schema order. Without a code
/// span the code slots fall back to the first and last token.
pub fn boundary_positions(sample: &SampleRecord) -> [TokenPosition; 4] {
    let last = sample.m.saturating_sub(1);
    let (fc, lc) = match (sample.first_code_idx, sample.last_code_idx) {
        (Some(a), Some(b)) => (a, b),
        _ => (0, last),
    };
    [
        TokenPosition::new(PositionRole::First, 0),
        TokenPosition::new(PositionRole::Last, last),
        TokenPosition::new(PositionRole::FirstCode, fc),
        TokenPosition::new(PositionRole::LastCode, lc),
    ]
}

/// Token positions chosen by `strategy` for `sample`.
pub fn select_positions(strategy: &TokenStrategy, sample: &SampleRecord) -> Vec<TokenPosition> {
    match *strategy {
        TokenStrategy::BoundaryAware => boundary_positions(sample).to_vec(),
        TokenStrategy::Random { seed } => {
            let token = if sample.m <= 2 {
                0
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(sample.id.as_bytes()));
                rng.gen_range(1..=sample.m - 2)
            };
            vec![TokenPosition::new(PositionRole::Token, token)]
        }
        TokenStrategy::Full { fixed_len } => full_positions(fixed_len, sample.m),
    }
}

fn full_positions(len: usize, m: usize) -> Vec<TokenPosition> {
    (0..len)
        .map(|token| TokenPosition {
            role: PositionRole::Token,
            token,
            padding: token >= m,
        })
        .collect()
}

/// Positions physically stored for `sample` under `schema`, in slot order.
pub fn stored_positions(schema: &PositionsSchema, sample: &SampleRecord) -> Vec<TokenPosition> {
    match schema {
        PositionsSchema::Boundary4 => boundary_positions(sample).to_vec(),
        PositionsSchema::Full(len) => full_positions(*len, sample.m),
        PositionsSchema::Custom(tokens) => tokens
            .iter()
            .map(|&token| TokenPosition {
                role: PositionRole::Token,
                token,
                padding: token >= sample.m,
            })
            .collect(),
    }
}

// Stable per-sample hash so random positions do not depend on dataset order.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Identifies one row of an assembled matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowId {
    pub layer: usize,
    pub position: TokenPosition,
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}", self.layer, self.position)
    }
}

/// Flattened `(layers * positions) x d` matrix and the identity of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub h: Matrix,
    pub row_index: Vec<RowId>,
}

/// Loads the block of `sample_id` and stacks the requested rows
/// layer-major, positions in the given order within each layer.
pub fn assemble_h(
    dataset: &Dataset,
    sample_id: &str,
    layers: &[usize],
    positions: &[TokenPosition],
) -> Result<AssembledInput> {
    let record = dataset.record(sample_id)?;
    let block = dataset.block(sample_id)?;
    assemble_from_block(&block, &dataset.manifest().positions_schema, record, layers, positions)
}

/// Same as [`assemble_h`] for an already loaded block.
pub fn assemble_from_block(
    block: &HiddenBlock,
    schema: &PositionsSchema,
    record: &SampleRecord,
    layers: &[usize],
    positions: &[TokenPosition],
) -> Result<AssembledInput> {
    let layer_slots = layers
        .iter()
        .map(|&l| block.layers.binary_search(&l).map_err(|_| Error::LayerNotStored(l)))
        .collect::<Result<Vec<_>>>()?;
    let pos_slots = positions
        .iter()
        .map(|p| resolve_slot(schema, &block.positions, p, &record.id))
        .collect::<Result<Vec<_>>>()?;

    let d = block.hidden_dim;
    let mut h = Matrix::zeros(layers.len() * positions.len(), d);
    let mut row_index = Vec::with_capacity(h.rows());
    let mut r = 0;
    for (&layer, &ls) in layers.iter().zip(&layer_slots) {
        for (pos, slot) in positions.iter().zip(&pos_slots) {
            if let Some(ps) = slot {
                for (dst, src) in h.row_mut(r).iter_mut().zip(block.row(ls, *ps)) {
                    *dst = f64::from(*src);
                }
            }
            row_index.push(RowId { layer, position: *pos });
            r += 1;
        }
    }
    Ok(AssembledInput { h, row_index })
}

// `None` means a padding row (all zeros).
fn resolve_slot(
    schema: &PositionsSchema,
    stored: &[TokenPosition],
    requested: &TokenPosition,
    sample_id: &str,
) -> Result<Option<usize>> {
    if requested.padding {
        return Ok(None);
    }
    let slot = match schema {
        PositionsSchema::Boundary4 => requested.role.boundary_slot(),
        PositionsSchema::Full(_) | PositionsSchema::Custom(_) => {
            stored.iter().position(|p| p.token == requested.token && !p.padding)
        }
    };
    slot.map(Some)
        .ok_or_else(|| Error::PositionNotStored(format!("{requested} of sample '{sample_id}'")))
}
