//! Flat parameter storage with a named block layout, plus checkpoint
//! serialization ("presem-ckpt-v1").

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Optimizer parameter group a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature grids, SDF/RGB decoders, inv_s.
    Field,
    /// Pre-rendering density MLP.
    PrMlp,
    /// Semantic color head.
    Semantic,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub group: ParamGroup,
}

/// Maps named blocks onto ranges of the flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, len: usize, group: ParamGroup) -> usize {
        let offset = self.total;
        self.blocks.push(Block {
            name: name.into(),
            offset,
            len,
            group,
        });
        self.total += len;
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Name of the block containing flat index `i` (for diagnostics).
    pub fn block_of(&self, i: usize) -> &str {
        match self
            .blocks
            .binary_search_by(|b| {
                if i < b.offset {
                    std::cmp::Ordering::Greater
                } else if i >= b.offset + b.len {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .ok()
        {
            Some(k) => &self.blocks[k].name,
            None => "<unknown>",
        }
    }

    /// Flat indices (as ranges) belonging to a group.
    pub fn group_ranges(&self, group: ParamGroup) -> Vec<std::ops::Range<usize>> {
        self.blocks
            .iter()
            .filter(|b| b.group == group)
            .map(|b| b.offset..b.offset + b.len)
            .collect()
    }

    /// First non-finite entry of `values`, reported with its block name.
    pub fn check_finite(&self, values: &[f64], what: &str) -> Result<()> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite {what} in block '{}' (flat index {i})",
                    self.block_of(i)
                )));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &str = "presem-ckpt-v1";

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
