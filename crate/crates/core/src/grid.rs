use std::ops::Range;

use crate::error::{Error, Result};

/// Partition of `seq_len` tokens into blocks of `block_size`, the last one
/// possibly shorter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockGrid {
    seq_len: usize,
    block_size: usize,
    num_blocks: usize,
    last_block_len: usize,
}

impl BlockGrid {
    pub fn new(seq_len: usize, block_size: usize) -> Result<Self> {
        if seq_len == 0 || block_size == 0 {
            return Err(Error::config(format!(
                "sequence length and block size must be >= 1 (got L={seq_len}, B={block_size})"
            )));
        }
        let num_blocks = seq_len.div_ceil(block_size);
        Ok(BlockGrid {
            seq_len,
            block_size,
            num_blocks,
            last_block_len: seq_len - (num_blocks - 1) * block_size,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of query blocks; equal to the number of key blocks.
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn last_block_len(&self) -> usize {
        self.last_block_len
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.block_size
    }

    pub fn block_start(&self, block: usize) -> usize {
        block * self.block_size
    }

    pub fn block_len(&self, block: usize) -> usize {
        if block + 1 == self.num_blocks {
            self.last_block_len
        } else {
            self.block_size
        }
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let start = self.block_start(block);
        start..start + self.block_len(block)
    }

    /// Number of block pairs `(i, j)` with `j <= i`.
    pub fn causal_pairs(&self) -> usize {
        self.num_blocks * (self.num_blocks + 1) / 2
    }
}

/// Shorthand for [`BlockGrid::new`].
pub fn make_block_grid(seq_len: usize, block_size: usize) -> Result<BlockGrid> {
    BlockGrid::new(seq_len, block_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_division() {
        let g = make_block_grid(256, 128).unwrap();
        assert_eq!((g.num_blocks(), g.last_block_len()), (2, 128));
    }

    #[test]
    fn ceiling_arithmetic() {
        let g = make_block_grid(130, 128).unwrap();
        assert_eq!((g.num_blocks(), g.last_block_len()), (2, 2));
        assert_eq!(g.block_range(1), 128..130);
    }

    #[test]
    fn single_token() {
        let g = make_block_grid(1, 128).unwrap();
        assert_eq!((g.num_blocks(), g.last_block_len()), (1, 1));
        assert_eq!(g.causal_pairs(), 1);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(make_block_grid(0, 4).is_err());
        assert!(make_block_grid(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn blocks_partition_tokens(seq_len in 1usize..5000, block_size in 1usize..300) {
            let g = make_block_grid(seq_len, block_size).unwrap();
            prop_assert!(g.last_block_len() >= 1 && g.last_block_len() <= block_size);
            let mut next = 0;
            for b in 0..g.num_blocks() {
                let r = g.block_range(b);
                prop_assert_eq!(r.start, next);
                for t in r.clone() {
                    prop_assert_eq!(g.block_of(t), b);
                }
                next = r.end;
            }
            prop_assert_eq!(next, seq_len);
        }
    }
}
