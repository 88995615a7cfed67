//! Integer arithmetic for the binary-tree labeling: the root is 1 and the
//! daughters of `k` are `2k` and `2k + 1`.

use std::fmt;
use std::ops::RangeInclusive;

use crate::error::{BarError, Result};

/// Largest generation whose node ids still fit comfortably in a `u64`.
pub const MAX_GENERATION: u32 = 62;

/// Label of a cell in the complete binary tree. Always `>= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(1);

    pub fn new(value: u64) -> Result<Self> {
        if value == 0 {
            return Err(BarError::domain("node ids start at 1"));
        }
        Ok(NodeId(value))
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn generation(self) -> Generation {
        generation_of(self)
    }

    /// Daughters `(2k, 2k+1)`. Fails when the daughters would overflow.
    pub fn children(self) -> Result<(NodeId, NodeId)> {
        let even = self
            .0
            .checked_mul(2)
            .filter(|v| v.checked_add(1).is_some())
            .ok_or_else(|| BarError::domain(format!("children of {} overflow u64", self.0)))?;
        Ok((NodeId(even), NodeId(even + 1)))
    }

    pub fn parent(self) -> Option<NodeId> {
        (self.0 > 1).then_some(NodeId(self.0 / 2))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Generation number: node `k` lives in generation `g` iff `2^g <= k < 2^(g+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Generation(u32);

impl Generation {
    pub fn new(value: u32) -> Result<Self> {
        if value > MAX_GENERATION {
            return Err(BarError::domain(format!(
                "generation {value} exceeds the supported maximum {MAX_GENERATION}"
            )));
        }
        Ok(Generation(value))
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    /// First node id of the generation, `2^g`.
    #[inline]
    pub fn first(self) -> u64 {
        1u64 << self.0
    }

    /// Node ids of the generation, `2^g ..= 2^(g+1) - 1`.
    pub fn nodes(self) -> impl Iterator<Item = NodeId> + Clone {
        let first = self.first();
        (first..=first + (first - 1)).map(NodeId)
    }

    /// Number of cells in the generation, `2^g`.
    #[inline]
    pub fn len(self) -> u64 {
        self.first()
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        false
    }
}

impl fmt::Display for Generation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `floor(log2 k)`, by bit length.
#[inline]
pub fn generation_of(k: NodeId) -> Generation {
    Generation(63 - k.0.leading_zeros())
}

/// `floor(k / 2^j)`; `j` may not climb above the root.
pub fn ancestor(k: NodeId, j: u32) -> Result<NodeId> {
    let g = generation_of(k).0;
    if j > g {
        return Err(BarError::domain(format!(
            "node {k} is in generation {g}; cannot climb {j} generations"
        )));
    }
    Ok(NodeId(k.0 >> j))
}

/// Cardinalities `(|T_n|, |G_n|, |T_{n,p}|)` where `T_{n,p}` keeps the ids
/// of `T_n` that are `>= 2^p`.
pub fn subtree_counts(n: Generation, p: u32) -> (u64, u64, u64) {
    let tree = (2u64 << n.0) - 1;
    let generation = 1u64 << n.0;
    let restricted = if p > n.0 { 0 } else { (2u64 << n.0) - (1u64 << p) };
    (tree, generation, restricted)
}

/// Size of the sub-tree `T_n`, `2^(n+1) - 1`.
#[inline]
pub fn tree_size(n: u32) -> u64 {
    (2u64 << n) - 1
}

/// Node ids of the mothers used by an estimator built from `T_n`: the
/// restricted sub-tree `T_{n, p-1}`, i.e. ids `2^(p-1) ..= 2^(n+1) - 1`.
///
/// Every sum over mothers in the crate goes through this helper so the
/// index convention lives in one place. Empty when `n < p - 1`.
pub fn mother_range(n: i64, p: u32) -> RangeInclusive<u64> {
    let first = 1u64 << (p - 1);
    let last = if n < i64::from(p) - 1 { first - 1 } else { tree_size(n as u32) };
    first..=last
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(v: u64) -> NodeId {
        NodeId::new(v).unwrap()
    }

    #[test]
    fn generation_examples() {
        assert_eq!(generation_of(node(1)).get(), 0);
        assert_eq!(generation_of(node(7)).get(), 2);
        assert_eq!(generation_of(node(1024)).get(), 10);
        assert_eq!(generation_of(node(u64::MAX)).get(), 63);
    }

    #[test]
    fn ancestor_examples() {
        assert_eq!(ancestor(node(13), 2).unwrap(), node(3));
        assert_eq!(ancestor(node(6), 1).unwrap(), node(3));
        assert_eq!(ancestor(node(41), 0).unwrap(), node(41));
        assert!(matches!(ancestor(node(6), 3), Err(BarError::Domain(_))));
    }

    #[test]
    fn zero_is_not_a_node() {
        assert!(NodeId::new(0).is_err());
    }

    #[test]
    fn counts() {
        let g3 = Generation::new(3).unwrap();
        assert_eq!(subtree_counts(g3, 0), (15, 8, 15));
        assert_eq!(subtree_counts(g3, 2), (15, 8, 12));
        assert_eq!(subtree_counts(g3, 5), (15, 8, 0));
        for p in 0..10 {
            let gp = Generation::new(p).unwrap();
            assert_eq!(subtree_counts(gp, p), ((2 << p) - 1, 1 << p, 1 << p));
        }
    }

    #[test]
    fn generation_bounds() {
        assert!(Generation::new(MAX_GENERATION).is_ok());
        assert!(Generation::new(MAX_GENERATION + 1).is_err());
    }

    #[test]
    fn mother_range_convention() {
        assert_eq!(mother_range(2, 1), 1..=7);
        assert_eq!(mother_range(3, 2), 2..=15);
        assert!(mother_range(0, 2).is_empty());
        assert_eq!(mother_range(1, 2), 2..=3);
    }

    proptest! {
        #[test]
        fn generation_recurses_through_parent(k in 2u64..u64::MAX) {
            let k = node(k);
            let parent = k.parent().unwrap();
            prop_assert_eq!(generation_of(k).get(), generation_of(parent).get() + 1);
        }

        #[test]
        fn climbing_to_the_top_reaches_root(k in 1u64..u64::MAX) {
            let k = node(k);
            prop_assert_eq!(ancestor(k, generation_of(k).get()).unwrap(), NodeId::ROOT);
        }

        #[test]
        fn generation_iterator_is_contiguous(g in 0u32..16) {
            let gen = Generation::new(g).unwrap();
            let ids: Vec<u64> = gen.nodes().map(NodeId::get).collect();
            prop_assert_eq!(ids.len() as u64, 1u64 << g);
            prop_assert_eq!(ids[0], 1u64 << g);
            prop_assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
            prop_assert!(ids.iter().all(|&k| generation_of(node(k)) == gen));
        }
    }
}
