//! Sorted-pair keccak Merkle trees. An unpaired node is promoted to the
//! next level unchanged.

use cdfuzz_core::evm::keccak256;

pub fn hash_pair(a: [u8; 32], b: [u8; 32]) -> [u8; 32] {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    keccak256(&[lo, hi].concat())
}

pub struct Tree {
    layers: Vec<Vec<[u8; 32]>>,
}

impl Tree {
    pub fn new(leaves: &[[u8; 32]]) -> Tree {
        assert!(!leaves.is_empty(), "empty tree");
        let mut layers = vec![leaves.to_vec()];
        while layers.last().unwrap().len() > 1 {
            let next = layers
                .last()
                .unwrap()
                .chunks(2)
                .map(|c| if c.len() == 2 { hash_pair(c[0], c[1]) } else { c[0] })
                .collect();
            layers.push(next);
        }
        Tree { layers }
    }

    pub fn root(&self) -> [u8; 32] {
        self.layers.last().unwrap()[0]
    }

    pub fn proof(&self, mut index: usize) -> Vec<[u8; 32]> {
        let mut out = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            let sibling = index ^ 1;
            if sibling < layer.len() {
                out.push(layer[sibling]);
            }
            index /= 2;
        }
        out
    }
}

pub fn process_proof(leaf: [u8; 32], proof: &[[u8; 32]]) -> [u8; 32] {
    proof.iter().fold(leaf, |acc, p| hash_pair(acc, *p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proofs_verify() {
        for n in 1..12u8 {
            let leaves: Vec<[u8; 32]> = (0..n).map(|i| keccak256(&[i])).collect();
            let t = Tree::new(&leaves);
            for (i, l) in leaves.iter().enumerate() {
                assert_eq!(process_proof(*l, &t.proof(i)), t.root());
            }
        }
    }
}
