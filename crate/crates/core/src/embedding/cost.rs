//! Closed-form upload size and representation capacity per strategy.

use num_bigint::BigUint;

use super::{HashPooling, Strategy};

/// Bytes of one client upload of the item-side trainable parameters
/// (32-bit values).
pub fn comm_cost(strategy: &Strategy, n: usize, k: usize) -> u64 {
    let params = match strategy {
        Strategy::Full => n * k,
        Strategy::Lora { rank } => rank * (n + k),
        Strategy::Hash {
            table_size,
            functions,
            pooling,
            expansion,
            ..
        } => {
            let senet = match pooling {
                HashPooling::Mean => 0,
                HashPooling::Senet => 2 * functions * functions * expansion,
            };
            table_size * k + senet
        }
        Strategy::RqVae {
            levels,
            codebook_size,
        } => levels * codebook_size * k,
    };
    params as u64 * 4
}

/// Number of distinct item representations the strategy can express.
pub fn representation_capacity(strategy: &Strategy, n: usize) -> BigUint {
    match strategy {
        Strategy::Full | Strategy::Lora { .. } => BigUint::from(n),
        Strategy::RqVae {
            levels,
            codebook_size,
        } => BigUint::from(*codebook_size).pow(*levels as u32),
        Strategy::Hash {
            table_size,
            functions,
            ..
        } => multiset_count(*table_size, *functions),
    }
}

/// `C(d + h - 1, h)`.
fn multiset_count(d: usize, h: usize) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for i in 0..h {
        acc *= BigUint::from(d + i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hash(d: usize, h: usize, pooling: HashPooling) -> Strategy {
        Strategy::Hash {
            table_size: d,
            functions: h,
            prime: 4096,
            pooling,
            expansion: 16,
        }
    }

    #[test]
    fn byte_examples() {
        assert_eq!(comm_cost(&Strategy::Lora { rank: 4 }, 3706, 32), 59_808);
        let rq = Strategy::RqVae {
            levels: 4,
            codebook_size: 256,
        };
        assert_eq!(comm_cost(&rq, 3706, 32), 131_072);
        assert_eq!(comm_cost(&Strategy::Full, 3706, 32), 474_368);
        assert_eq!(comm_cost(&hash(512, 2, HashPooling::Mean), 3706, 32), 65_536);
        assert_eq!(
            comm_cost(&hash(512, 2, HashPooling::Senet), 3706, 32) - 65_536,
            512
        );
    }

    #[test]
    fn capacity_examples() {
        let rq = Strategy::RqVae {
            levels: 3,
            codebook_size: 256,
        };
        assert_eq!(representation_capacity(&rq, 10), BigUint::from(16_777_216u32));
        assert_eq!(representation_capacity(&hash(4, 2, HashPooling::Mean), 10), BigUint::from(10u32));
        assert_eq!(representation_capacity(&Strategy::Lora { rank: 2 }, 3706), BigUint::from(3706u32));
        let big = Strategy::RqVae {
            levels: 6,
            codebook_size: 512,
        };
        assert_eq!(representation_capacity(&big, 1), BigUint::from(512u32).pow(6));
    }

    #[test]
    fn multiset_matches_enumeration() {
        for d in 1..6usize {
            for h in 1..4usize {
                // count non-decreasing index tuples
                let mut count = 0u32;
                let mut idx = vec![0usize; h];
                loop {
                    count += 1;
                    let mut p = h;
                    while p > 0 && idx[p - 1] == d - 1 {
                        p -= 1;
                    }
                    if p == 0 {
                        break;
                    }
                    let v = idx[p - 1] + 1;
                    for x in &mut idx[p - 1..] {
                        *x = v;
                    }
                }
                assert_eq!(multiset_count(d, h), BigUint::from(count), "d={d} h={h}");
            }
        }
    }
}
