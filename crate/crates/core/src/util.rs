//! Small numeric and seeding helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::text::fnv1a64;

/// Generator keyed by a base seed and a list of string parts, so that per-key
/// streams do not depend on iteration order.
pub fn keyed_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut buf = seed.to_le_bytes().to_vec();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.as_bytes());
    }
    ChaCha8Rng::seed_from_u64(fnv1a64(&buf))
}

/// Splits `total` into parts proportional to `weights` with the largest
/// remainder method. Ties in the remainder go to the earlier part.
pub fn largest_remainder(total: usize, weights: &[u64]) -> Vec<usize> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total = total as u128;
    let mut parts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = total * w as u128;
        parts.push((num / sum as u128) as usize);
        rems.push((num % sum as u128, i));
    }
    let assigned: usize = parts.iter().sum();
    let mut left = total as usize - assigned;
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &rems {
        if left == 0 {
            break;
        }
        if weights[i] > 0 {
            parts[i] += 1;
            left -= 1;
        }
    }
    parts
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is all-zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Normalizes in place unless the vector is all-zero.
pub fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn largest_remainder_cases() {
        assert_eq!(largest_remainder(1000, &[8, 1, 1]), vec![800, 100, 100]);
        assert_eq!(largest_remainder(10, &[8, 1, 1]), vec![8, 1, 1]);
        // 8.8 / 1.1 / 1.1: the leftover unit goes to the largest remainder.
        assert_eq!(largest_remainder(11, &[8, 1, 1]), vec![9, 1, 1]);
        assert_eq!(largest_remainder(100, &[50, 20, 15, 15]), vec![50, 20, 15, 15]);
        assert_eq!(largest_remainder(7, &[1, 0, 0, 0]), vec![7, 0, 0, 0]);
        // Equal remainders: earlier part wins.
        assert_eq!(largest_remainder(2, &[1, 1, 1]), vec![1, 1, 0]);
    }

    #[test]
    fn keyed_rng_depends_on_parts_only() {
        let a: u64 = keyed_rng(7, &["u1"]).gen();
        let b: u64 = keyed_rng(7, &["u1"]).gen();
        let c: u64 = keyed_rng(7, &["u2"]).gen();
        let d: u64 = keyed_rng(7, &["u", "1"]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn cosine_zero_convention() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
