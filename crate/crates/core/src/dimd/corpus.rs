//! Synthetic datasets standing in for a real image corpus.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Record;

pub const FEATURES: usize = 16;
pub const CLASSES: usize = 4;

/// Cluster spread; class centres sit 3 units apart along their own axes.
const NOISE_SIGMA: f32 = 0.5;
const CENTRE: f32 = 3.0;

/// `n` records of [`FEATURES`] little-endian `f32`s, drawn from one
/// Gaussian blob per class. Class `c` is centred on `CENTRE` along feature
/// axes `c, c + CLASSES, ...` and 0 elsewhere, so the classes are linearly
/// separable with high probability.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..CLASSES);
            let mut x = [0.0f32; FEATURES];
            for (d, v) in x.iter_mut().enumerate() {
                let centre = if d % CLASSES == label { CENTRE } else { 0.0 };
                *v = centre + noise.sample(&mut rng);
            }
            Record::new(encode_features(&x), label as u32)
        })
        .collect()
}

pub fn encode_features(x: &[f32; FEATURES]) -> Vec<u8> {
    x.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Inverse of [`encode_features`]; `None` if `bytes` has the wrong size.
pub fn decode_features(bytes: &[u8]) -> Option<[f32; FEATURES]> {
    if bytes.len() != FEATURES * 4 {
        return None;
    }
    let mut x = [0.0f32; FEATURES];
    for (v, c) in x.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    Some(x)
}

/// `n` records of `len` random bytes with random labels, for shuffle
/// benchmarks where content does not matter.
pub fn uniform_records(n: usize, len: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut bytes = vec![0u8; len.max(1)];
            rng.fill_bytes(&mut bytes);
            Record::new(bytes, rng.gen_range(0..CLASSES as u32))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip() {
        let r = &synthetic_corpus(1, 0)[0];
        let x = decode_features(&r.bytes).unwrap();
        assert_eq!(encode_features(&x), r.bytes);
        assert!(decode_features(&r.bytes[1..]).is_none());
    }

    #[test]
    fn nearest_centre_classifies_almost_everything() {
        let data = synthetic_corpus(2000, 7);
        let correct = data
            .iter()
            .filter(|r| {
                let x = decode_features(&r.bytes).unwrap();
                let score = |c: usize| (0..FEATURES).filter(|d| d % CLASSES == c).map(|d| x[d]).sum::<f32>();
                (0..CLASSES).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() == r.label as usize
            })
            .count();
        assert!(correct >= 1990, "{correct}");
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(synthetic_corpus(10, 1), synthetic_corpus(10, 1));
        assert_ne!(synthetic_corpus(10, 1), synthetic_corpus(10, 2));
        let u = uniform_records(5, 33, 9);
        assert!(u.iter().all(|r| r.bytes.len() == 33 && r.label < CLASSES as u32));
    }
}
