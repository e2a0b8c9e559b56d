//! Synthetic byte corpora for training and evaluation experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fixed cycle of `period` distinct random bytes repeated to `len`.
/// The next byte is a function of the previous one, so any causal model
/// can memorize it.
pub fn cyclic(period: usize, len: usize, seed: u64) -> Vec<u8> {
    assert!(period >= 1 && period <= 256);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alphabet: Vec<u8> = (0..=255).collect();
    alphabet.shuffle(&mut rng);
    let cycle = &alphabet[..period];
    (0..len).map(|i| cycle[i % period]).collect()
}

/// Copy task with a fixed lag: blocks of `lag` fresh random bytes, each
/// immediately repeated once (`A A B B C C ...`). Every byte in a
/// repeated half equals the byte `lag` positions back, and the fresh
/// halves carry no shortcut signal, so beating the uniform baseline
/// requires attending at least `lag` tokens into the past.
pub fn lagged_copy(lag: usize, len: usize, alphabet: u8, seed: u64) -> Vec<u8> {
    assert!(lag >= 1 && alphabet >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 2 * lag);
    while out.len() < len {
        let block: Vec<u8> = (0..lag).map(|_| rng.gen_range(0..alphabet)).collect();
        out.extend_from_slice(&block);
        out.extend_from_slice(&block);
    }
    out.truncate(len);
    out
}
