//! Data-parallel execution with a sequential fallback, bitwise identical either way.
//!
//! Floating-point addition is not associative, so a naive `par_iter().sum()` gives
//! results that depend on the split rayon happens to choose. Every reduction in this
//! crate instead goes through [`sum_with`]: the index range is cut into fixed chunks
//! of [`REDUCE_CHUNK`] elements, each chunk is summed left-to-right, and the partial
//! sums are folded in chunk order. Parallelism only distributes the *chunks*, never
//! the order of additions, so the parallel and sequential paths produce the same
//! bits. The same chunk decomposition is used for element-wise kernels, where
//! determinism is free but sharing one code path keeps the fallback honest.
//!
//! Parallelism is controlled twice over: compile-time via the `parallel` cargo
//! feature (whether rayon is linked at all) and run-time via [`set_parallel`]
//! (e.g. the `--sequential` CLI flag). With the feature off, [`set_parallel`] is
//! accepted but has no effect.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of consecutive elements summed by one task; the unit of work distribution.
pub const REDUCE_CHUNK: usize = 1024;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enable or disable run-time parallelism. No-op when built without `parallel`.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

/// Whether work is currently being distributed across threads.
pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

#[inline]
fn n_chunks(n: usize) -> usize {
    n.div_ceil(REDUCE_CHUNK)
}

/// Order-stable sum of `term(0) + term(1) + ... + term(n-1)`.
///
/// See the module docs for why this is chunked: the result is bitwise independent
/// of [`parallel_enabled`].
pub fn sum_with<T, F>(n: usize, term: F) -> T
where
    T: Copy + Send + num_traits::Zero,
    F: Fn(usize) -> T + Sync,
{
    let chunk_sum = |c: usize| {
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        let mut acc = T::zero();
        for i in lo..hi {
            acc = acc + term(i);
        }
        acc
    };
    let nc = n_chunks(n);
    if nc <= 1 {
        return chunk_sum(0);
    }
    let partials: Vec<T> = map_collect(nc, chunk_sum);
    let mut acc = T::zero();
    for p in partials {
        acc = acc + p;
    }
    acc
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(i)` for every `i in 0..n`, possibly across threads.
///
/// `f` must only touch state it owns or that is safely shared; ordering between
/// iterations is unspecified.
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        (0..n).into_par_iter().for_each(f);
        return;
    }
    (0..n).for_each(f);
}

/// Apply `f` to each fixed-length piece of `data` — typically one image plane
/// or one per-(sample, head) block — passing the piece index and the slice.
/// `data.len()` must be a multiple of `piece_len`.
pub fn planes_mut<T, F>(data: &mut [T], piece_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(piece_len > 0);
    assert_eq!(data.len() % piece_len, 0, "planes_mut: ragged data");
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(piece_len).enumerate().for_each(|(i, p)| f(i, p));
        return;
    }
    data.chunks_mut(piece_len).enumerate().for_each(|(i, p)| f(i, p));
}

/// Apply `f` to each chunk of `data` (fixed length [`REDUCE_CHUNK`], last one short),
/// passing the chunk index and the chunk slice.
pub fn chunks_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(REDUCE_CHUNK).enumerate().for_each(|(c, chunk)| f(c, chunk));
        return;
    }
    data.chunks_mut(REDUCE_CHUNK).enumerate().for_each(|(c, chunk)| f(c, chunk));
}

/// Element-wise in-place map over a slice.
pub fn apply<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync,
{
    chunks_mut(data, |_, chunk| chunk.iter_mut().for_each(&f));
}

/// Pair up fixed-size chunks of an output and an input slice — typically one
/// sample or one channel plane each — and process the pairs independently.
///
/// `f` receives `(pair_index, out_chunk, in_chunk)`. Lengths must divide evenly
/// and describe the same number of pairs.
pub fn zip_chunks_mut<T, U, F>(out: &mut [T], out_chunk: usize, inp: &[U], in_chunk: usize, f: F)
where
    T: Send,
    U: Sync,
    F: Fn(usize, &mut [T], &[U]) + Sync,
{
    assert!(out_chunk > 0 && in_chunk > 0);
    assert_eq!(out.len() % out_chunk, 0, "zip_chunks_mut: ragged output");
    assert_eq!(inp.len() % in_chunk, 0, "zip_chunks_mut: ragged input");
    assert_eq!(out.len() / out_chunk, inp.len() / in_chunk, "zip_chunks_mut: pair count");
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        out.par_chunks_mut(out_chunk)
            .zip(inp.par_chunks(in_chunk))
            .enumerate()
            .for_each(|(i, (o, x))| f(i, o, x));
        return;
    }
    out.chunks_mut(out_chunk)
        .zip(inp.chunks(in_chunk))
        .enumerate()
        .for_each(|(i, (o, x))| f(i, o, x));
}

/// Element-wise in-place map over `a` with read access to the matching element of `b`.
///
/// Panics if the slices differ in length.
pub fn zip_apply<T, U, F>(a: &mut [T], b: &[U], f: F)
where
    T: Send,
    U: Sync,
    F: Fn(&mut T, &U) + Sync,
{
    assert_eq!(a.len(), b.len(), "zip_apply: length mismatch");
    chunks_mut(a, |c, chunk| {
        let lo = c * REDUCE_CHUNK;
        let hi = lo + chunk.len();
        for (x, y) in chunk.iter_mut().zip(&b[lo..hi]) {
            f(x, y);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cheap splitmix-style value stream so the test data is awkward (mixed signs,
    /// spread magnitudes) without pulling an RNG into this module.
    fn noise(i: usize) -> f32 {
        let mut z = (i as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z as f64 / u64::MAX as f64) as f32 * 2e3 - 1e3
    }

    #[test]
    fn sum_is_bitwise_stable_across_modes() {
        for n in [0, 1, REDUCE_CHUNK - 1, REDUCE_CHUNK, 3 * REDUCE_CHUNK + 17] {
            set_parallel(false);
            let seq = sum_with(n, noise);
            set_parallel(true);
            let par = sum_with(n, noise);
            assert_eq!(seq.to_bits(), par.to_bits(), "n = {n}");
        }
        set_parallel(true);
    }

    #[test]
    fn zip_apply_matches_scalar_loop() {
        let b: Vec<f32> = (0..2500).map(noise).collect();
        let mut a: Vec<f32> = (0..2500).map(|i| noise(i + 7)).collect();
        let mut expect = a.clone();
        for (x, y) in expect.iter_mut().zip(&b) {
            *x = x.mul_add(2.0, *y);
        }
        zip_apply(&mut a, &b, |x, y| *x = x.mul_add(2.0, *y));
        assert_eq!(a, expect);
    }
}
