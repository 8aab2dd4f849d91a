//! Worker-thread pool shared by all compute kernels.
//!
//! `TACTILE_MOCO_THREADS` caps the pool size (0 or unset = one thread per
//! core). Every parallel loop in this crate writes disjoint output slices,
//! so results are bit-identical for any thread count.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

fn configured_threads() -> usize {
    match std::env::var("TACTILE_MOCO_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => num_threads_auto(),
            Ok(n) => n,
        },
        Err(_) => num_threads_auto(),
    }
}

fn num_threads_auto() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(configured_threads())
            .build()
            .expect("failed to build worker pool")
    })
}

pub fn num_threads() -> usize {
    pool().current_num_threads()
}

/// Run `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `data`.
/// Falls back to a serial loop when the pool has a single thread or the
/// work is too small to split.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0);
    let pieces = data.len().div_ceil(chunk);
    if num_threads() == 1 || pieces < 2 {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        use rayon::prelude::*;
        pool().install(|| {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_loop_matches_serial() {
        let mut a = vec![0u32; 103];
        for_each_chunk_mut(&mut a, 10, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 10 + j) as u32;
            }
        });
        for (i, v) in a.iter().enumerate() {
            assert_eq!(*v, i as u32);
        }
    }
}
