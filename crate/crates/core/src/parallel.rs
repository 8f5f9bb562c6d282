//! Data-parallel helpers.
//!
//! With the `parallel` feature the closures run on the rayon pool; without it
//! they run sequentially. Results are always assembled in index order, so the
//! output never depends on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sizes the global worker pool. Must run before any parallel work; without
/// the `parallel` feature it only logs that the request is ignored.
pub fn configure_threads(threads: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| crate::Error::Config(format!("cannot size the worker pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        log::warn!("built without the parallel feature; ignoring a request for {threads} threads");
        Ok(())
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, so parallel helpers
/// called inside it use that many threads. Without the `parallel` feature it
/// just calls `f`.
pub fn with_threads<T: Send, F: FnOnce() -> T + Send>(threads: usize, f: F) -> crate::Result<T> {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(f())
    }
}

/// Maps `f` over `0..n` and collects the results in order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f(i, chunk)` over consecutive `chunk_len`-sized mutable chunks.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Like [`for_each_chunk_mut`] but zips a second, read-only slice chunked
/// with its own length.
pub fn for_each_chunk_pair<T, U, F>(out: &mut [T], out_len: usize, inp: &[U], in_len: usize, f: F)
where
    T: Send,
    U: Sync,
    F: Fn(usize, &mut [T], &[U]) + Sync + Send,
{
    if out_len == 0 || in_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(out_len)
            .zip(inp.par_chunks(in_len))
            .enumerate()
            .for_each(|(i, (o, x))| f(i, o, x));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(out_len)
            .zip(inp.chunks(in_len))
            .enumerate()
            .for_each(|(i, (o, x))| f(i, o, x));
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
