//! Parallel dispatch helpers.
//!
//! Kernels parallelize only across *independent output elements* (an
//! output channel, a batch sample, a monomial, ...). Each element is
//! produced by a sequential loop with a fixed accumulation order, so a
//! run is bitwise reproducible regardless of thread count, and the
//! sequential fallback (feature `parallel` disabled) produces identical
//! bytes. The `*_seq` entry points are always sequential; benchmarks use
//! them as the comparison baseline.

/// Apply `f` to every equally-sized chunk of `data`, in parallel when
/// the `parallel` feature is enabled. `f` receives the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    for_each_chunk_mut_seq(data, chunk, f);
}

/// Sequential version of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Fill `out[i] = f(i)` in parallel when enabled.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    fill_indexed_seq(out, f);
}

/// Sequential version of [`fill_indexed`].
pub fn fill_indexed_seq<T, F>(out: &mut [T], f: F)
where
    F: Fn(usize) -> T,
{
    out.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
}

/// Rotate `lead` consecutive `[h, w]` planes of `src` into `dst` with
/// the same resolved rotation, one plane per work item.
pub fn plane_rotate_batch<T: crate::scalar::Scalar>(
    src: &[T],
    dst: &mut [T],
    lead: usize,
    h: usize,
    w: usize,
    rot: crate::interp::PlaneRot,
) {
    debug_assert_eq!(src.len(), lead * h * w);
    debug_assert_eq!(dst.len(), lead * h * w);
    for_each_chunk_mut(dst, h * w, |i, plane| {
        crate::interp::rotate_plane_raw(&src[i * h * w..(i + 1) * h * w], plane, h, w, rot);
    });
}

/// Run `f` inside a thread pool with `n` threads (benchmark helper).
/// Without the `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        f()
    }
}

/// Honor the `RINV_THREADS` environment variable by sizing the global
/// pool before any parallel work runs. Silently does nothing if the
/// variable is unset, unparsable, or the pool was already built.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("RINV_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
