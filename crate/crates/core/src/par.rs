//! Row-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool unless the caller forces sequential execution; without the
//! feature every call degrades to a plain loop. Results come back in index
//! order either way, so outputs are deterministic.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, sequential: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if sequential {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, _sequential: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    (0..n).map(f).collect()
}

/// Apply `f` to each `chunk`-sized row slice of `data` in place, collecting
/// one metadata value per row. Lets callers fill a preallocated output buffer
/// without per-row temporaries.
#[cfg(feature = "parallel")]
pub(crate) fn map_row_chunks_mut<T, U, F>(
    data: &mut [T],
    chunk: usize,
    sequential: bool,
    f: F,
) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T]) -> U + Sync + Send,
{
    use rayon::prelude::*;
    if sequential {
        data.chunks_mut(chunk)
            .enumerate()
            .map(|(i, row)| f(i, row))
            .collect()
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .map(|(i, row)| f(i, row))
            .collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_row_chunks_mut<T, U, F>(
    data: &mut [T],
    chunk: usize,
    _sequential: bool,
    f: F,
) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T]) -> U + Sync,
{
    data.chunks_mut(chunk)
        .enumerate()
        .map(|(i, row)| f(i, row))
        .collect()
}
