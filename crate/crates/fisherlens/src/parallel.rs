//! Order-preserving fan-out over scoped threads.

use std::thread;

/// Applies `f` to every item on up to `jobs` threads and returns the results
/// in item order. Work is split into contiguous chunks, so the output does
/// not depend on `jobs`.
pub fn map_ordered<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || part.iter().enumerate().map(|(i, t)| f(c * chunk + i, t)).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// [`map_ordered`] for fallible work; the first error in item order wins.
pub fn try_map_ordered<T, R, E, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    map_ordered(jobs, items, f).into_iter().collect()
}

/// Worker count to use when the caller asks for "all".
pub fn available_jobs() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept() {
        let items: Vec<u64> = (0..37).collect();
        let one = map_ordered(1, &items, |i, v| (i as u64) * 1000 + v * v);
        for jobs in [2, 3, 8, 64] {
            assert_eq!(map_ordered(jobs, &items, |i, v| (i as u64) * 1000 + v * v), one);
        }
        assert!(map_ordered(4, &[] as &[u8], |_, v| *v).is_empty());
    }
}
