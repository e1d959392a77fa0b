//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] runs on the
//! current rayon pool; without it, every call runs sequentially. Results are
//! identical either way: maps preserve input order and reductions are only
//! used with associative, commutative combiners.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `true` when work will actually be split across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Order-preserving map.
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Order-preserving fallible map; the first error in input order wins.
    pub fn try_map<T, U, E, F>(self, items: &[T], f: F) -> Result<Vec<U>, E>
    where
        T: Sync,
        U: Send,
        E: Send,
        F: Fn(&T) -> Result<U, E> + Sync + Send,
    {
        let results = self.map(items, f);
        results.into_iter().collect()
    }

    /// Fold each item into an accumulator and combine the partial results.
    ///
    /// `combine` must be associative and commutative with `identity()` as
    /// its neutral element.
    pub fn try_fold<T, A, E, I, F, C>(
        self,
        items: &[T],
        identity: I,
        fold: F,
        combine: C,
    ) -> Result<A, E>
    where
        T: Sync,
        A: Send,
        E: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(A, &T) -> Result<A, E> + Sync + Send,
        C: Fn(A, A) -> A + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items
                .par_iter()
                .try_fold(&identity, &fold)
                .try_reduce(&identity, |a, b| Ok(combine(a, b)));
        }
        let _ = &combine;
        items.iter().try_fold(identity(), fold)
    }

    /// Apply `f` to disjoint chunks of `data` of `chunk` elements each.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_both_ways() {
        let v: Vec<u32> = (0..1000).collect();
        let a = Execution::Sequential.map(&v, |x| x * 2);
        let b = Execution::Parallel.map(&v, |x| x * 2);
        assert_eq!(a, b);
    }

    #[test]
    fn fold_matches() {
        let v: Vec<u64> = (0..10_000).collect();
        let f = |e: Execution| {
            e.try_fold(&v, || 0u64, |a, x| Ok::<_, ()>(a + x), |a, b| a + b)
                .unwrap()
        };
        assert_eq!(f(Execution::Sequential), f(Execution::Parallel));
    }

    #[test]
    fn try_map_reports_first_error() {
        let v: Vec<u32> = (0..100).collect();
        let r = Execution::Parallel.try_map(&v, |&x| if x >= 40 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(40));
    }
}
