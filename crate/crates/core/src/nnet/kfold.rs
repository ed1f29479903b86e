use crate::error::{Error, Result};
use crate::imagecore::RngStream;

/// Shuffles `0..n_items` with `seed` and cuts the permutation into `k`
/// contiguous folds; the first `n_items % k` folds hold one extra item.
/// Each fold is returned sorted.
pub fn kfold_split(n_items: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if n_items < k {
        return Err(Error::invalid(format!(
            "cannot split {n_items} items into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    RngStream::new(seed, 0).shuffle(&mut order);
    let (base, extra) = (n_items / k, n_items % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}
