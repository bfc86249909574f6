//! Shard boundary selection.

/// Equal-width cut of `[0, len)` into `k` ranges; widths differ by at most one.
pub(crate) fn equal_index_cuts(len: u64, k: usize) -> Vec<u64> {
    (0..=k as u128)
        .map(|j| (j * len as u128 / k as u128) as u64)
        .collect()
}

/// Cuts `[0, len)` into `k` contiguous index ranges so that shard nonzero
/// counts differ by at most the largest single-index count.
///
/// `runs` lists `(index, count)` for every index holding at least one
/// nonzero, in increasing index order. `cap`, when given, is a preferred
/// ceiling on the largest shard; the first solution meeting both the spread
/// bound and the ceiling wins, otherwise the first solution meeting the spread
/// bound is returned.
///
/// The search fixes a window `[lo, lo + c_max]` for every shard count and
/// tracks the interval of cut positions reachable after `j` shards. Because
/// the window is at least as wide as any single count, the reachable
/// positions always form one contiguous interval, so feasibility is a
/// forward pass of `k` binary searches.
pub(crate) fn balanced_cuts(runs: &[(u64, u64)], len: u64, k: usize, cap: Option<u64>) -> Vec<u64> {
    let total: u64 = runs.iter().map(|r| r.1).sum();
    if k <= 1 {
        return vec![0, len];
    }
    if total == 0 {
        return equal_index_cuts(len, k);
    }
    if runs.len() < k {
        return isolate_runs(runs, len, k);
    }

    let mut prefix = Vec::with_capacity(runs.len() + 1);
    prefix.push(0u64);
    for &(_, c) in runs {
        prefix.push(prefix.last().unwrap() + c);
    }
    let c_max = runs.iter().map(|r| r.1).max().unwrap();
    let k64 = k as u64;
    let hi_lo = total / k64;
    let min_lo = hi_lo.saturating_sub(c_max);

    let mut fallback: Option<Vec<usize>> = None;
    let mut lo = hi_lo;
    loop {
        if let Some(reach) = reachable(&prefix, k, lo, lo + c_max) {
            let cuts = reconstruct(&prefix, &reach, k, lo, lo + c_max);
            let biggest = cuts.windows(2).map(|w| prefix[w[1]] - prefix[w[0]]).max().unwrap();
            if cap.is_none_or(|cap| biggest <= cap) {
                return to_index_cuts(runs, len, &cuts);
            }
            fallback.get_or_insert(cuts);
        }
        if lo == min_lo {
            break;
        }
        lo -= 1;
    }
    match fallback {
        Some(cuts) => to_index_cuts(runs, len, &cuts),
        // Unreachable in practice; the lower window edge always admits a solution.
        None => equal_index_cuts(len, k),
    }
}

/// Interval of cut positions reachable after each number of shards, or
/// `None` when position `n` cannot be reached with exactly `k` shards.
fn reachable(prefix: &[u64], k: usize, lo: u64, hi: u64) -> Option<Vec<(usize, usize)>> {
    let n = prefix.len() - 1;
    let total = prefix[n];
    let mut reach = Vec::with_capacity(k + 1);
    let (mut e, mut l) = (0usize, 0usize);
    reach.push((e, l));
    for _ in 0..k {
        // Earliest end: first b > e with prefix[b] >= prefix[e] + lo.
        let target = prefix[e] + lo;
        let next_e = e + 1 + prefix[e + 1..].partition_point(|&s| s < target);
        if next_e > n {
            return None;
        }
        // Latest start that can still close a shard.
        let last_start = prefix.partition_point(|&s| s + lo <= total).checked_sub(1)?;
        let a = l.min(n - 1).min(last_start);
        if a < e {
            return None;
        }
        // Latest end: last b with prefix[b] <= prefix[a] + hi.
        let next_l = prefix.partition_point(|&s| s <= prefix[a] + hi) - 1;
        e = next_e;
        l = next_l;
        reach.push((e, l));
    }
    (e <= n && n <= l).then_some(reach)
}

fn reconstruct(prefix: &[u64], reach: &[(usize, usize)], k: usize, lo: u64, hi: u64) -> Vec<usize> {
    let n = prefix.len() - 1;
    let total = prefix[n] as f64;
    let mut cuts = vec![n];
    for j in (1..k).rev() {
        let next = *cuts.last().unwrap();
        let (e, l) = reach[j];
        let s_next = prefix[next];
        let first = prefix.partition_point(|&s| s < s_next.saturating_sub(hi)).max(e);
        let last = (prefix.partition_point(|&s| s + lo <= s_next) - 1)
            .min(l)
            .min(next - 1);
        debug_assert!(first <= last, "reachable interval must admit a predecessor");
        let target = total * j as f64 / k as f64;
        let mut best = first + prefix[first..=last].partition_point(|&s| (s as f64) < target);
        best = best.min(last);
        if best > first && (prefix[best - 1] as f64 - target).abs() <= (prefix[best] as f64 - target).abs() {
            best -= 1;
        }
        cuts.push(best);
    }
    cuts.push(0);
    cuts.reverse();
    cuts
}

/// Maps cut positions over `runs` onto index boundaries.
fn to_index_cuts(runs: &[(u64, u64)], len: u64, cuts: &[usize]) -> Vec<u64> {
    let k = cuts.len() - 1;
    let mut out = Vec::with_capacity(k + 1);
    out.push(0);
    for &p in &cuts[1..k] {
        out.push(runs[p].0);
    }
    out.push(len);
    out
}

/// Fewer populated indices than shards: every populated index gets its own
/// shard and the remaining shards take unpopulated indices.
fn isolate_runs(runs: &[(u64, u64)], len: u64, k: usize) -> Vec<u64> {
    let mut cuts: Vec<u64> = runs.iter().skip(1).map(|r| r.0).collect();
    let mut extra = k - 1 - cuts.len();
    let mut candidate = 1u64;
    let mut mandatory = cuts.clone().into_iter().peekable();
    while extra > 0 && candidate < len {
        if mandatory.peek() == Some(&candidate) {
            mandatory.next();
        } else {
            cuts.push(candidate);
            extra -= 1;
        }
        candidate += 1;
    }
    cuts.push(0);
    cuts.push(len);
    cuts.sort_unstable();
    cuts
}
