//! Minimal-edit alignment between two token sequences.

/// Marks positions of `a` and `b` that are substituted or have no aligned
/// partner under a unit-cost edit alignment. Traceback prefers a match, then
/// a substitution, then a deletion from `a`, then an insertion from `b`.
pub fn diff_positions<T: PartialEq>(a: &[T], b: &[T]) -> (Vec<bool>, Vec<bool>) {
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut d = vec![0u32; (n + 1) * w];
    for j in 0..=m {
        d[j] = j as u32;
    }
    for i in 1..=n {
        d[i * w] = i as u32;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + u32::from(a[i - 1] != b[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut da = vec![false; n];
    let mut db = vec![false; m];
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && here == d[(i - 1) * w + j - 1] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + 1 {
            da[i - 1] = true;
            db[j - 1] = true;
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            da[i - 1] = true;
            i -= 1;
        } else {
            db[j - 1] = true;
            j -= 1;
        }
    }
    (da, db)
}

/// Unit-cost edit distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            cur[j] = (prev[j - 1] + usize::from(a[i - 1] != b[j - 1]))
                .min(prev[j] + 1)
                .min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_no_diffs() {
        let (a, b) = diff_positions(b"abc", b"abc");
        assert!(a.iter().chain(&b).all(|x| !x));
    }

    #[test]
    fn substitution_marks_both_sides() {
        let (a, b) = diff_positions(b"abc", b"axc");
        assert_eq!(a, vec![false, true, false]);
        assert_eq!(b, vec![false, true, false]);
    }

    #[test]
    fn insertion_marks_only_the_extra_tokens() {
        let (a, b) = diff_positions(b"abc", b"abXYc");
        assert!(a.iter().all(|x| !x));
        assert_eq!(b, vec![false, false, true, true, false]);
        assert_eq!(edit_distance(b"abc", b"abXYc"), 2);
    }

    #[test]
    fn diff_count_is_consistent_with_distance() {
        let x = b"the quick brown fox";
        let y = b"the quack brown box!";
        let (a, b) = diff_positions(x, y);
        let subs_and_dels = a.iter().filter(|&&v| v).count();
        let subs_and_ins = b.iter().filter(|&&v| v).count();
        let dist = edit_distance(x, y);
        assert!(subs_and_dels <= dist && subs_and_ins <= dist);
        assert_eq!(dist, 3);
    }
}
