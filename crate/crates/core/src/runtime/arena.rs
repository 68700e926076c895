/// Inclusive live range of a value in op-step units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Element offsets for every value plus the total arena length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArenaLayout {
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    pub len: usize,
}

impl ArenaLayout {
    /// True when no two values that are live at the same step share memory.
    pub fn is_alias_free(&self, live: &[Interval]) -> bool {
        for i in 0..self.offsets.len() {
            for j in i + 1..self.offsets.len() {
                let (a, b) = (self.offsets[i], self.offsets[j]);
                let disjoint = a + self.sizes[i] <= b || b + self.sizes[j] <= a;
                if live[i].overlaps(&live[j]) && !disjoint && self.sizes[i] > 0 && self.sizes[j] > 0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Greedy placement: largest values first, each at the lowest offset that
/// does not collide with an already placed value whose range overlaps.
pub fn plan_arena(sizes: &[usize], live: &[Interval]) -> ArenaLayout {
    assert_eq!(sizes.len(), live.len());
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut offsets = vec![0usize; sizes.len()];
    let mut placed: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut len = 0;
    for &v in &order {
        let mut busy: Vec<(usize, usize)> = placed
            .iter()
            .filter(|&&p| live[p].overlaps(&live[v]))
            .map(|&p| (offsets[p], offsets[p] + sizes[p]))
            .collect();
        busy.sort_unstable();
        let mut at = 0;
        for (lo, hi) in busy {
            if at + sizes[v] <= lo {
                break;
            }
            at = at.max(hi);
        }
        offsets[v] = at;
        len = len.max(at + sizes[v]);
        placed.push(v);
    }
    ArenaLayout { offsets, sizes: sizes.to_vec(), len }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chain_reuses_memory() {
        // a -> b -> c -> d, each consumed only by the next step.
        let live = [Interval { start: 0, end: 1 }, Interval { start: 1, end: 2 }, Interval { start: 2, end: 3 }, Interval { start: 3, end: 3 }];
        let layout = plan_arena(&[10, 10, 10, 10], &live);
        assert_eq!(layout.len, 20);
        assert!(layout.is_alias_free(&live));
    }

    #[test]
    fn all_live_needs_sum() {
        let live = [Interval { start: 0, end: 5 }; 3];
        let layout = plan_arena(&[3, 7, 5], &live);
        assert_eq!(layout.len, 15);
    }

    proptest! {
        #[test]
        fn never_aliases(spec in prop::collection::vec((0usize..40, 0usize..10, 0usize..6), 1..24)) {
            let sizes: Vec<usize> = spec.iter().map(|s| s.0).collect();
            let live: Vec<Interval> = spec.iter().map(|s| Interval { start: s.1, end: s.1 + s.2 }).collect();
            let layout = plan_arena(&sizes, &live);
            prop_assert!(layout.is_alias_free(&live));
            prop_assert!(layout.len <= sizes.iter().sum::<usize>());
        }
    }
}
