//! Binary sum tree over nonnegative weights.
//!
//! Every internal node is recomputed from its two children on update, so the
//! total never accumulates floating-point drift however many updates occur.

#[derive(Debug, Clone)]
pub(crate) struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub(crate) fn new(n: usize) -> Self {
        let leaves = n.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub(crate) fn from_weights(w: &[f64]) -> Self {
        let mut t = SumTree::new(w.len());
        t.nodes[t.leaves..t.leaves + w.len()].copy_from_slice(w);
        for i in (1..t.leaves).rev() {
            t.nodes[i] = t.nodes[2 * i] + t.nodes[2 * i + 1];
        }
        t
    }

    #[inline]
    pub(crate) fn total(&self) -> f64 {
        self.nodes[1]
    }

    #[cfg(test)]
    pub(crate) fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub(crate) fn set(&mut self, i: usize, w: f64) {
        debug_assert!(w >= 0.0 && w.is_finite());
        let mut k = self.leaves + i;
        if self.nodes[k] == w {
            return;
        }
        self.nodes[k] = w;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf `i` with `prefix(i) <= u < prefix(i+1)`. Never returns a
    /// zero-weight leaf while the total is positive.
    pub(crate) fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            let right = self.nodes[2 * k + 1];
            if (u < left || right <= 0.0) && left > 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        k - self.leaves
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn find_respects_prefix_sums() {
        let t = SumTree::from_weights(&[1.0, 0.0, 2.0, 3.0, 0.0]);
        assert_eq!(t.total(), 6.0);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 2);
        assert_eq!(t.find(2.999), 2);
        assert_eq!(t.find(3.0), 3);
        // rounding past the end lands on the last positive leaf
        assert_eq!(t.find(6.5), 3);
    }

    proptest! {
        #[test]
        fn total_equals_fresh_sum_after_updates(
            ops in prop::collection::vec((0usize..37, 0.0f64..10.0), 1..400)
        ) {
            let mut t = SumTree::new(37);
            let mut w = vec![0.0; 37];
            for (i, v) in ops {
                t.set(i, v);
                w[i] = v;
            }
            let fresh = SumTree::from_weights(&w);
            prop_assert_eq!(t.total(), fresh.total());
            for (i, &v) in w.iter().enumerate() {
                prop_assert_eq!(t.get(i), v);
            }
        }
    }
}
