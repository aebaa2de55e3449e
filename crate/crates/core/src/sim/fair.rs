//! Weighted max-min sharing of a node among runnable ranks.

use num_rational::Ratio;

use crate::alloc::{apportion_exact, Fraction};

use super::NodeSpec;

/// One runnable rank's claim on its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareClaim {
    pub rank: usize,
    pub weight: u64,
    pub cap_millicores: u64,
}

/// Water-filling over integer milli-cores.
///
/// Ranks whose proportional share would exceed their cap are pinned at the
/// cap and the rest is re-divided among the others until nobody saturates;
/// the final split uses largest-remainder rounding so the node is never
/// over-allocated. Output is index-aligned with `claims`.
pub fn weighted_max_min(available_millicores: u64, claims: &[ShareClaim]) -> Vec<u64> {
    let mut out = vec![0u64; claims.len()];
    let mut active: Vec<usize> = (0..claims.len())
        .filter(|&i| claims[i].cap_millicores > 0 && claims[i].weight > 0)
        .collect();
    let mut remaining = available_millicores;

    while !active.is_empty() && remaining > 0 {
        let total_weight: u128 = active.iter().map(|&i| claims[i].weight as u128).sum();
        // cap <= remaining * w / W  <=>  cap * W <= remaining * w
        let saturated: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| {
                claims[i].cap_millicores as u128 * total_weight
                    <= remaining as u128 * claims[i].weight as u128
            })
            .collect();
        if saturated.is_empty() {
            let fractions: Vec<Fraction> = active
                .iter()
                .map(|&i| Ratio::new(claims[i].weight as u128, total_weight))
                .collect();
            let split = apportion_exact(&fractions, remaining, "millicores")
                .expect("weights of active claims form a partition of one");
            for (&i, share) in active.iter().zip(split) {
                out[i] = share;
            }
            break;
        }
        for &i in &saturated {
            out[i] = claims[i].cap_millicores;
            remaining -= claims[i].cap_millicores;
        }
        active.retain(|i| !saturated.contains(i));
    }
    out
}

/// Share of `node` among `runnable` `(rank, cpu_weight)` pairs, each capped
/// at `cap_millicores_per_rank`.
pub fn fair_share(
    node: &NodeSpec,
    runnable: &[(usize, u64)],
    cap_millicores_per_rank: u64,
) -> Vec<(usize, u64)> {
    let claims: Vec<ShareClaim> = runnable
        .iter()
        .map(|&(rank, weight)| ShareClaim {
            rank,
            weight,
            cap_millicores: cap_millicores_per_rank,
        })
        .collect();
    let shares = weighted_max_min(node.available_millicores(), &claims);
    runnable.iter().map(|&(r, _)| r).zip(shares).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(capacity: u64) -> NodeSpec {
        NodeSpec {
            capacity_millicores: capacity,
            resident_rank_ids: vec![],
            background_load_millicores: 0,
        }
    }

    /// Progressive filling one milli-core at a time: always feed the
    /// unsaturated claim with the smallest allocation-to-weight ratio.
    fn progressive_fill(available: u64, claims: &[(u64, u64)]) -> Vec<u64> {
        let mut alloc = vec![0u64; claims.len()];
        for _ in 0..available {
            let next = (0..claims.len())
                .filter(|&i| alloc[i] < claims[i].1)
                .min_by(|&a, &b| {
                    // alloc[a]/w[a] vs alloc[b]/w[b]
                    (alloc[a] as u128 * claims[b].0 as u128)
                        .cmp(&(alloc[b] as u128 * claims[a].0 as u128))
                        .then(a.cmp(&b))
                });
            match next {
                Some(i) => alloc[i] += 1,
                None => break,
            }
        }
        alloc
    }

    #[test]
    fn proportional_requests_on_a_full_node() {
        let runnable = [(0, 182), (1, 182), (2, 909), (3, 2727)];
        let oracle = progressive_fill(4000, &[(182, 1000), (182, 1000), (909, 1000), (2727, 1000)]);
        assert_eq!(oracle, vec![1000, 1000, 1000, 1000]);
        assert_eq!(
            fair_share(&node(4000), &runnable, 1000),
            vec![(0, 1000), (1, 1000), (2, 1000), (3, 1000)]
        );
    }

    #[test]
    fn redistribution_under_contention() {
        let runnable = [(0, 182), (1, 182), (2, 909), (3, 2727)];
        // 2000m: rank 3 saturates, the rest share 1000m by weight.
        let got: Vec<u64> = fair_share(&node(2000), &runnable, 1000)
            .into_iter()
            .map(|x| x.1)
            .collect();
        let oracle = progressive_fill(2000, &[(182, 1000), (182, 1000), (909, 1000), (2727, 1000)]);
        assert_eq!(got.iter().sum::<u64>(), 2000);
        assert_eq!(got[3], 1000);
        for (g, o) in got.iter().zip(&oracle) {
            assert!(g.abs_diff(*o) <= 1, "{got:?} vs {oracle:?}");
        }
    }

    #[test]
    fn single_thread_cap_binds() {
        assert_eq!(fair_share(&node(4000), &[(7, 500)], 1000), vec![(7, 1000)]);
        assert_eq!(
            fair_share(&node(2000), &[(0, 1), (1, 1)], 1000),
            vec![(0, 1000), (1, 1000)]
        );
    }

    #[test]
    fn background_load_reduces_capacity() {
        let mut n = node(2000);
        n.background_load_millicores = 1500;
        assert_eq!(
            fair_share(&n, &[(0, 1), (1, 1)], 1000),
            vec![(0, 250), (1, 250)]
        );
    }

    /// Exact continuous max-min: sort by cap/weight and find the water
    /// level where the remaining claims absorb what is left.
    fn continuous_fill(available: u64, claims: &[(u64, u64)]) -> Vec<Ratio<u128>> {
        let mut order: Vec<usize> = (0..claims.len()).collect();
        order.sort_by_key(|&i| Ratio::new(claims[i].1 as u128, claims[i].0 as u128));
        let mut out = vec![Ratio::from_integer(0u128); claims.len()];
        let mut left = Ratio::from_integer(available as u128);
        let mut weight_left: u128 = claims.iter().map(|c| c.0 as u128).sum();
        for &i in &order {
            let (w, cap) = (
                claims[i].0 as u128,
                Ratio::from_integer(claims[i].1 as u128),
            );
            let share = left * Ratio::new(w, weight_left);
            out[i] = if share >= cap { cap } else { share };
            left -= out[i];
            weight_left -= w;
        }
        out
    }

    #[test]
    fn progressive_filling_agrees_at_moderate_budgets() {
        for available in [500u64, 1999, 3000, 4000] {
            let got = weighted_max_min(
                available,
                &[
                    ShareClaim {
                        rank: 0,
                        weight: 182,
                        cap_millicores: 1000,
                    },
                    ShareClaim {
                        rank: 1,
                        weight: 909,
                        cap_millicores: 1000,
                    },
                    ShareClaim {
                        rank: 2,
                        weight: 2727,
                        cap_millicores: 1000,
                    },
                ],
            );
            let oracle = progressive_fill(available, &[(182, 1000), (909, 1000), (2727, 1000)]);
            for (g, o) in got.iter().zip(&oracle) {
                assert!(g.abs_diff(*o) <= 1, "{available}: {got:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn within_one_millicore_of_the_continuous_solution() {
        for available in [1u64, 7, 500, 1999, 3000, 4000, 9000] {
            for weights in [[1u64, 1, 1], [1, 2, 3], [182, 909, 2727], [5, 5, 100]] {
                let caps = [1000u64, 400, 1000];
                let claims: Vec<ShareClaim> = (0..3)
                    .map(|i| ShareClaim {
                        rank: i,
                        weight: weights[i],
                        cap_millicores: caps[i],
                    })
                    .collect();
                let got = weighted_max_min(available, &claims);
                let exact = continuous_fill(
                    available,
                    &(0..3).map(|i| (weights[i], caps[i])).collect::<Vec<_>>(),
                );
                assert_eq!(got.iter().sum::<u64>(), available.min(caps.iter().sum()));
                for i in 0..3 {
                    assert!(got[i] <= caps[i]);
                    let g = Ratio::from_integer(got[i] as u128);
                    let diff = if g >= exact[i] {
                        g - exact[i]
                    } else {
                        exact[i] - g
                    };
                    assert!(
                        diff < Ratio::from_integer(1),
                        "{available} {weights:?}: {got:?} vs {exact:?}"
                    );
                }
            }
        }
    }
}
