use std::collections::HashSet;

use proptest::prelude::*;

use pderl::evolution::{elite_count, rank_and_elites, ranking};
use pderl::memory::{GeneticMemory, Transition};
use pderl::nn::{Mlp, NetworkSpec};
use pderl::operators::{self, Agent, MutationConfig};
use pderl::seeding::{derive_seed, rng_from};

fn transition(id: usize) -> Transition {
    Transition {
        state: vec![id as f64, -(id as f64)],
        action: vec![0.25],
        reward: id as f64,
        next_state: vec![id as f64 + 1.0, 0.0],
        done: id.is_multiple_of(7),
    }
}

fn memory(capacity: usize, pushes: usize, first_id: usize) -> GeneticMemory {
    let mut m = GeneticMemory::new(capacity).unwrap();
    for i in 0..pushes {
        m.push(transition(first_id + i));
    }
    m
}

fn ids(m: &GeneticMemory) -> Vec<usize> {
    m.iter().map(|t| t.reward as usize).collect()
}

fn policy(seed: u64, hidden: &[usize]) -> Mlp {
    Mlp::random(NetworkSpec::policy(3, 2, hidden), &mut rng_from(seed, &[])).unwrap()
}

fn agent(seed: u64, hidden: &[usize], pushes: usize) -> Agent {
    let mut m = GeneticMemory::new(64).unwrap();
    let mut rng = rng_from(seed, &[1]);
    for _ in 0..pushes {
        use rand::Rng;
        let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.push(Transition {
            state: s.clone(),
            action: vec![0.0, 0.0],
            reward: 0.0,
            next_state: s,
            done: false,
        });
    }
    Agent::new(policy(seed, hidden), m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), h1 in 1usize..9, h2 in 0usize..5) {
        let hidden: Vec<usize> = [h1, h2].into_iter().filter(|&h| h > 0).collect();
        let net = policy(seed, &hidden);
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.spec(), net.spec());
        let a: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        let x = [0.3, -0.7, 1.1];
        prop_assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn memory_keeps_the_newest_in_order(capacity in 1usize..40, pushes in 0usize..120) {
        let m = memory(capacity, pushes, 0);
        let held = pushes.min(capacity);
        prop_assert_eq!(m.len(), held);
        prop_assert_eq!(m.pushed(), pushes as u64);
        prop_assert_eq!(ids(&m), (pushes - held..pushes).collect::<Vec<_>>());
    }

    #[test]
    fn memory_dump_round_trips(capacity in 1usize..30, pushes in 0usize..60) {
        let m = memory(capacity, pushes, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        m.dump(&path).unwrap();
        let back = GeneticMemory::load(&path).unwrap();
        prop_assert_eq!(back.capacity(), capacity);
        prop_assert_eq!(ids(&back), ids(&m));
        let same = back.iter().zip(m.iter()).all(|(a, b)| **a == **b);
        prop_assert!(same);
    }

    #[test]
    fn inherit_full_is_an_exact_copy(capacity in 1usize..40, pushes in 0usize..90) {
        let m = memory(capacity, pushes, 0);
        let c = m.inherit_full();
        prop_assert_eq!(c.capacity(), m.capacity());
        prop_assert_eq!(ids(&c), ids(&m));
    }

    #[test]
    fn inherit_crossover_takes_half_of_each_newest(
        capacity in 1usize..40,
        nx in 0usize..90,
        ny in 0usize..90,
        seed in any::<u64>(),
    ) {
        let x = memory(capacity, nx, 0);
        let y = memory(capacity, ny, 10_000);
        let c = GeneticMemory::inherit_crossover(&x, &y, capacity, &mut rng_from(seed, &[])).unwrap();
        let half = capacity / 2;
        let from_x: HashSet<usize> = ids(&c).into_iter().filter(|&i| i < 10_000).collect();
        let from_y: HashSet<usize> = ids(&c).into_iter().filter(|&i| i >= 10_000).collect();
        let kx = half.min(x.len());
        let ky = half.min(y.len());
        prop_assert_eq!(c.len(), kx + ky);
        prop_assert!(c.len() <= capacity);
        prop_assert_eq!(from_x, ids(&x)[x.len() - kx..].iter().copied().collect::<HashSet<_>>());
        prop_assert_eq!(from_y, ids(&y)[y.len() - ky..].iter().copied().collect::<HashSet<_>>());
    }

    #[test]
    fn ranking_matches_a_sort_oracle(
        fitness in prop::collection::vec(-50i32..50, 2..25),
        psi in 0.05f64..0.9,
    ) {
        // Integer-valued fitness produces plenty of ties.
        let f: Vec<f64> = fitness.iter().map(|&v| v as f64 / 4.0).collect();
        let mut oracle: Vec<usize> = (0..f.len()).collect();
        oracle.sort_by(|&a, &b| f[b].partial_cmp(&f[a]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(ranking(&f), oracle.clone());

        let (elites, rest) = rank_and_elites(&f, psi);
        let m = elite_count(psi, f.len());
        prop_assert_eq!(elites.len(), m);
        prop_assert_eq!(&elites[..], &oracle[..m]);
        prop_assert_eq!(&rest[..], &oracle[m..]);
        let worst_elite = elites.iter().map(|&i| f[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(rest.iter().all(|&i| f[i] <= worst_elite));
    }

    #[test]
    fn elite_count_is_near_psi_k(psi in 0.01f64..1.0, k in 1usize..200) {
        let m = elite_count(psi, k) as f64;
        let raw = psi * k as f64;
        prop_assert!(m <= k as f64);
        prop_assert!(m >= raw - 0.05 && m < raw + 1.0);
    }

    #[test]
    fn npoint_child_rows_come_whole_from_a_parent(sx in any::<u64>(), sy in any::<u64>(), seed in any::<u64>()) {
        let x = agent(sx, &[5, 4], 10);
        let y = agent(sy, &[5, 4], 10);
        let child = operators::npoint_crossover(&x, &y, &mut rng_from(seed, &[])).unwrap();
        for layer in child.policy.layout() {
            for row in 0..layer.fan_out {
                let take = |p: &Mlp| {
                    let mut v = p.params()[layer.row_range(row)].to_vec();
                    v.push(p.params()[layer.bias_offset + row]);
                    v
                };
                let c = take(&child.policy);
                prop_assert!(c == take(&x.policy) || c == take(&y.policy));
            }
        }
        prop_assert!(child.fitness.is_none());
    }

    #[test]
    fn gaussian_mutation_touches_the_declared_count(seed in any::<u64>(), fraction in 0.01f64..1.0) {
        let parent = agent(seed, &[6], 5);
        let child = operators::gaussian_mutation(&parent, 0.1, fraction, &mut rng_from(seed, &[2])).unwrap();
        let changed = parent
            .policy
            .params()
            .iter()
            .zip(child.policy.params().iter())
            .filter(|(a, b)| a != b)
            .count();
        prop_assert_eq!(changed, operators::gaussian_mutation_count(parent.policy.param_count(), fraction));
        prop_assert_eq!(ids_of(&child.memory), ids_of(&parent.memory));
    }

    #[test]
    fn proximal_mutation_with_zero_sigma_is_identity(seed in any::<u64>()) {
        let parent = agent(seed, &[6], 20);
        let cfg = MutationConfig { sigma: 0.0, ..MutationConfig::default() };
        let child = operators::proximal_mutation(&parent, &cfg, &mut rng_from(seed, &[3])).unwrap();
        prop_assert_eq!(child.policy.params(), parent.policy.params());
        prop_assert_eq!(child.memory.len(), parent.memory.len());
        prop_assert!(child.fitness.is_none());
    }

    #[test]
    fn policy_distance_is_symmetric_and_zero_on_self(sx in any::<u64>(), sy in any::<u64>()) {
        let x = agent(sx, &[4], 12);
        let y = agent(sy, &[4], 12);
        let xs: Vec<&[f64]> = x.memory.states().collect();
        let ys: Vec<&[f64]> = y.memory.states().collect();
        let d_xy = operators::policy_distance(&x.policy, &y.policy, &xs, &ys);
        let d_yx = operators::policy_distance(&y.policy, &x.policy, &ys, &xs);
        prop_assert!((d_xy - d_yx).abs() <= 1e-12 * d_xy.abs().max(1.0));
        prop_assert!(d_xy >= 0.0);
        prop_assert_eq!(operators::policy_distance(&x.policy, &x.policy, &xs, &ys), 0.0);
    }

    #[test]
    fn selection_weights_are_positive_and_order_preserving(scores in prop::collection::vec(-100.0f64..100.0, 1..30)) {
        let w = operators::selection_weights(&scores);
        prop_assert_eq!(w.len(), scores.len());
        prop_assert!(w.iter().all(|&v| v > 0.0 && v.is_finite()));
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(w[i] <= w[j]);
                }
            }
        }
    }

    #[test]
    fn derived_seeds_depend_on_every_tag(base in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(base, &[a, b]), derive_seed(base, &[a, b]));
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, &[a, b]), derive_seed(base, &[b, a]));
        prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[a, 0]));
    }
}

fn ids_of(m: &GeneticMemory) -> Vec<u64> {
    m.iter().map(|t| t.state[0].to_bits()).collect()
}
