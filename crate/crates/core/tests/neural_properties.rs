mod common;

use aim_morl::neural::{actor_forward, critic_forward, GraphNet, Head, NetShape};
use aim_morl::scene_graph::SceneGraph;
use common::{check_gradients, random_graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nets(seed: u64) -> (GraphNet, GraphNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetShape::default();
    (GraphNet::new(Head::Actor, shape, &mut rng), GraphNet::new(Head::Critic, shape, &mut rng))
}

fn permuted(g: &SceneGraph, perm: &[usize]) -> SceneGraph {
    // vertex i of g becomes vertex perm[i]
    let n = g.num_vertices();
    let mut out = SceneGraph::empty(g.omega);
    out.vertex_ids = vec![0; n];
    out.vertex_feats = g.vertex_feats.clone();
    for i in 0..n {
        out.vertex_ids[perm[i]] = g.vertex_ids[i];
        out.vertex_feats[perm[i]] = g.vertex_feats[i];
    }
    out.edges = g
        .edges
        .iter()
        .map(|e| {
            let mut e = *e;
            e.src = perm[e.src];
            e.dst = perm[e.dst];
            e
        })
        .collect();
    out
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut actor, mut critic) = nets(2);
    for _ in 0..4 {
        let g = random_graph(rng.random_range(3..=6), &mut rng);
        for net in [&mut actor, &mut critic] {
            let r = check_gradients(net, &g, 1e-5, 1e-6, 8, &mut rng);
            assert!(r.max_rel_err < 1e-4, "{:?} {r:?}", net.head);
        }
    }
}

#[test]
fn actor_is_permutation_equivariant_and_critic_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (actor, critic) = nets(3);
    for _ in 0..20 {
        let n = rng.random_range(1..=8);
        let g = random_graph(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let h = permuted(&g, &perm);
        let a = actor_forward(&actor, &g).unwrap();
        let b = actor_forward(&actor, &h).unwrap();
        for i in 0..n {
            assert!((a[i] - b[perm[i]]).abs() < 1e-12);
        }
        let acts: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pacts = vec![0.0; n];
        for i in 0..n {
            pacts[perm[i]] = acts[i];
        }
        let q = critic_forward(&critic, &g, &acts).unwrap();
        let p = critic_forward(&critic, &h, &pacts).unwrap();
        assert!((q - p).abs() < 1e-12);
    }
}

#[test]
fn isolated_vertex_ignores_the_rest_of_the_scene() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (actor, _) = nets(5);
    let mut g = random_graph(5, &mut rng);
    g.edges.retain(|e| e.src != 0 && e.dst != 0);
    let before = actor_forward(&actor, &g).unwrap()[0];
    for f in g.vertex_feats.iter_mut().skip(1) {
        f.v_norm += 0.3;
        f.s_norm *= 0.5;
    }
    for e in &mut g.edges {
        e.feature.inv_d *= 3.0;
    }
    assert_eq!(actor_forward(&actor, &g).unwrap()[0], before);
}

#[test]
fn omega_changes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (actor, critic) = nets(7);
    let g = random_graph(4, &mut rng);
    let a0 = actor_forward(&actor, &g.with_omega(0.0)).unwrap();
    let a1 = actor_forward(&actor, &g.with_omega(1.0)).unwrap();
    assert_ne!(a0, a1);
    let acts = [0.1, 0.2, -0.3, 0.4];
    assert_ne!(
        critic_forward(&critic, &g.with_omega(0.0), &acts).unwrap(),
        critic_forward(&critic, &g.with_omega(1.0), &acts).unwrap()
    );
}

#[test]
fn outputs_are_bounded_and_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (actor, critic) = nets(9);
    for _ in 0..50 {
        let n = rng.random_range(0..=10);
        let g = random_graph(n, &mut rng);
        let a = actor_forward(&actor, &g).unwrap();
        assert_eq!(a.len(), n);
        assert!(a.iter().all(|x| x.abs() <= 1.0));
        assert!(critic_forward(&critic, &g, &a).unwrap().is_finite());
    }
}
