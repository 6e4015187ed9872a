//! Undirected graphs with self-loops in CSR form, r-hop neighborhoods and
//! mini-batch planning.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    NoNodes,
    #[error("node id {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("neighbor cap must be at least 1")]
    ZeroCap,
}

/// Symmetric adjacency in compressed sparse row form. Every node lists
/// itself exactly once; each list is strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    undirected_edges: usize,
}

impl Graph {
    /// Symmetrizes and deduplicates `edges` and adds a self-loop per node.
    /// Input self-loops are absorbed into the mandatory ones.
    pub fn build(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::NoNodes);
        }
        let mut lists: Vec<Vec<usize>> = (0..num_nodes).map(|i| vec![i]).collect();
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { node, num_nodes });
                }
            }
            if u != v {
                lists[u].push(v);
                lists[v].push(u);
            }
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        let undirected_edges = (targets.len() - num_nodes) / 2;
        Ok(Self {
            num_nodes,
            offsets,
            targets,
            undirected_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Distinct undirected edges, self-loops excluded.
    pub fn num_undirected_edges(&self) -> usize {
        self.undirected_edges
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Sorted neighbor list of `node`, including `node` itself.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Canonical `(u, v)` pairs with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.undirected_edges);
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange {
                node,
                num_nodes: self.num_nodes,
            });
        }
        Ok(())
    }

    /// All nodes within `radius` hops of `center`, sorted.
    pub fn neighborhood(&self, center: usize, radius: usize) -> Result<Neighborhood, GraphError> {
        self.check_node(center)?;
        let mut bfs = Bfs::new(self.num_nodes);
        Ok(Neighborhood {
            center,
            radius,
            members: bfs.run(self, center, radius),
        })
    }

    /// [`Graph::neighborhood`] limited to `cap` members: when larger, the
    /// center is kept and `cap - 1` other members are drawn uniformly
    /// without replacement.
    pub fn neighborhood_capped<R: Rng + ?Sized>(
        &self,
        center: usize,
        radius: usize,
        cap: usize,
        rng: &mut R,
    ) -> Result<Neighborhood, GraphError> {
        if cap == 0 {
            return Err(GraphError::ZeroCap);
        }
        let full = self.neighborhood(center, radius)?;
        Ok(Neighborhood {
            members: cap_members(full.members, center, cap, rng),
            ..full
        })
    }
}

fn cap_members<R: Rng + ?Sized>(
    members: Vec<usize>,
    center: usize,
    cap: usize,
    rng: &mut R,
) -> Vec<usize> {
    if members.len() <= cap {
        return members;
    }
    let others: Vec<usize> = members.into_iter().filter(|&m| m != center).collect();
    let mut kept: Vec<usize> = index::sample(rng, others.len(), cap - 1)
        .into_iter()
        .map(|i| others[i])
        .collect();
    kept.push(center);
    kept.sort_unstable();
    kept
}

/// Reusable breadth-first search state.
struct Bfs {
    stamp: Vec<u32>,
    generation: u32,
}

impl Bfs {
    fn new(num_nodes: usize) -> Self {
        Self {
            stamp: vec![0; num_nodes],
            generation: 0,
        }
    }

    fn run(&mut self, graph: &Graph, center: usize, radius: usize) -> Vec<usize> {
        self.generation += 1;
        let gen = self.generation;
        self.stamp[center] = gen;
        let mut members = vec![center];
        let mut frontier = vec![center];
        for _ in 0..radius {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in graph.neighbors(u) {
                    if self.stamp[v] != gen {
                        self.stamp[v] = gen;
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            members.extend_from_slice(&next);
            frontier = next;
        }
        members.sort_unstable();
        members
    }
}

/// `N(center, radius)`: sorted member ids, always containing the center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: usize,
    pub radius: usize,
    pub members: Vec<usize>,
}

/// Optional per-node cap with the seed that makes sampling reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborCap {
    pub cap: usize,
    pub seed: u64,
}

/// Precomputed neighborhoods of every node for one radius.
#[derive(Debug, Clone)]
pub struct NeighborhoodCache {
    radius: usize,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl NeighborhoodCache {
    pub fn build(graph: &Graph, radius: usize, cap: Option<NeighborCap>) -> Result<Self, GraphError> {
        if let Some(c) = cap {
            if c.cap == 0 {
                return Err(GraphError::ZeroCap);
            }
        }
        let mut bfs = Bfs::new(graph.num_nodes());
        let mut offsets = Vec::with_capacity(graph.num_nodes() + 1);
        let mut members = Vec::new();
        offsets.push(0);
        for node in 0..graph.num_nodes() {
            let mut list = bfs.run(graph, node, radius);
            if let Some(c) = cap {
                // per-node stream: independent of build order
                let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
                rng.set_stream(node as u64);
                list = cap_members(list, node, c.cap, &mut rng);
            }
            members.extend_from_slice(&list);
            offsets.push(members.len());
        }
        Ok(Self {
            radius,
            offsets,
            members,
        })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn get(&self, node: usize) -> &[usize] {
        &self.members[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Sorted union of the neighborhoods of `centers` (the r-hop closure).
    pub fn closure(&self, centers: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = centers
            .iter()
            .flat_map(|&c| self.get(c).iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn mean_size(&self) -> f64 {
        self.members.len() as f64 / self.num_nodes().max(1) as f64
    }
}

/// One epoch of mini-batches over the training nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
}

/// Shuffles `train_ids` with a seeded generator and chunks them into batches.
pub fn plan_epoch(train_ids: &[usize], batch_size: usize, seed: u64) -> Result<BatchPlan, GraphError> {
    if train_ids.is_empty() {
        return Err(GraphError::EmptyTrainSet);
    }
    if batch_size == 0 {
        return Err(GraphError::ZeroBatchSize);
    }
    let mut order = train_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchPlan {
        seed,
        batch_size,
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_graph() {
        let g = Graph::build(3, &[(0, 1)]).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[0, 1]);
        assert_eq!(g.neighbors(2), &[2]);
        assert_eq!(g.num_undirected_edges(), 1);
        let dup = Graph::build(3, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g, dup);
    }

    #[test]
    fn build_errors() {
        assert_eq!(Graph::build(0, &[]), Err(GraphError::NoNodes));
        assert_eq!(
            Graph::build(2, &[(0, 2)]),
            Err(GraphError::NodeOutOfRange { node: 2, num_nodes: 2 })
        );
    }

    #[test]
    fn self_loops_in_input_are_absorbed() {
        let g = Graph::build(2, &[(0, 0), (0, 1)]).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.num_undirected_edges(), 1);
    }

    #[test]
    fn path_and_isolated_neighborhoods() {
        let g = Graph::build(4, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.neighborhood(0, 0).unwrap().members, vec![0]);
        assert_eq!(g.neighborhood(0, 1).unwrap().members, vec![0, 1]);
        assert_eq!(g.neighborhood(0, 2).unwrap().members, vec![0, 1, 2]);
        for r in 0..4 {
            assert_eq!(g.neighborhood(3, r).unwrap().members, vec![3]);
        }
        assert!(g.neighborhood(4, 1).is_err());
    }

    #[test]
    fn capped_neighborhood_edge_cases() {
        let edges: Vec<_> = (1..=10).map(|leaf| (0, leaf)).collect();
        let g = Graph::build(11, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let full = g.neighborhood(0, 1).unwrap();
        assert_eq!(g.neighborhood_capped(0, 1, 11, &mut rng).unwrap(), full);
        assert_eq!(g.neighborhood_capped(0, 1, 1, &mut rng).unwrap().members, vec![0]);
        let five = g.neighborhood_capped(0, 1, 5, &mut rng).unwrap();
        assert_eq!(five.members.len(), 5);
        assert!(five.members.contains(&0));
        assert_eq!(g.neighborhood_capped(0, 1, 0, &mut rng), Err(GraphError::ZeroCap));
    }

    #[test]
    fn capped_sampling_is_seeded() {
        let edges: Vec<_> = (1..=10).map(|leaf| (0, leaf)).collect();
        let g = Graph::build(11, &edges).unwrap();
        let a = g
            .neighborhood_capped(0, 1, 4, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b = g
            .neighborhood_capped(0, 1, 4, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_matches_direct_queries() {
        let g = Graph::build(6, &[(0, 1), (1, 2), (2, 3), (4, 5)]).unwrap();
        let cache = NeighborhoodCache::build(&g, 2, None).unwrap();
        for i in 0..6 {
            assert_eq!(cache.get(i), g.neighborhood(i, 2).unwrap().members.as_slice());
        }
        assert_eq!(cache.closure(&[0, 4]), vec![0, 1, 2, 4, 5]);
        let capped = NeighborhoodCache::build(&g, 2, Some(NeighborCap { cap: 2, seed: 1 })).unwrap();
        for i in 0..6 {
            assert!(capped.get(i).len() <= 2);
            assert!(capped.get(i).contains(&i));
        }
        let again = NeighborhoodCache::build(&g, 2, Some(NeighborCap { cap: 2, seed: 1 })).unwrap();
        assert_eq!(capped.members, again.members);
    }

    #[test]
    fn plan_for_140_nodes_in_batches_of_8() {
        let train: Vec<usize> = (0..140).collect();
        let plan = plan_epoch(&train, 8, 0).unwrap();
        assert_eq!(plan.batches.len(), 18);
        assert!(plan.batches[..17].iter().all(|b| b.len() == 8));
        assert_eq!(plan.batches[17].len(), 4);
    }

    #[test]
    fn plan_single_batch_and_errors() {
        let train = vec![5, 9, 2];
        let plan = plan_epoch(&train, 10, 1).unwrap();
        assert_eq!(plan.batches.len(), 1);
        let mut only = plan.batches[0].clone();
        only.sort_unstable();
        assert_eq!(only, vec![2, 5, 9]);
        assert_eq!(plan_epoch(&[], 8, 0), Err(GraphError::EmptyTrainSet));
        assert_eq!(plan_epoch(&train, 0, 0), Err(GraphError::ZeroBatchSize));
    }

    #[test]
    fn plans_depend_only_on_seed() {
        let train: Vec<usize> = (0..50).collect();
        assert_eq!(plan_epoch(&train, 8, 11).unwrap(), plan_epoch(&train, 8, 11).unwrap());
        assert_ne!(plan_epoch(&train, 8, 11).unwrap(), plan_epoch(&train, 8, 12).unwrap());
    }
}
