use std::collections::HashMap;

use rayon::prelude::*;

use crate::embedding::ImageId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClosureGroup {
    /// Smallest edge id in the component, where an edge id packs the smaller
    /// endpoint into the high 64 bits and the larger into the low 64 bits.
    pub label: u128,
    /// Members in ascending order.
    pub members: Vec<ImageId>,
}

impl ClosureGroup {
    /// The component's smallest image id, i.e. the high half of the label.
    pub fn min_image(&self) -> ImageId {
        ImageId::new((self.label >> 64) as u64)
    }
}

fn edge_id(a: ImageId, b: ImageId) -> u128 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    ((lo.get() as u128) << 64) | hi.get() as u128
}

/// Connected components of an undirected edge list by iterative label
/// propagation. Each round every node takes the minimum label of its incident
/// edges and every edge the minimum label of its endpoints; the loop stops when
/// a round updates no edge. Self-loops are ignored and isolated images never
/// appear. Groups are returned in label order.
pub fn transitive_closure(edges: &[(ImageId, ImageId)]) -> Vec<ClosureGroup> {
    let mut index: HashMap<ImageId, u32> = HashMap::new();
    let mut nodes: Vec<ImageId> = Vec::new();
    let mut dense = |id: ImageId, nodes: &mut Vec<ImageId>| {
        *index.entry(id).or_insert_with(|| {
            nodes.push(id);
            (nodes.len() - 1) as u32
        })
    };
    let mut ends: Vec<(u32, u32)> = Vec::with_capacity(edges.len());
    let mut labels: Vec<u128> = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a == b {
            continue;
        }
        let (u, v) = (dense(a, &mut nodes), dense(b, &mut nodes));
        ends.push((u, v));
        labels.push(edge_id(a, b));
    }

    let mut node_label = vec![u128::MAX; nodes.len()];
    let mut rounds = 0usize;
    loop {
        rounds += 1;
        node_label.fill(u128::MAX);
        for (&(u, v), &l) in ends.iter().zip(&labels) {
            let (u, v) = (u as usize, v as usize);
            node_label[u] = node_label[u].min(l);
            node_label[v] = node_label[v].min(l);
        }
        let updated: usize = ends
            .par_iter()
            .zip(labels.par_iter_mut())
            .map(|(&(u, v), l)| {
                let m = node_label[u as usize].min(node_label[v as usize]);
                if m < *l {
                    *l = m;
                    1
                } else {
                    0
                }
            })
            .sum();
        if updated == 0 {
            break;
        }
    }
    log::debug!("transitive closure: {} edges, {rounds} rounds", ends.len());

    let mut groups: HashMap<u128, Vec<ImageId>> = HashMap::new();
    for (i, &l) in node_label.iter().enumerate() {
        groups.entry(l).or_default().push(nodes[i]);
    }
    let mut out: Vec<ClosureGroup> = groups
        .into_iter()
        .map(|(label, mut members)| {
            members.sort_unstable();
            ClosureGroup { label, members }
        })
        .collect();
    out.sort_unstable_by_key(|g| g.label);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(v: u64) -> ImageId {
        ImageId::new(v)
    }

    fn e(a: u64, b: u64) -> (ImageId, ImageId) {
        (id(a), id(b))
    }

    #[test]
    fn chain_is_one_group() {
        let g = transitive_closure(&[e(1, 2), e(2, 3)]);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members, vec![id(1), id(2), id(3)]);
        assert_eq!(g[0].label, (1u128 << 64) | 2);
        assert_eq!(g[0].min_image(), id(1));
    }

    #[test]
    fn empty_and_self_loops() {
        assert!(transitive_closure(&[]).is_empty());
        assert!(transitive_closure(&[e(4, 4)]).is_empty());
    }

    #[test]
    fn long_path_in_reverse_order() {
        let edges: Vec<_> = (0..200u64).rev().map(|i| e(i + 1, i)).collect();
        let g = transitive_closure(&edges);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 201);
        assert_eq!(g[0].label, 1);
    }

    #[test]
    fn label_is_min_edge_id() {
        let g = transitive_closure(&[e(9, 7), e(7, 12), e(30, 31), e(31, 20)]);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].label, (7u128 << 64) | 9);
        assert_eq!(g[1].label, (20u128 << 64) | 31);
        assert_eq!(g[1].members, vec![id(20), id(30), id(31)]);
    }
}
