//! Bounding volume hierarchy over arbitrary primitives.
//!
//! The tree only knows primitive boxes. Queries hand each candidate
//! primitive index to a caller closure, which keeps one traversal routine
//! for closest-hit mesh queries and all-hit surfel queries.

use crate::math::{Aabb, Vec3};

const LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: first entry in `indices`. Interior: index of the right child
    /// (the left child is always the next node).
    offset: u32,
    /// Number of primitives for a leaf, zero for interior nodes.
    count: u32,
    axis: u8,
}

#[derive(Clone, Debug, Default)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    indices: Vec<u32>,
}

impl Bvh {
    /// Object-median build along the widest centroid axis. Ties in the
    /// centroid sort are broken by primitive index, so the tree is a pure
    /// function of the input boxes.
    pub fn build(bounds: &[Aabb]) -> Bvh {
        let mut bvh = Bvh { nodes: Vec::new(), indices: (0..bounds.len() as u32).collect() };
        if bounds.is_empty() {
            return bvh;
        }
        let centroids: Vec<Vec3> = bounds.iter().map(|b| b.center()).collect();
        bvh.nodes.reserve(2 * bounds.len() / LEAF_SIZE + 1);
        let n = bvh.indices.len();
        bvh.build_range(bounds, &centroids, 0, n);
        bvh
    }

    fn build_range(&mut self, bounds: &[Aabb], centroids: &[Vec3], start: usize, end: usize) -> usize {
        let node_bounds = self.indices[start..end]
            .iter()
            .fold(Aabb::EMPTY, |b, &i| b.union(bounds[i as usize]));
        let node_index = self.nodes.len();
        self.nodes.push(BvhNode { bounds: node_bounds, offset: start as u32, count: (end - start) as u32, axis: 0 });
        if end - start <= LEAF_SIZE {
            return node_index;
        }
        let cb = Aabb::from_points(self.indices[start..end].iter().map(|&i| centroids[i as usize]));
        let ext = cb.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        self.indices[start..end].sort_by(|&a, &b| {
            centroids[a as usize][axis]
                .total_cmp(&centroids[b as usize][axis])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        self.build_range(bounds, centroids, start, mid);
        let right = self.build_range(bounds, centroids, mid, end);
        let node = &mut self.nodes[node_index];
        node.offset = right as u32;
        node.count = 0;
        node.axis = axis as u8;
        node_index
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.count > 0).count()
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes.first().map(|n| n.bounds).unwrap_or(Aabb::EMPTY)
    }

    /// Visits every primitive whose box the ray segment `[t_min, t_max]`
    /// overlaps. `visit(prim, &mut t_max)` may shrink `t_max` to prune the
    /// rest of the traversal (closest-hit queries); returning `true` stops
    /// the traversal early (any-hit queries).
    pub fn traverse<F>(&self, origin: Vec3, dir: Vec3, t_min: f64, mut t_max: f64, mut visit: F)
    where
        F: FnMut(usize, &mut f64) -> bool,
    {
        if self.nodes.is_empty() {
            return;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let neg = [dir.x < 0.0, dir.y < 0.0, dir.z < 0.0];
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        let mut current = 0usize;
        loop {
            let node = &self.nodes[current];
            if node.bounds.hit(origin, inv, t_min, t_max).is_some() {
                if node.count > 0 {
                    let s = node.offset as usize;
                    for &prim in &self.indices[s..s + node.count as usize] {
                        if visit(prim as usize, &mut t_max) {
                            return;
                        }
                    }
                } else {
                    // Near child first.
                    let (first, second) = if neg[node.axis as usize] {
                        (node.offset as usize, current + 1)
                    } else {
                        (current + 1, node.offset as usize)
                    };
                    stack[sp] = second as u32;
                    sp += 1;
                    current = first;
                    continue;
                }
            }
            if sp == 0 {
                return;
            }
            sp -= 1;
            current = stack[sp] as usize;
        }
    }

    /// Visits every primitive whose box contains `p`.
    pub fn query_point<F: FnMut(usize)>(&self, p: Vec3, mut visit: F) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if !node.bounds.contains(p, 0.0) {
                continue;
            }
            if node.count > 0 {
                let s = node.offset as usize;
                for &prim in &self.indices[s..s + node.count as usize] {
                    visit(prim as usize);
                }
            } else {
                stack.push(node.offset as usize);
                stack.push(i + 1);
            }
        }
    }

    /// Checks the structural invariants: every primitive sits in exactly one
    /// leaf and every node box contains its subtree.
    pub fn validate(&self, bounds: &[Aabb]) -> Result<(), String> {
        if bounds.is_empty() {
            return if self.nodes.is_empty() { Ok(()) } else { Err("nodes for empty input".into()) };
        }
        let mut seen = vec![0u32; bounds.len()];
        self.validate_node(0, bounds, &mut seen)?;
        if let Some(p) = seen.iter().position(|&c| c != 1) {
            return Err(format!("primitive {p} appears in {} leaves", seen[p]));
        }
        Ok(())
    }

    fn validate_node(&self, i: usize, bounds: &[Aabb], seen: &mut [u32]) -> Result<Aabb, String> {
        let node = &self.nodes[i];
        let sub = if node.count > 0 {
            let s = node.offset as usize;
            let mut b = Aabb::EMPTY;
            for &p in &self.indices[s..s + node.count as usize] {
                seen[p as usize] += 1;
                b = b.union(bounds[p as usize]);
            }
            b
        } else {
            let l = self.validate_node(i + 1, bounds, seen)?;
            let r = self.validate_node(node.offset as usize, bounds, seen)?;
            l.union(r)
        };
        if !node.bounds.contains_box(&sub, 1e-12) {
            return Err(format!("node {i} does not contain its subtree"));
        }
        Ok(node.bounds)
    }
}
