//! Exact k-nearest-neighbour and fixed-radius queries.
//!
//! [`SpatialIndex`] is a median-split kd-tree. Distances are compared as
//! squared Euclidean distances computed in `f64` from the stored `f32`
//! coordinates, and ties are broken by ascending point id, so the tree and the
//! brute-force oracles in this module return identical results.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::pointcloud::{LabeledPointCloud, Point};

const LEAF_SIZE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn diagonal(&self) -> f64 {
        dist2(&self.min, &self.max).sqrt()
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over the positions of one cloud.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    bbox: BoundingBox,
}

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn within(d2: f64, r: f64) -> bool {
    d2 <= r * r
}

/// Heap entry ordered by (squared distance, id); the heap top is the worst kept.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn to_f64(p: &Point) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

fn check_r(r: f64) -> Result<()> {
    if r.is_nan() || r <= 0.0 {
        return Err(Error::domain(format!("radius must be positive, got {r}")));
    }
    Ok(())
}

impl SpatialIndex {
    pub fn build(cloud: &LabeledPointCloud) -> Result<Self> {
        Self::from_positions(cloud.positions())
    }

    pub fn from_positions(positions: &[Point]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::domain("cannot index an empty cloud"));
        }
        let points: Vec<[f64; 3]> = positions.iter().map(to_f64).collect();
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let mut index = SpatialIndex {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
            bbox: BoundingBox { min, max },
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[axis] - lo[axis] == 0.0 {
            // All points coincide; no split can separate them.
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        self.bbox
    }

    pub fn point(&self, id: usize) -> [f64; 3] {
        self.points[id]
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.points.len() {
            return Err(Error::domain(format!(
                "point id {id} out of range for {} points",
                self.points.len()
            )));
        }
        Ok(())
    }

    /// The `k` nearest points to point `query_id`, itself included, ordered by
    /// distance then id.
    pub fn knn(&self, query_id: usize, k: usize) -> Result<Vec<usize>> {
        self.check_id(query_id)?;
        self.knn_point(&self.points[query_id], k)
    }

    pub fn knn_point(&self, query: &[f64; 3], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::domain(format!(
                "k must be in 1..={}, got {k}",
                self.points.len()
            )));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, query, k, &mut heap);
        Ok(heap.into_sorted_vec().into_iter().map(|c| c.id).collect())
    }

    fn knn_recurse(
        &self,
        node: usize,
        query: &[f64; 3],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let c = Candidate {
                        d2: dist2(query, &self.points[id]),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_recurse(near, query, k, heap);
                // Equal-distance candidates on the far side may still win on id,
                // so only strictly farther planes are pruned.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_recurse(far, query, k, heap);
                }
            }
        }
    }

    /// Ids within distance `r` of point `query_id` (inclusive), sorted ascending.
    pub fn radius_neighbors(&self, query_id: usize, r: f64) -> Result<Vec<usize>> {
        self.check_id(query_id)?;
        self.radius_point(&self.points[query_id], r)
    }

    pub fn radius_point(&self, query: &[f64; 3], r: f64) -> Result<Vec<usize>> {
        check_r(r)?;
        let mut out = Vec::new();
        self.radius_recurse(0, query, r, &mut |id| out.push(id));
        out.sort_unstable();
        Ok(out)
    }

    pub fn radius_count(&self, query_id: usize, r: f64) -> Result<usize> {
        self.check_id(query_id)?;
        check_r(r)?;
        let mut count = 0usize;
        self.radius_recurse(0, &self.points[query_id], r, &mut |_| count += 1);
        Ok(count)
    }

    fn radius_recurse(&self, node: usize, query: &[f64; 3], r: f64, emit: &mut impl FnMut(usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    if within(dist2(query, &self.points[id]), r) {
                        emit(id);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.radius_recurse(near, query, r, emit);
                if within(diff * diff, r) {
                    self.radius_recurse(far, query, r, emit);
                }
            }
        }
    }

    /// k-neighbourhoods of every point, flattened. With `include_self = false`
    /// the query point is dropped and the next-nearest point takes its place.
    pub fn knn_all(&self, exec: Exec, k: usize, include_self: bool) -> Result<Neighborhoods> {
        let n = self.points.len();
        let fetch = if include_self { k } else { k + 1 };
        if k == 0 || fetch > n {
            return Err(Error::domain(format!(
                "neighbourhood size {k} too large for {n} points"
            )));
        }
        let rows = par::map_indices(exec, n, |i| {
            let mut ids = self.knn(i, fetch).expect("validated k");
            if !include_self {
                let pos = ids.iter().position(|&j| j == i);
                match pos {
                    Some(p) => {
                        ids.remove(p);
                    }
                    // Coincident duplicates with smaller ids can push the query out.
                    None => {
                        ids.pop();
                    }
                }
            }
            ids
        });
        Ok(Neighborhoods {
            k,
            ids: rows.into_iter().flatten().collect(),
        })
    }

    /// Radius counts `d_i` for every point.
    pub fn radius_counts(&self, exec: Exec, r: f64) -> Result<Vec<usize>> {
        check_r(r)?;
        Ok(par::map_indices(exec, self.points.len(), |i| {
            self.radius_count(i, r).expect("validated")
        }))
    }
}

/// Fixed-size neighbourhoods stored row-major: row `i` holds the `k` ids of
/// point `i`'s neighbourhood.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    k: usize,
    ids: Vec<usize>,
}

impl Neighborhoods {
    pub fn new(k: usize, ids: Vec<usize>) -> Result<Self> {
        if k == 0 || !ids.len().is_multiple_of(k) {
            return Err(Error::domain(format!(
                "{} ids do not form rows of size {k}",
                ids.len()
            )));
        }
        Ok(Neighborhoods { k, ids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.k..(i + 1) * self.k]
    }
}

/// O(N) reference for [`SpatialIndex::knn`]; same contract and tie-break.
pub fn brute_force_knn(positions: &[Point], query_id: usize, k: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if query_id >= n {
        return Err(Error::domain(format!("point id {query_id} out of range")));
    }
    if k == 0 || k > n {
        return Err(Error::domain(format!("k must be in 1..={n}, got {k}")));
    }
    let q = to_f64(&positions[query_id]);
    let mut all: Vec<Candidate> = positions
        .iter()
        .enumerate()
        .map(|(id, p)| Candidate {
            d2: dist2(&q, &to_f64(p)),
            id,
        })
        .collect();
    all.sort_unstable();
    Ok(all.into_iter().take(k).map(|c| c.id).collect())
}

/// O(N) reference for [`SpatialIndex::radius_neighbors`].
pub fn brute_force_radius(positions: &[Point], query_id: usize, r: f64) -> Result<Vec<usize>> {
    if query_id >= positions.len() {
        return Err(Error::domain(format!("point id {query_id} out of range")));
    }
    check_r(r)?;
    let q = to_f64(&positions[query_id]);
    Ok(positions
        .iter()
        .enumerate()
        .filter(|(_, p)| within(dist2(&q, &to_f64(p)), r))
        .map(|(id, _)| id)
        .collect())
}
