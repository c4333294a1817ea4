//! Robot embodiments as undirected kinematic graphs with per-joint descriptors.
//!
//! A [`RobotMorphology`] is the single source for every structural quantity the
//! policy consumes: the 1-hop adjacency indicator, shortest-path distances and
//! the 12-feature joint descriptors used for FiLM conditioning.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of features in a joint descriptor vector.
pub const DESCRIPTOR_DIM: usize = 12;

/// Positions of the binary features inside a descriptor vector. These are
/// never standardized.
pub const BINARY_FEATURES: [usize; 3] = [0, 1, 8];

pub type DescriptorVector = [f64; DESCRIPTOR_DIM];

const AXIS_TOLERANCE: f64 = 1e-6;

/// Per-joint semantic attributes. Field order matches the descriptor vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDescriptor {
    pub type_pris: u8,
    pub type_rev: u8,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub hard_lower: f64,
    pub hard_upper: f64,
    /// Already log-transformed in the file.
    pub damping_log: f64,
    pub friction_anchor: u8,
    pub lateral_friction: f64,
    pub spinning_friction: f64,
    /// Already log-transformed in the file.
    pub stiffness_log: f64,
}

impl JointDescriptor {
    /// A revolute joint rotating about `axis` with symmetric limits.
    pub fn revolute(axis: [f64; 3], limit: f64) -> Self {
        Self {
            type_rev: 1,
            ax: axis[0],
            ay: axis[1],
            az: axis[2],
            hard_lower: -limit,
            hard_upper: limit,
            damping_log: 6.90776,
            friction_anchor: 1,
            lateral_friction: 1.0,
            spinning_friction: 0.1,
            stiffness_log: 10.30895,
            ..Self::default()
        }
    }

    /// A prismatic joint along `axis` travelling over `[lower, upper]`.
    pub fn prismatic(axis: [f64; 3], lower: f64, upper: f64) -> Self {
        Self {
            type_pris: 1,
            ax: axis[0],
            ay: axis[1],
            az: axis[2],
            hard_lower: lower,
            hard_upper: upper,
            ..Self::default()
        }
    }

    pub fn validate(&self, joint: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidJoint { joint, reason });
        for (name, v) in [
            ("type_pris", self.type_pris),
            ("type_rev", self.type_rev),
            ("friction_anchor", self.friction_anchor),
        ] {
            if v > 1 {
                return bad(format!("{name} must be 0 or 1, got {v}"));
            }
        }
        if self.type_pris + self.type_rev > 1 {
            return bad("joint cannot be both prismatic and revolute".into());
        }
        let v = self.to_vector();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return bad(format!("descriptor feature {i} is not finite"));
        }
        if self.type_pris + self.type_rev == 1 {
            let norm = (self.ax * self.ax + self.ay * self.ay + self.az * self.az).sqrt();
            if (norm - 1.0).abs() > AXIS_TOLERANCE {
                return bad(format!("axis must be a unit vector, norm is {norm}"));
            }
        }
        if self.hard_lower > self.hard_upper {
            return bad(format!(
                "hard_lower {} exceeds hard_upper {}",
                self.hard_lower, self.hard_upper
            ));
        }
        Ok(())
    }

    /// Flattens the descriptor into the fixed 12-feature order. No transform
    /// is applied; damping and stiffness are stored in log units already.
    pub fn to_vector(&self) -> DescriptorVector {
        [
            f64::from(self.type_pris),
            f64::from(self.type_rev),
            self.ax,
            self.ay,
            self.az,
            self.hard_lower,
            self.hard_upper,
            self.damping_log,
            f64::from(self.friction_anchor),
            self.lateral_friction,
            self.spinning_friction,
            self.stiffness_log,
        ]
    }
}

/// Free-function form of [`JointDescriptor::to_vector`].
pub fn descriptor_vector(d: &JointDescriptor) -> DescriptorVector {
    d.to_vector()
}

/// A validated kinematic graph. Construct through [`RobotMorphology::new`] or
/// [`parse_robot_spec`]; every instance is connected and consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotMorphology {
    name: String,
    edges: BTreeSet<(usize, usize)>,
    descriptors: Vec<JointDescriptor>,
}

impl RobotMorphology {
    pub fn new(
        name: impl Into<String>,
        descriptors: Vec<JointDescriptor>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let j = descriptors.len();
        if j == 0 {
            return Err(Error::Malformed("robot must have at least one joint".into()));
        }
        for (i, d) in descriptors.iter().enumerate() {
            d.validate(i)?;
        }
        let mut set = BTreeSet::new();
        for (e, (a, b)) in edges.into_iter().enumerate() {
            if a >= j || b >= j {
                return Err(Error::InvalidEdge {
                    edge: e,
                    a,
                    b,
                    reason: format!("joint index out of range for {j} joints"),
                });
            }
            if a == b {
                return Err(Error::InvalidEdge {
                    edge: e,
                    a,
                    b,
                    reason: "self-loop".into(),
                });
            }
            set.insert((a.min(b), a.max(b)));
        }
        let m = Self {
            name: name.into(),
            edges: set,
            descriptors,
        };
        let dist = m.bfs_from(0);
        if let Some(joint) = dist.iter().position(Option::is_none) {
            return Err(Error::Disconnected { joint });
        }
        Ok(m)
    }

    /// Serial chain `0 - 1 - ... - (j-1)` of revolute joints with alternating axes.
    pub fn chain(name: impl Into<String>, j: usize) -> Result<Self> {
        let descriptors = (0..j)
            .map(|i| {
                let axis = if i % 2 == 0 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
                JointDescriptor::revolute(axis, 2.9671 - 0.2 * i as f64)
            })
            .collect();
        Self::new(name, descriptors, (1..j).map(|i| (i - 1, i)))
    }

    /// Star with joint 0 at the center.
    pub fn star(name: impl Into<String>, j: usize) -> Result<Self> {
        let descriptors = (0..j)
            .map(|i| JointDescriptor::revolute([1.0, 0.0, 0.0], 1.0 + 0.1 * i as f64))
            .collect();
        Self::new(name, descriptors, (1..j).map(|i| (0, i)))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_joints(&self) -> usize {
        self.descriptors.len()
    }

    /// Edges as sorted unordered pairs `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn descriptors(&self) -> &[JointDescriptor] {
        &self.descriptors
    }

    pub fn descriptor_vectors(&self) -> Vec<DescriptorVector> {
        self.descriptors.iter().map(JointDescriptor::to_vector).collect()
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    fn bfs_from(&self, source: usize) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut dist = vec![None; self.num_joints()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Breadth-first parent of every joint when rooted at joint 0, visiting
    /// neighbors in ascending index order. The root has no parent.
    pub fn bfs_parents(&self) -> Vec<Option<usize>> {
        let mut adj = self.neighbors();
        adj.iter_mut().for_each(|n| n.sort_unstable());
        let mut parent = vec![None; self.num_joints()];
        let mut seen = vec![false; self.num_joints()];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }

    /// Relabels joints so that old joint `i` becomes joint `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let j = self.num_joints();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != j || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::Shape(format!("{perm:?} is not a permutation of 0..{j}")));
        }
        let mut descriptors = vec![JointDescriptor::default(); j];
        for (old, &new) in perm.iter().enumerate() {
            descriptors[new] = self.descriptors[old];
        }
        let edges: Vec<_> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        // Connectivity is preserved by relabeling, but joint 0 may change, so
        // go through the validating constructor anyway.
        Self::new(self.name.clone(), descriptors, edges)
    }
}

/// 1-hop neighborhood indicator: 1 on the diagonal and on edges, else 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyIndicator(pub Array2<u8>);

impl AdjacencyIndicator {
    pub fn matrix(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.0[[i, j]] == 1
    }
}

pub fn adjacency_indicator(m: &RobotMorphology) -> AdjacencyIndicator {
    let j = m.num_joints();
    let mut mat = Array2::<u8>::eye(j);
    for (a, b) in m.edges() {
        mat[[a, b]] = 1;
        mat[[b, a]] = 1;
    }
    AdjacencyIndicator(mat)
}

/// All-pairs shortest-path distances in edge counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpdTable {
    pub matrix: Array2<usize>,
    pub d_max: usize,
}

impl SpdTable {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.matrix[[i, j]]
    }
}

/// One breadth-first search per joint; `O(J·(J+E))`.
pub fn shortest_path_distances(m: &RobotMorphology) -> SpdTable {
    let j = m.num_joints();
    let mut matrix = Array2::<usize>::zeros((j, j));
    for src in 0..j {
        for (dst, d) in m.bfs_from(src).into_iter().enumerate() {
            // Connectivity is a construction invariant.
            matrix[[src, dst]] = d.expect("morphology is connected");
        }
    }
    let d_max = matrix.iter().copied().max().unwrap_or(0);
    SpdTable { matrix, d_max }
}

/// Standardization statistics for descriptor vectors. Binary features keep
/// mean 0 and scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: DescriptorVector,
    pub scale: DescriptorVector,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; DESCRIPTOR_DIM],
            scale: [1.0; DESCRIPTOR_DIM],
        }
    }

    pub fn apply(&self, v: &DescriptorVector) -> DescriptorVector {
        let mut out = *v;
        for f in 0..DESCRIPTOR_DIM {
            if !BINARY_FEATURES.contains(&f) {
                out[f] = (v[f] - self.mean[f]) / self.scale[f];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDescriptors {
    pub vectors: Vec<DescriptorVector>,
    pub stats: NormalizationStats,
    /// Continuous features whose population variance was zero; their scale
    /// was clamped to 1.
    pub clamped: Vec<usize>,
}

/// Standardizes continuous features over `vectors`, or with `stats` when
/// given (evaluation-time reuse of training statistics).
pub fn normalize_descriptors(
    vectors: &[DescriptorVector],
    stats: Option<&NormalizationStats>,
) -> Result<NormalizedDescriptors> {
    if vectors.is_empty() {
        return Err(Error::Empty("descriptor list"));
    }
    let mut clamped = Vec::new();
    let stats = match stats {
        Some(s) => {
            if let Some(f) = s.scale.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Shape(format!("scale for feature {f} must be positive")));
            }
            s.clone()
        }
        None => {
            let n = vectors.len() as f64;
            let mut s = NormalizationStats::identity();
            for f in (0..DESCRIPTOR_DIM).filter(|f| !BINARY_FEATURES.contains(f)) {
                let mean = vectors.iter().map(|v| v[f]).sum::<f64>() / n;
                let var = vectors.iter().map(|v| (v[f] - mean).powi(2)).sum::<f64>() / n;
                s.mean[f] = mean;
                s.scale[f] = if var > 0.0 {
                    var.sqrt()
                } else {
                    clamped.push(f);
                    1.0
                };
            }
            s
        }
    };
    Ok(NormalizedDescriptors {
        vectors: vectors.iter().map(|v| stats.apply(v)).collect(),
        stats,
        clamped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    index: usize,
    descriptor: JointDescriptor,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotDocument {
    name: String,
    joints: Vec<JointEntry>,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
}

/// Parses a JSON robot description:
///
/// ```json
/// {"name": "arm", "joints": [{"index": 0, "descriptor": {...}}], "edges": [[0, 1]]}
/// ```
pub fn parse_robot_spec(text: &str) -> Result<RobotMorphology> {
    let doc: RobotDocument = serde_json::from_str(text).map_err(|e| Error::Malformed(format!("{e}")))?;
    let j = doc.joints.len();
    let mut by_index = BTreeMap::new();
    for entry in &doc.joints {
        if by_index.insert(entry.index, entry.descriptor).is_some() {
            return Err(Error::InvalidJoint {
                joint: entry.index,
                reason: "duplicate joint index".into(),
            });
        }
    }
    let max_index = by_index.keys().next_back().copied().unwrap_or(0);
    let num_joints = doc
        .edges
        .iter()
        .flatten()
        .copied()
        .chain(std::iter::once(max_index))
        .max()
        .map_or(0, |m| m + 1);
    if j == 0 || num_joints != j {
        // Either an edge or a joint refers beyond the descriptor list.
        if let Some((e, pair)) = doc.edges.iter().enumerate().find(|(_, p)| p[0] >= j || p[1] >= j) {
            return Err(Error::InvalidEdge {
                edge: e,
                a: pair[0],
                b: pair[1],
                reason: format!("joint index out of range for {j} joints"),
            });
        }
        return Err(Error::DescriptorCount {
            joints: num_joints,
            descriptors: j,
        });
    }
    let descriptors = by_index.into_values().collect();
    RobotMorphology::new(doc.name, descriptors, doc.edges.iter().map(|p| (p[0], p[1])))
}

/// Canonical JSON form: joints by index, edges sorted.
pub fn serialize_robot_spec(m: &RobotMorphology) -> String {
    let doc = RobotDocument {
        name: m.name.clone(),
        joints: m
            .descriptors
            .iter()
            .enumerate()
            .map(|(index, d)| JointEntry { index, descriptor: *d })
            .collect(),
        edges: m.edges().map(|(a, b)| [a, b]).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("robot document serializes")
}
