//! Super-voxel over-segmentation by region growing on the k-NN graph.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{Cloud, Neighborhoods};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub k_neighbors: usize,
    /// Degrees.
    pub normal_angle_max: f64,
    /// Euclidean distance in RGB [0,1]^3.
    pub color_dist_max: f64,
    /// Meters.
    pub spatial_dist_max: f64,
    pub min_sv_size: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            k_neighbors: 16,
            normal_angle_max: 15.0,
            color_dist_max: 0.2,
            spatial_dist_max: 0.05,
            min_sv_size: 10,
        }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 3 {
            return Err(Error::InvalidParameter("k_neighbors must be >= 3".into()));
        }
        let positive = |v: f64| v > 0.0 && !v.is_nan();
        if !(positive(self.normal_angle_max) && positive(self.color_dist_max) && positive(self.spatial_dist_max)) {
            return Err(Error::InvalidParameter("segmentation thresholds must be > 0".into()));
        }
        if self.min_sv_size == 0 {
            return Err(Error::InvalidParameter("min_sv_size must be > 0".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("params serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A total mapping from points to super-voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<u32>,
    members: Vec<Vec<u32>>,
    params_digest: String,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    assignment: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    members: Option<Vec<Vec<u32>>>,
    #[serde(default)]
    params_digest: String,
}

impl Partition {
    /// Build from a point→super-voxel map; ids must be dense in `[0, S)`.
    pub fn from_assignment(assignment: Vec<u32>, params_digest: impl Into<String>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::InvalidPartition { index: 0, reason: "empty partition".into() });
        }
        let s = assignment.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut members = vec![Vec::new(); s];
        for (i, &sv) in assignment.iter().enumerate() {
            members[sv as usize].push(i as u32);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidPartition {
                index: empty,
                reason: format!("super-voxel {empty} has no members"),
            });
        }
        Ok(Partition { assignment, members, params_digest: params_digest.into() })
    }

    /// Build from member lists, rejecting overlaps and gaps.
    pub fn from_members(n: usize, lists: Vec<Vec<u32>>, params_digest: impl Into<String>) -> Result<Self> {
        let mut assignment = vec![u32::MAX; n];
        for (sv, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidPartition {
                    index: sv,
                    reason: format!("super-voxel {sv} has no members"),
                });
            }
            for &p in list {
                let p = p as usize;
                if p >= n {
                    return Err(Error::InvalidPartition { index: p, reason: format!("point index out of range (N = {n})") });
                }
                if assignment[p] != u32::MAX {
                    return Err(Error::InvalidPartition { index: p, reason: "point assigned twice".into() });
                }
                assignment[p] = sv as u32;
            }
        }
        if let Some(gap) = assignment.iter().position(|&a| a == u32::MAX) {
            return Err(Error::InvalidPartition { index: gap, reason: "point not assigned".into() });
        }
        Partition::from_assignment(assignment, params_digest)
    }

    pub fn single(n: usize) -> Self {
        Partition::from_assignment(vec![0; n], "single").expect("n >= 1")
    }

    pub fn singletons(n: usize) -> Self {
        Partition::from_assignment((0..n as u32).collect(), "singletons").expect("n >= 1")
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_supervoxels(&self) -> usize {
        self.members.len()
    }

    pub fn supervoxel_of(&self, point: usize) -> usize {
        self.assignment[point] as usize
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn members(&self, supervoxel: usize) -> &[u32] {
        &self.members[supervoxel]
    }

    pub fn all_members(&self) -> &[Vec<u32>] {
        &self.members
    }

    pub fn params_digest(&self) -> &str {
        &self.params_digest
    }

    /// Whether every super-voxel is connected under the undirected k-NN graph.
    pub fn is_connected_under(&self, neighborhoods: &Neighborhoods) -> bool {
        let n = self.len();
        let mut adj = vec![Vec::new(); n];
        for i in 0..n {
            for &j in neighborhoods.of(i) {
                let j = j as usize;
                if j != i && self.assignment[i] == self.assignment[j] {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        let mut seen = vec![false; n];
        for list in &self.members {
            let start = list[0] as usize;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            let mut reached = 1;
            while let Some(p) = queue.pop_front() {
                for &q in &adj[p] {
                    if !seen[q] {
                        seen[q] = true;
                        reached += 1;
                        queue.push_back(q);
                    }
                }
            }
            if reached != list.len() {
                return false;
            }
        }
        true
    }
}

pub fn save_partition(partition: &Partition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = PartitionFile {
        n: partition.len(),
        s: Some(partition.num_supervoxels()),
        assignment: Some(partition.assignment.clone()),
        members: None,
        params_digest: partition.params_digest.clone(),
    };
    fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
}

/// Load a partition file, checking it covers exactly `expected_n` points when given.
pub fn load_partition(path: impl AsRef<Path>, expected_n: Option<usize>) -> Result<Partition> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: PartitionFile = serde_json::from_slice(&bytes)?;
    if let Some(n) = expected_n {
        if file.n != n {
            return Err(Error::InvalidPartition {
                index: file.n.min(n),
                reason: format!("partition declares {} points, cloud has {n}", file.n),
            });
        }
    }
    let partition = match (file.assignment, file.members) {
        (Some(assignment), None) => {
            if assignment.len() != file.n {
                let index = assignment.len().min(file.n);
                return Err(Error::InvalidPartition {
                    index,
                    reason: format!("assignment has {} entries for {} points", assignment.len(), file.n),
                });
            }
            if let Some(s) = file.s {
                if let Some(i) = assignment.iter().position(|&a| a as usize >= s) {
                    return Err(Error::InvalidPartition { index: i, reason: format!("super-voxel id >= S = {s}") });
                }
            }
            Partition::from_assignment(assignment, file.params_digest)?
        }
        (None, Some(lists)) => Partition::from_members(file.n, lists, file.params_digest)?,
        _ => {
            return Err(Error::parse(
                path.display().to_string(),
                "partition needs exactly one of `assignment` or `members`",
            ))
        }
    };
    if let Some(s) = file.s {
        if s != partition.num_supervoxels() {
            return Err(Error::InvalidPartition {
                index: 0,
                reason: format!("declared S = {s}, found {}", partition.num_supervoxels()),
            });
        }
    }
    Ok(partition)
}

struct Region {
    seed_normal: [f64; 3],
    color_sum: [f64; 3],
    members: Vec<u32>,
    alive: bool,
}

impl Region {
    fn color_mean(&self) -> [f64; 3] {
        let n = self.members.len() as f64;
        [self.color_sum[0] / n, self.color_sum[1] / n, self.color_sum[2] / n]
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn as_f64(v: [f32; 3]) -> [f64; 3] {
    [v[0] as f64, v[1] as f64, v[2] as f64]
}

fn abs_dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs().min(1.0)
}

/// Over-segment `cloud` into homogeneous super-voxels.
///
/// Regions grow over the k-NN graph from seeds taken in ascending point
/// order. A neighbour joins when its (unoriented) normal is within
/// `normal_angle_max` of the seed normal, its color is within
/// `color_dist_max` of the region mean and it lies within `spatial_dist_max`
/// of the nearest known region member. Regions under `min_sv_size` are then
/// merged into their most similar adjacent region.
pub fn segment(cloud: &Cloud, params: &SegmentParams) -> Result<Partition> {
    params.validate()?;
    let normals = cloud.normals().ok_or(Error::MissingNormals)?;
    let nb = Neighborhoods::build(cloud.positions(), params.k_neighbors);
    segment_with(cloud, params, &nb, normals)
}

pub(crate) fn segment_with(
    cloud: &Cloud,
    params: &SegmentParams,
    nb: &Neighborhoods,
    normals: &[[f32; 3]],
) -> Result<Partition> {
    let n = cloud.len();
    let positions = cloud.positions();
    let colors = cloud.colors();
    let cos_max = params.normal_angle_max.min(180.0).to_radians().cos();
    const NONE: u32 = u32::MAX;
    let mut label = vec![NONE; n];
    let mut regions: Vec<Region> = Vec::new();
    let mut queue = VecDeque::new();

    for seed in 0..n {
        if label[seed] != NONE {
            continue;
        }
        let r = regions.len() as u32;
        label[seed] = r;
        regions.push(Region {
            seed_normal: as_f64(normals[seed]),
            color_sum: as_f64(colors[seed]),
            members: vec![seed as u32],
            alive: true,
        });
        queue.clear();
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            let pp = as_f64(positions[p]);
            for &q in nb.of(p) {
                let q = q as usize;
                if label[q] != NONE {
                    continue;
                }
                let region = &regions[r as usize];
                if abs_dot(as_f64(normals[q]), region.seed_normal) < cos_max {
                    continue;
                }
                if dist3(as_f64(colors[q]), region.color_mean()) > params.color_dist_max {
                    continue;
                }
                let pq = as_f64(positions[q]);
                let mut nearest = dist3(pp, pq);
                for &j in nb.of(q) {
                    if label[j as usize] == r {
                        nearest = nearest.min(dist3(as_f64(positions[j as usize]), pq));
                    }
                }
                if nearest > params.spatial_dist_max {
                    continue;
                }
                label[q] = r;
                let region = &mut regions[r as usize];
                region.members.push(q as u32);
                let c = as_f64(colors[q]);
                for a in 0..3 {
                    region.color_sum[a] += c[a];
                }
                queue.push_back(q);
            }
        }
    }

    merge_small_regions(&mut regions, &mut label, nb, params.min_sv_size);

    // Compact ids in order of each region's smallest member.
    let mut remap = vec![NONE; regions.len()];
    let mut next = 0u32;
    let mut assignment = vec![0u32; n];
    for i in 0..n {
        let r = label[i] as usize;
        if remap[r] == NONE {
            remap[r] = next;
            next += 1;
        }
        assignment[i] = remap[r];
    }
    Partition::from_assignment(assignment, params.digest())
}

fn merge_small_regions(regions: &mut [Region], label: &mut [u32], nb: &Neighborhoods, min_size: usize) {
    // Incoming edges let us find neighbours of a region from both directions.
    let n = label.len();
    let mut incoming: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in nb.of(i) {
            if j as usize != i {
                incoming[j as usize].push(i as u32);
            }
        }
    }
    let mut start = 0;
    loop {
        let Some(small) = (start..regions.len())
            .find(|&r| regions[r].alive && regions[r].members.len() < min_size)
        else {
            break;
        };
        let mut adjacent: Vec<usize> = Vec::new();
        for &p in &regions[small].members {
            let p = p as usize;
            for &q in nb.of(p).iter().chain(incoming[p].iter()) {
                let lq = label[q as usize] as usize;
                if lq != small && !adjacent.contains(&lq) {
                    adjacent.push(lq);
                }
            }
        }
        if adjacent.is_empty() {
            // isolated component: nothing to merge into
            start = small + 1;
            continue;
        }
        let mean = regions[small].color_mean();
        let normal = regions[small].seed_normal;
        let score = |r: &Region| dist3(mean, r.color_mean()) + (1.0 - abs_dot(normal, r.seed_normal));
        let target = adjacent
            .iter()
            .copied()
            .min_by(|&a, &b| {
                score(&regions[a])
                    .total_cmp(&score(&regions[b]))
                    .then(regions[b].members.len().cmp(&regions[a].members.len()))
                    .then(a.cmp(&b))
            })
            .expect("non-empty");
        let moved = std::mem::take(&mut regions[small].members);
        regions[small].alive = false;
        for &p in &moved {
            label[p as usize] = target as u32;
        }
        let add = regions[small].color_sum;
        let t = &mut regions[target];
        for a in 0..3 {
            t.color_sum[a] += add[a];
        }
        t.members.extend(moved);
        // the target may itself be small and earlier in order
        start = start.min(target);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::estimate_normals;

    fn plane(z: f32, step: f32, n: usize, color: [f32; 3]) -> (Vec<[f32; 3]>, Vec<[f32; 3]>) {
        let mut p = Vec::new();
        for i in 0..n {
            for j in 0..n {
                p.push([i as f32 * step, j as f32 * step, z]);
            }
        }
        let c = vec![color; p.len()];
        (p, c)
    }

    #[test]
    fn two_parallel_planes_give_two_supervoxels() {
        let (mut p, mut c) = plane(0.0, 0.05, 20, [0.5; 3]);
        let (p2, c2) = plane(1.0, 0.05, 20, [0.5; 3]);
        p.extend(p2);
        c.extend(c2);
        let cloud = estimate_normals(&Cloud::new("two", p, c).unwrap(), 16).unwrap();
        let params = SegmentParams { spatial_dist_max: 0.1, ..Default::default() };
        let part = segment(&cloud, &params).unwrap();
        assert_eq!(part.num_supervoxels(), 2);
        assert!(part.assignment()[..400].iter().all(|&a| a == 0));
        assert!(part.assignment()[400..].iter().all(|&a| a == 1));
    }

    #[test]
    fn single_point_is_one_supervoxel() {
        let cloud = Cloud::new("one", vec![[0.0; 3]], vec![[0.1; 3]])
            .unwrap()
            .with_normals(vec![[0.0, 0.0, 1.0]])
            .unwrap();
        let part = segment(&cloud, &SegmentParams::default()).unwrap();
        assert_eq!(part.num_supervoxels(), 1);
        assert_eq!(part.members(0), &[0]);
    }

    #[test]
    fn vacuous_thresholds_give_one_supervoxel() {
        let (p, _) = plane(0.0, 0.05, 10, [0.5; 3]);
        let c: Vec<[f32; 3]> = (0..p.len()).map(|i| [(i % 7) as f32 / 7.0, 0.3, 0.9]).collect();
        let mut p = p;
        for (i, v) in p.iter_mut().enumerate() {
            v[2] = ((i * 37) % 11) as f32 * 0.01;
        }
        let cloud = estimate_normals(&Cloud::new("v", p, c).unwrap(), 8).unwrap();
        let params = SegmentParams {
            normal_angle_max: 180.0,
            color_dist_max: f64::INFINITY,
            spatial_dist_max: f64::INFINITY,
            ..Default::default()
        };
        assert_eq!(segment(&cloud, &params).unwrap().num_supervoxels(), 1);
    }

    #[test]
    fn missing_normals_is_an_error() {
        let cloud = Cloud::new("n", vec![[0.0; 3]; 4], vec![[0.1; 3]; 4]).unwrap();
        assert!(matches!(segment(&cloud, &SegmentParams::default()), Err(Error::MissingNormals)));
    }

    #[test]
    fn partition_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let part = Partition::from_assignment(vec![0, 0, 1, 2, 1], "abc").unwrap();
        save_partition(&part, &path).unwrap();
        assert_eq!(load_partition(&path, Some(5)).unwrap(), part);
        assert!(load_partition(&path, Some(6)).is_err());

        fs::write(&path, r#"{"n": 8, "members": [[0,1,2,3,4,5],[5,6,7]]}"#).unwrap();
        let err = load_partition(&path, Some(8)).unwrap_err();
        assert!(matches!(err, Error::InvalidPartition { index: 5, .. }), "{err}");

        fs::write(&path, r#"{"n": 4, "members": [[0,1],[3]]}"#).unwrap();
        assert!(matches!(load_partition(&path, None), Err(Error::InvalidPartition { index: 2, .. })));

        fs::write(&path, r#"{"n": 3, "s": 1, "assignment": [0,0,0], "params_digest": "x"}"#).unwrap();
        assert_eq!(load_partition(&path, Some(3)).unwrap().num_supervoxels(), 1);
    }

    #[test]
    fn gaps_in_ids_are_rejected() {
        assert!(Partition::from_assignment(vec![0, 2, 2], "").is_err());
    }
}
