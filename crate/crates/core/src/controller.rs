//! Boundary conditions from coarse label masks: seeds by center of mass or intensity
//! shortest path, and ordered termination regions per vessel.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Slab;
use crate::volume::{IntensityField, LabelVolume};
use crate::Vec3;

/// One termination region. Label regions are looked up at the nearest mask voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Region {
    Label {
        label: String,
    },
    Slab {
        name: String,
        #[serde(flatten)]
        slab: Slab,
    },
}

impl Region {
    pub fn name(&self) -> &str {
        match self {
            Region::Label { label } => label,
            Region::Slab { name, .. } => name,
        }
    }
}

/// Ordered termination regions; the first hit wins.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub regions: Vec<Region>,
    #[serde(skip)]
    resolved: Vec<Option<u16>>,
    #[serde(skip)]
    masks: Option<Arc<LabelVolume>>,
}

impl PartialEq for BoundaryConditions {
    fn eq(&self, o: &Self) -> bool {
        self.regions == o.regions
    }
}

impl BoundaryConditions {
    /// Resolves label references against `masks`; any label region without masks is an error.
    pub fn new(regions: Vec<Region>, masks: Option<Arc<LabelVolume>>) -> Result<Self> {
        let resolved = regions
            .iter()
            .map(|r| match r {
                Region::Label { label } => masks
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("label region `{label}` needs a mask volume")))?
                    .id(label)
                    .map(Some),
                Region::Slab { .. } => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { regions, resolved, masks })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn slabs(slabs: Vec<(String, Slab)>) -> Self {
        Self::new(slabs.into_iter().map(|(name, slab)| Region::Slab { name, slab }).collect(), None)
            .expect("slabs need no masks")
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Name of the first region containing `p`.
pub fn check_termination<'a>(p: Vec3, omega: &'a BoundaryConditions) -> Option<&'a str> {
    omega.regions.iter().zip(&omega.resolved).find_map(|(r, id)| {
        let hit = match (r, id) {
            (Region::Slab { slab, .. }, _) => slab.contains(p),
            (Region::Label { .. }, Some(id)) => {
                omega.masks.as_ref().and_then(|m| m.label_at(p)) == Some(*id)
            }
            (Region::Label { .. }, None) => false,
        };
        hit.then(|| r.name())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SeedProvenance {
    CenterOfMass { label: String, snapped: bool },
    PathMidpoint { from: String, to: String },
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub vessel: String,
    pub point: Vec3,
    pub provenance: SeedProvenance,
}

fn label_voxels(masks: &LabelVolume, label: &str) -> Result<Vec<usize>> {
    let v = masks.voxels_with(masks.id(label)?);
    if v.is_empty() {
        return Err(Error::EmptyLabel(label.to_string()));
    }
    Ok(v)
}

/// Centroid of the label's voxel centres, snapped to the nearest labelled voxel centre when the
/// centroid's own voxel is not labelled.
pub fn center_of_mass(masks: &LabelVolume, label: &str) -> Result<SeedSpec> {
    let voxels = label_voxels(masks, label)?;
    let g = &masks.grid;
    let mut acc = [0.0f64; 3];
    for &idx in &voxels {
        let [i, j, k] = g.unravel(idx);
        acc[0] += i as f64;
        acc[1] += j as f64;
        acc[2] += k as f64;
    }
    let n = voxels.len() as f64;
    let c = g.voxel_to_world(Vec3::new(acc[0] / n, acc[1] / n, acc[2] / n));
    let id = masks.id(label)?;
    let (point, snapped) = if masks.label_at(c) == Some(id) {
        (c, false)
    } else {
        let mut best = (f64::INFINITY, c);
        for &idx in &voxels {
            let [i, j, k] = g.unravel(idx);
            let p = g.voxel_center(i, j, k);
            let d = p.distance(c);
            if d < best.0 {
                best = (d, p);
            }
        }
        (best.1, true)
    };
    Ok(SeedSpec { vessel: label.to_string(), point, provenance: SeedProvenance::CenterOfMass { label: label.to_string(), snapped } })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortestPath {
    pub points: Vec<Vec3>,
    /// Accumulated cost at each path vertex.
    pub costs: Vec<f64>,
    pub seed: SeedSpec,
}

impl ShortestPath {
    pub fn total_cost(&self) -> f64 {
        *self.costs.last().expect("paths are non-empty")
    }
}

/// Dijkstra over the 26-connected mask grid. Entering voxel `v` costs
/// `step_mm · (1 + exp(−(I(v) − μ)/σ))`, with μ and σ over the voxels of both labels.
pub fn shortest_path_seed(
    field: &dyn IntensityField,
    masks: &LabelVolume,
    label_a: &str,
    label_b: &str,
) -> Result<ShortestPath> {
    if label_a == label_b {
        return Err(Error::Config(format!("shortest path needs two distinct labels, got `{label_a}` twice")));
    }
    let src = label_voxels(masks, label_a)?;
    let dst = label_voxels(masks, label_b)?;
    let g = masks.grid;
    let intensity: Vec<f64> = (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.unravel(idx);
            field.intensity(g.voxel_center(i, j, k))
        })
        .collect();
    let under: Vec<f64> = src.iter().chain(&dst).map(|&i| intensity[i]).collect();
    let n = under.len() as f64;
    let mu = under.iter().sum::<f64>() / n;
    let sigma = (under.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
    let enter: Vec<f64> = intensity.iter().map(|&v| 1.0 + (-(v - mu) / sigma).min(50.0).exp()).collect();

    let target_id = masks.id(label_b)?;
    let mut offsets = Vec::with_capacity(26);
    for dk in -1i64..=1 {
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                if (di, dj, dk) != (0, 0, 0) {
                    let step = Vec3::new(di as f64, dj as f64, dk as f64).component_mul(g.spacing).norm();
                    offsets.push(([di, dj, dk], step));
                }
            }
        }
    }
    let mut dist = vec![f64::INFINITY; g.len()];
    let mut prev = vec![u32::MAX; g.len()];
    let mut heap = BinaryHeap::new();
    for &s in &src {
        dist[s] = 0.0;
        heap.push(Reverse((0u64, s)));
    }
    let mut reached = None;
    while let Some(Reverse((bits, u))) = heap.pop() {
        let du = f64::from_bits(bits);
        if du > dist[u] {
            continue;
        }
        if masks.data[u] == target_id {
            reached = Some(u);
            break;
        }
        let [i, j, k] = g.unravel(u);
        for (o, step) in &offsets {
            let (ni, nj, nk) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
            if ni < 0 || nj < 0 || nk < 0 || ni >= g.dims[0] as i64 || nj >= g.dims[1] as i64 || nk >= g.dims[2] as i64 {
                continue;
            }
            let v = g.linear_index(ni as usize, nj as usize, nk as usize);
            let dv = du + step * enter[v];
            if dv < dist[v] {
                dist[v] = dv;
                prev[v] = u as u32;
                heap.push(Reverse((dv.to_bits(), v)));
            }
        }
    }
    let end = reached.ok_or_else(|| Error::NoPath(label_a.to_string(), label_b.to_string()))?;
    let mut chain = vec![end];
    while prev[*chain.last().expect("non-empty")] != u32::MAX {
        chain.push(prev[*chain.last().expect("non-empty")] as usize);
    }
    chain.reverse();
    let costs: Vec<f64> = chain.iter().map(|&i| dist[i]).collect();
    let points: Vec<Vec3> = chain
        .iter()
        .map(|&idx| {
            let [i, j, k] = g.unravel(idx);
            g.voxel_center(i, j, k)
        })
        .collect();
    let half = 0.5 * costs[costs.len() - 1];
    let mid = (0..costs.len())
        .min_by(|&a, &b| (costs[a] - half).abs().total_cmp(&(costs[b] - half).abs()).then(a.cmp(&b)))
        .expect("non-empty");
    let seed = SeedSpec {
        vessel: String::new(),
        point: points[mid],
        provenance: SeedProvenance::PathMidpoint { from: label_a.to_string(), to: label_b.to_string() },
    };
    Ok(ShortestPath { points, costs, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SeedRule {
    Com { label: String },
    Path { from: String, to: String },
    Manual { point: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselRule {
    pub seed: SeedRule,
    pub omega: Vec<Region>,
    pub delta_mm: f64,
    #[serde(default = "default_eta")]
    pub eta: usize,
}

fn default_eta() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub vessels: BTreeMap<String, VesselRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedVessel {
    pub seed: SeedSpec,
    pub omega: BoundaryConditions,
    pub delta_mm: f64,
    pub eta: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<Vec3>>,
}

/// Resolves every vessel's seed and termination set.
pub fn build_boundary_conditions(
    cfg: &ControllerConfig,
    masks: Arc<LabelVolume>,
    field: &dyn IntensityField,
) -> Result<BTreeMap<String, ResolvedVessel>> {
    let mut out = BTreeMap::new();
    for (name, rule) in &cfg.vessels {
        if rule.omega.is_empty() {
            return Err(Error::Config(format!("vessel `{name}` has an empty termination set")));
        }
        if !(rule.delta_mm > 0.0) || rule.eta == 0 {
            return Err(Error::Config(format!("vessel `{name}` needs delta_mm > 0 and eta >= 1")));
        }
        let omega = BoundaryConditions::new(rule.omega.clone(), Some(masks.clone()))?;
        let (mut seed, path) = match &rule.seed {
            SeedRule::Com { label } => (center_of_mass(&masks, label)?, None),
            SeedRule::Path { from, to } => {
                let p = shortest_path_seed(field, &masks, from, to)?;
                (p.seed, Some(p.points))
            }
            SeedRule::Manual { point } => (SeedSpec { vessel: String::new(), point: *point, provenance: SeedProvenance::Manual }, None),
        };
        seed.vessel = name.clone();
        out.insert(name.clone(), ResolvedVessel { seed, omega, delta_mm: rule.delta_mm, eta: rule.eta, path });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Axis, Side};
    use crate::volume::Grid;

    fn masks_from(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u16) -> LabelVolume {
        let grid = Grid::new(dims, Vec3::splat(1.0), Vec3::zeros()).unwrap();
        let mut data = vec![0u16; grid.len()];
        for (idx, d) in data.iter_mut().enumerate() {
            let [i, j, k] = grid.unravel(idx);
            *d = f(i, j, k);
        }
        let labels = [("background", 0), ("a", 1), ("b", 2)].iter().map(|(n, i)| (n.to_string(), *i)).collect();
        LabelVolume::new(grid, data, labels).unwrap()
    }

    struct Const;
    impl IntensityField for Const {
        fn intensity(&self, _: Vec3) -> f64 {
            1.0
        }
    }

    #[test]
    fn slab_and_mask_termination() {
        let m = Arc::new(masks_from([5, 5, 5], |i, _, _| if i == 4 { 1 } else { 0 }));
        let omega = BoundaryConditions::new(
            vec![
                Region::Slab { name: "top".into(), slab: Slab { axis: Axis::Z, threshold_mm: 3.0, side: Side::Above } },
                Region::Label { label: "a".into() },
            ],
            Some(m),
        )
        .unwrap();
        assert_eq!(check_termination(Vec3::new(0.0, 0.0, 3.5), &omega), Some("top"));
        assert_eq!(check_termination(Vec3::new(4.0, 1.0, 1.0), &omega), Some("a"));
        assert_eq!(check_termination(Vec3::new(4.0, 1.0, 3.5), &omega), Some("top"));
        assert_eq!(check_termination(Vec3::new(1.0, 1.0, 1.0), &omega), None);
        assert!(BoundaryConditions::new(vec![Region::Label { label: "a".into() }], None).is_err());
    }

    #[test]
    fn single_voxel_and_symmetric_tube_centroids() {
        let m = masks_from([5, 5, 5], |i, j, k| if (i, j, k) == (1, 2, 3) { 1 } else { 0 });
        assert_eq!(center_of_mass(&m, "a").unwrap().point, Vec3::new(1.0, 2.0, 3.0));
        let m = masks_from([9, 9, 20], |i, j, _| if (i as f64 - 4.0).hypot(j as f64 - 4.0) <= 2.5 { 1 } else { 0 });
        let s = center_of_mass(&m, "a").unwrap();
        assert!((s.point.x - 4.0).abs() < 1e-9 && (s.point.y - 4.0).abs() < 1e-9);
        assert!(matches!(center_of_mass(&m, "b"), Err(Error::EmptyLabel(_))));
    }

    #[test]
    fn l_shape_centroid_snaps_into_mask() {
        let m = masks_from([10, 10, 1], |i, j, _| if i == 0 || j == 0 { 1 } else { 0 });
        let s = center_of_mass(&m, "a").unwrap();
        assert!(matches!(s.provenance, SeedProvenance::CenterOfMass { snapped: true, .. }));
        assert_eq!(m.label_at(s.point), Some(1));
    }

    #[test]
    fn adjacent_blobs_give_a_short_path() {
        let m = masks_from([6, 3, 3], |i, _, _| if i < 3 { 1 } else { 2 });
        let p = shortest_path_seed(&Const, &m, "a", "b").unwrap();
        assert!(p.points.len() <= 2);
        assert!((p.seed.point.x - 2.0).abs() <= 1.0);
        assert!(shortest_path_seed(&Const, &m, "a", "a").is_err());
    }

    #[test]
    fn uniform_field_path_is_near_straight() {
        let m = masks_from([30, 12, 12], |i, j, k| {
            if i < 3 && j < 3 && k < 3 {
                1
            } else if i > 26 && j > 4 && k > 4 {
                2
            } else {
                0
            }
        });
        let p = shortest_path_seed(&Const, &m, "a", "b").unwrap();
        let euclid = p.points[0].distance(*p.points.last().unwrap());
        let len: f64 = p.points.windows(2).map(|w| w[0].distance(w[1])).sum();
        assert!(len <= 1.1 * euclid, "{len} vs {euclid}");
    }

    #[test]
    fn config_round_trip_and_validation() {
        let json = r#"{"vessels": {"aorta": {"seed": {"type": "com", "label": "a"},
            "omega": [{"type": "slab", "name": "t12", "axis": "z", "threshold_mm": 3.0, "side": "above"}],
            "delta_mm": 1.0}}}"#;
        let cfg: ControllerConfig = serde_json::from_str(json).unwrap();
        let m = Arc::new(masks_from([5, 5, 5], |i, _, _| if i == 2 { 1 } else { 0 }));
        let r = build_boundary_conditions(&cfg, m.clone(), &Const).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r["aorta"].omega.regions.len(), 1);
        assert_eq!(r["aorta"].eta, 5);
        let mut bad = cfg.clone();
        bad.vessels.get_mut("aorta").unwrap().omega.clear();
        assert!(build_boundary_conditions(&bad, m.clone(), &Const).is_err());
        let mut bad = cfg;
        bad.vessels.get_mut("aorta").unwrap().omega = vec![Region::Label { label: "kidney".into() }];
        assert!(matches!(build_boundary_conditions(&bad, m, &Const), Err(Error::UnknownLabel(_))));
    }
}
