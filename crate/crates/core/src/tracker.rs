//! Bidirectional tracking from a seed: re-estimate orientation every step, delineate the lumen
//! every η steps, stop on the first boundary condition.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::controller::{check_termination, BoundaryConditions};
use crate::error::{Error, Result};
use crate::orientation::{aggregate_max, extract_directions, refine_direction, select_scale};
use crate::polar::{predict_contour, Contour, ContourCnn, PlaneFrame, DEFAULT_NPHI, DEFAULT_NR};
use crate::sphere::{multi_scale_forward, Icosphere, OrientationNet, ScaleSet, SphericalResponse};
use crate::volume::ScalarVolume;
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub delta_mm: f64,
    pub eta: usize,
    pub max_steps: usize,
    /// Largest allowed turn per step in degrees; `None` disables the gate.
    pub angle_gate_deg: Option<f64>,
    pub recenter: Recenter,
    /// Peak direction from the response-weighted one-ring instead of the bare vertex.
    pub subvertex: bool,
    /// Step along the bisector `d1 − d2` of the pair instead of the chosen member alone.
    pub symmetric: bool,
    pub n_r: usize,
    pub n_phi: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            delta_mm: 1.0,
            eta: 5,
            max_steps: 2000,
            angle_gate_deg: Some(60.0),
            recenter: Recenter::Steer,
            subvertex: true,
            symmetric: true,
            n_r: DEFAULT_NR,
            n_phi: DEFAULT_NPHI,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_mm > 0.0 && self.delta_mm.is_finite()) || self.eta == 0 || self.max_steps == 0 {
            return Err(Error::Config("track config needs delta_mm > 0, eta >= 1 and max_steps >= 1".into()));
        }
        Ok(())
    }
}

/// What to do with the offset between the walked position and the contour centroid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recenter {
    Off,
    /// Replace the position by the centroid.
    Jump,
    /// Tilt the next η steps so that they absorb the offset, keeping every step exactly Δ long.
    Steer,
}

/// Largest tilt of a steered step away from the estimated tangent.
const MAX_STEER_DEG: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Termination {
    Region(String),
    VolumeExit,
    NoOrientation,
    Kink,
    MaxSteps,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Region(n) => write!(f, "region:{n}"),
            Termination::VolumeExit => f.write_str("volume exit"),
            Termination::NoOrientation => f.write_str("no orientation"),
            Termination::Kink => f.write_str("kink"),
            Termination::MaxSteps => f.write_str("max steps"),
        }
    }
}

impl std::str::FromStr for Termination {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "volume exit" => Termination::VolumeExit,
            "no orientation" => Termination::NoOrientation,
            "kink" => Termination::Kink,
            "max steps" => Termination::MaxSteps,
            _ => match s.strip_prefix("region:") {
                Some(n) => Termination::Region(n.to_string()),
                None => return Err(Error::InvalidInput(format!("unknown termination reason `{s}`"))),
            },
        })
    }
}

impl Serialize for Termination {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Termination {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedContour {
    /// Position on the merged centerline.
    pub index: usize,
    pub contour: Contour,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedVessel {
    pub name: String,
    pub centerline: Vec<Vec3>,
    pub contours: Vec<IndexedContour>,
    /// Index of the seed on the centerline.
    pub seed_index: usize,
    /// `[forward, backward]`: the legs along `d1` and `d2`.
    pub termination: [Termination; 2],
}

impl TrackedVessel {
    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Unit tangent at centerline index `i` by central difference.
    pub fn tangent(&self, i: usize) -> Vec3 {
        let n = self.centerline.len();
        if n < 2 {
            return Vec3::zeros();
        }
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
        (self.centerline[b] - self.centerline[a]).normalize()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "centerline": self.centerline,
            "seed_index": self.seed_index,
            "termination": { "forward": self.termination[0].to_string(), "backward": self.termination[1].to_string() },
            "contours": self.contours.iter().map(|c| {
                let mut j = c.contour.to_json();
                j["index"] = c.index.into();
                j
            }).collect::<Vec<_>>(),
        })
    }

    /// Inverse of [`TrackedVessel::to_json`]. Derived contour points are ignored; a missing
    /// `e2` is rebuilt as `normal × e1`.
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Frame {
            center: Vec3,
            normal: Vec3,
            e1: Vec3,
            e2: Option<Vec3>,
        }
        #[derive(Deserialize)]
        struct Entry {
            index: usize,
            frame: Frame,
            r_tilde: f64,
            radii: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Stops {
            forward: Termination,
            backward: Termination,
        }
        #[derive(Deserialize)]
        struct Doc {
            name: String,
            centerline: Vec<Vec3>,
            seed_index: usize,
            termination: Stops,
            contours: Vec<Entry>,
        }
        let doc = Doc::deserialize(v).map_err(|e| Error::InvalidInput(format!("track JSON: {e}")))?;
        let n = doc.centerline.len();
        if n == 0 || doc.seed_index >= n {
            return Err(Error::InvalidInput(format!("track `{}`: seed index {} outside a centerline of {n} points", doc.name, doc.seed_index)));
        }
        let contours = doc
            .contours
            .into_iter()
            .map(|c| {
                if c.index >= n || c.radii.len() < 3 || c.radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::InvalidInput(format!("track `{}`: bad contour at index {}", doc.name, c.index)));
                }
                let f = c.frame;
                let e2 = f.e2.unwrap_or_else(|| f.normal.cross(f.e1));
                let frame = PlaneFrame { center: f.center, normal: f.normal, e1: f.e1, e2 };
                Ok(IndexedContour { index: c.index, contour: Contour { frame, r_tilde: c.r_tilde, radii: c.radii } })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: doc.name,
            centerline: doc.centerline,
            contours,
            seed_index: doc.seed_index,
            termination: [doc.termination.forward, doc.termination.backward],
        })
    }
}

/// Trained networks plus the fixed sampling structures they run on.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub orientation: &'a OrientationNet<f32>,
    pub contour: &'a ContourCnn<f32>,
    pub sphere: &'a Icosphere<f64>,
    pub scales: &'a ScaleSet,
}

struct Estimate {
    responses: Vec<SphericalResponse>,
    /// Candidate directions `(d1, d2)`.
    dirs: [Vec3; 2],
}

fn estimate(models: &Models, vol: &ScalarVolume, x: Vec3, subvertex: bool) -> Result<Option<Estimate>> {
    let responses = multi_scale_forward(models.orientation, vol, x, models.scales, models.sphere)?;
    let f = aggregate_max(&responses)?;
    let pair = match extract_directions(&f, models.sphere) {
        Ok(p) => p,
        Err(Error::NoOrientation) => return Ok(None),
        Err(e) => return Err(e),
    };
    let dirs = if subvertex {
        [refine_direction(&f, models.sphere, pair.v1), refine_direction(&f, models.sphere, pair.v2)]
    } else {
        [pair.d1, pair.d2]
    };
    Ok(Some(Estimate { responses, dirs }))
}

fn contour_at(
    models: &Models,
    vol: &ScalarVolume,
    x: Vec3,
    d: Vec3,
    responses: &[SphericalResponse],
    prev: Option<&PlaneFrame>,
    cfg: &TrackConfig,
) -> Result<Contour> {
    let r_tilde = select_scale(responses, models.scales)?.r_tilde;
    let frame = PlaneFrame::new(x, d, prev);
    predict_contour(models.contour, vol, &frame, r_tilde, cfg.n_r, cfg.n_phi)
}

/// Unit vector along `a − b`, falling back to `a` when the pair is degenerate.
fn bisector(a: Vec3, b: Vec3) -> Vec3 {
    let m = a - b;
    if m.norm() < 1e-6 {
        a
    } else {
        m.normalize()
    }
}

struct Leg {
    points: Vec<Vec3>,
    /// `(step, contour)` with step counted from the seed.
    contours: Vec<(usize, Contour)>,
    reason: Termination,
}

fn walk(
    models: &Models,
    vol: &ScalarVolume,
    seed: Vec3,
    d0: Vec3,
    seed_frame: &PlaneFrame,
    seed_offset: Vec3,
    omega: &BoundaryConditions,
    cfg: &TrackConfig,
) -> Result<Leg> {
    let cos_gate = cfg.angle_gate_deg.map(|g| g.to_radians().cos());
    let mut leg = Leg { points: Vec::new(), contours: Vec::new(), reason: Termination::MaxSteps };
    let (mut x, mut d) = (seed, d0);
    let mut frame = *seed_frame;
    let mut tilt = steer_tilt(seed_offset, cfg);
    for step in 1..=cfg.max_steps {
        let heading = (d + (tilt - d * tilt.dot(d))).normalize();
        let next = x + heading * cfg.delta_mm;
        if !vol.grid.contains(next) {
            leg.reason = Termination::VolumeExit;
            return Ok(leg);
        }
        if let Some(name) = check_termination(next, omega) {
            leg.reason = Termination::Region(name.to_string());
            return Ok(leg);
        }
        x = next;
        leg.points.push(x);
        let Some(est) = estimate(models, vol, x, cfg.subvertex)? else {
            leg.reason = Termination::NoOrientation;
            return Ok(leg);
        };
        let (a, b) = if est.dirs[0].dot(d) >= est.dirs[1].dot(d) { (est.dirs[0], est.dirs[1]) } else { (est.dirs[1], est.dirs[0]) };
        let cand = if cfg.symmetric { bisector(a, b) } else { a };
        if cos_gate.is_some_and(|c| cand.dot(d) < c) {
            leg.reason = Termination::Kink;
            return Ok(leg);
        }
        d = cand;
        if step % cfg.eta == 0 {
            let c = contour_at(models, vol, x, d, &est.responses, Some(&frame), cfg)?;
            frame = c.frame;
            let offset = c.centroid() - x;
            match cfg.recenter {
                Recenter::Off => {}
                Recenter::Jump => {
                    if vol.grid.contains(x + offset) {
                        x += offset;
                        *leg.points.last_mut().expect("pushed above") = x;
                    }
                }
                Recenter::Steer => tilt = steer_tilt(offset, cfg),
            }
            leg.contours.push((step, c));
        }
    }
    Ok(leg)
}

/// Per-step direction tilt that covers `offset` within η steps, capped at `MAX_STEER_DEG`.
fn steer_tilt(offset: Vec3, cfg: &TrackConfig) -> Vec3 {
    if cfg.recenter != Recenter::Steer {
        return Vec3::zeros();
    }
    let t = offset * (1.0 / (cfg.eta as f64 * cfg.delta_mm));
    let cap = MAX_STEER_DEG.to_radians().tan();
    if t.norm() > cap {
        t * (cap / t.norm())
    } else {
        t
    }
}

/// Tracks both directions from `seed` and merges them into one centerline running from the end
/// of the `d2` leg, through the seed, to the end of the `d1` leg.
pub fn track_vessel(
    name: &str,
    vol: &ScalarVolume,
    models: &Models,
    seed: Vec3,
    omega: &BoundaryConditions,
    cfg: &TrackConfig,
) -> Result<TrackedVessel> {
    cfg.validate()?;
    if !vol.grid.contains(seed) {
        return Err(Error::Seed(format!("{seed:?} lies outside the volume")));
    }
    if let Some(r) = check_termination(seed, omega) {
        return Err(Error::Seed(format!("{seed:?} lies inside termination region `{r}`")));
    }
    let Some(est) = estimate(models, vol, seed, cfg.subvertex)? else {
        return Ok(TrackedVessel {
            name: name.to_string(),
            centerline: vec![seed],
            contours: Vec::new(),
            seed_index: 0,
            termination: [Termination::NoOrientation, Termination::NoOrientation],
        });
    };
    let (d1, d2) = if cfg.symmetric {
        let b = bisector(est.dirs[0], est.dirs[1]);
        (b, -b)
    } else {
        (est.dirs[0], est.dirs[1])
    };
    let seed_contour = contour_at(models, vol, seed, d1, &est.responses, None, cfg)?;
    let offset = seed_contour.centroid() - seed;
    let fwd = walk(models, vol, seed, d1, &seed_contour.frame, offset, omega, cfg)?;
    let back_frame = seed_contour.flipped().frame;
    let bwd = walk(models, vol, seed, d2, &back_frame, offset, omega, cfg)?;

    let nb = bwd.points.len();
    let mut centerline: Vec<Vec3> = bwd.points.iter().rev().copied().collect();
    centerline.push(seed);
    centerline.extend(&fwd.points);
    let mut contours: Vec<IndexedContour> = bwd
        .contours
        .iter()
        .rev()
        .map(|(step, c)| IndexedContour { index: nb - step, contour: c.flipped() })
        .collect();
    contours.push(IndexedContour { index: nb, contour: seed_contour });
    contours.extend(fwd.contours.into_iter().map(|(step, c)| IndexedContour { index: nb + step, contour: c }));
    Ok(TrackedVessel { name: name.to_string(), centerline, contours, seed_index: nb, termination: [fwd.reason, bwd.reason] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn termination_strings_round_trip() {
        for t in [
            Termination::Region("t12".into()),
            Termination::VolumeExit,
            Termination::NoOrientation,
            Termination::Kink,
            Termination::MaxSteps,
        ] {
            let j = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<Termination>(&j).unwrap(), t);
        }
        assert!("sideways".parse::<Termination>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrackConfig::default().validate().is_ok());
        assert!(TrackConfig { eta: 0, ..Default::default() }.validate().is_err());
        assert!(TrackConfig { delta_mm: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn track_json_round_trips() {
        let centerline: Vec<Vec3> = (0..12).map(|i| Vec3::new(0.1 * i as f64, 0.0, i as f64)).collect();
        let frame = PlaneFrame::new(Vec3::new(0.3, 0.0, 3.0), Vec3::new(0.1, 0.0, 1.0), None);
        let contour = Contour { frame, r_tilde: 6.0, radii: (0..16).map(|k| 2.0 + 0.1 * k as f64).collect() };
        let v = TrackedVessel {
            name: "aorta".into(),
            centerline,
            contours: vec![IndexedContour { index: 3, contour }],
            seed_index: 5,
            termination: [Termination::Region("t12".into()), Termination::VolumeExit],
        };
        let text = serde_json::to_string(&v.to_json()).unwrap();
        let back = TrackedVessel::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, v);
        let mut bad = v.to_json();
        bad["seed_index"] = 40.into();
        assert!(TrackedVessel::from_json(&bad).is_err());
    }
}
