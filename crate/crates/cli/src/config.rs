//! Run configuration: one JSON document drives every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtrack::controller::{ControllerConfig, Region, SeedRule, VesselRule};
use vtrack::phantom::{Axis, PhantomSpec, Side, Slab};
use vtrack::polar::{ContourSynthConfig, ContourTrainConfig};
use vtrack::sphere::{OrientationSynthConfig, OrientationTrainConfig, ScaleSet, DEFAULT_LEVEL, DEFAULT_SAMPLES};
use vtrack::surface::{FieldFitConfig, DEFAULT_SMIN_K};
use vtrack::tracker::TrackConfig;
use vtrack::Vec3;

pub const BUILTIN_PHANTOM: &str = "three_vessel";

/// Input locations. Relative paths resolve against the config file's directory; unset paths
/// default to the standard file names inside the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub volume: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub orientation_checkpoint: Option<PathBuf>,
    pub contour_checkpoint: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub mesh: Option<PathBuf>,
    pub orientation_dataset: Option<PathBuf>,
    pub contour_dataset: Option<PathBuf>,
}

/// `"three_vessel"`, a path to a phantom spec JSON, or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhantomSource {
    Named(String),
    Inline(Box<PhantomSpec>),
}

impl Default for PhantomSource {
    fn default() -> Self {
        PhantomSource::Named(BUILTIN_PHANTOM.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scales: ScaleSet,
    pub icosphere_level: u32,
    pub orientation_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { scales: ScaleSet::standard(), icosphere_level: DEFAULT_LEVEL, orientation_samples: DEFAULT_SAMPLES }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrientationTraining {
    pub synth: OrientationSynthConfig,
    pub train: OrientationTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourTraining {
    pub synth: ContourSynthConfig,
    pub train: ContourTrainConfig,
}

impl Default for ContourTraining {
    fn default() -> Self {
        Self {
            synth: ContourSynthConfig { n_phantoms: 16, ..Default::default() },
            train: ContourTrainConfig { steps: 300, steps_per_epoch: 50, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub orientation: OrientationTraining,
    pub contour: ContourTraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub field: FieldFitConfig,
    pub smin_k: f64,
    pub mc_step_mm: f64,
    /// Coarse-cell stride of the banded marching-cubes sampler; 1 samples every node.
    pub mc_stride: usize,
    /// Ends stopped by another vessel's region are pushed this many contour radii further.
    pub end_extension: f64,
    /// Margin added around the contours when `bounds` is unset.
    pub padding_mm: f64,
    pub bounds: Option<[Vec3; 2]>,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            field: FieldFitConfig { steps: 2000, lr: 1e-3, ..Default::default() },
            smin_k: DEFAULT_SMIN_K,
            mc_step_mm: 1.0,
            mc_stride: 4,
            end_extension: 2.0,
            padding_mm: 5.0,
            bounds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Truth samples farther than this from the tracked centerline are outside the tracked
    /// extent and skipped by the truth-to-mesh distance.
    pub extent_tolerance_mm: f64,
    pub truth_points_per_ring: usize,
    pub bucket_mm: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { extent_tolerance_mm: 2.0, truth_points_per_ring: 64, bucket_mm: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub phantom: PhantomSource,
    pub controller: ControllerConfig,
    pub models: ModelConfig,
    /// Shared tracker settings; `delta_mm` and `eta` come from each controller entry.
    pub tracker: TrackConfig,
    pub train: TrainingConfig,
    pub reconstruct: ReconstructConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: Paths::default(),
            phantom: PhantomSource::default(),
            controller: three_vessel_controller(),
            models: ModelConfig::default(),
            tracker: TrackConfig::default(),
            train: TrainingConfig::default(),
            reconstruct: ReconstructConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn slab(name: &str, threshold_mm: f64, side: Side) -> Region {
    Region::Slab { name: name.into(), slab: Slab { axis: Axis::Z, threshold_mm, side } }
}

fn label(name: &str) -> Region {
    Region::Label { label: name.into() }
}

/// Aorta between the T12 slab and the iliac, iliac down to the pelvis slab, renal from the
/// aorta to the kidney, all at Δ = 1 mm and η = 5.
pub fn three_vessel_controller() -> ControllerConfig {
    let rule = |seed: SeedRule, omega: Vec<Region>| VesselRule { seed, omega, delta_mm: 1.0, eta: 5 };
    let mut vessels = BTreeMap::new();
    vessels.insert(
        "aorta".to_string(),
        rule(SeedRule::Com { label: "aorta".into() }, vec![slab("t12", 80.0, Side::Above), label("iliac")]),
    );
    vessels.insert(
        "iliac".to_string(),
        rule(SeedRule::Com { label: "iliac".into() }, vec![slab("pelvis", -130.0, Side::Below), label("aorta")]),
    );
    vessels.insert(
        "renal".to_string(),
        rule(SeedRule::Path { from: "aorta".into(), to: "kidney".into() }, vec![label("kidney"), label("aorta")]),
    );
    ControllerConfig { vessels }
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Seed of the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng.next_u64()
}

/// A config with every path absolute, the seed set and the phantom spec inlined.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub source: Option<PathBuf>,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir().context("reading the working directory")?.join(p))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the seed override, resolves paths and validates every section.
    pub fn resolve(mut self, source: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Resolved> {
        let seed = match seed.or(self.seed) {
            Some(s) => s,
            None => bail!(vtrack::Error::Config("a seed is required: set `seed` in the config or pass --seed".into())),
        };
        self.seed = Some(seed);
        let out = absolute(out)?;
        let base = match source {
            Some(p) => absolute(p)?.parent().map(Path::to_path_buf).unwrap_or_else(|| out.clone()),
            None => out.clone(),
        };
        let p = &mut self.paths;
        let defaults: [(&mut Option<PathBuf>, Option<&str>); 9] = [
            (&mut p.volume, Some("volume.json")),
            (&mut p.masks, Some("masks.json")),
            (&mut p.truth, Some("truth.json")),
            (&mut p.orientation_checkpoint, Some("orientation.json")),
            (&mut p.contour_checkpoint, Some("contour.json")),
            (&mut p.tracks, Some("tracks")),
            (&mut p.mesh, Some("mesh.obj")),
            (&mut p.orientation_dataset, None),
            (&mut p.contour_dataset, None),
        ];
        for (slot, default) in defaults {
            *slot = match (slot.take(), default) {
                (Some(given), _) => Some(base.join(given)),
                (None, Some(name)) => Some(out.join(name)),
                (None, None) => None,
            };
        }
        if let PhantomSource::Named(name) = &self.phantom {
            let spec = if name == BUILTIN_PHANTOM {
                PhantomSpec::three_vessel()
            } else {
                let path = base.join(name);
                let text =
                    std::fs::read_to_string(&path).with_context(|| format!("reading phantom spec {}", path.display()))?;
                PhantomSpec::from_json(&text).with_context(|| format!("phantom spec {}", path.display()))?
            };
            self.phantom = PhantomSource::Inline(Box::new(spec));
        }
        self.validate()?;
        Ok(Resolved { config: self, seed, out, source: source.map(absolute).transpose()? })
    }

    pub fn validate(&self) -> Result<()> {
        if let PhantomSource::Inline(spec) = &self.phantom {
            spec.validate().context("phantom spec")?;
        }
        self.tracker.validate()?;
        self.reconstruct.field.validate()?;
        let r = &self.reconstruct;
        if !(r.smin_k > 0.0 && r.smin_k.is_finite()) {
            bail!(vtrack::Error::Config(format!("smin_k must be positive, got {}", r.smin_k)));
        }
        if !(r.mc_step_mm > 0.0 && r.mc_step_mm.is_finite()) || r.mc_stride == 0 {
            bail!(vtrack::Error::Config("mc_step_mm must be positive and mc_stride at least 1".into()));
        }
        if !(r.end_extension >= 0.0 && r.padding_mm >= 0.0) {
            bail!(vtrack::Error::Config("end_extension and padding_mm must be non-negative".into()));
        }
        if !(1..=6).contains(&self.models.icosphere_level) || self.models.orientation_samples == 0 {
            bail!(vtrack::Error::Config("icosphere_level must be in 1..=6 and orientation_samples positive".into()));
        }
        let e = &self.evaluate;
        if !(e.extent_tolerance_mm > 0.0 && e.bucket_mm > 0.0) || e.truth_points_per_ring < 3 {
            bail!(vtrack::Error::Config("evaluate needs positive tolerances and at least 3 points per ring".into()));
        }
        Ok(())
    }
}

impl Resolved {
    pub fn path(&self, pick: impl Fn(&Paths) -> &Option<PathBuf>) -> PathBuf {
        pick(&self.config.paths).clone().expect("resolved paths are set")
    }

    pub fn phantom_spec(&self) -> &PhantomSpec {
        match &self.config.phantom {
            PhantomSource::Inline(spec) => spec,
            PhantomSource::Named(_) => unreachable!("resolved configs inline the phantom spec"),
        }
    }

    pub fn stream(&self, name: &str) -> u64 {
        substream(self.seed, name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::default().resolve(None, None, Path::new("/tmp/x")).unwrap_err();
        assert!(err.to_string().contains("seed"));
        let r = RunConfig::default().resolve(None, Some(3), Path::new("/tmp/x")).unwrap();
        assert_eq!(r.config.seed, Some(3));
    }

    #[test]
    fn relative_paths_follow_the_config_and_defaults_follow_out() {
        let mut cfg = RunConfig::default();
        cfg.paths.volume = Some("data/v.json".into());
        let r = cfg.resolve(Some(Path::new("/cfg/run.json")), Some(1), Path::new("/out")).unwrap();
        assert_eq!(r.path(|p| &p.volume), PathBuf::from("/cfg/data/v.json"));
        assert_eq!(r.path(|p| &p.truth), PathBuf::from("/out/truth.json"));
        assert!(r.config.paths.contour_dataset.is_none());
        assert!(matches!(r.config.phantom, PhantomSource::Inline(_)));
    }

    #[test]
    fn resolved_config_round_trips() {
        let r = RunConfig::default().resolve(None, Some(9), Path::new("/out")).unwrap();
        let text = serde_json::to_string(&r.config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r.config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sede": 2}"#).is_err());
    }

    #[test]
    fn substreams_differ_by_name_and_seed() {
        assert_ne!(substream(1, "a"), substream(1, "b"));
        assert_ne!(substream(1, "a"), substream(2, "a"));
        assert_eq!(substream(5, "phantom"), substream(5, "phantom"));
    }
}
