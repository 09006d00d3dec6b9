//! The five pipeline commands. Each writes its outputs under the resolved output directory
//! plus a `<command>.manifest.json` echoing the resolved config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use vtrack::controller::build_boundary_conditions;
use vtrack::nn::{load_checkpoint, restore, save_checkpoint, Checkpoint};
use vtrack::phantom::PhantomTruth;
use vtrack::polar::{synth_contour_dataset, ContourCnn, ContourDataset};
use vtrack::sphere::{synth_orientation_dataset, train_orientation, Icosphere, OrientationDataset, OrientationNet};
use vtrack::surface::{
    blend_fields, ends_stopped_in, extend_ends, fit_neural_field, marching_cubes_banded, mesh_watertight, FieldFitReport,
    McGrid, Mesh, NeuralField,
};
use vtrack::tracker::{track_vessel, Models, TrackConfig, TrackedVessel};
use vtrack::volume::{load_volume, save_labels, save_scalar, LabelVolume, ScalarVolume};
use vtrack::Vec3;

use crate::config::Resolved;
use crate::error::CliError;
use crate::metrics::{evaluate, Metrics};

pub const ORIENTATION_KIND: &str = "orientation_gcn";
pub const CONTOUR_KIND: &str = "contour_cnn";
pub const FIELD_KIND: &str = "neural_field";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    Orientation,
    Contour,
}

impl Network {
    pub fn name(self) -> &'static str {
        match self {
            Network::Orientation => "orientation",
            Network::Contour => "contour",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub command: String,
    pub manifest: PathBuf,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require(path: &Path, what: &'static str, hint: &'static str) -> Result<()> {
    if !path.exists() {
        bail!(CliError::MissingInput { what, path: path.to_path_buf(), hint });
    }
    Ok(())
}

fn relative(out: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn finish(r: &Resolved, command: &str, outputs: Vec<PathBuf>, details: Value) -> Result<Outcome> {
    let outputs: Vec<PathBuf> = outputs.iter().map(|p| relative(&r.out, p)).collect();
    let manifest = r.out.join(format!("{command}.manifest.json"));
    write_json(
        &manifest,
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": r.seed,
            "config_source": r.source,
            "config": r.config,
            "outputs": outputs,
            "details": details,
        }),
    )?;
    Ok(Outcome { command: command.into(), manifest, outputs })
}

pub fn phantom(r: &Resolved) -> Result<Outcome> {
    let spec = r.phantom_spec();
    let noise_seed = r.stream("phantom.noise");
    let g = spec.generate(noise_seed).context("generating the phantom")?;
    create_dir(&r.out)?;
    let mut outputs = vec![r.out.join("phantom_spec.json"), r.out.join("volume.json")];
    write_json(&outputs[0], spec)?;
    save_scalar(&g.volume, &outputs[1])?;
    if let Some(masks) = &g.masks {
        outputs.push(r.out.join("masks.json"));
        save_labels(masks, r.out.join("masks.json"))?;
    }
    let truth = r.out.join("truth.json");
    write_json(&truth, &g.truths)?;
    outputs.push(truth);
    let back = load_volume(&outputs[1])?.into_scalar()?;
    if back.grid != g.volume.grid || back.data.len() != g.volume.data.len() {
        bail!(CliError::InconsistentGrids("written volume does not read back".into()));
    }
    let details = json!({
        "noise_seed": noise_seed,
        "tubes": g.truths.iter().map(|t| json!({ "name": t.name, "samples": t.samples.len() })).collect::<Vec<_>>(),
        "labels": g.masks.as_ref().map(|m| m.labels.clone()),
    });
    finish(r, "phantom", outputs, details)
}

pub fn train(r: &Resolved, net: Network, dataset: Option<&Path>, save_dataset: bool) -> Result<Outcome> {
    let name = net.name();
    let dataset = dataset.map(Path::to_path_buf).or_else(|| match net {
        Network::Orientation => r.config.paths.orientation_dataset.clone(),
        Network::Contour => r.config.paths.contour_dataset.clone(),
    });
    if let Some(d) = &dataset {
        require(d, "dataset manifest", "pass --dataset or set paths.<network>_dataset")?;
    }
    create_dir(&r.out)?;
    let init_seed = r.stream(&format!("train.{name}.init"));
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let checkpoint = r.out.join(format!("{name}.json"));
    let loss_log = r.out.join(format!("{name}_loss.csv"));
    let mut outputs = vec![checkpoint.clone(), loss_log.clone()];
    let data_out = r.out.join(format!("{name}_dataset")).join("manifest.json");
    let (details, report) = match net {
        Network::Orientation => {
            let t = &r.config.train.orientation;
            let synth = vtrack::sphere::OrientationSynthConfig { seed: r.stream("train.orientation.data"), ..t.synth.clone() };
            let ds = match &dataset {
                Some(d) => OrientationDataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?,
                None => synth_orientation_dataset(&synth)?,
            };
            if save_dataset && dataset.is_none() {
                ds.save(&data_out)?;
                outputs.push(data_out.clone());
            }
            let cfg = vtrack::sphere::OrientationTrainConfig {
                seed: r.stream("train.orientation.sgd"),
                scales: r.config.models.scales.clone(),
                ..t.train.clone()
            };
            let sphere = Icosphere::<f64>::build(r.config.models.icosphere_level);
            let mut model = OrientationNet::<f32>::init(r.config.models.orientation_samples, &mut rng);
            let report = train_orientation(&mut model, &ds, &sphere, &cfg)?;
            save_checkpoint(&checkpoint, ORIENTATION_KIND, &model, model.hyperparameters(), init_seed)?;
            load_orientation(&checkpoint, r.config.models.orientation_samples)?;
            let source = if dataset.is_some() { json!({ "manifest": dataset }) } else { json!({ "synth": synth }) };
            (json!({ "data": source, "train": cfg, "samples": ds.samples.len(), "init_seed": init_seed }), report)
        }
        Network::Contour => {
            let t = &r.config.train.contour;
            let synth = vtrack::polar::ContourSynthConfig { seed: r.stream("train.contour.data"), ..t.synth.clone() };
            let ds = match &dataset {
                Some(d) => ContourDataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?,
                None => synth_contour_dataset(&synth)?,
            };
            if save_dataset && dataset.is_none() {
                ds.save(&data_out)?;
                outputs.push(data_out.clone());
            }
            let cfg = vtrack::polar::ContourTrainConfig { seed: r.stream("train.contour.sgd"), ..t.train.clone() };
            let mut model = ContourCnn::<f32>::init(&mut rng);
            let report = vtrack::polar::train_contour(&mut model, &ds, &cfg)?;
            save_checkpoint(&checkpoint, CONTOUR_KIND, &model, model.hyperparameters(), init_seed)?;
            load_contour(&checkpoint)?;
            let source = if dataset.is_some() { json!({ "manifest": dataset }) } else { json!({ "synth": synth }) };
            (json!({ "data": source, "train": cfg, "samples": ds.samples.len(), "init_seed": init_seed }), report)
        }
    };
    fs::write(&loss_log, report.to_csv()).with_context(|| format!("writing {}", loss_log.display()))?;
    let mut details = details;
    details["final_epoch_loss"] = json!(report.epoch_losses.last());
    finish(r, &format!("train_{name}"), outputs, details)
}

fn check_kind(m: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    if m.kind != kind {
        bail!(vtrack::Error::Shape(format!("{} holds a `{}` checkpoint, expected `{kind}`", path.display(), m.kind)));
    }
    Ok(())
}

pub fn load_orientation(path: &Path, n_samples: usize) -> Result<OrientationNet<f32>> {
    let (m, t) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_kind(&m, ORIENTATION_KIND, path)?;
    let mut net = OrientationNet::<f32>::init(n_samples, &mut ChaCha8Rng::seed_from_u64(0));
    restore(&mut net, &m, t).with_context(|| format!("restoring {}", path.display()))?;
    Ok(net)
}

pub fn load_contour(path: &Path) -> Result<ContourCnn<f32>> {
    let (m, t) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_kind(&m, CONTOUR_KIND, path)?;
    let mut net = ContourCnn::<f32>::init(&mut ChaCha8Rng::seed_from_u64(0));
    restore(&mut net, &m, t).with_context(|| format!("restoring {}", path.display()))?;
    Ok(net)
}

fn load_inputs(r: &Resolved) -> Result<(ScalarVolume, LabelVolume)> {
    let (vp, mp) = (r.path(|p| &p.volume), r.path(|p| &p.masks));
    require(&vp, "volume", "run `vtrack phantom` first or set paths.volume")?;
    require(&mp, "controller masks", "run `vtrack phantom` first or set paths.masks")?;
    let vol = load_volume(&vp).with_context(|| format!("loading {}", vp.display()))?.into_scalar()?;
    let masks = load_volume(&mp).with_context(|| format!("loading {}", mp.display()))?.into_labels()?;
    if vol.grid != masks.grid {
        bail!(CliError::InconsistentGrids(format!(
            "volume {:?} and masks {:?} must share dims, spacing and origin",
            vol.grid, masks.grid
        )));
    }
    Ok((vol, masks))
}

pub fn track(r: &Resolved) -> Result<Outcome> {
    let cfg = &r.config;
    let (op, cp) = (r.path(|p| &p.orientation_checkpoint), r.path(|p| &p.contour_checkpoint));
    require(&op, "orientation checkpoint", "run `vtrack train orient` first or set paths.orientation_checkpoint")?;
    require(&cp, "contour checkpoint", "run `vtrack train contour` first or set paths.contour_checkpoint")?;
    let (vol, masks) = load_inputs(r)?;
    let orientation = load_orientation(&op, cfg.models.orientation_samples)?;
    let contour = load_contour(&cp)?;
    let sphere = Icosphere::<f64>::build(cfg.models.icosphere_level);
    let models = Models { orientation: &orientation, contour: &contour, sphere: &sphere, scales: &cfg.models.scales };

    let resolved = build_boundary_conditions(&cfg.controller, Arc::new(masks), &vol).context("resolving boundary conditions")?;
    let controller = r.out.join("controller.json");
    write_json(&controller, &resolved)?;
    let mut outputs = vec![controller];
    let mut details = BTreeMap::new();
    for (name, v) in &resolved {
        let tc = TrackConfig { delta_mm: v.delta_mm, eta: v.eta, ..cfg.tracker.clone() };
        let tv = track_vessel(name, &vol, &models, v.seed.point, &v.omega, &tc)
            .with_context(|| format!("tracking `{name}`"))?;
        let path = r.out.join("tracks").join(format!("{name}.json"));
        write_json(&path, &tv.to_json())?;
        if TrackedVessel::from_json(&read_json(&path)?)? != tv {
            bail!(vtrack::Error::InvalidInput(format!("track {} does not read back", path.display())));
        }
        details.insert(
            name.clone(),
            json!({
                "seed": v.seed,
                "centerline_points": tv.centerline.len(),
                "contours": tv.contours.len(),
                "termination": tv.termination.clone().map(|t| t.to_string()),
            }),
        );
        outputs.push(path);
    }
    finish(r, "track", outputs, json!(details))
}

/// Every `*.json` in `dir`, by file name.
pub fn read_tracks(dir: &Path) -> Result<Vec<TrackedVessel>> {
    require(dir, "tracks directory", "run `vtrack track` first or set paths.tracks")?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(CliError::MissingInput { what: "track files", path: dir.to_path_buf(), hint: "the directory holds no *.json tracks" });
    }
    files
        .iter()
        .map(|f| TrackedVessel::from_json(&read_json(f)?).with_context(|| format!("reading track {}", f.display())))
        .collect()
}

fn contour_bounds(tracks: &[TrackedVessel], pad: f64) -> Result<(Vec3, Vec3)> {
    let mut pts = tracks.iter().flat_map(|v| v.contours.iter().flat_map(|c| c.contour.points()));
    let Some(first) = pts.next() else {
        bail!(vtrack::Error::InvalidInput("tracks carry no contours".into()));
    };
    let (lo, hi) = pts.fold((first, first), |(lo, hi), p| (lo.min_elem(p), hi.max_elem(p)));
    Ok((lo - Vec3::splat(pad), hi + Vec3::splat(pad)))
}

fn fit_csv(rep: &FieldFitReport) -> String {
    let mut s = String::from("step,surface,volume,eikonal\n");
    for h in &rep.history {
        s.push_str(&format!("{},{},{},{}\n", h.step, h.surface, h.volume, h.eikonal));
    }
    s
}

pub fn reconstruct(r: &Resolved) -> Result<Outcome> {
    let rc = &r.config.reconstruct;
    let tracks = read_tracks(&r.path(|p| &p.tracks))?;
    let names: Vec<&str> = tracks.iter().map(|v| v.name.as_str()).collect();
    let extended: Vec<TrackedVessel> =
        tracks.iter().map(|v| extend_ends(v, ends_stopped_in(v, &names), rc.end_extension)).collect();
    let fits: Vec<(NeuralField, FieldFitReport, u64)> = extended
        .par_iter()
        .map(|v| {
            let seed = r.stream(&format!("field.{}", v.name));
            let (f, rep) = fit_neural_field(v, &vtrack::surface::FieldFitConfig { seed, ..rc.field.clone() })
                .with_context(|| format!("fitting the field of `{}`", v.name))?;
            Ok((f, rep, seed))
        })
        .collect::<Result<_>>()?;

    let fields_dir = r.out.join("fields");
    create_dir(&fields_dir)?;
    let mut outputs = Vec::new();
    let mut details = BTreeMap::new();
    for (v, (f, rep, seed)) in extended.iter().zip(&fits) {
        let ckpt = fields_dir.join(format!("{}.json", v.name));
        save_checkpoint(&ckpt, FIELD_KIND, f, f.hyperparameters(), *seed)?;
        let log = fields_dir.join(format!("{}_loss.csv", v.name));
        fs::write(&log, fit_csv(rep)).with_context(|| format!("writing {}", log.display()))?;
        if NeuralField::<f32>::from_checkpoint(&ckpt)? != *f {
            bail!(vtrack::Error::InvalidInput(format!("field {} does not read back", ckpt.display())));
        }
        details.insert(
            v.name.clone(),
            json!({
                "seed": seed,
                "extended_ends": ends_stopped_in(v, &names),
                "surface_loss": rep.surface_loss,
                "volume_loss": rep.volume_loss,
                "eikonal_loss": rep.eikonal_loss,
            }),
        );
        outputs.extend([ckpt, log]);
    }

    let (lo, hi) = match rc.bounds {
        Some([lo, hi]) => (lo, hi),
        None => contour_bounds(&extended, rc.padding_mm)?,
    };
    let grid = McGrid::new(lo, hi, rc.mc_step_mm)?;
    let blend = blend_fields(fits.into_iter().map(|(f, _, _)| f).collect(), rc.smin_k)?;
    let mesh = marching_cubes_banded(&blend, &grid, rc.mc_stride).context("extracting the blended surface")?;
    let report = mesh_watertight(&mesh);
    let obj = r.out.join("mesh.obj");
    mesh.write_obj(&obj)?;
    let back = Mesh::read_obj(&obj)?;
    if back.triangles != mesh.triangles || mesh_watertight(&back) != report {
        bail!(vtrack::Error::InvalidInput(format!("mesh {} does not read back", obj.display())));
    }
    let wt = r.out.join("watertight.json");
    write_json(&wt, &report)?;
    outputs.extend([obj, wt]);
    let details = json!({ "fields": details, "grid": grid, "grid_dims": grid.dims(), "watertight": report });
    finish(r, "reconstruct", outputs, details)
}

pub fn evaluate_cmd(r: &Resolved) -> Result<Outcome> {
    let truth_path = r.path(|p| &p.truth);
    require(&truth_path, "truth", "run `vtrack phantom` first or set paths.truth")?;
    let truths: Vec<PhantomTruth> = read_json(&truth_path)?;
    let (tracks_dir, mesh_path) = (r.path(|p| &p.tracks), r.path(|p| &p.mesh));
    let tracks = if tracks_dir.exists() { read_tracks(&tracks_dir)? } else { Vec::new() };
    let mesh = if mesh_path.exists() { Some(Mesh::read_obj(&mesh_path)?) } else { None };
    if tracks.is_empty() && mesh.is_none() {
        bail!(CliError::MissingInput {
            what: "tracks or mesh",
            path: tracks_dir,
            hint: "run `vtrack track` or `vtrack reconstruct` first, or set paths.tracks / paths.mesh"
        });
    }
    let metrics: Metrics = evaluate(&tracks, mesh.as_ref(), &truths, &r.config.evaluate)?;
    let (json_out, csv_out) = (r.out.join("metrics.json"), r.out.join("metrics.csv"));
    write_json(&json_out, &metrics)?;
    fs::write(&csv_out, metrics.to_csv()).with_context(|| format!("writing {}", csv_out.display()))?;
    let details = json!({
        "tracks": tracks.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
        "mesh": mesh.as_ref().map(|_| mesh_path.clone()),
    });
    finish(r, "evaluate", vec![json_out, csv_out], details)
}

/// Path overrides from command-line flags, made absolute against the working directory.
pub fn override_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) -> Result<()> {
    if let Some(v) = value {
        *slot = Some(if v.is_absolute() { v } else { std::env::current_dir()?.join(v) });
    }
    Ok(())
}

