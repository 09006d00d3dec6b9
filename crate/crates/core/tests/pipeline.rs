use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtrack::controller::{center_of_mass, shortest_path_seed, BoundaryConditions};
use vtrack::phantom::{Axis, CurveSpec, MaskRegion, NamedTube, PhantomSpec, PhantomTruth, Side, Slab, Tube, TubeSpec};
use vtrack::polar::{Contour, ContourCnn, PlaneFrame};
use vtrack::sphere::{Icosphere, OrientationNet, ScaleSet};
use vtrack::surface::{
    blend_fields, fit_neural_field, marching_cubes_banded, mesh_watertight, smin, split_held_out, FieldFitConfig, McGrid, Sdf,
};
use vtrack::tracker::{track_vessel, IndexedContour, Models, TrackConfig, TrackedVessel, Termination};
use vtrack::volume::Grid;
use vtrack::{Error, Vec3};

fn spec(grid: Grid, tubes: Vec<(&str, TubeSpec)>, regions: Vec<MaskRegion>) -> PhantomSpec {
    let tubes = tubes.into_iter().map(|(n, s)| NamedTube { name: n.into(), parent: None, spec: s }).collect();
    PhantomSpec { grid, tubes, regions, truth_spacing_mm: 0.5 }
}

/// Circles in the true cross-sections, one every `every` truth samples.
fn ideal_track(truth: &PhantomTruth, every: usize) -> TrackedVessel {
    let mut prev: Option<PlaneFrame> = None;
    let mut contours = Vec::new();
    for (i, s) in truth.samples.iter().enumerate().step_by(every) {
        let frame = PlaneFrame::new(s.center, s.normal, prev.as_ref());
        contours.push(IndexedContour { index: i, contour: Contour::circle(frame, s.radius, 64) });
        prev = Some(frame);
    }
    TrackedVessel {
        name: truth.name.clone(),
        centerline: truth.samples.iter().map(|s| s.center).collect(),
        contours,
        seed_index: 0,
        termination: [Termination::MaxSteps, Termination::MaxSteps],
    }
}

fn bend(rho: f64, leg: f64) -> TubeSpec {
    let f = 5.0 * rho;
    TubeSpec {
        centerline: CurveSpec::Polyline {
            points: vec![Vec3::new(0.0, 0.0, -leg - f), Vec3::zeros(), Vec3::new(leg + f, 0.0, 0.0)],
            fillet_mm: f,
        },
        ..TubeSpec::straight(Vec3::zeros(), Vec3::unit_z(), rho)
    }
}

#[test]
fn center_of_mass_of_an_oblique_tube_mask_is_on_axis() {
    let grid = Grid::new([61, 61, 61], Vec3::splat(1.0), Vec3::splat(-30.0)).unwrap();
    let d = Vec3::new(1.0, 0.6, 0.8).normalize();
    let tube = TubeSpec::straight(d * -25.0, d * 25.0, 5.0).with_noise(0.1);
    let regions = vec![MaskRegion::Tube { name: "v".into(), vessel: "v".into(), dilation_mm: 2.0 }];
    let g = spec(grid, vec![("v", tube)], regions).generate(3).unwrap();
    let seed = center_of_mass(g.masks.as_ref().unwrap(), "v").unwrap();
    let off = g.truths[0].distance_to_centerline(seed.point);
    assert!(off < 0.5, "seed {:?} is {off} mm off axis", seed.point);
}

#[test]
fn shortest_path_runs_inside_the_connecting_tube() {
    let grid = Grid::new([96, 56, 30], Vec3::splat(1.0), Vec3::new(-8.0, -8.0, -15.0)).unwrap();
    let link = TubeSpec {
        centerline: CurveSpec::Polyline {
            points: vec![Vec3::zeros(), Vec3::new(40.0, 0.0, 0.0), Vec3::new(40.0, 40.0, 0.0), Vec3::new(80.0, 40.0, 0.0)],
            fillet_mm: 10.0,
        },
        ..TubeSpec::straight(Vec3::zeros(), Vec3::unit_x(), 3.0)
    }
    .with_noise(0.1);
    let regions = vec![
        MaskRegion::Blob { name: "a".into(), center: Vec3::zeros(), radius_mm: 6.0 },
        MaskRegion::Blob { name: "b".into(), center: Vec3::new(80.0, 40.0, 0.0), radius_mm: 6.0 },
    ];
    let g = spec(grid, vec![("link", link)], regions).generate(5).unwrap();
    let masks = g.masks.as_ref().unwrap();
    let path = shortest_path_seed(&g.volume, masks, "a", "b").unwrap();
    let between: Vec<&Vec3> = path.points.iter().filter(|p| masks.label_at(**p) == Some(0)).collect();
    let inside = between.iter().filter(|p| g.truths[0].contains(***p)).count();
    assert!(between.len() > 80);
    assert!(inside as f64 >= 0.95 * between.len() as f64, "{inside} of {}", between.len());
    assert!(g.truths[0].contains(path.seed.point));
}

#[test]
fn held_out_contours_of_a_bend() {
    let truth = Tube::new("bend", bend(5.0, 40.0)).unwrap().truth(1.0);
    let (kept, held) = split_held_out(&ideal_track(&truth, 5)).unwrap();
    assert!(held.len() > 500);
    let (field, report) = fit_neural_field(&kept, &FieldFitConfig { steps: 2000, lr: 1e-3, ..Default::default() }).unwrap();
    let err = field.distances(&held).iter().map(|d| d.abs()).sum::<f64>() / held.len() as f64;
    assert!(err < 0.5, "held-out mean |f| {err}");
    assert!(report.surface_loss.is_finite());
    let axis: Vec<Vec3> = truth.samples[20..truth.samples.len() - 20].iter().map(|s| s.center).collect();
    assert!(field.distances(&axis).iter().all(|&d| d < 0.0));
}

#[test]
fn blended_branches_mesh_as_one_closed_surface() {
    let capsule = |a: Vec3, b: Vec3, r: f64| {
        move |p: Vec3| {
            let ab = b - a;
            let t = ((p - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0);
            (a + ab * t).distance(p) - r
        }
    };
    let fields = vec![
        capsule(Vec3::new(0.0, 0.0, -20.0), Vec3::new(0.0, 0.0, 20.0), 5.0),
        capsule(Vec3::new(0.0, 0.0, 5.0), Vec3::new(18.0, 0.0, 5.0), 2.0),
        capsule(Vec3::new(0.0, 0.0, -20.0), Vec3::new(15.0, 3.0, -35.0), 3.0),
    ];
    let probe = [Vec3::new(3.0, 1.0, 5.0), Vec3::new(8.0, 2.0, -24.0), Vec3::new(-9.0, 0.0, 0.0)];
    let raw: Vec<Vec<f64>> = probe.iter().map(|&p| fields.iter().map(|f| f(p)).collect()).collect();
    let blend = blend_fields(fields, 2.0).unwrap();
    for (p, v) in probe.iter().zip(&raw) {
        let m = v.iter().copied().fold(f64::INFINITY, f64::min);
        let b = blend.distance(*p);
        assert!(b <= m && m - b <= 3f64.ln() / 2.0 + 1e-12);
        assert_eq!(b, smin(v, 2.0));
    }
    let grid = McGrid::new(Vec3::new(-8.0, -8.0, -42.0), Vec3::new(24.0, 10.0, 28.0), 0.5).unwrap();
    let mesh = marching_cubes_banded(&blend, &grid, 4).unwrap();
    let w = mesh_watertight(&mesh);
    assert!(w.is_watertight, "{w:?}");
    assert_eq!((w.components, w.euler_characteristic), (1, 2));
    assert!(mesh.signed_volume() > 0.0);
}

#[test]
fn tracker_rejects_seeds_outside_or_in_a_termination_region() {
    let g = spec(
        Grid::new([20, 20, 40], Vec3::splat(1.0), Vec3::new(-10.0, -10.0, -20.0)).unwrap(),
        vec![("v", TubeSpec::straight(Vec3::new(0.0, 0.0, -14.0), Vec3::new(0.0, 0.0, 14.0), 3.0))],
        vec![],
    )
    .generate(0)
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (onet, cnet) = (OrientationNet::<f32>::init(32, &mut rng), ContourCnn::<f32>::init(&mut rng));
    let sphere = Icosphere::build(3);
    let scales = ScaleSet::standard();
    let models = Models { orientation: &onet, contour: &cnet, sphere: &sphere, scales: &scales };
    let omega = BoundaryConditions::slabs(vec![("top".into(), Slab { axis: Axis::Z, threshold_mm: 10.0, side: Side::Above })]);
    let cfg = TrackConfig::default();
    let outside = track_vessel("v", &g.volume, &models, Vec3::new(0.0, 0.0, 50.0), &omega, &cfg);
    assert!(matches!(outside, Err(Error::Seed(_))));
    let in_slab = track_vessel("v", &g.volume, &models, Vec3::new(0.0, 0.0, 12.0), &omega, &cfg);
    assert!(matches!(in_slab, Err(Error::Seed(_))));
    let bad = TrackConfig { delta_mm: 0.0, ..Default::default() };
    assert!(matches!(track_vessel("v", &g.volume, &models, Vec3::zeros(), &omega, &bad), Err(Error::Config(_))));
}

#[test]
fn phantoms_are_reproducible_per_seed() {
    let s = spec(
        Grid::new([40, 40, 40], Vec3::splat(1.0), Vec3::splat(-20.0)).unwrap(),
        vec![("v", bend(2.0, 5.0).with_noise(0.2))],
        vec![],
    );
    let (a, b, c) = (s.generate(9).unwrap(), s.generate(9).unwrap(), s.generate(10).unwrap());
    assert_eq!(a.volume, b.volume);
    assert_ne!(a.volume, c.volume);
    assert_eq!(a.truths, c.truths);
}
