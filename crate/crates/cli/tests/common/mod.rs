//! Fixture builders and reference implementations shared by the CLI tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use occ_core::camera::CameraModel;
use occ_core::depthbin::{DepthBinSpec, DepthDistribution};
use occ_core::lifting::FeatureMap;
use occ_core::tensorio::{write_tensor_file, CameraDoc, DenseTensor};
use occ_core::voxel::GridSpec;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
}

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("occ").chain(args.iter().copied());
    let code = occ_cli::main_with_args(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn dir_contents(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub fn random_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

/// Random normalized distribution; roughly one column in `empty_every` is all zero.
pub fn random_distribution(
    rng: &mut ChaCha8Rng,
    n: usize,
    h: usize,
    w: usize,
    empty_every: u32,
) -> DepthDistribution {
    let mut probs = vec![0.0f32; n * h * w];
    for px in 0..h * w {
        if empty_every > 0 && rng.random_range(0..empty_every) == 0 {
            continue;
        }
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        for (b, r) in raw.iter().enumerate() {
            probs[b * h * w + px] = (r / total) as f32;
        }
    }
    DepthDistribution::new(n, h, w, probs).unwrap()
}

pub fn pose_from(rotation: [[f64; 3]; 3], t: [f64; 3]) -> [f64; 16] {
    let r = rotation;
    [
        r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
        r[2][2], t[2], 0.0, 0.0, 0.0, 1.0,
    ]
}

/// Rotation about the camera y axis by `angle` radians.
pub fn yaw(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Camera at `pos` in a z-up world, looking along horizontal `dir` tilted down by `pitch`.
pub fn looking(pos: [f64; 3], dir: [f64; 2], pitch: f64) -> [f64; 16] {
    let n = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    let (hx, hy) = (dir[0] / n, dir[1] / n);
    let (sp, cp) = pitch.sin_cos();
    let fwd = [hx * cp, hy * cp, -sp];
    let right = [hy, -hx, 0.0];
    // down = fwd x right
    let down = [
        fwd[1] * right[2] - fwd[2] * right[1],
        fwd[2] * right[0] - fwd[0] * right[2],
        fwd[0] * right[1] - fwd[1] * right[0],
    ];
    let rot = [
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ];
    pose_from(rot, pos)
}

/// Naive voxel-by-voxel nearest-mode lifting, straight from the definition.
pub fn lift_reference(
    levels: &BTreeMap<usize, FeatureMap>,
    dists: &BTreeMap<usize, DepthDistribution>,
    cam: &CameraModel,
    grid: &GridSpec,
    bins: &DepthBinSpec,
) -> Vec<f32> {
    let channels = levels.values().next().unwrap().channels();
    let [nx, ny, nz] = grid.dims();
    let mut out = Vec::with_capacity(nx * ny * nz * channels);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let mut acc = vec![0.0f32; channels];
                let pd = cam.project(&grid.centroid([i, j, k]).unwrap());
                let inside = pd.valid
                    && pd.u >= 0.0
                    && pd.v >= 0.0
                    && pd.u < f64::from(cam.width())
                    && pd.v < f64::from(cam.height());
                if inside {
                    let bin = bins.bin_index(pd.z);
                    for (&s, fmap) in levels {
                        let pick = |x: f64, n: usize| {
                            let r = x.round_ties_even();
                            if r <= 0.0 {
                                0
                            } else {
                                (r as usize).min(n - 1)
                            }
                        };
                        let col = pick(pd.u / s as f64, fmap.width());
                        let row = pick(pd.v / s as f64, fmap.height());
                        let w = dists[&s].at(bin, row, col).clamp(0.0, 1.0);
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += w * fmap.at(c, row, col);
                        }
                    }
                }
                out.extend(acc);
            }
        }
    }
    out
}

pub const TOY_SEED: u64 = 0x5eed;
pub const TOY_DIMS: [usize; 3] = [4, 4, 4];
pub const TOY_ORIGIN: [f64; 3] = [-0.5, -0.5, 1.0];
pub const TOY_VOXEL: f64 = 0.25;
pub const TOY_D_MIN: f64 = 0.5;
pub const TOY_D_MAX: f64 = 3.0;
pub const TOY_BINS: usize = 4;

pub fn toy_camera() -> CameraModel {
    CameraModel::new(
        16.0,
        16.0,
        8.0,
        8.0,
        16,
        16,
        pose_from(yaw(0.1), [0.1, -0.05, 0.0]),
    )
    .unwrap()
}

/// Inputs of the 4x4x4, two-channel lifting fixture.
pub struct ToyLift {
    pub levels: BTreeMap<usize, FeatureMap>,
    pub dist: DepthDistribution,
    pub camera: CameraModel,
}

pub fn toy_lift() -> ToyLift {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let levels = [1usize, 2, 4, 8]
        .into_iter()
        .map(|k| (k, random_features(&mut rng, 2, 16 / k, 16 / k)))
        .collect();
    let dist = random_distribution(&mut rng, TOY_BINS, 16, 16, 8);
    ToyLift {
        levels,
        dist,
        camera: toy_camera(),
    }
}

pub fn write_toy_lift(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let toy = toy_lift();
    for (k, map) in &toy.levels {
        let t = DenseTensor::from_f32(
            vec![map.channels(), map.height(), map.width()],
            map.data().to_vec(),
        )
        .unwrap();
        write_tensor_file(&t, dir.join(format!("feat{k}.occt"))).unwrap();
    }
    write_tensor_file(&toy.dist.to_tensor(), dir.join("dist.occt")).unwrap();
    std::fs::write(
        dir.join("camera.json"),
        CameraDoc::from(&toy.camera).to_json(),
    )
    .unwrap();
}

/// `lift` arguments for the toy fixture in `dir`, writing to `out`.
pub fn toy_lift_args(dir: &Path, out: &Path) -> Vec<String> {
    let mut args: Vec<String> = vec!["lift".into()];
    for k in [1, 2, 4, 8] {
        args.push(format!("--feat{k}"));
        args.push(p(&dir.join(format!("feat{k}.occt"))).into());
    }
    let rest = [
        "--dist".to_string(),
        p(&dir.join("dist.occt")).into(),
        "--camera".into(),
        p(&dir.join("camera.json")).into(),
        "--dims".into(),
        "4".into(),
        "4".into(),
        "4".into(),
        "--voxel-size".into(),
        TOY_VOXEL.to_string(),
        "--origin".into(),
        TOY_ORIGIN[0].to_string(),
        TOY_ORIGIN[1].to_string(),
        TOY_ORIGIN[2].to_string(),
        "--d-min".into(),
        TOY_D_MIN.to_string(),
        "--d-max".into(),
        TOY_D_MAX.to_string(),
        "--out".into(),
        p(out).into(),
    ];
    args.extend(rest);
    args
}

pub const SCENE_DIMS: [&str; 3] = ["20", "20", "10"];
pub const SCENE_VOXEL: &str = "0.1";

/// Labeled points of a 6 x 6 x 3 m room: floor and one wall over x < 4,
/// a table top, and a small chair beyond the floor's edge.
fn room_points() -> Vec<[f32; 4]> {
    let c = |i: usize| 0.05 + 0.1 * i as f64;
    let mut pts = Vec::new();
    let mut push = |x: f64, y: f64, z: f64, l: f32| pts.push([x as f32, y as f32, z as f32, l]);
    for i in 0..40 {
        for j in 0..60 {
            push(c(i), c(j), 0.05, 2.0);
        }
    }
    for i in 0..40 {
        for k in 1..30 {
            push(c(i), 0.05, c(k), 3.0);
        }
    }
    for i in 15..25 {
        for j in 25..35 {
            push(c(i), c(j), 0.75, 8.0);
        }
    }
    for i in 52..54 {
        for j in 30..32 {
            push(c(i), c(j), 0.45, 5.0);
        }
    }
    pts
}

fn scene_camera(pose: [f64; 16]) -> CameraDoc {
    CameraDoc {
        fx: 50.0,
        fy: 50.0,
        cx: 32.0,
        cy: 24.0,
        width: 64,
        height: 48,
        cam_to_world: pose,
    }
}

fn write_scene_common(dir: &Path) {
    std::fs::create_dir_all(dir.join("cameras")).unwrap();
    let pts = room_points();
    let t = DenseTensor::from_f32(vec![pts.len(), 4], pts.concat()).unwrap();
    write_tensor_file(&t, dir.join("points.occt")).unwrap();
    std::fs::write(
        dir.join("bounds.json"),
        "{\n  \"min\": [0.0, 0.0, 0.0],\n  \"max\": [6.0, 6.0, 3.0]\n}\n",
    )
    .unwrap();
}

fn write_camera(dir: &Path, id: &str, doc: &CameraDoc) {
    std::fs::write(
        dir.join("cameras").join(format!("{id}.json")),
        doc.to_json(),
    )
    .unwrap();
}

/// Three frames: two over the table (kept), one past the floor's edge (mostly empty).
pub fn write_scene_small(dir: &Path) {
    write_scene_common(dir);
    let tilt = 0.4;
    write_camera(
        dir,
        "0",
        &scene_camera(looking([1.0, 3.0, 1.5], [1.0, 0.0], tilt)),
    );
    write_camera(
        dir,
        "1",
        &scene_camera(looking([2.0, 1.0, 1.5], [0.0, 1.0], tilt)),
    );
    write_camera(
        dir,
        "2",
        &scene_camera(looking([4.5, 3.0, 1.5], [1.0, 0.0], tilt)),
    );
    std::fs::create_dir_all(dir.join("depth")).unwrap();
    let depth = DenseTensor::from_f32(vec![48, 64], vec![2.0; 48 * 64]).unwrap();
    write_tensor_file(&depth, dir.join("depth").join("0.occt")).unwrap();
}

/// Ten frames covering every verdict; ids are numeric so ordering matters.
pub fn write_scene_ten(dir: &Path) {
    write_scene_common(dir);
    let tilt = 0.4;
    let keep = [
        ("0", [1.0, 3.0, 1.5], [1.0, 0.0]),
        ("5", [2.0, 1.0, 1.5], [0.0, 1.0]),
        ("10", [3.0, 3.0, 1.4], [-1.0, 0.0]),
        ("15", [2.0, 4.5, 1.5], [0.0, -1.0]),
        ("20", [0.8, 2.2, 1.6], [1.0, 0.5]),
        ("25", [1.2, 1.2, 1.3], [1.0, 1.0]),
    ];
    for (id, pos, dir2) in keep {
        write_camera(dir, id, &scene_camera(looking(pos, dir2, tilt)));
    }
    let mut skewed = scene_camera(looking([1.0, 3.0, 1.5], [1.0, 0.0], tilt));
    skewed.cam_to_world[2] *= 1.2;
    write_camera(dir, "30", &skewed);
    write_camera(
        dir,
        "35",
        &scene_camera(looking([1.0, 3.0, 3.5], [1.0, 0.0], tilt)),
    );
    write_camera(
        dir,
        "40",
        &scene_camera(looking([4.5, 3.0, 1.5], [1.0, 0.0], tilt)),
    );
    write_camera(
        dir,
        "45",
        &scene_camera(looking([1.0, 5.0, 1.5], [1.0, 0.0], tilt)),
    );
}

pub fn gen_labels_args(scene: &Path, out: &Path, threads: usize) -> Vec<String> {
    vec![
        "gen-labels".into(),
        "--scene".into(),
        p(scene).into(),
        "--out".into(),
        p(out).into(),
        "--dims".into(),
        SCENE_DIMS[0].into(),
        SCENE_DIMS[1].into(),
        SCENE_DIMS[2].into(),
        "--voxel-size".into(),
        SCENE_VOXEL.into(),
        "--seed".into(),
        "7".into(),
        "--threads".into(),
        threads.to_string(),
    ]
}

pub fn run_cli_owned(args: &[String]) -> (i32, String, String) {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_cli(&refs)
}
