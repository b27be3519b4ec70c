//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with the
//! measured values, then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegrid::appearance::{fresnel_powers, DecoderMlp, MlpCache, MAX_INPUT};
use probegrid::eval::Reference;
use probegrid::gradcheck::{run_gradcheck, GradcheckConfig};
use probegrid::grid::{FeatureDims, GridLayout, SparseGrid};
use probegrid::io::{Checkpoint, Dataset};
use probegrid::optim::adam::AdamState;
use probegrid::optim::schedule::Schedule;
use probegrid::pipeline;
use probegrid::render::{alpha_from_sdf, composite};
use probegrid::sh::{eval_sh_basis, interp_probes, interp_probes_per_probe, ProbeCorners, ProbeSh, ShOrder};
use probegrid::synth::{make_dataset, AnalyticScene};
use probegrid::Vec3;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    // Written to the raw handle so the line survives the test harness's output capture.
    let line = format!("criterion {id} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Serialises the criteria so that timed runs do not share the CPU.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[test]
fn criterion_1_gradient_audit() {
    let _guard = exclusive();
    let report_ = single_threaded(|| run_gradcheck(&GradcheckConfig::default()).unwrap());
    println!("{report_}");
    let fast = report_.elapsed < Duration::from_secs(60);
    let pass = report_.passed() && fast;
    let worst = report_.classes.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    report(
        1,
        "gradient audit",
        pass,
        &format!(
            "classes {}, worst rel {worst:.2e} < 1e-4, {:.1}s < 60s",
            report_.classes.len(),
            report_.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_sh_orthonormality() {
    let _guard = exclusive();
    let start = Instant::now();
    let order = ShOrder::new(4).unwrap();
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gram = [[0.0f64; 16]; 16];
    for _ in 0..n {
        let y = eval_sh_basis(&random_unit(&mut rng), order).unwrap();
        for i in 0..16 {
            for j in i..16 {
                gram[i][j] += y[i] * y[j];
            }
        }
    }
    let scale = 4.0 * std::f64::consts::PI / n as f64;
    let mut max_dev = 0.0f64;
    for i in 0..16 {
        for j in i..16 {
            let delta = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram[i][j] * scale - delta).abs());
        }
    }

    let mut max_form = 0.0f64;
    for _ in 0..1000 {
        let channels = rng.gen_range(1..6);
        let probes: Vec<ProbeSh> = (0..8)
            .map(|_| {
                let c = (0..16 * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ProbeSh::from_coeffs(order, channels, c).unwrap()
            })
            .collect();
        let refs: [&ProbeSh; 8] = std::array::from_fn(|i| &probes[i]);
        let frac = [rng.gen(), rng.gen(), rng.gen()];
        let corners = ProbeCorners::trilinear(refs, frac);
        let d = random_unit(&mut rng);
        let a = interp_probes(&corners, &d).unwrap();
        let b = interp_probes_per_probe(&corners, &d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            max_form = max_form.max((x - y).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = max_dev < 1e-2 && max_form < 1e-12 && elapsed < Duration::from_secs(30);
    report(
        2,
        "SH orthonormality",
        pass,
        &format!(
            "max |<Yi,Yj> - δij| {max_dev:.2e} < 1e-2, blend-order gap {max_form:.1e} < 1e-12, {:.1}s < 30s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_compositing_conservation() {
    let _guard = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..200);
        let tau = rng.gen_range(0.1..200.0);
        let mut s: f64 = rng.gen_range(-1.0..1.0);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let next = s + rng.gen_range(-0.1..0.1);
            samples.push((alpha_from_sdf(s, next, tau), [1.0, 1.0, 1.0]));
            s = next;
        }
        let (_, acc) = composite(&samples);
        let transmittance: f64 = samples.iter().map(|(a, _)| 1.0 - a).product();
        worst = worst.max((acc + transmittance - 1.0).abs());
    }
    let alpha = alpha_from_sdf(1.0, -1.0, 1.0);
    let pass = worst <= 1e-10 && (alpha - 0.632121).abs() < 1e-6;
    report(
        3,
        "compositing conservation",
        pass,
        &format!("max |ΣTα + T_N+1 - 1| {worst:.1e} <= 1e-10, α(τ=1, 1→-1) = {alpha:.7}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_memory_budget() {
    let _guard = exclusive();
    let dims = FeatureDims {
        n_s: 4,
        n_a: 4,
        sh_order: ShOrder::new(4).unwrap(),
    };
    let grid = SparseGrid::dense(GridLayout::cube(-1.0, 2.0, 2), dims, 0, 0.5).unwrap();
    // Each tile owns its 8 corner probes; count parameters over the grid.
    let tiles = grid.num_tiles();
    let spatial = grid.planes.len();
    let probes = tiles * 8 * grid.probe_stride();
    let (per_tile_spatial, per_tile_probes) = grid.params_per_tile();
    let exact = probes * (3 * 16 * 16) == spatial * (8 * 16);
    let pass = exact && per_tile_spatial * tiles == spatial && per_tile_probes * tiles == probes;
    report(
        4,
        "memory budget",
        pass,
        &format!("probe/spatial = {probes}/{spatial}, expected 128/768 = 1/6"),
    );
    assert!(pass);
}

/// The trained sphere shared by criteria 5 and 7.
struct SphereRun {
    dir: tempfile::TempDir,
    data: Dataset,
    scene: AnalyticScene,
    checkpoint: Checkpoint,
    elapsed: Duration,
}

fn sphere_run() -> &'static SphereRun {
    static RUN: OnceLock<SphereRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = workspace();
        let scene = AnalyticScene::load(&root.join("configs/scenes/glossy_sphere.toml")).unwrap();
        let synth = make_dataset(&scene, 0, 0);
        let dir = tempfile::tempdir().unwrap();
        Dataset {
            cameras: synth.cameras,
            images: synth.images,
            masks: synth.masks,
            points_gt: None,
        }
        .save(&dir.path().join("data"))
        .unwrap();
        // Train on the 8-bit images exactly as the command line does.
        let data = Dataset::load(&dir.path().join("data")).unwrap();
        let schedule = Schedule::load(&root.join("configs/sphere.toml")).unwrap();
        let start = Instant::now();
        let checkpoint = pipeline::train_checkpoint(&data, &schedule, 0, |_| {}).unwrap();
        let elapsed = start.elapsed();
        checkpoint.save(&dir.path().join("sphere.ckpt")).unwrap();
        SphereRun {
            dir,
            data,
            scene,
            checkpoint,
            elapsed,
        }
    })
}

#[test]
fn criterion_5_sphere_reconstruction() {
    let _guard = exclusive();
    let run = sphere_run();
    let ck = &run.checkpoint;
    let grid = &ck.model.grid;
    let h = grid.voxel_size();

    let mesh = pipeline::checkpoint_mesh(ck);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = run.scene.sample_surface(100_000, &mut rng);
    let fine = run.scene.reference_mesh(Vec3::repeat(-1.0), Vec3::repeat(1.0), 257);
    let chamfer = pipeline::mesh_chamfer(&mesh, &Reference::Mesh(&fine, &gt), 100_000, f64::INFINITY, 5);
    let chamfer_mm = chamfer.as_ref().map_or(f64::INFINITY, |c| c.mean);
    let chamfer_limit = 2.0 * h * 1000.0;

    let psnr = pipeline::evaluate_psnr(ck, &run.data).unwrap().psnr;

    let (mut near, mut unit) = (0usize, 0usize);
    for slot in 0..grid.sdf.len() {
        let full = (0..3).all(|a| grid.neighbor_slot(slot, a, 1).is_some() && grid.neighbor_slot(slot, a, -1).is_some());
        if full && grid.sdf[slot].abs() < 2.0 * h {
            near += 1;
            let g = grid.voxel_gradient(slot).norm();
            if (0.85..=1.15).contains(&g) {
                unit += 1;
            }
        }
    }
    let eik_frac = unit as f64 / near.max(1) as f64;

    let res = grid.resolution();
    let budget = Duration::from_secs(15 * 60);
    let pass = res == [64, 64, 64]
        && chamfer_mm < chamfer_limit
        && psnr > 30.0
        && near > 0
        && eik_frac >= 0.9
        && run.elapsed < budget;
    report(
        5,
        "synthetic sphere",
        pass,
        &format!(
            "{}³ grid, chamfer {chamfer_mm:.2} < {chamfer_limit:.2}, psnr {psnr:.2} > 30 dB, \
             unit-gradient fraction {eik_frac:.3} >= 0.9 over {near} voxels, train {:.0}s < 900s",
            res[0],
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_fresnel_capability() {
    let _guard = exclusive();
    let r0 = 0.04;
    let schlick = |c: f64| r0 + (1.0 - r0) * (1.0 - c).powi(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mlp = DecoderMlp::new(0, 0, None, &mut rng).unwrap();
    let mut adam = AdamState::new(mlp.params.len());
    let train: Vec<f64> = (0..64).map(|i| (i as f64 / 63.0 * 90.0f64).to_radians().cos()).collect();
    let mut cache = MlpCache::default();
    let mut d_x = [0.0; MAX_INPUT];
    for _ in 0..4000 {
        let mut grads = mlp.zero_grads();
        for &c in &train {
            let rgb = mlp.forward(&fresnel_powers(c), None, &mut cache);
            let d = rgb.map(|y| 2.0 * (y - schlick(c)) / train.len() as f64);
            mlp.backward(&cache, None, d, &mut grads, &mut d_x);
        }
        adam.step(&mut mlp.params, &grads.params, 3e-3);
    }
    // Evaluate on a denser sweep than the training angles.
    let sweep = 181;
    let mut se = 0.0;
    for i in 0..sweep {
        let c = (i as f64 / (sweep - 1) as f64 * 90.0f64).to_radians().cos();
        let rgb = mlp.forward(&fresnel_powers(c), None, &mut cache);
        se += rgb.iter().map(|y| (y - schlick(c)).powi(2)).sum::<f64>() / 3.0;
    }
    let rmse = (se / sweep as f64).sqrt();
    let pass = rmse < 1e-2;
    report(6, "Fresnel capability", pass, &format!("Schlick R0=0.04 RMSE {rmse:.2e} < 1e-2"));
    assert!(pass);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_probegrid"))
}

fn read_png(path: &Path) -> Vec<f64> {
    probegrid::io::dataset::read_png_rgb(path)
        .unwrap()
        .data
        .iter()
        .flat_map(|c| c.iter().copied())
        .collect()
}

#[test]
fn criterion_7_ablation_modes() {
    let _guard = exclusive();
    let run = sphere_run();
    let dir = run.dir.path();
    let ckpt = dir.join("sphere.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    let render = |name: &str, flags: &[&str]| -> Vec<f64> {
        let out = dir.join(format!("{name}.png"));
        let status = cli()
            .args(["render", "--checkpoint"])
            .arg(&ckpt)
            .arg("--cameras")
            .arg(dir.join("data"))
            .args(["--camera", "3", "--out"])
            .arg(&out)
            .args(flags)
            .status()
            .unwrap();
        assert!(status.success(), "render {name} failed");
        read_png(&out)
    };
    let full = render("full", &[]);
    let mut details = Vec::new();
    let mut pass = true;
    for (name, flags) in [
        ("sh-order-1", &["--sh-order", "1"][..]),
        ("no-fresnel", &["--no-fresnel"][..]),
        ("no-spatial", &["--no-spatial"][..]),
    ] {
        let img = render(name, flags);
        let diff = img.iter().zip(&full).map(|(a, b)| (a - b).abs()).sum::<f64>() / full.len() as f64;
        pass &= diff > 0.002;
        details.push(format!("{name} {diff:.4}"));
    }
    let unchanged = std::fs::read(&ckpt).unwrap() == before;
    pass &= unchanged;
    report(
        7,
        "ablation render modes",
        pass,
        &format!("mean abs diff {} > 0.002, checkpoint unchanged {unchanged}", details.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let _guard = exclusive();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = workspace();
    let ok = cli()
        .args(["synth", "--gt-points", "0", "--scene"])
        .arg(root.join("configs/scenes/glossy_sphere.toml"))
        .arg("--out")
        .arg(d.join("data"))
        .output()
        .unwrap();
    assert!(ok.status.success());
    // A shortened copy of the sphere schedule keeps this check quick.
    let mut schedule = std::fs::read_to_string(root.join("configs/sphere.toml")).unwrap();
    schedule = schedule.replace("iterations = 300", "iterations = 20");
    schedule.push_str("iterations = 10\n");
    std::fs::write(d.join("short.toml"), schedule).unwrap();
    let train = |name: &str, threads: &str| -> Vec<u8> {
        let out = d.join(format!("{name}.ckpt"));
        let st = cli()
            .args(["--seed", "0", "--threads", threads, "train", "--data"])
            .arg(d.join("data"))
            .arg("--schedule")
            .arg(d.join("short.toml"))
            .arg("--out")
            .arg(&out)
            .arg("--log")
            .arg(d.join(format!("{name}.log")))
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(&out).unwrap()
    };
    let a = train("a", "1");
    let b = train("b", "1");
    let c = train("c", "4");
    let data = Dataset::load(&d.join("data")).unwrap();
    let psnr = |bytes: &[u8]| pipeline::evaluate_psnr(&Checkpoint::from_bytes(bytes).unwrap(), &data).unwrap().psnr;
    let (pa, pc) = (psnr(&a), psnr(&c));
    let identical = a == b;
    let pass = identical && (pa - pc).abs() < 1e-3;
    report(
        8,
        "determinism",
        pass,
        &format!("single-threaded runs bitwise identical {identical}, psnr 1 thread {pa:.6} vs 4 threads {pc:.6}"),
    );
    assert!(pass);
}
