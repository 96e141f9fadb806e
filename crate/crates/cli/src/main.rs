mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use layermesh::aggregate::{GeometryScheme, SoftAverage};
use layermesh::camera::{Camera, RigidPose};
use layermesh::coalesce::{coalesce, read_mpi_bundle, write_mpi_bundle, CoalesceConfig, RayModel};
use layermesh::image::ImageBuffer;
use layermesh::io;
use layermesh::losses::{central_crop, psnr, ssim};
use layermesh::meshing::{slice, slice_csv, slice_svg, Diagonal};
use layermesh::occlusion::{occlusion_mask, read_flow_pfm, DEFAULT_CROP_MARGIN, DEFAULT_EPSILON};
use layermesh::pipeline::OracleInputs;
use layermesh::predict::{ColoringPredictor, GeometryPredictor};
use layermesh::psv::{build_psv, place_planes};
use layermesh::render::{render, RenderOptions};
use layermesh::scenegen::{generate, Bundle, PatternKind, SceneSpec, ShapeKind};
use layermesh::texture::ColoringScheme;
use layermesh::{build_scene, export_scene, gradcheck, import_scene, BuildConfig};

/// Layered semitransparent mesh scenes from stereo pairs.
#[derive(Debug, Parser)]
#[command(name = "layermesh", version)]
struct Cli {
    /// `key = value` file with defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic layered scene bundle.
    Scenegen(ScenegenArgs),
    /// Dump the plane-sweep volume of a bundle.
    Psv(PsvArgs),
    /// Build a layered mesh scene from a bundle's stereo pair.
    Build(BuildArgs),
    /// Render a scene along a camera trajectory.
    Render(RenderArgs),
    /// Merge an MPI bundle into fewer layers.
    Coalesce(CoalesceArgs),
    /// Occlusion mask from a forward/backward flow pair.
    Occlusion(OcclusionArgs),
    /// PSNR and SSIM between two images.
    Eval(EvalArgs),
    /// Vertex depth and opacity along one grid row.
    Slice(SliceArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

fn enum_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(json!(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct ScenegenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 0.1)]
    baseline: f64,
    #[arg(long, default_value_t = -0.2, allow_negative_numbers = true)]
    novel_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    novel_y: f64,
    #[arg(long, default_value_t = 1.0)]
    near: f64,
    #[arg(long, default_value_t = 20.0)]
    far: f64,
    /// constant, tilted or wavy.
    #[arg(long, default_value = "tilted", value_parser = enum_value::<ShapeKind>)]
    shape: ShapeKind,
    /// Comma-separated texture patterns, cycled over layers.
    #[arg(long, default_value = "checker,noise,gradient", value_delimiter = ',', value_parser = enum_value::<PatternKind>)]
    patterns: Vec<PatternKind>,
    #[arg(long, default_value_t = 3)]
    cutouts: usize,
    #[arg(long, default_value_t = 1.0)]
    opacity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `mpi/`, the scene splatted onto this many planes.
    #[arg(long)]
    mpi_planes: Option<usize>,
}

#[derive(Debug, Args)]
struct PsvArgs {
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    planes: usize,
    /// Defaults to the bundle's depth range.
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    bundle: PathBuf,
    /// Output scene directory (`.lms`).
    #[arg(long)]
    out: PathBuf,
    /// gc, sa or bi.
    #[arg(long, default_value = "bi", value_parser = enum_value::<GeometryScheme>)]
    scheme: GeometryScheme,
    #[arg(long, default_value_t = 32)]
    planes: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// oracle, photo or constant.
    #[arg(long, default_value = "photo", value_parser = enum_value::<GeometryPredictor>)]
    geometry: GeometryPredictor,
    /// oracle or passthrough.
    #[arg(long, default_value = "passthrough", value_parser = enum_value::<ColoringPredictor>)]
    coloring: ColoringPredictor,
    /// rsbg, rbg or raw.
    #[arg(long, default_value = "rsbg", value_parser = enum_value::<ColoringScheme>)]
    texturing: ColoringScheme,
    /// depth or inverse-depth.
    #[arg(long, default_value = "depth", value_parser = enum_value::<SoftAverage>)]
    soft_average: SoftAverage,
    /// main or anti.
    #[arg(long, default_value = "main", value_parser = enum_value::<Diagonal>)]
    diagonal: Diagonal,
    #[arg(long, default_value_t = BuildConfig::default().temperature)]
    temperature: f64,
    #[arg(long, default_value_t = BuildConfig::default().radius)]
    radius: usize,
    /// Defaults to the bundle's depth range.
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    scene: PathBuf,
    /// One pose per line: 3x4 row-major reference-to-camera matrix.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "frame")]
    prefix: String,
    /// Also write `<prefix>_NNNN_alpha.pgm`.
    #[arg(long)]
    alpha: bool,
    #[arg(long, default_value_t = RenderOptions::default().tile_size)]
    tile_size: usize,
}

#[derive(Debug, Args)]
struct CoalesceArgs {
    /// Directory with `mpi.json` and per-plane images.
    mpi: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CoalesceConfig::default().layers)]
    layers: usize,
    #[arg(long, default_value_t = CoalesceConfig::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = CoalesceConfig::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = CoalesceConfig::default().seed)]
    seed: u64,
    /// through-texel or camera-center.
    #[arg(long, default_value = "through-texel", value_parser = enum_value::<RayModel>)]
    ray_model: RayModel,
}

#[derive(Debug, Args)]
struct OcclusionArgs {
    /// Flow from the reference view to the novel view.
    flow_rn: PathBuf,
    /// Flow from the novel view to the reference view.
    flow_nr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_CROP_MARGIN)]
    margin: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    a: PathBuf,
    b: PathBuf,
    /// Pixels removed from every side before scoring.
    #[arg(long, default_value_t = 0)]
    crop: usize,
}

#[derive(Debug, Args)]
struct SliceArgs {
    scene: PathBuf,
    #[arg(long)]
    row: usize,
    /// CSV output; stdout when neither output is given.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = parse_args(std::env::args_os().collect());
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(msg: &str) -> ! {
    eprintln!("error: {msg}");
    std::process::exit(2)
}

fn parse_args(mut argv: Vec<OsString>) -> Cli {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv).unwrap_or_else(|e| e.exit());
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    if let Some(path) = sub_matches.get_one::<PathBuf>("config") {
        let sub = cmd.find_subcommand(name).expect("known subcommand");
        let extra = config::read(path)
            .and_then(|entries| config::extra_args(&entries, sub, sub_matches))
            .unwrap_or_else(|e| usage_error(&e.0));
        argv.extend(extra);
    }
    let matches = cmd.try_get_matches_from(&argv).unwrap_or_else(|e| e.exit());
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Scenegen(a) => scenegen(a),
        Command::Psv(a) => psv(a),
        Command::Build(a) => build(a),
        Command::Render(a) => render_poses(a),
        Command::Coalesce(a) => coalesce_mpi(a),
        Command::Occlusion(a) => occlusion(a),
        Command::Eval(a) => eval(a),
        Command::Slice(a) => slice_row(a),
        Command::Gradcheck(a) => gradcheck_all(a),
    }
}

fn scenegen(a: ScenegenArgs) -> Result<()> {
    let spec = SceneSpec {
        layers: a.layers,
        height: a.height,
        width: a.width,
        baseline: a.baseline,
        novel_center: [a.novel_x, a.novel_y],
        depth_near: a.near,
        depth_far: a.far,
        shape: a.shape,
        patterns: a.patterns,
        cutouts: a.cutouts,
        opacity: a.opacity,
        seed: a.seed,
    };
    let scene = generate(&spec)?;
    let gt = scene.ground_truth()?;
    layermesh::scenegen::write_bundle(&a.out, &scene, &gt)?;
    if let Some(p) = a.mpi_planes {
        let planes = place_planes(spec.depth_near, spec.depth_far, p)?;
        write_mpi_bundle(a.out.join("mpi"), &scene.to_mpi(&planes)?, &spec.intrinsics())?;
    }
    println!("bundle={} layers={} size={}x{}", a.out.display(), spec.layers, spec.height, spec.width);
    Ok(())
}

fn depth_range(bundle: &Bundle, near: Option<f64>, far: Option<f64>) -> (f64, f64) {
    (near.unwrap_or(bundle.manifest.depth_near), far.unwrap_or(bundle.manifest.depth_far))
}

fn read_bundle(dir: &Path) -> Result<Bundle> {
    Bundle::read(dir).with_context(|| format!("reading bundle {}", dir.display()))
}

fn psv(a: PsvArgs) -> Result<()> {
    let bundle = read_bundle(&a.bundle)?;
    let (near, far) = depth_range(&bundle, a.near, a.far);
    let planes = place_planes(near, far, a.planes)?;
    let volume = build_psv(&bundle.reference, &bundle.side, &bundle.rig, &planes)?;
    fs::create_dir_all(&a.out)?;
    let mut entries = Vec::new();
    for (k, (slab, valid)) in volume.slabs.iter().zip(&volume.validity).enumerate() {
        let (slab_name, valid_name) = (format!("slab_{k:03}.ppm"), format!("valid_{k:03}.pgm"));
        io::write_ppm(a.out.join(&slab_name), slab)?;
        let mask = ImageBuffer::from_fn(valid.height(), valid.width(), 1, |y, x, _| if valid.get(y, x) { 1.0 } else { 0.0 });
        io::write_pgm(a.out.join(&valid_name), &mask)?;
        entries.push(json!({ "depth": planes.depths()[k], "slab": slab_name, "valid": valid_name, "valid_fraction": valid.fraction() }));
    }
    let manifest = json!({ "height": volume.height(), "width": volume.width(), "planes": entries });
    fs::write(a.out.join("psv.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("planes={} dir={}", planes.len(), a.out.display());
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let bundle = read_bundle(&a.bundle)?;
    let cfg = BuildConfig {
        planes: a.planes,
        layers: a.layers,
        scheme: a.scheme,
        coloring: a.texturing,
        geometry_predictor: a.geometry,
        coloring_predictor: a.coloring,
        soft_average: a.soft_average,
        diagonal: a.diagonal,
        temperature: a.temperature,
        radius: a.radius,
    };
    let oracle = OracleInputs { depths: Some(&bundle.gt_depths), textures: Some(&bundle.gt_textures[..]) };
    let range = depth_range(&bundle, a.near, a.far);
    let out = build_scene(&bundle.reference, &bundle.side, &bundle.rig, range, &cfg, oracle)?;
    let hash = export_scene(&out.scene, &a.out)?;
    println!(
        "scene={} layers={} planes={} scheme={} texturing={} unmatched_pixels={} manifest_sha256={hash}",
        a.out.display(),
        cfg.layers,
        cfg.planes,
        cfg.scheme,
        cfg.coloring,
        out.all_invalid
    );
    Ok(())
}

fn parse_poses(text: &str) -> Result<Vec<RigidPose<f64>>> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let values = line.split_whitespace().map(str::parse::<f64>).collect::<Result<Vec<_>, _>>().with_context(|| format!("pose line {}", n + 1))?;
        poses.push(RigidPose::from_3x4(&values).with_context(|| format!("pose line {}", n + 1))?);
    }
    if poses.is_empty() {
        bail!("trajectory has no poses");
    }
    Ok(poses)
}

fn render_poses(a: RenderArgs) -> Result<()> {
    let scene = import_scene::<f64>(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    let poses = parse_poses(&fs::read_to_string(&a.poses).with_context(|| format!("reading {}", a.poses.display()))?)?;
    fs::create_dir_all(&a.out)?;
    let k = scene.meshes.intrinsics;
    let opts = RenderOptions { tile_size: a.tile_size };
    for (i, pose) in poses.iter().enumerate() {
        let frame = render(&scene, &Camera::new(k, *pose), (k.height, k.width), &opts)?;
        io::write_ppm(a.out.join(format!("{}_{i:04}.ppm", a.prefix)), &frame.color)?;
        if a.alpha {
            io::write_pgm(a.out.join(format!("{}_{i:04}_alpha.pgm", a.prefix)), &frame.alpha)?;
        }
    }
    println!("frames={} size={}x{} dir={}", poses.len(), k.height, k.width, a.out.display());
    Ok(())
}

fn coalesce_mpi(a: CoalesceArgs) -> Result<()> {
    let (mpi, k) = read_mpi_bundle::<f64>(&a.mpi).with_context(|| format!("reading MPI bundle {}", a.mpi.display()))?;
    let cfg = CoalesceConfig { layers: a.layers, sigma: a.sigma, samples: a.samples, seed: a.seed, ray_model: a.ray_model, ..CoalesceConfig::default() };
    let merged = coalesce(&mpi, &k, &cfg)?;
    let hash = export_scene(&merged.scene, &a.out)?;
    println!(
        "scene={} planes={} layers={} degenerate_texels={} manifest_sha256={hash}",
        a.out.display(),
        mpi.planes.len(),
        cfg.layers,
        merged.degenerate_texels
    );
    Ok(())
}

fn occlusion(a: OcclusionArgs) -> Result<()> {
    let f_rn = read_flow_pfm::<f64>(&a.flow_rn).with_context(|| format!("reading {}", a.flow_rn.display()))?;
    let f_nr = read_flow_pfm::<f64>(&a.flow_nr).with_context(|| format!("reading {}", a.flow_nr.display()))?;
    let m = occlusion_mask(&f_rn, &f_nr, a.epsilon, a.margin)?;
    let bytes: Vec<u8> = m.mask.data().iter().map(|&o| if o { 255 } else { 0 }).collect();
    io::write_bytes(&a.out, &io::encode_pgm_bytes(m.mask.width(), m.mask.height(), &bytes))?;
    println!("occluded_fraction={:.6}", m.fraction);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let read = |p: &Path| io::read_image::<f64>(p).with_context(|| format!("reading {}", p.display()));
    let (mut x, mut y) = (read(&a.a)?, read(&a.b)?);
    if a.crop > 0 {
        x = central_crop(&x, a.crop)?;
        y = central_crop(&y, a.crop)?;
    }
    println!("psnr={:.4}", psnr(&x, &y, 1.0)?);
    println!("ssim={:.6}", ssim(&x, &y, 1.0)?);
    Ok(())
}

fn slice_row(a: SliceArgs) -> Result<()> {
    let scene = import_scene::<f64>(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    let rows = slice(&scene.meshes, &scene.textures, a.row)?;
    if let Some(p) = &a.csv {
        fs::write(p, slice_csv(&rows))?;
    }
    if let Some(p) = &a.svg {
        fs::write(p, slice_svg(&rows, 800.0, 400.0))?;
    }
    if a.csv.is_none() && a.svg.is_none() {
        print!("{}", slice_csv(&rows));
    }
    Ok(())
}

fn gradcheck_all(a: GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_all(a.configs, a.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err <= a.tolerance;
        println!("{} max_rel_err={:.3e} checks={} skipped={} {}", r.suite, r.max_rel_err, r.checks, r.skipped, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.suite.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient checks above {:e}: {}", a.tolerance, failed.join(", "));
    }
    Ok(())
}
