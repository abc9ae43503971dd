//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 arrangement (separation) error,
//! 4 convergence failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::multiscatt::{
    parse_real, shape_from_json, sweep, DiskObservable, Ensemble, Incident, MultiProblem, MultiSolution, Placement,
    PointClass, ShapeSolver, SolveMethod, SolveOptions,
};
use crate::tmatrix::{load_tmatrix, rotate_tmatrix, save_tmatrix, symmetry_residual, Shape, TmatConfig};
use crate::{c64, Point};

#[derive(Debug, Parser)]
#[command(name = "helmscatter", version, about = "2D acoustic scattering by polygonal obstacles via T-matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute or inspect T-matrix files.
    #[command(subcommand)]
    Tmat(TmatCommand),
    /// Scattering by one obstacle described by a stored T-matrix.
    SolveSingle(SolveSingleArgs),
    /// Multiple scattering by an ensemble.
    SolveMulti(SolveMultiArgs),
    /// Evaluate a disk observable over a one-parameter family of arrangements.
    Sweep(SweepArgs),
}

#[derive(Debug, Subcommand)]
pub enum TmatCommand {
    Compute(TmatComputeArgs),
    Info(TmatInfoArgs),
}

#[derive(Debug, Args)]
pub struct TmatComputeArgs {
    /// Shape file (JSON: label, vertices or circle_radius, type "dir"/"trans", n_in).
    pub scatterer: PathBuf,
    #[arg(long)]
    pub kappa: f64,
    /// Mesh size.
    #[arg(long, default_value_t = 0.5)]
    pub h: f64,
    /// Plane waves per element.
    #[arg(long, default_value_t = 20)]
    pub p: usize,
    /// Truncation order (default from the wavenumber and shape radius).
    #[arg(long)]
    pub order: Option<usize>,
    /// DtN truncation order.
    #[arg(long)]
    pub dtn_order: Option<usize>,
    #[arg(long)]
    pub allow_large_p: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TmatInfoArgs {
    pub path: PathBuf,
    /// Rotate the matrix by this angle (accepts e.g. `pi/2`).
    #[arg(long, value_parser = parse_angle, allow_hyphen_values = true)]
    pub rotate: Option<f64>,
    /// Where to write the rotated matrix.
    #[arg(long, requires = "rotate")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl std::str::FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| parse_real(t).ok_or_else(|| format!("bad number {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 4 || !(v[0] < v[1] && v[2] < v[3]) {
            return Err("window must be xmin,xmax,ymin,ymax with xmin < xmax and ymin < ymax".into());
        }
        Ok(Window {
            x: [v[0], v[1]],
            y: [v[2], v[3]],
        })
    }
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Plot window `xmin,xmax,ymin,ymax`.
    #[arg(long, default_value = "-5,5,-5,5", allow_hyphen_values = true)]
    pub window: Window,
    #[arg(long, default_value_t = 201)]
    pub nx: usize,
    #[arg(long, default_value_t = 201)]
    pub ny: usize,
    /// Grid CSV output.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Optional PPM image of the real part.
    #[arg(long)]
    pub ppm: Option<PathBuf>,
    /// Plot the scattered instead of the total field.
    #[arg(long)]
    pub scattered: bool,
    /// Evaluate inside the artificial disks with the TDG solver.
    #[arg(long)]
    pub near_field: bool,
}

#[derive(Debug, Args)]
pub struct SolveSingleArgs {
    pub tmat: PathBuf,
    /// `plane:<theta>` or `point:<x>,<y>`.
    #[arg(long, value_parser = parse_incident, allow_hyphen_values = true)]
    pub incident: Incident,
    /// Centre of the obstacle (default: the origin stored in the file).
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub position: Option<Point>,
    /// Rotation of the obstacle (default: the rotation stored in the file).
    #[arg(long, value_parser = parse_angle, allow_hyphen_values = true)]
    pub rotation: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Gmres,
    Dense,
    Neumann,
}

#[derive(Debug, Args)]
pub struct TmatSource {
    /// Compute the T-matrices of all shapes.
    #[arg(long, conflicts_with = "load")]
    pub compute: bool,
    /// Directory with `<label>.tmat.json` files.
    #[arg(long)]
    pub load: Option<PathBuf>,
    /// Store computed T-matrices in this directory.
    #[arg(long, requires = "compute")]
    pub save: Option<PathBuf>,
    /// Mesh size (overrides the ensemble file).
    #[arg(long)]
    pub h: Option<f64>,
    /// Plane waves per element (overrides the ensemble file).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, value_enum, default_value_t = MethodArg::Gmres)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct SolveMultiArgs {
    pub ensemble: PathBuf,
    #[arg(long, value_parser = parse_incident, allow_hyphen_values = true)]
    pub incident: Incident,
    #[command(flatten)]
    pub source: TmatSource,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub ensemble: PathBuf,
    /// `scale|x<j>|y<j>|rot<j>` followed by `:start:stop:step` or `=v1,v2,...`.
    /// `scale` multiplies every position; the others set one coordinate
    /// (or rotation) of obstacle `j` (1-based).
    #[arg(long, allow_hyphen_values = true)]
    pub param: String,
    #[arg(long, value_parser = parse_incident, allow_hyphen_values = true)]
    pub incident: Incident,
    /// `disk:<cx>,<cy>,<r>[,<n_quad>]`: L2 norm of the total field on a disk.
    #[arg(long, default_value = "disk:0,0,0.5", allow_hyphen_values = true)]
    pub observable: String,
    #[command(flatten)]
    pub source: TmatSource,
    /// Output table (CSV).
    #[arg(long, short)]
    pub out: PathBuf,
}

fn parse_incident(s: &str) -> std::result::Result<Incident, String> {
    Incident::parse(s).map_err(|e| e.to_string())
}

fn parse_angle(s: &str) -> std::result::Result<f64, String> {
    parse_real(s).ok_or_else(|| format!("bad angle {s:?}"))
}

fn parse_point(s: &str) -> std::result::Result<Point, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("bad point {s:?}; expected x,y"))?;
    match (parse_real(x), parse_real(y)) {
        (Some(x), Some(y)) => Ok([x, y]),
        _ => Err(format!("bad point {s:?}")),
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::Json(_)
        | Error::Parse { .. }
        | Error::Argument(_)
        | Error::Format(_)
        | Error::Config(_)
        | Error::Geometry(_)
        | Error::Domain(_) => 2,
        Error::Separation(_) => 3,
        Error::Convergence { .. } => 4,
        Error::Capability(_) | Error::Meshing(_) | Error::Conditioning { .. } => 1,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Tmat(TmatCommand::Compute(a)) => cmd_tmat_compute(a),
        Command::Tmat(TmatCommand::Info(a)) => cmd_tmat_info(a),
        Command::SolveSingle(a) => cmd_solve_single(a),
        Command::SolveMulti(a) => cmd_solve_multi(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Convergence { history, .. } = &e {
                eprintln!("residual history: {history:?}");
            }
            exit_code(&e)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Argument(format!("cannot read {}: {e}", path.display())))
}

pub fn cmd_tmat_compute(a: &TmatComputeArgs) -> Result<()> {
    let shape = shape_from_json(&read(&a.scatterer)?)?;
    let mut cfg = TmatConfig::new(a.h, a.p);
    cfg.order = a.order;
    cfg.dtn_order = a.dtn_order;
    cfg.allow_large_p = a.allow_large_p;
    let start = Instant::now();
    let solver = ShapeSolver::compute(&shape, a.kappa, &cfg)?;
    let t = &solver.tmatrix;
    save_tmatrix(t, &a.out)?;
    println!("shape: {}", shape.label());
    println!("order: {}", t.order);
    println!("symmetry residual: {:e}", t.symmetry_residual);
    println!("frobenius norm: {:e}", t.frobenius_norm());
    println!("time: {:.2} s", start.elapsed().as_secs_f64());
    println!("written: {}", a.out.display());
    Ok(())
}

pub fn cmd_tmat_info(a: &TmatInfoArgs) -> Result<()> {
    let t = load_tmatrix(&a.path)?;
    let recomputed = symmetry_residual(&t);
    println!("kappa: {}", t.kappa);
    println!("order: {} ({} x {})", t.order, t.size(), t.size());
    println!("origin: ({}, {})", t.origin[0], t.origin[1]);
    println!("rotation: {}", t.rotation);
    println!("scatterer radius: {}", t.radius);
    println!("scatterer hash: {}", t.scatterer_hash);
    if let Some(shape) = &t.shape {
        println!("scatterer: {} ({:?})", shape.label(), shape.kind());
    }
    if let Some(s) = &t.solver {
        println!(
            "solver: h = {}, p = {}, dtn order = {}, artificial radius = {}",
            s.h, s.p, s.dtn_order, s.artificial_radius
        );
    }
    println!("frobenius norm: {:e}", t.frobenius_norm());
    println!("symmetry residual (stored): {:e}", t.symmetry_residual);
    println!("symmetry residual (recomputed): {:e}", recomputed);
    if (recomputed - t.symmetry_residual).abs() > 1e-12 {
        return Err(Error::Format(format!(
            "stored symmetry residual {:e} does not match recomputed {:e}",
            t.symmetry_residual, recomputed
        )));
    }
    if let Some(alpha) = a.rotate {
        let r = rotate_tmatrix(&t, alpha);
        println!("rotated by {alpha}: symmetry residual {:e}", symmetry_residual(&r));
        if let Some(out) = &a.out {
            save_tmatrix(&r, out)?;
            println!("written: {}", out.display());
        }
    }
    Ok(())
}

/// Field values and point classes on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `y` outer.
    pub values: Vec<c64>,
    pub mask: Vec<PointClass>,
}

impl FieldGrid {
    pub fn nodes(window: &Window, nx: usize, ny: usize) -> Result<Vec<Point>> {
        if nx < 2 || ny < 2 {
            return Err(Error::Argument("grid needs at least 2 nodes in each direction".into()));
        }
        let mut pts = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            let y = window.y[0] + (window.y[1] - window.y[0]) * j as f64 / (ny - 1) as f64;
            for i in 0..nx {
                let x = window.x[0] + (window.x[1] - window.x[0]) * i as f64 / (nx - 1) as f64;
                pts.push([x, y]);
            }
        }
        Ok(pts)
    }

    /// Evaluates the total (or scattered) field of a solved problem.
    pub fn evaluate(problem: &MultiProblem, sol: &MultiSolution, grid: &GridArgs) -> Result<Self> {
        if grid.near_field {
            let report = problem.validate();
            if report.has_soft() {
                return Err(Error::Separation(format!(
                    "{}\nthe obstacles are too close to plot the near field; rerun without --near-field",
                    report.summary()
                )));
            }
        }
        let pts = Self::nodes(&grid.window, grid.nx, grid.ny)?;
        let vals = problem.field_with_mask(sol, &pts, grid.near_field)?;
        let inc = sol.incident.field(problem.ensemble.kappa);
        let (values, mask) = vals
            .into_iter()
            .zip(&pts)
            .map(|((v, class), x)| match class {
                PointClass::Exterior | PointClass::NearField if grid.scattered => (v - inc.value(*x), class),
                _ => (v, class),
            })
            .unzip();
        Ok(Self {
            x_range: grid.window.x,
            y_range: grid.window.y,
            nx: grid.nx,
            ny: grid.ny,
            values,
            mask,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 64);
        s.push_str("x,y,re,im,mask\n");
        let pts = Self::nodes(
            &Window {
                x: self.x_range,
                y: self.y_range,
            },
            self.nx,
            self.ny,
        )
        .expect("grid size checked on construction");
        for ((x, v), m) in pts.iter().zip(&self.values).zip(&self.mask) {
            s.push_str(&format!("{},{},{},{},{}\n", x[0], x[1], v.re, v.im, *m as u8));
        }
        s
    }

    /// Binary PPM of `Re u`, blue (negative) through white to red
    /// (positive), symmetric about zero. Returns the image and its scale.
    pub fn to_ppm(&self) -> (Vec<u8>, f64) {
        let scale = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(v, m)| **m != PointClass::Excluded && v.re.is_finite())
            .fold(0.0f64, |acc, (v, _)| acc.max(v.re.abs()));
        let mut out = format!("P6\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        for row in (0..self.ny).rev() {
            for col in 0..self.nx {
                let k = row * self.nx + col;
                let v = self.values[k].re;
                if self.mask[k] == PointClass::Excluded || !v.is_finite() {
                    out.extend_from_slice(&[128, 128, 128]);
                    continue;
                }
                let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
                let fade = (255.0 * (1.0 - t.abs())).round() as u8;
                if t >= 0.0 {
                    out.extend_from_slice(&[255, fade, fade]);
                } else {
                    out.extend_from_slice(&[fade, fade, 255]);
                }
            }
        }
        (out, scale)
    }
}

fn write_grid(grid: &FieldGrid, args: &GridArgs) -> Result<()> {
    std::fs::write(&args.out, grid.to_csv())?;
    println!("grid: {} ({} x {})", args.out.display(), grid.nx, grid.ny);
    if let Some(ppm) = &args.ppm {
        let (bytes, scale) = grid.to_ppm();
        std::fs::write(ppm, bytes)?;
        println!("image: {} (Re u from -{scale:e} to {scale:e})", ppm.display());
    }
    Ok(())
}

pub fn cmd_solve_single(a: &SolveSingleArgs) -> Result<()> {
    let t = load_tmatrix(&a.tmat)?;
    let shape = t
        .shape
        .clone()
        .ok_or_else(|| Error::Format("T-matrix file does not describe its scatterer".into()))?;
    let placement = Placement {
        shape: 0,
        position: a.position.unwrap_or(t.origin),
        rotation: a.rotation.unwrap_or(t.rotation),
    };
    let kappa = t.kappa;
    let solver = ShapeSolver::from_tmatrix(t, a.grid.near_field)?;
    let ens = Ensemble::new(kappa, vec![shape], vec![placement])?;
    let problem = MultiProblem::new(ens, vec![Arc::new(solver)])?;
    let sol = problem.solve(&a.incident, &SolveOptions::default())?;
    let grid = FieldGrid::evaluate(&problem, &sol, &a.grid)?;
    write_grid(&grid, &a.grid)
}

fn tmat_file_name(shape: &Shape) -> String {
    let label: String = shape
        .label()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{label}.tmat.json")
}

fn build_problem(ens: Ensemble, src: &TmatSource, near_field: bool) -> Result<MultiProblem> {
    let start = Instant::now();
    let solvers = if let Some(dir) = &src.load {
        ens.shapes
            .iter()
            .map(|s| {
                let path = dir.join(tmat_file_name(s));
                ShapeSolver::from_tmatrix(load_tmatrix(&path)?, near_field).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?
    } else if src.compute {
        let h = src.h.or(ens.h).unwrap_or(0.5);
        let p = src.p.or(ens.p).unwrap_or(20);
        let cfg = TmatConfig::new(h, p);
        let pb = MultiProblem::compute(ens.clone(), &cfg)?;
        let solvers = pb.solvers.clone();
        if let Some(dir) = &src.save {
            std::fs::create_dir_all(dir)?;
            for (s, solver) in ens.shapes.iter().zip(&solvers) {
                save_tmatrix(&solver.tmatrix, &dir.join(tmat_file_name(s)))?;
            }
        }
        for (s, solver) in ens.shapes.iter().zip(&solvers) {
            println!(
                "T-matrix {}: order {}, symmetry residual {:e}",
                s.label(),
                solver.tmatrix.order,
                solver.tmatrix.symmetry_residual
            );
        }
        println!("T-matrices: {:.2} s", start.elapsed().as_secs_f64());
        return Ok(pb);
    } else {
        return Err(Error::Argument("give either --compute or --load <dir>".into()));
    };
    MultiProblem::new(ens, solvers)
}

fn solve_options(src: &TmatSource) -> SolveOptions {
    SolveOptions {
        method: match src.method {
            MethodArg::Gmres => SolveMethod::Gmres,
            MethodArg::Dense => SolveMethod::Dense,
            MethodArg::Neumann => SolveMethod::Neumann,
        },
        tol: src.tol,
        max_iter: src.max_iter,
    }
}

pub fn cmd_solve_multi(a: &SolveMultiArgs) -> Result<()> {
    let ens = Ensemble::from_json(&read(&a.ensemble)?)?;
    let problem = build_problem(ens, &a.source, a.grid.near_field)?;
    if a.grid.near_field {
        let report = problem.validate();
        if report.has_soft() {
            return Err(Error::Separation(format!(
                "{}\nthe obstacles are too close to plot the near field; rerun without --near-field",
                report.summary()
            )));
        }
    }
    let sol = problem.solve(&a.incident, &solve_options(&a.source))?;
    println!(
        "solved: {} obstacles, {} unknowns, {} iterations, final residual {:e}",
        problem.ensemble.len(),
        problem.orders().iter().map(|n| 2 * n + 1).sum::<usize>(),
        sol.iterations,
        sol.history.last().copied().unwrap_or(0.0)
    );
    let grid = FieldGrid::evaluate(&problem, &sol, &a.grid)?;
    write_grid(&grid, &a.grid)
}

#[derive(Debug, Clone, PartialEq)]
enum SweepParam {
    Scale,
    X(usize),
    Y(usize),
    Rot(usize),
}

fn parse_sweep_param(spec: &str, n: usize) -> Result<(SweepParam, Vec<f64>)> {
    let bad = || {
        Error::Argument(format!(
            "bad parameter spec {spec:?}; expected e.g. scale:0.8:1.4:0.05 or x2=0,1,2"
        ))
    };
    let (name, values) = if let Some((name, list)) = spec.split_once('=') {
        let v = list.split(',').map(parse_real).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
        (name, v)
    } else {
        let mut parts = spec.split(':');
        let name = parts.next().ok_or_else(bad)?;
        let nums = parts.map(parse_real).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
        let [start, stop, step] = nums[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (name, (0..count).map(|k| start + k as f64 * step).collect())
    };
    if values.is_empty() {
        return Err(bad());
    }
    let index = |rest: &str| -> Result<usize> {
        let j: usize = rest.parse().map_err(|_| bad())?;
        if j == 0 || j > n {
            return Err(Error::Argument(format!("obstacle index {j} out of range 1..={n}")));
        }
        Ok(j - 1)
    };
    let param = if name == "scale" {
        SweepParam::Scale
    } else if let Some(r) = name.strip_prefix("rot") {
        SweepParam::Rot(index(r)?)
    } else if let Some(r) = name.strip_prefix('x') {
        SweepParam::X(index(r)?)
    } else if let Some(r) = name.strip_prefix('y') {
        SweepParam::Y(index(r)?)
    } else {
        return Err(bad());
    };
    Ok((param, values))
}

fn parse_observable(spec: &str) -> Result<DiskObservable> {
    let bad = || Error::Argument(format!("bad observable {spec:?}; expected disk:<cx>,<cy>,<r>[,<n>]"));
    let rest = spec.strip_prefix("disk:").ok_or_else(bad)?;
    let v = rest.split(',').map(parse_real).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
    let (center, radius, n_quad) = match v[..] {
        [x, y, r] => ([x, y], r, 40),
        [x, y, r, n] if n >= 1.0 && n.fract() == 0.0 => ([x, y], r, n as usize),
        _ => return Err(bad()),
    };
    if !(radius > 0.0) {
        return Err(bad());
    }
    Ok(DiskObservable { center, radius, n_quad })
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let ens = Ensemble::from_json(&read(&a.ensemble)?)?;
    let (param, values) = parse_sweep_param(&a.param, ens.len())?;
    let obs = parse_observable(&a.observable)?;
    let template = ens.placements.clone();
    let base = build_problem(ens, &a.source, false)?;
    let gen = |v: f64| -> Vec<Placement> {
        let mut pl = template.clone();
        match param {
            SweepParam::Scale => pl.iter_mut().for_each(|p| p.position = [p.position[0] * v, p.position[1] * v]),
            SweepParam::X(j) => pl[j].position[0] = v,
            SweepParam::Y(j) => pl[j].position[1] = v,
            SweepParam::Rot(j) => pl[j].rotation = v,
        }
        pl
    };
    let table = sweep(&base, &gen, &values, &a.incident, &obs, &solve_options(&a.source));
    std::fs::write(&a.out, table.to_csv())?;
    for r in &table.rows {
        match (&r.value, &r.flag) {
            (Some(v), _) => println!("{:>10.6}  {v:e}", r.parameter),
            (None, Some(f)) => println!("{:>10.6}  invalid: {}", r.parameter, f.lines().next().unwrap_or("")),
            (None, None) => {}
        }
    }
    match table.argmax() {
        Some((p, v)) => println!("argmax: {p} (value {v:e})"),
        None => println!("argmax: none (every row invalid)"),
    }
    println!("table: {}", a.out.display());
    Ok(())
}
