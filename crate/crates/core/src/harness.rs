//! Orchestration: run configuration, the full pipeline at one eps, sweeps
//! over eps with rate fitting, CSV emission, and standalone check suites.

use crate::assemble::{build_expansion, wall_state, ExpansionBundle, ExpansionParams};
use crate::collision::{CollisionOperator, ConservativeBasis, LinearizedKernel};
use crate::error::{Error, Result};
use crate::euler::{manufactured_state, EulerField, Profile, SpatialGrid};
use crate::grid::{build_grid, FluidState, VelocityGrid};
use crate::knudsen::{LayerGrid, WallData};
use crate::slab::{
    apply_diffuse_bc, boundary_dissipation_check, step_boltzmann, weighted_norms, FarBoundary,
    KineticState, NormMonitor, SlabScheme,
};
use crate::util;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Flat key=value run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub velocity_n: usize,
    pub velocity_vmax: f64,
    pub velocity_nsphere: usize,
    pub euler_nx: usize,
    pub euler_xmax: f64,
    pub euler_cfl: f64,
    pub euler_profile: String,
    pub euler_amplitude: f64,
    /// Validity horizon for the smooth Euler solution.
    pub euler_t_validity: f64,
    pub correction_ic_profile: String,
    pub correction_amplitude: f64,
    pub layer_ximax: f64,
    pub layer_nxi: usize,
    pub layer_stretch: f64,
    pub layer_sigma0: f64,
    pub slab_nx: usize,
    pub slab_cfl: f64,
    pub slab_t_end: f64,
    pub epsilons: Vec<f64>,
    pub transport_order: usize,
    pub expansion_samples: usize,
    pub expansion_layer_samples: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Force sequential floating-point reductions.
    pub sequential: bool,
    pub kernel_cache_dir: PathBuf,
}

impl Default for RunConfig {
    /// The desk-scale preset.
    fn default() -> Self {
        RunConfig {
            velocity_n: 16,
            velocity_vmax: 6.0,
            velocity_nsphere: 8,
            euler_nx: 64,
            euler_xmax: 4.0,
            euler_cfl: 0.45,
            euler_profile: "gauss-density".into(),
            euler_amplitude: 0.05,
            euler_t_validity: 0.2,
            correction_ic_profile: "compatible-decay".into(),
            correction_amplitude: 0.0,
            layer_ximax: 20.0,
            layer_nxi: 40,
            layer_stretch: 0.04,
            layer_sigma0: 0.5,
            slab_nx: 64,
            slab_cfl: 0.45,
            slab_t_end: 0.1,
            epsilons: vec![0.2, 0.1, 0.05],
            transport_order: 2,
            expansion_samples: 7,
            expansion_layer_samples: 3,
            out_dir: PathBuf::from("out"),
            seed: 20260809,
            sequential: false,
            kernel_cache_dir: PathBuf::from("cache"),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "quick" => {
                // Reduced setting for smoke runs.
                let mut c = Self::default();
                c.velocity_n = 8;
                c.velocity_vmax = 4.0;
                c.euler_nx = 32;
                c.slab_nx = 32;
                c.slab_t_end = 0.02;
                c.epsilons = vec![0.2, 0.1];
                c.expansion_samples = 4;
                c.expansion_layer_samples = 2;
                c.layer_nxi = 16;
                Ok(c)
            }
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut c = if let Some(p) = map.remove("preset") {
            Self::preset(&p)?
        } else {
            Self::default()
        };
        let mut take = |key: &str| map.remove(key);
        macro_rules! set {
            ($key:expr, $field:expr, $ty:ty) => {
                if let Some(v) = take($key) {
                    $field = v.parse::<$ty>().map_err(|e| {
                        Error::Config(format!("bad value for {}: {e}", $key))
                    })?;
                }
            };
        }
        set!("velocity.n", c.velocity_n, usize);
        set!("velocity.vmax", c.velocity_vmax, f64);
        set!("velocity.nsphere", c.velocity_nsphere, usize);
        set!("euler.nx", c.euler_nx, usize);
        set!("euler.xmax", c.euler_xmax, f64);
        set!("euler.cfl", c.euler_cfl, f64);
        set!("euler.amplitude", c.euler_amplitude, f64);
        set!("euler.t_validity", c.euler_t_validity, f64);
        set!("correction.amplitude", c.correction_amplitude, f64);
        set!("layer.ximax", c.layer_ximax, f64);
        set!("layer.nxi", c.layer_nxi, usize);
        set!("layer.stretch", c.layer_stretch, f64);
        set!("layer.sigma0", c.layer_sigma0, f64);
        set!("slab.nx", c.slab_nx, usize);
        set!("slab.cfl", c.slab_cfl, f64);
        set!("slab.t_end", c.slab_t_end, f64);
        set!("slab.transport_order", c.transport_order, usize);
        set!("expansion.samples", c.expansion_samples, usize);
        set!("expansion.layer_samples", c.expansion_layer_samples, usize);
        set!("run.seed", c.seed, u64);
        set!("run.sequential", c.sequential, bool);
        if let Some(v) = take("euler.profile") {
            c.euler_profile = v;
        }
        if let Some(v) = take("correction.ic_profile") {
            c.correction_ic_profile = v;
        }
        if let Some(v) = take("run.out_dir") {
            c.out_dir = PathBuf::from(v);
        }
        if let Some(v) = take("kernel.cache_dir") {
            c.kernel_cache_dir = PathBuf::from(v);
        }
        if let Some(v) = take("slab.epsilon") {
            let eps = v
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad slab.epsilon: {e}")))?;
            c.epsilons = vec![eps];
        }
        if let Some(v) = take("sweep.epsilons") {
            c.epsilons = parse_epsilons(&v)?;
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Config("no epsilons configured".into()));
        }
        for w in self.epsilons.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(
                    "epsilons must be strictly decreasing".into(),
                ));
            }
        }
        if self
            .epsilons
            .iter()
            .any(|e| !(*e > 0.0 && *e < 1.0))
        {
            return Err(Error::Config("epsilons must lie in (0, 1)".into()));
        }
        if self.slab_t_end > self.euler_t_validity {
            return Err(Error::Config(format!(
                "slab.t_end = {} exceeds the Euler validity horizon {}",
                self.slab_t_end, self.euler_t_validity
            )));
        }
        if self.slab_nx != self.euler_nx {
            return Err(Error::Config(
                "slab.nx must match euler.nx (the expansion lives on the Euler grid)".into(),
            ));
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        format!(
            "velocity.n={}\nvelocity.vmax={}\nvelocity.nsphere={}\n\
             euler.nx={}\neuler.xmax={}\neuler.cfl={}\neuler.profile={}\n\
             euler.amplitude={}\neuler.t_validity={}\n\
             correction.ic_profile={}\ncorrection.amplitude={}\n\
             layer.ximax={}\nlayer.nxi={}\nlayer.stretch={}\nlayer.sigma0={}\n\
             slab.nx={}\nslab.cfl={}\nslab.t_end={}\nslab.transport_order={}\n\
             expansion.samples={}\nexpansion.layer_samples={}\n\
             sweep.epsilons={}\nrun.seed={}\nrun.sequential={}\n",
            self.velocity_n,
            self.velocity_vmax,
            self.velocity_nsphere,
            self.euler_nx,
            self.euler_xmax,
            self.euler_cfl,
            self.euler_profile,
            self.euler_amplitude,
            self.euler_t_validity,
            self.correction_ic_profile,
            self.correction_amplitude,
            self.layer_ximax,
            self.layer_nxi,
            self.layer_stretch,
            self.layer_sigma0,
            self.slab_nx,
            self.slab_cfl,
            self.slab_t_end,
            self.transport_order,
            self.expansion_samples,
            self.expansion_layer_samples,
            self.epsilons
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.seed,
            self.sequential,
        )
    }
}

pub fn parse_epsilons(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad epsilon `{p}`: {e}")))
        })
        .collect()
}

/// One row of the sweep report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub eps: f64,
    pub sup_l2_vs_maxwellian: f64,
    pub sup_l2_vs_ansatz: f64,
    pub sup_weighted_linf: f64,
    pub sup_boundary_residual: f64,
    pub scaled_remainder: f64,
    pub runtime_s: f64,
}

pub const SWEEP_CSV_HEADER: &str = "epsilon,sup_l2_vs_maxwellian,sup_l2_vs_ansatz,\
sup_weighted_linf,sup_boundary_residual,scaled_remainder,runtime_s";

#[derive(Debug, Clone, Default)]
pub struct RateFit {
    pub slope_l2_vs_maxwellian: f64,
    pub slope_combined: f64,
    pub scaled_remainder_spread: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub rates: Option<RateFit>,
}

/// Per-step log row of a single run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub mass: f64,
    pub l2_f: f64,
    pub linf_h: f64,
    pub boundary_residual: f64,
}

pub const STEP_CSV_HEADER: &str = "t,mass,l2_f,linf_h,boundary_residual";

/// Shared immutable objects of a sweep.
pub struct SharedContext {
    pub grid_v: VelocityGrid,
    pub kernel: LinearizedKernel,
    pub op: CollisionOperator,
    pub correction: ConservativeBasis,
}

pub fn build_shared(config: &RunConfig) -> Result<SharedContext> {
    let grid_v = build_grid(
        config.velocity_n,
        config.velocity_vmax,
        config.velocity_nsphere,
    )?;
    let kernel = LinearizedKernel::load_or_assemble(
        &grid_v,
        &FluidState::standard(),
        &config.kernel_cache_dir,
    );
    let op = CollisionOperator::new(&grid_v);
    let correction = ConservativeBasis::new(&grid_v, &FluidState::standard());
    Ok(SharedContext {
        grid_v,
        kernel,
        op,
        correction,
    })
}

pub fn build_bundle(config: &RunConfig, shared: &SharedContext) -> Result<ExpansionBundle> {
    let sgrid = SpatialGrid::new(config.euler_nx, config.euler_xmax)?;
    let profile = Profile::parse(&config.euler_profile)?;
    let (ic, _) = manufactured_state(profile, config.euler_amplitude, sgrid)?;
    let params = ExpansionParams {
        t_end: config.slab_t_end,
        euler_cfl: config.euler_cfl,
        n_samples: config.expansion_samples,
        n_layer_samples: config.expansion_layer_samples,
        layer: LayerGrid::new(
            config.layer_nxi,
            config.layer_ximax,
            config.layer_stretch,
            config.layer_sigma0,
        )?,
        solvability_tol: 1.0,
        printed_sign_f2: false,
    };
    build_expansion(ic, params, &shared.grid_v, &shared.kernel, &shared.op)
}

/// Full pipeline at one eps: well-prepared start from the bundle's ansatz,
/// direct kinetic solve to t_end, norms against the Maxwellian and the
/// ansatz, boundary-identity monitoring.
pub fn run_pipeline(
    config: &RunConfig,
    shared: &SharedContext,
    bundle: &ExpansionBundle,
    eps: f64,
) -> Result<(SweepRecord, Vec<StepRecord>)> {
    let start = std::time::Instant::now();
    let grid_v = &shared.grid_v;
    let n_v = grid_v.len();
    let sgrid = bundle.sgrid;
    let scheme = SlabScheme {
        grid_v,
        op: &shared.op,
        kernel: &shared.kernel,
        correction: &shared.correction,
        transport_order: config.transport_order,
        collision_iters: 4,
        quadratic_threshold: 1e-13,
        clip_tolerance: 1e-6,
    };
    let max_temp = bundle
        .euler
        .fields
        .iter()
        .flat_map(|f| f.temp.iter())
        .fold(0.0f64, |a, b| a.max(*b));
    let monitor = NormMonitor::new(7.0, max_temp)?;
    monitor.check(max_temp)?;

    // Well-prepared initial data: the ansatz with zero remainder.
    let mut state = KineticState::new(sgrid, eps, n_v);
    state.f = bundle.assemble_ansatz(grid_v, 0.0, eps, None)?;
    let far_ghost = state.f[(sgrid.nx - 1) * n_v..].to_vec();
    let far = FarBoundary::Ghost(far_ghost);

    let vmax3 = grid_v
        .nodes()
        .iter()
        .map(|v| v[2].abs())
        .fold(0.0, f64::max);
    let dt_cfl = config.slab_cfl * sgrid.dx() / vmax3;
    let n_steps = (config.slab_t_end / dt_cfl).ceil() as usize;
    let dt = config.slab_t_end / n_steps as f64;

    let mut steps = Vec::with_capacity(n_steps + 1);
    let mut sup_l2_m = 0.0f64;
    let mut sup_l2_ansatz = 0.0f64;
    let mut sup_linf = 0.0f64;
    let mut sup_bres = 0.0f64;

    let record = |state: &KineticState,
                      steps: &mut Vec<StepRecord>,
                      sup_l2_m: &mut f64,
                      sup_l2_ansatz: &mut f64,
                      sup_linf: &mut f64,
                      sup_bres: &mut f64|
     -> Result<()> {
        let t = state.t;
        let m_field = bundle.maxwellian_field(grid_v, t);
        let ansatz = bundle.assemble_ansatz(grid_v, t, eps, None)?;
        let vs_m = weighted_norms(state, &m_field, &m_field, 1.0, grid_v, &monitor);
        let vs_a = weighted_norms(state, &ansatz, &m_field, 1.0, grid_v, &monitor);
        let scaled = weighted_norms(state, &ansatz, &m_field, eps * eps, grid_v, &monitor);
        // Boundary identity on the BC-consistent wall trace.
        let wall = bundle.wall_at(grid_v, t)?;
        let ghost = apply_diffuse_bc(grid_v, &wall, state.cell(0, n_v));
        let mut trace: Vec<f64> = state
            .cell(0, n_v)
            .iter()
            .zip(&wall.sqrt_m0)
            .map(|(f, s)| f / s)
            .collect();
        for idx in grid_v.positive_v3_indices() {
            trace[idx] = ghost[idx] / wall.sqrt_m0[idx];
        }
        let (bres, _) = boundary_dissipation_check(grid_v, &wall, &trace)?;
        let mass = state.total_mass(grid_v);
        *sup_l2_m = sup_l2_m.max(vs_m.l2_f);
        *sup_l2_ansatz = sup_l2_ansatz.max(vs_a.l2_f);
        *sup_linf = sup_linf.max(vs_m.linf_h);
        *sup_bres = sup_bres.max(bres);
        steps.push(StepRecord {
            t,
            mass,
            l2_f: scaled.l2_f,
            linf_h: scaled.linf_h,
            boundary_residual: bres,
        });
        Ok(())
    };

    record(
        &state,
        &mut steps,
        &mut sup_l2_m,
        &mut sup_l2_ansatz,
        &mut sup_linf,
        &mut sup_bres,
    )?;
    for _ in 0..n_steps {
        let wall = bundle.wall_at(grid_v, state.t)?;
        state = step_boltzmann(&state, &scheme, &wall, &far, dt)?;
        record(
            &state,
            &mut steps,
            &mut sup_l2_m,
            &mut sup_l2_ansatz,
            &mut sup_linf,
            &mut sup_bres,
        )?;
    }

    let rec = SweepRecord {
        eps,
        sup_l2_vs_maxwellian: sup_l2_m,
        sup_l2_vs_ansatz: sup_l2_ansatz,
        sup_weighted_linf: sup_linf,
        sup_boundary_residual: sup_bres,
        scaled_remainder: sup_l2_ansatz / (eps * eps),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    Ok((rec, steps))
}

/// Least-squares log-log slopes of the report columns.
pub fn fit_rate(records: &[SweepRecord]) -> Result<RateFit> {
    if records.len() < 3 {
        return Err(Error::Config(format!(
            "rate fitting requires at least 3 epsilons, got {}",
            records.len()
        )));
    }
    let eps: Vec<f64> = records.iter().map(|r| r.eps).collect();
    let l2m: Vec<f64> = records.iter().map(|r| r.sup_l2_vs_maxwellian).collect();
    let combined: Vec<f64> = records
        .iter()
        .map(|r| r.sup_l2_vs_maxwellian + r.sup_weighted_linf)
        .collect();
    let scaled: Vec<f64> = records.iter().map(|r| r.scaled_remainder).collect();
    let spread = scaled.iter().cloned().fold(0.0f64, f64::max)
        / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(RateFit {
        slope_l2_vs_maxwellian: util::loglog_slope(&eps, &l2m),
        slope_combined: util::loglog_slope(&eps, &combined),
        scaled_remainder_spread: spread,
    })
}

/// Runs the sweep over every configured eps with one shared expansion.
pub fn run_sweep(config: &RunConfig) -> Result<(SweepReport, Vec<(f64, Vec<StepRecord>)>)> {
    util::set_sequential(config.sequential);
    let shared = build_shared(config)?;
    let bundle = build_bundle(config, &shared)?;
    let mut records = Vec::new();
    let mut step_logs = Vec::new();
    for &eps in &config.epsilons {
        let (rec, steps) = run_pipeline(config, &shared, &bundle, eps)?;
        records.push(rec);
        step_logs.push((eps, steps));
    }
    let rates = if records.len() >= 3 {
        Some(fit_rate(&records)?)
    } else {
        None
    };
    Ok((SweepReport { records, rates }, step_logs))
}

/// Writes sweep.csv, per-eps step logs, and the run metadata file.
pub fn emit(
    report: &SweepReport,
    step_logs: &[(f64, Vec<StepRecord>)],
    config: &RunConfig,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("sweep.csv"))?;
    writeln!(f, "{SWEEP_CSV_HEADER}")?;
    for r in &report.records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.eps,
            r.sup_l2_vs_maxwellian,
            r.sup_l2_vs_ansatz,
            r.sup_weighted_linf,
            r.sup_boundary_residual,
            r.scaled_remainder,
            r.runtime_s
        )?;
    }
    for (eps, steps) in step_logs {
        let name = format!("steps_eps{eps}.csv");
        let mut f = std::fs::File::create(dir.join(name))?;
        writeln!(f, "{STEP_CSV_HEADER}")?;
        for s in steps {
            writeln!(
                f,
                "{},{},{},{},{}",
                s.t, s.mass, s.l2_f, s.linf_h, s.boundary_residual
            )?;
        }
    }
    let mut meta = std::fs::File::create(dir.join("run_meta.txt"))?;
    writeln!(meta, "package={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
    writeln!(meta, "seed={}", config.seed)?;
    writeln!(meta, "sequential_reductions={}", config.sequential)?;
    if let Some(r) = &report.rates {
        writeln!(meta, "slope_l2_vs_maxwellian={}", r.slope_l2_vs_maxwellian)?;
        writeln!(meta, "slope_combined={}", r.slope_combined)?;
        writeln!(meta, "scaled_remainder_spread={}", r.scaled_remainder_spread)?;
    }
    writeln!(meta, "--- config ---")?;
    write!(meta, "{}", config.echo())?;
    Ok(())
}

/// Parses a sweep.csv produced by `emit` (round-trip check).
pub fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty csv".into()))?;
    if header != SWEEP_CSV_HEADER {
        return Err(Error::Config(format!("unexpected header `{header}`")));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|p| p.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<_>>()?;
        if v.len() != 7 {
            return Err(Error::Config(format!("bad row `{line}`")));
        }
        out.push(SweepRecord {
            eps: v[0],
            sup_l2_vs_maxwellian: v[1],
            sup_l2_vs_ansatz: v[2],
            sup_weighted_linf: v[3],
            sup_boundary_residual: v[4],
            scaled_remainder: v[5],
            runtime_s: v[6],
        });
    }
    Ok(out)
}

/// Standalone property suites for `check --suite ...`; returns pass/fail.
pub fn check_suite(name: &str) -> Result<bool> {
    match name {
        "collision" => check_collision(),
        "layer" => check_layer(),
        "boundary" => check_boundary(),
        "euler" => check_euler(),
        _ => Err(Error::Config(format!("unknown suite `{name}`"))),
    }
}

fn report(name: &str, ok: bool, detail: String) -> bool {
    println!("[{}] {name}: {detail}", if ok { "pass" } else { "FAIL" });
    ok
}

fn check_collision() -> Result<bool> {
    use rand::{Rng, SeedableRng};
    let grid = build_grid(8, 4.0, 8)?;
    let op = CollisionOperator::new(&grid);
    let mut ok = true;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let m = grid.maxwellian(&FluidState::standard());
    // Conservation after correction.
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let f: Vec<f64> = m.iter().map(|x| x * rng.gen_range(0.2..1.8)).collect();
        let out = op.apply(&grid, &f, &f);
        let (m0, m1, e2) = grid.conserved_moments(&out);
        for v in [m0, m1[0], m1[1], m1[2], 2.0 * e2] {
            worst = worst.max(v.abs());
        }
    }
    ok &= report(
        "collision invariants",
        worst <= 1e-12,
        format!("max |moment| = {worst:.3e}"),
    );
    // Annihilation needs adequate tail coverage (v_max = 6).
    let g12 = build_grid(12, 6.0, 8)?;
    let op12 = CollisionOperator::new(&g12);
    let m12 = g12.maxwellian(&FluidState::standard());
    let out = op12.apply_raw(&g12, &m12, &m12);
    let sup = out.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let sup_m = m12.iter().fold(0.0f64, |a, b| a.max(*b));
    ok &= report(
        "equilibrium annihilation",
        sup <= 1e-5 * sup_m,
        format!("sup |B(M,M)|/sup M = {:.3e}", sup / sup_m),
    );
    // Oracle match.
    let f1: Vec<f64> = m.iter().map(|x| x * rng.gen_range(0.5..1.5)).collect();
    let f2: Vec<f64> = m.iter().map(|x| x * rng.gen_range(0.5..1.5)).collect();
    let fast = op.apply_raw(&grid, &f1, &f2);
    let slow = crate::collision::bilinear_collision_direct(&grid, &f1, &f2);
    let scale = slow.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let diff = fast
        .iter()
        .zip(&slow)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    ok &= report(
        "optimized vs direct oracle",
        diff <= 1e-12 * scale,
        format!("max diff = {:.3e} (scale {scale:.3e})", diff),
    );
    Ok(ok)
}

fn check_layer() -> Result<bool> {
    let grid = build_grid(8, 4.0, 8)?;
    let s0 = FluidState::standard();
    let kernel = LinearizedKernel::assemble(&grid, &s0);
    let wall = WallData::matched(&grid, &s0)?;
    let layer = LayerGrid::new(16, 20.0, 0.04, 0.5)?;
    let mut ok = true;
    // Fluid layer part analytic example on an adequate grid.
    let g24 = build_grid(24, 8.5, 8)?;
    let coeffs = crate::knudsen::LayerCoeffs {
        a: crate::knudsen::CoeffProfile::Analytic(Box::new(|x| (-x).exp())),
        b: [
            crate::knudsen::CoeffProfile::Zero,
            crate::knudsen::CoeffProfile::Zero,
            crate::knudsen::CoeffProfile::Zero,
        ],
        c: crate::knudsen::CoeffProfile::Zero,
    };
    let part = crate::knudsen::fluid_layer_part(&g24, &s0, &layer, &coeffs)?;
    let mut worst = 0.0f64;
    for (i, &x) in layer.xi.iter().enumerate() {
        worst = worst.max((part.coeff[i][0] + 2.0 * (-x).exp()).abs());
        worst = worst.max((part.coeff[i][4] - (-x).exp() / 5.0).abs());
    }
    ok &= report(
        "fluid layer part analytic",
        worst <= 1e-10,
        format!("max |Psi,Theta error| = {worst:.3e}"),
    );
    // Half-space solve with pipeline-style data.
    let sm = grid.sqrt_maxwellian(&s0);
    let gfun: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(&sm)
        .map(|(v, s)| (0.2 + 0.1 * (v[0] - 1.0)) * s)
        .collect();
    let dw = crate::knudsen::diffusive_dw(&grid, &wall, &gfun);
    let mut data = vec![0.0; grid.len()];
    for idx in grid.positive_v3_indices() {
        data[idx] = -(gfun[idx] - dw[idx]);
    }
    let sol =
        crate::knudsen::solve_layer_bvp(&grid, &wall, &kernel, &layer, &data, None, 1e-3, 1e-9, 600)?;
    let res = crate::knudsen::layer_bvp_residual(&grid, &wall, &kernel, &layer, &sol, &data, None);
    ok &= report(
        "half-space solve residual",
        res <= 1e-8,
        format!("relative residual = {res:.3e}"),
    );
    let sigma = sol.decay_rate().unwrap_or(-1.0);
    ok &= report(
        "layer decay",
        sigma > 0.0,
        format!("fitted sigma = {sigma:.3}"),
    );
    Ok(ok)
}

fn check_boundary() -> Result<bool> {
    use rand::{Rng, SeedableRng};
    let grid = build_grid(16, 6.0, 8)?;
    let s0 = FluidState::standard();
    let wall = WallData::matched(&grid, &s0)?;
    let mut ok = true;
    let flux = grid.incoming_flux(&wall.m_w);
    ok &= report(
        "wall flux normalization",
        (flux - 1.0).abs() <= 1e-14,
        format!("incoming flux = {flux:.15}"),
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let f: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d1 = crate::knudsen::diffusive_dw(&grid, &wall, &f);
    let d2 = crate::knudsen::diffusive_dw(&grid, &wall, &d1);
    let sup = d1.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let diff = d1
        .iter()
        .zip(&d2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    ok &= report(
        "diffuse operator idempotent",
        diff <= 1e-10 * sup,
        format!("max |D(Df) - Df| = {diff:.3e}"),
    );
    let (sup_defect, solv) = crate::knudsen::verify_leading_layer_vanishes(&grid, &wall, &s0);
    let sup_sm = wall.sqrt_m0.iter().fold(0.0f64, |a, b| a.max(*b));
    ok &= report(
        "leading layer vanishes",
        sup_defect <= 1e-8 * sup_sm && solv.abs() <= 1e-10,
        format!("sup defect = {sup_defect:.3e}, solvability = {solv:.3e}"),
    );
    // Dissipation identity on a random BC-consistent trace.
    let mut trace = vec![0.0; grid.len()];
    for idx in grid.negative_v3_indices() {
        trace[idx] = wall.sqrt_m0[idx] * rng.gen_range(-1.0..1.0);
    }
    let dw = crate::knudsen::diffusive_dw(&grid, &wall, &trace);
    for idx in grid.positive_v3_indices() {
        trace[idx] = dw[idx];
    }
    let (res, cross) = boundary_dissipation_check(&grid, &wall, &trace)?;
    ok &= report(
        "boundary dissipation identity",
        res <= 1e-10 && cross.abs() <= 1e-10,
        format!("residual = {res:.3e}, cross term = {cross:.3e}"),
    );
    Ok(ok)
}

fn check_euler() -> Result<bool> {
    let grid = SpatialGrid::new(64, 4.0)?;
    let mut ok = true;
    let (f0, _) = manufactured_state(Profile::Uniform, 0.0, grid)?;
    let f1 = crate::euler::advance_euler(&f0, 1e-3, 0.9)?;
    let drift = f1
        .rho
        .iter()
        .map(|r| (r - 1.0).abs())
        .fold(0.0f64, f64::max);
    ok &= report(
        "constant state preserved",
        drift <= 1e-14,
        format!("max drift = {drift:.3e}"),
    );
    let (mut f, _) = manufactured_state(Profile::GaussDensity, 0.1, grid)?;
    let m0 = f.total_mass();
    for _ in 0..20 {
        let dt = 0.4 * grid.dx() / f.max_signal_speed();
        f = crate::euler::advance_euler(&f, dt, 0.5)?;
    }
    let dm = (f.total_mass() - m0).abs();
    ok &= report(
        "mass conservation",
        dm <= 1e-12 * m0,
        format!("|dM| = {dm:.3e}"),
    );
    ok &= report(
        "positivity bounds",
        f.rho.iter().all(|r| *r > 0.5 && *r < 2.0)
            && f.temp.iter().all(|t| *t > 0.5 && *t < 2.0),
        "within (rho_#/2, 2 rho^#) margins".into(),
    );
    Ok(ok)
}

/// Wall data for external callers needing the matched wall of a field.
pub fn matched_wall(grid_v: &VelocityGrid, euler: &EulerField) -> Result<WallData> {
    WallData::matched(grid_v, &wall_state(euler)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parse_and_validate() {
        let text = "\
# comment
preset = quick
velocity.n = 8
slab.t_end = 0.01
sweep.epsilons = 0.2, 0.1, 0.05
run.seed = 42
";
        let c = RunConfig::parse_str(text).unwrap();
        assert_eq!(c.velocity_n, 8);
        assert_eq!(c.epsilons, vec![0.2, 0.1, 0.05]);
        assert_eq!(c.seed, 42);
        assert!(RunConfig::parse_str("bogus.key = 1").is_err());
        assert!(RunConfig::parse_str("sweep.epsilons = 0.1, 0.2").is_err());
        assert!(RunConfig::parse_str("sweep.epsilons = 1.5").is_err());
        assert!(RunConfig::parse_str("slab.t_end = 0.5").is_err());
    }

    #[test]
    fn rate_fit_synthetic() {
        let make = |f: &dyn Fn(f64) -> f64| -> Vec<SweepRecord> {
            [0.2, 0.1, 0.05]
                .iter()
                .map(|&eps| SweepRecord {
                    eps,
                    sup_l2_vs_maxwellian: f(eps),
                    sup_l2_vs_ansatz: f(eps),
                    sup_weighted_linf: 0.0,
                    sup_boundary_residual: 0.0,
                    scaled_remainder: f(eps) / (eps * eps),
                    runtime_s: 0.0,
                })
                .collect()
        };
        let linear = fit_rate(&make(&|e| 3.0 * e)).unwrap();
        assert!((linear.slope_l2_vs_maxwellian - 1.0).abs() < 1e-12);
        let sqrt = fit_rate(&make(&|e| 2.0 * e.sqrt())).unwrap();
        assert!((sqrt.slope_l2_vs_maxwellian - 0.5).abs() < 1e-12);
        assert!(fit_rate(&make(&|e| e)[..2]).is_err());
    }

    #[test]
    fn emit_round_trip() {
        let dir = std::env::temp_dir().join("boltzslab_emit_test");
        let config = RunConfig::default();
        let report = SweepReport {
            records: vec![SweepRecord {
                eps: 0.1,
                sup_l2_vs_maxwellian: 1.25e-3,
                sup_l2_vs_ansatz: 2.5e-5,
                sup_weighted_linf: 3.0e-3,
                sup_boundary_residual: 1e-12,
                scaled_remainder: 2.5e-3,
                runtime_s: 12.5,
            }],
            rates: None,
        };
        let steps = vec![(
            0.1,
            vec![StepRecord {
                t: 0.0,
                mass: 4.0,
                l2_f: 0.0,
                linf_h: 0.0,
                boundary_residual: 0.0,
            }],
        )];
        emit(&report, &steps, &config, &dir).unwrap();
        let parsed = parse_sweep_csv(&dir.join("sweep.csv")).unwrap();
        assert_eq!(parsed, report.records);
        // Empty report produces a header-only file.
        let empty = SweepReport::default();
        emit(&empty, &[], &config, &dir).unwrap();
        let parsed = parse_sweep_csv(&dir.join("sweep.csv")).unwrap();
        assert!(parsed.is_empty());
        let text = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
        assert!(text.starts_with(SWEEP_CSV_HEADER));
    }

    #[test]
    fn check_suites_pass() {
        assert!(check_suite("euler").unwrap());
        assert!(check_suite("boundary").unwrap());
        assert!(check_suite("collision").unwrap());
        assert!(check_suite("bogus").is_err());
    }
}
