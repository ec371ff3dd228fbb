use std::path::{Path, PathBuf};
use std::time::Instant;

use erlang_lct::approx::FitMethod;
use erlang_lct::ddesolve::{dde_solve, DdeGrid, DdeMethod};
use erlang_lct::integrate::{solve, IntegratorConfig, Method, Output};
use erlang_lct::kernels::{ErlangMixture, KernelSpec};
use erlang_lct::lct::{LctOde, LctSystem};
use erlang_lct::models::{build_model, FissionParams, LogisticParams, ModelInstance, MODEL_IDS};
use erlang_lct::studies::{
    compare_fission, fit_fission_kernels, fit_kernel, run_bifurcation, run_convergence, run_monte_carlo,
    simulate_fission_lct, spearman, BifurcationConfig, Band, ConvergenceConfig, FissionConfig, FitSettings,
    MonteCarloConfig, ReferenceKernel, ScanParameter,
};

use crate::config::{opt, CliError, OptionSpec, Settings};
use crate::output::{num, read_mixture, write_mixture, write_trajectory, Csv, Manifest, Value};

/// One subcommand: its options (flags and config keys) and the CSV layouts
/// shown in `--help`.
pub struct Subcommand {
    pub name: &'static str,
    pub about: &'static str,
    pub outputs: &'static str,
    pub model: bool,
    pub options: &'static [OptionSpec],
    pub run: fn(&mut Run) -> Result<(), CliError>,
}

const OUT: OptionSpec = opt("out", "out", "Output directory (created if missing)");

const FIT_OPTIONS: [OptionSpec; 5] = [
    opt("samples", "auto", "Fit samples N; auto = max(100, 4(M+1))"),
    opt("epsilon", "1e-14", "Tail mass ε defining the horizon t_h"),
    opt("horizon-tol", "1e-15", "Bisection tolerance of the horizon"),
    opt("kkt-tol", "1e-10", "Relative KKT tolerance of the least-squares fit"),
    opt("max-iterations", "500", "Iteration cap of the least-squares fit"),
];

pub const SUBCOMMANDS: [Subcommand; 6] = [
    Subcommand {
        name: "fit-kernel",
        about: "Fit an Erlang mixture to a kernel",
        outputs: "Outputs:\n  mixture.txt   line 1 = rate a, then one coefficient c_m per line\n  kernel.csv    t,alpha,alpha_hat,error   on [0, t_h]\n  manifest.json",
        model: false,
        options: &[
            OUT,
            opt("kernel", "gaussian-halfline", "Kernel spec 'family' or 'family:p1,p2,...' (gaussian-halfline, exponential, folded-normal, folded-normal-sum, precursor, erlang-mixture)"),
            opt("order", "16", "Mixture order M"),
            opt("method", "least-squares", "least-squares or theoretical"),
            opt("csv-points", "1000", "Intervals of kernel.csv"),
            opt("kernel-error-points", "10000", "Points K_α of the kernel error"),
            FIT_OPTIONS[0], FIT_OPTIONS[1], FIT_OPTIONS[2], FIT_OPTIONS[3], FIT_OPTIONS[4],
        ],
        run: cmd_fit_kernel,
    },
    Subcommand {
        name: "simulate-lct",
        about: "Simulate a model through the linear chain trick",
        outputs: "Outputs:\n  trajectory.csv   t,x1..xn,z1..zm   (states, then memory variables)\n  mixture_<i>.txt  fitted mixtures when --mixtures is not given\n  manifest.json",
        model: true,
        options: &[
            OUT,
            opt("model", "", "Model id: logistic-manufactured, logistic-bifurcation or fission"),
            opt("mixtures", "", "Comma-separated mixture files, one per delay; empty = fit the model kernels"),
            opt("order", "32", "Order M of the fitted mixtures"),
            opt("method", "tr-bdf2", "Integrator: explicit-rk, implicit-euler or tr-bdf2"),
            opt("tol", "1e-8", "Integrator tolerance"),
            opt("points", "1000", "Output intervals over [t0, tf]"),
            FIT_OPTIONS[0], FIT_OPTIONS[1], FIT_OPTIONS[2], FIT_OPTIONS[3], FIT_OPTIONS[4],
        ],
        run: cmd_simulate_lct,
    },
    Subcommand {
        name: "simulate-dde",
        about: "Integrate a model directly as a distributed-delay equation",
        outputs: "Outputs:\n  trajectory.csv   t,x1..xn,z1..zm   on the step grid\n  manifest.json",
        model: true,
        options: &[
            OUT,
            opt("model", "", "Model id: logistic-manufactured, logistic-bifurcation or fission"),
            opt("method", "implicit", "explicit or implicit"),
            opt("dt", "auto", "Step Δt; auto = (tf - t0)/10000"),
            opt("dt-h", "auto", "Memory horizon Δt_h; auto = kernel horizon at ε = 1e-12"),
            opt("kernel", "", "Semicolon-separated kernel specs replacing the model kernels"),
        ],
        run: cmd_simulate_dde,
    },
    Subcommand {
        name: "convergence",
        about: "Manufactured-solution convergence study of the logistic model",
        outputs: "Outputs:\n  fits.csv   order,method,rate,horizon,kernel_error,state_error,converged,iterations\n  dde.csv    method,dt,state_error,ratio   (ratio = E_x(previous dt)/E_x(dt))\n  manifest.json   (includes the Spearman correlation of kernel_error and state_error)",
        model: true,
        options: &[
            OUT,
            opt("orders", "4,8,16", "Mixture orders M"),
            opt("methods", "least-squares,theoretical", "Fit methods"),
            opt("ode-tol", "1e-12", "Tolerance of the explicit chain integrator"),
            opt("state-points", "24000", "Points K_x of the state error"),
            opt("kernel-points", "10000", "Points K_α of the kernel error"),
            opt("dde-steps", "0.04,0.02,0.01", "DDE step sizes"),
            opt("dde-methods", "explicit,implicit", "DDE solvers"),
            opt("dde-horizon", "auto", "Memory horizon Δt_h; auto = tf - t0"),
            opt("samples", "100", "Fit samples N; auto = max(100, 4(M+1))"),
            FIT_OPTIONS[1], FIT_OPTIONS[2], FIT_OPTIONS[3], FIT_OPTIONS[4],
        ],
        run: cmd_convergence,
    },
    Subcommand {
        name: "bifurcate",
        about: "Stability scan of the logistic model's steady state",
        outputs: "Outputs:\n  scan.csv              parameter,steady_state,max_real,stable,error\n  spectrum/point_<k>.csv  re,im   (with --spectrum true)\n  simulations.csv       parameter,initial_deviation,final_deviation,decays,departs\n  simulation_<k>.csv    t,x1,z1   (explicit DDE run at the k-th --simulate value)\n  manifest.json",
        model: true,
        options: &[
            OUT,
            opt("parameter", "sigma", "Scan parameter: sigma or mu2"),
            opt("grid", "1:40:40", "Grid as start:stop:count or a comma-separated list"),
            opt("order", "32", "Mixture order M"),
            opt("spectrum", "false", "Write every spectrum"),
            opt("simulate", "2,8", "Parameter values for time simulations (may be empty)"),
            opt("dde-steps", "10000", "Steps of each time simulation"),
            opt("dde-horizon", "auto", "Memory horizon Δt_h; auto = tf - t0"),
            opt("samples", "100", "Fit samples N; auto = max(100, 4(M+1))"),
            FIT_OPTIONS[1], FIT_OPTIONS[2], FIT_OPTIONS[3], FIT_OPTIONS[4],
        ],
        run: cmd_bifurcate,
    },
    Subcommand {
        name: "montecarlo",
        about: "Monte Carlo simulation of the reactor model over the uncertain κ",
        outputs: "Outputs:\n  statistics.csv       t,cn_mean,cn_p025,cn_p975,cn_min,cn_max,rho_mean,rho_p025,rho_p975,rho_min,rho_max\n  samples.csv          index,kappa,status\n  mixture_<g>.txt      fitted precursor mixtures\n  nominal.csv          t,x1..xn,z1..zm   (chain run at the nominal parameters; with --reference)\n  reference.csv        dt,kernel,max_relative_error,e_x1..e_xn   (maximum over time)\n  relative_error.csv   dt,t,e_x1..e_xn   (chain vs implicit DDE, E_r = |x_lct - x_dde|/(1 + |x_dde|))\n  manifest.json",
        model: true,
        options: &[
            OUT,
            opt("samples", "50", "Number of κ samples"),
            opt("seed", "2024", "Seed of the random generator"),
            opt("kappa-mean", "3e-4", "Mean of κ"),
            opt("kappa-sd", "7.5e-5", "Standard deviation of κ"),
            opt("order", "200", "Order M of the precursor mixtures"),
            opt("method", "tr-bdf2", "Integrator: explicit-rk, implicit-euler or tr-bdf2"),
            opt("ode-tol", "1e-8", "Integrator tolerance"),
            opt("output-intervals", "1000", "Output intervals over [t0, tf]"),
            opt("reference", "true", "Compare a nominal chain run with the implicit DDE solver"),
            opt("reference-kernel", "fitted", "Kernels of the DDE reference: fitted or exact"),
            opt("dde-steps", "2e-4,1e-4", "DDE step sizes of the reference"),
            opt("dde-horizon", "auto", "Memory horizon Δt_h; auto = kernel horizon"),
            opt("fit-samples", "auto", "Fit samples N; auto = max(100, 4(M+1))"),
            opt("epsilon", "1e-13", "Tail mass ε defining the horizon t_h"),
            opt("horizon-tol", "1e-14", "Bisection tolerance of the horizon"),
            FIT_OPTIONS[3], FIT_OPTIONS[4],
        ],
        run: cmd_montecarlo,
    },
];

/// State of one invocation: settings, output directory and the manifest
/// being assembled.
pub struct Run {
    pub settings: Settings,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, settings: Settings) -> Self {
        let out = settings.out_dir().to_path_buf();
        let manifest = Manifest {
            command: command.into(),
            status: "running".into(),
            config: settings.echo().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            overrides: settings.overrides.clone(),
            ..Manifest::default()
        };
        Self { settings, out, manifest }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let value = f();
        self.manifest.stages.push((name.into(), start.elapsed().as_secs_f64()));
        value
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.into());
        self.out.join(name)
    }

    fn result(&mut self, key: &str, value: Value) {
        self.manifest.results.push((key.into(), value));
    }

    fn fail(&mut self, what: String) {
        eprintln!("warning: {what}");
        self.manifest.failures.push(what);
    }

    fn fit_settings(&self, samples_key: &str) -> Result<FitSettings, CliError> {
        let s = &self.settings;
        Ok(FitSettings {
            samples: s.auto_usize(samples_key)?,
            epsilon: s.positive("epsilon")?,
            horizon_tol: s.positive("horizon-tol")?,
            kkt_tol: s.positive("kkt-tol")?,
            max_iterations: s.usize("max-iterations")?,
        })
    }
}

fn fit_method(s: &str) -> Option<FitMethod> {
    match s {
        "least-squares" | "ls" => Some(FitMethod::LeastSquares),
        "theoretical" => Some(FitMethod::Theoretical),
        _ => None,
    }
}

fn fit_method_name(m: FitMethod) -> &'static str {
    match m {
        FitMethod::LeastSquares => "least-squares",
        FitMethod::Theoretical => "theoretical",
    }
}

fn ode_method(s: &str) -> Option<Method> {
    match s {
        "explicit-rk" => Some(Method::ExplicitRk),
        "implicit-euler" => Some(Method::ImplicitEuler),
        "tr-bdf2" => Some(Method::TrBdf2),
        _ => None,
    }
}

fn dde_method(s: &str) -> Option<DdeMethod> {
    match s {
        "explicit" => Some(DdeMethod::Explicit),
        "implicit" => Some(DdeMethod::Implicit),
        _ => None,
    }
}

fn dde_method_name(m: DdeMethod) -> &'static str {
    match m {
        DdeMethod::Explicit => "explicit",
        DdeMethod::Implicit => "implicit",
    }
}

fn one<T>(settings: &Settings, key: &str, parse: impl Fn(&str) -> Option<T>, expected: &str) -> Result<T, CliError> {
    parse(settings.get(key)).ok_or_else(|| CliError::Usage(format!("{key} = '{}': expected {expected}", settings.get(key))))
}

fn model_instance(run: &Run) -> Result<ModelInstance, CliError> {
    let id = run.settings.get("model");
    if !MODEL_IDS.contains(&id) {
        let shown = if id.is_empty() { "(none)" } else { id };
        return Err(CliError::Usage(format!("unknown model id {shown}; expected one of {}", MODEL_IDS.join(", "))));
    }
    build_model(id, &run.settings.overrides).map_err(|e| CliError::Usage(e.to_string()))
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_fit_kernel(run: &mut Run) -> Result<(), CliError> {
    let s = &run.settings;
    let kernel = KernelSpec::parse(s.get("kernel")).map_err(|e| CliError::Usage(e.to_string()))?;
    let order = s.usize("order")?;
    let method = one(s, "method", fit_method, "least-squares or theoretical")?;
    let csv_points = s.usize("csv-points")?.max(1);
    let error_points = s.usize("kernel-error-points")?.max(2);
    let fit = run.fit_settings("samples")?;
    let (h, result) = run
        .stage("fit", || fit_kernel(&kernel, order, method, &fit))
        .map_err(CliError::failed)?;
    let mixture = &result.mixture;
    let e_alpha = erlang_lct::approx::kernel_error(mixture, &kernel, error_points, h.t_h);
    let path = run.path("mixture.txt");
    write_mixture(&path, mixture)?;
    let path = run.path("kernel.csv");
    let mut csv = Csv::create(&path, &["t", "alpha", "alpha_hat", "error"])?;
    for k in 0..=csv_points {
        let t = h.t_h * k as f64 / csv_points as f64;
        let (exact, approx) = (kernel.density(t), mixture.eval(t));
        csv.numbers(&[t, exact, approx, approx - exact])?;
    }
    csv.finish()?;
    run.result("rate", Value::Num(mixture.rate()));
    run.result("horizon", Value::Num(h.t_h));
    run.result("objective", Value::Num(result.objective));
    run.result("kernel_error", Value::Num(e_alpha));
    run.result("converged", Value::Bool(result.report.converged));
    run.result("iterations", Value::Int(result.report.iterations as i64));
    if !result.report.converged {
        run.fail(format!("fit did not converge (KKT residual {:e})", result.report.kkt_residual));
    }
    Ok(())
}

fn cmd_simulate_lct(run: &mut Run) -> Result<(), CliError> {
    let instance = model_instance(run)?;
    let s = &run.settings;
    let method = one(s, "method", ode_method, "explicit-rk, implicit-euler or tr-bdf2")?;
    let tol = s.positive("tol")?;
    let points = s.usize("points")?.max(1);
    let files: Vec<String> = s.list("mixtures", |p| Some(p.to_string()))?;
    let nz = instance.model.nz();
    let mixtures: Vec<ErlangMixture> = if files.is_empty() {
        let order = s.usize("order")?;
        let fit = run.fit_settings("samples")?;
        let fits = run.stage("fit", || {
            instance
                .kernels
                .iter()
                .map(|k| fit_kernel(k, order, FitMethod::LeastSquares, &fit))
                .collect::<Result<Vec<_>, _>>()
        });
        let fits = fits.map_err(CliError::failed)?;
        let mut mixtures = Vec::new();
        for (i, (_, f)) in fits.into_iter().enumerate() {
            if !f.report.converged {
                run.fail(format!("fit of kernel {} did not converge", i + 1));
            }
            let path = run.path(&format!("mixture_{}.txt", i + 1));
            write_mixture(&path, &f.mixture)?;
            mixtures.push(f.mixture);
        }
        mixtures
    } else {
        if files.len() != nz {
            return Err(CliError::Usage(format!(
                "model {} has {nz} delay(s) but {} mixture file(s) were given",
                instance.id,
                files.len()
            )));
        }
        files.iter().map(|f| read_mixture(Path::new(f))).collect::<Result<_, _>>()?
    };
    let lct = LctSystem::new(mixtures).map_err(CliError::failed)?;
    let traj = run.stage("simulate", || -> Result<_, String> {
        let ode = LctOde::new(instance.model.as_ref(), &lct).map_err(|e| e.to_string())?;
        let y0 = ode.initial_state().map_err(|e| e.to_string())?;
        let cfg = IntegratorConfig::new(method, tol);
        solve(&ode, &y0, instance.t0, instance.tf, &cfg, &Output::uniform(instance.t0, instance.tf, points))
            .map_err(|e| e.to_string())
    });
    let traj = traj.map_err(CliError::Failed)?;
    let path = run.path("trajectory.csv");
    write_trajectory(&path, &traj, instance.model.nx(), nz)?;
    run.result("model", Value::Str(instance.id.clone()));
    run.result("chain_states", Value::Int(lct.dim() as i64));
    run.result("steps", Value::Int(traj.stats.accepted as i64));
    Ok(())
}

fn cmd_simulate_dde(run: &mut Run) -> Result<(), CliError> {
    let instance = model_instance(run)?;
    let s = &run.settings;
    let method = one(s, "method", dde_method, "explicit or implicit")?;
    let dt = s.auto_positive("dt")?.unwrap_or((instance.tf - instance.t0) / 10_000.0);
    let dt_h = s.auto_positive("dt-h")?;
    let kernels: Vec<KernelSpec> = if s.get("kernel").trim().is_empty() {
        instance.kernels.clone()
    } else {
        s.get("kernel")
            .split(';')
            .map(|k| KernelSpec::parse(k.trim()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(e.to_string()))?
    };
    let nz = instance.model.nz();
    if kernels.len() != nz {
        return Err(CliError::Usage(format!(
            "model {} has {nz} delay(s) but {} kernel(s) were given",
            instance.id,
            kernels.len()
        )));
    }
    let grid = match dt_h {
        Some(h) => DdeGrid::new(kernels, dt, h),
        None => DdeGrid::with_default_horizon(kernels, dt),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let horizon = grid.horizon();
    let traj = run
        .stage("simulate", || dde_solve(instance.model.as_ref(), &grid, instance.tf, method))
        .map_err(CliError::failed)?;
    let path = run.path("trajectory.csv");
    write_trajectory(&path, &traj, instance.model.nx(), nz)?;
    run.result("model", Value::Str(instance.id.clone()));
    run.result("dt", Value::Num(dt));
    run.result("memory_horizon", Value::Num(horizon));
    Ok(())
}

fn cmd_convergence(run: &mut Run) -> Result<(), CliError> {
    let s = &run.settings;
    let params = LogisticParams::with_overrides(&s.overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = ConvergenceConfig {
        params,
        orders: s.list("orders", |v| v.parse().ok())?,
        methods: s.list("methods", fit_method)?,
        fit: run.fit_settings("samples")?,
        ode_tol: s.positive("ode-tol")?,
        state_points: s.usize("state-points")?.max(1),
        kernel_points: s.usize("kernel-points")?.max(2),
        dde_steps: s.f64_list("dde-steps")?,
        dde_methods: s.list("dde-methods", dde_method)?,
        dde_horizon: s.auto_positive("dde-horizon")?,
    };
    if cfg.dde_steps.iter().any(|dt| *dt <= 0.0) {
        return Err(CliError::Usage("dde-steps must be positive".into()));
    }
    let report = run.stage("convergence", || run_convergence(&cfg));
    let path = run.path("fits.csv");
    let mut csv = Csv::create(
        &path,
        &["order", "method", "rate", "horizon", "kernel_error", "state_error", "converged", "iterations"],
    )?;
    for r in &report.fits {
        csv.record(&[
            r.order.to_string(),
            fit_method_name(r.method).into(),
            num(r.rate),
            num(r.horizon),
            num(r.kernel_error),
            num(r.state_error),
            r.converged.to_string(),
            r.iterations.to_string(),
        ])?;
    }
    csv.finish()?;
    let path = run.path("dde.csv");
    let mut csv = Csv::create(&path, &["method", "dt", "state_error", "ratio"])?;
    for method in &cfg.dde_methods {
        let mut previous: Option<f64> = None;
        for r in report.dde.iter().filter(|r| r.method == *method) {
            let ratio = previous.map(|p| num(p / r.state_error)).unwrap_or_default();
            csv.record(&[dde_method_name(r.method).into(), num(r.dt), num(r.state_error), ratio])?;
            previous = Some(r.state_error);
        }
    }
    csv.finish()?;
    if report.fits.len() >= 2 {
        let ea: Vec<f64> = report.fits.iter().map(|r| r.kernel_error).collect();
        let ex: Vec<f64> = report.fits.iter().map(|r| r.state_error).collect();
        run.result("spearman_kernel_state", Value::Num(spearman(&ea, &ex)));
    }
    for f in report.failures {
        run.fail(f);
    }
    Ok(())
}

fn cmd_bifurcate(run: &mut Run) -> Result<(), CliError> {
    let s = &run.settings;
    let params = LogisticParams::with_overrides(&s.overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    let parameter: ScanParameter = s.get("parameter").parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    let cfg = BifurcationConfig {
        params,
        parameter,
        grid: s.grid("grid")?,
        order: s.usize("order")?,
        fit: run.fit_settings("samples")?,
        keep_spectrum: s.bool("spectrum")?,
        simulate: s.f64_list("simulate")?,
        dde_steps: s.usize("dde-steps")?.max(1),
        dde_horizon: s.auto_positive("dde-horizon")?,
    };
    let report = run.stage("scan", || run_bifurcation(&cfg)).map_err(CliError::failed)?;
    let path = run.path("scan.csv");
    let mut csv = Csv::create(&path, &["parameter", "steady_state", "max_real", "stable", "error"])?;
    for p in &report.points {
        let steady = p.steady_state.as_ref().map(|x| num(x[0])).unwrap_or_default();
        let (max_real, stable) = match p.max_real {
            Some(r) => (num(r), (r < 0.0).to_string()),
            None => (String::new(), String::new()),
        };
        let error = p.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        csv.record(&[num(p.parameter), steady, max_real, stable, error])?;
    }
    csv.finish()?;
    if cfg.keep_spectrum {
        create_out_dir(&run.out.join("spectrum"))?;
        for (k, p) in report.points.iter().enumerate() {
            if let Some(eigs) = &p.eigenvalues {
                let path = run.path(&format!("spectrum/point_{k}.csv"));
                let mut csv = Csv::create(&path, &["re", "im"])?;
                for l in eigs {
                    csv.numbers(&[l.re, l.im])?;
                }
                csv.finish()?;
            }
        }
    }
    if !cfg.simulate.is_empty() {
        let path = run.path("simulations.csv");
        let mut csv = Csv::create(
            &path,
            &["parameter", "initial_deviation", "final_deviation", "decays", "departs"],
        )?;
        for r in &report.runs {
            csv.record(&[
                num(r.parameter),
                num(r.initial_deviation),
                num(r.final_deviation),
                r.decays().to_string(),
                r.departs().to_string(),
            ])?;
        }
        csv.finish()?;
        for (k, r) in report.runs.iter().enumerate() {
            let path = run.path(&format!("simulation_{k}.csv"));
            write_trajectory(&path, &r.trajectory, 1, 1)?;
        }
    }
    run.result("sign_changes", Value::Int(report.sign_changes() as i64));
    for f in report.failures {
        run.fail(f);
    }
    Ok(())
}

fn cmd_montecarlo(run: &mut Run) -> Result<(), CliError> {
    let s = &run.settings;
    let params = FissionParams::with_overrides(&s.overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = FissionConfig {
        params,
        order: s.usize("order")?,
        fit: run.fit_settings("fit-samples")?,
        ode_tol: s.positive("ode-tol")?,
        method: one(s, "method", ode_method, "explicit-rk, implicit-euler or tr-bdf2")?,
        output_intervals: s.usize("output-intervals")?.max(1),
        dde_steps: s.f64_list("dde-steps")?,
        dde_horizon: s.auto_positive("dde-horizon")?,
    };
    let mc = MonteCarloConfig {
        samples: s.usize("samples")?,
        seed: s.u64("seed")?,
        kappa_mean: s.f64("kappa-mean")?,
        kappa_sd: s.f64("kappa-sd")?,
    };
    if mc.samples == 0 {
        return Err(CliError::Usage("samples must be at least 1".into()));
    }
    if mc.kappa_sd < 0.0 {
        return Err(CliError::Usage("kappa-sd must be nonnegative".into()));
    }
    let reference = s.bool("reference")?;
    let reference_kernel = one(
        s,
        "reference-kernel",
        |v| match v {
            "fitted" => Some(ReferenceKernel::Fitted),
            "exact" => Some(ReferenceKernel::Exact),
            _ => None,
        },
        "fitted or exact",
    )?;
    if reference && cfg.dde_steps.iter().any(|dt| *dt <= 0.0) {
        return Err(CliError::Usage("dde-steps must be positive".into()));
    }

    let fits = run.stage("fit", || fit_fission_kernels(&cfg)).map_err(CliError::failed)?;
    let mut mixtures = Vec::new();
    for (g, (_, f)) in fits.into_iter().enumerate() {
        if !f.report.converged {
            run.fail(format!("fit of precursor kernel {} did not converge", g + 1));
        }
        let path = run.path(&format!("mixture_{}.txt", g + 1));
        write_mixture(&path, &f.mixture)?;
        mixtures.push(f.mixture);
    }

    let report = run
        .stage("monte-carlo", || run_monte_carlo(&cfg, &mc, &mixtures))
        .map_err(CliError::failed)?;
    let path = run.path("statistics.csv");
    let mut header = vec!["t".to_string()];
    for state in ["cn", "rho"] {
        for stat in ["mean", "p025", "p975", "min", "max"] {
            header.push(format!("{state}_{stat}"));
        }
    }
    let mut csv = Csv::create(&path, &header)?;
    let columns = |b: &Band, k: usize| [b.mean[k], b.p025[k], b.p975[k], b.min[k], b.max[k]];
    for (k, t) in report.times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(columns(&report.neutrons, k));
        row.extend(columns(&report.reactivity, k));
        csv.numbers(&row)?;
    }
    csv.finish()?;
    let path = run.path("samples.csv");
    let mut csv = Csv::create(&path, &["index", "kappa", "status"])?;
    for (i, kappa) in report.kappas.iter().enumerate() {
        let status = if report.failures.iter().any(|(j, _)| *j == i) { "failed" } else { "ok" };
        csv.record(&[i.to_string(), num(*kappa), status.to_string()])?;
    }
    csv.finish()?;
    run.result("seed", Value::Int(mc.seed as i64));
    run.result("failed_samples", Value::Int(report.failures.len() as i64));
    for (i, e) in &report.failures {
        run.fail(format!("sample {i}: {e}"));
    }

    if reference {
        let nominal = run
            .stage("nominal", || simulate_fission_lct(&cfg, &cfg.params, &mixtures))
            .map_err(CliError::failed)?;
        let model = cfg.params.model();
        let (nx, nz) = (erlang_lct::lct::Model::nx(&model), erlang_lct::lct::Model::nz(&model));
        let path = run.path("nominal.csv");
        write_trajectory(&path, &nominal, nx, nz)?;
        let rows = run
            .stage("reference", || compare_fission(&cfg, &nominal, &mixtures, reference_kernel))
            .map_err(CliError::failed)?;
        let kernel_name = match reference_kernel {
            ReferenceKernel::Fitted => "fitted",
            ReferenceKernel::Exact => "exact",
        };
        let state_columns: Vec<String> = (1..=nx).map(|i| format!("e_x{i}")).collect();
        let path = run.path("reference.csv");
        let mut header: Vec<String> = vec!["dt".into(), "kernel".into(), "max_relative_error".into()];
        header.extend(state_columns.iter().cloned());
        let mut csv = Csv::create(&path, &header)?;
        for r in &rows {
            let mut fields = vec![num(r.dt), kernel_name.to_string(), num(r.max_relative_diff)];
            fields.extend(r.per_state.iter().map(|v| num(*v)));
            csv.record(&fields)?;
        }
        csv.finish()?;
        let path = run.path("relative_error.csv");
        let mut header: Vec<String> = vec!["dt".into(), "t".into()];
        header.extend(state_columns);
        let mut csv = Csv::create(&path, &header)?;
        let times = cfg.output_times();
        for r in &rows {
            for (t, e) in times.iter().zip(&r.rows) {
                let mut row = vec![r.dt, *t];
                row.extend_from_slice(e);
                csv.numbers(&row)?;
            }
        }
        csv.finish()?;
        for (r, next) in rows.iter().zip(rows.iter().skip(1)) {
            run.result(
                &format!("error_ratio_dt_{}_over_{}", r.dt, next.dt),
                Value::Num(r.max_relative_diff / next.max_relative_diff),
            );
        }
    }
    Ok(())
}
