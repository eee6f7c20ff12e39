//! Pipeline stages. Each stage reads only the artifacts of earlier stages,
//! checks their recorded stage hashes, and writes its own artifacts with
//! `.meta.json` sidecars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{s, Array1, Array2, ArrayView2};
use serde::Serialize;

use crate::config::{HoldoutRegion, PipelineConfig, RegressionInit, StageHashes};
use crate::dataset::{min_potential, select_representative, threshold_subset};
use crate::decomposition::{init_model, mean_abs_cosine, train as train_model, TrainRecord, TrainState};
use crate::dynamics::SnapshotDataset;
use crate::evaluation::{evaluate_holdout, landscape_compare, ErrorSummary, LandscapeDiscrepancy};
use crate::io::{self, Meta};
use crate::quasipotential::{
    archetypal_exact, density_grid, hj_residual, local_minima, normalization_closed_form, normalization_quadrature,
    LocalMinimum, QuarticQuadraticForm, ResidualSummary, SymbolicModel,
};
use crate::sparse::{build_constraints, init_coefficients, library_subset_mask, sr3_solve, CoefficientBlock, PolynomialLibrary};
use crate::{Error, Result};

/// Artifact locations under the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.qpds")
    }
    pub fn dataset_csv(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.qpnn")
    }
    pub fn telemetry(&self) -> PathBuf {
        self.root.join("telemetry.csv")
    }
    pub fn subset(&self) -> PathBuf {
        self.root.join("subset.csv")
    }
    pub fn coefficients(&self) -> PathBuf {
        self.root.join("coefficients.txt")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Configuration plus the options shared by every stage.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub hashes: StageHashes,
    pub layout: Layout,
    /// Accept upstream artifacts whose stage hash differs from the config's.
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            hashes: config.hashes(),
            config,
            layout: Layout::new(out),
            force,
        }
    }

    fn meta(&self, stage: &str, stage_hash: &str, seed: u64, details: serde_json::Value) -> Meta {
        Meta {
            stage: stage.into(),
            config_hash: self.hashes.config.clone(),
            stage_hash: stage_hash.into(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            details,
        }
    }

    fn emit(&self, path: &Path, bytes: &[u8], meta: &Meta) -> Result<()> {
        io::write_bytes(path, bytes)?;
        io::write_meta(path, meta)
    }

    fn checked(&self, path: &Path, expected: &str) -> Result<Meta> {
        let meta = io::check_hash(path, expected, self.force)?;
        if meta.stage_hash != expected {
            warn!("{}: stage hash {} differs from the configuration ({expected}); continuing because of --force", path.display(), meta.stage_hash);
        }
        Ok(meta)
    }

    /// Loads the dataset after checking it was sampled under this configuration.
    pub fn load_dataset(&self) -> Result<SnapshotDataset<f64>> {
        let path = self.layout.dataset();
        self.checked(&path, &self.hashes.sample)?;
        Ok(io::read_dataset(&path)?.1)
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<TrainState<f64>> {
        self.checked(path, &self.hashes.train)?;
        io::read_checkpoint(path)
    }

    /// Accepts any checkpoint from the same training trajectory, whatever its step budget.
    fn load_resume_point(&self, path: &Path) -> Result<TrainState<f64>> {
        let meta = io::read_meta(path)?;
        if meta.details.get("run_hash").and_then(|v| v.as_str()) == Some(self.hashes.train_run.as_str()) {
            return io::read_checkpoint(path);
        }
        self.load_checkpoint(path)
    }

    pub fn load_coefficients(&self) -> Result<(SymbolicModel<f64>, Meta)> {
        let path = self.layout.coefficients();
        let meta = self.checked(&path, &self.hashes.regress)?;
        let file = io::parse_coefficients(&io::read_text(&path)?, &path)?;
        Ok((SymbolicModel::new(file.library, file.block, file.variables)?, meta))
    }

    pub fn sample(&self) -> Result<SnapshotDataset<f64>> {
        let plan = self.config.sampling_plan();
        let system = self.config.system();
        info!("sampling {} trajectories x {} snapshots of the {} system", plan.trajectories, plan.snapshots, system.name());
        let ds = crate::dynamics::sample_trajectories(&system, &plan)?;
        let details = serde_json::json!({ "pairs": ds.len(), "config": &self.config });
        let meta = self.meta("sample", &self.hashes.sample, plan.seed, details);
        self.emit(&self.layout.dataset(), &io::encode_dataset(&ds), &meta)?;
        self.emit(&self.layout.dataset_csv(), io::dataset_csv(&ds).as_bytes(), &meta)?;
        info!("wrote {} pairs to {}", ds.len(), self.layout.dataset().display());
        Ok(ds)
    }

    /// Trains from scratch or from `resume`, writing a checkpoint every
    /// `checkpoint_every` steps and at the end.
    pub fn train(&self, resume: Option<&Path>) -> Result<TrainState<f64>> {
        let ds = self.load_dataset()?;
        let t = &self.config.training;
        let subset = select_representative(ds.x0.view(), t.subset_radius, self.config.seed_for("subset"))?;
        info!("representative subset: {} of {} states (r = {})", subset.len(), ds.len(), t.subset_radius);
        let cfg = self.config.train_config();
        let (mut state, mut history) = match resume {
            Some(path) => {
                let state = self.load_resume_point(path)?;
                let history = self.previous_telemetry(state.step);
                info!("resuming from step {} ({} telemetry rows kept)", state.step, history.len());
                (state, history)
            }
            None => {
                let model = init_model(&ds, &self.config.network.v_hidden, &self.config.network.g_hidden, self.config.seed_for("init"))?;
                (TrainState::new(model), Vec::new())
            }
        };
        let names = self.config.system().variable_names();
        let subset_meta = self.meta("train", &self.hashes.train, cfg.seed, serde_json::json!({ "radius": t.subset_radius, "size": subset.len() }));
        self.emit(&self.layout.subset(), io::states_csv(subset.points.view(), &names).as_bytes(), &subset_meta)?;

        let every = if t.checkpoint_every == 0 { cfg.steps.max(1) } else { t.checkpoint_every };
        let report_every = (cfg.steps / 20).max(1);
        loop {
            let target = ((state.step / every + 1) * every).min(cfg.steps);
            let mut chunk = cfg.clone();
            chunk.steps = target;
            let outcome = train_model(state, &ds, &subset, &chunk, |r: &TrainRecord| {
                if r.step.is_multiple_of(report_every) {
                    info!("step {:>7}  data {:.4e}  orth {:.4e}  lr {:.3e}", r.step, r.data_loss, r.orth_loss, r.lr);
                }
            })?;
            state = outcome.state;
            history.extend(outcome.history);
            self.write_training(&state, &history, &cfg)?;
            if let Some(step) = outcome.diverged_at {
                return Err(Error::NonFinite {
                    context: format!("training diverged at step {step}; last finite state saved to {}", self.layout.checkpoint().display()),
                    state: Vec::new(),
                });
            }
            if state.step >= cfg.steps {
                break;
            }
        }
        info!("mean |cos(grad V, g)| on the subset: {:.3e}", mean_abs_cosine(&state.model, subset.points.view()));
        Ok(state)
    }

    fn previous_telemetry(&self, upto: u64) -> Vec<TrainRecord> {
        let path = self.layout.telemetry();
        let run_hash = |m: &Meta| m.details.get("run_hash").and_then(|v| v.as_str()).map(String::from);
        let fresh = io::read_meta(&path).is_ok_and(|m| run_hash(&m).as_deref() == Some(self.hashes.train_run.as_str()));
        let rows = fresh.then(|| io::read_text(&path).and_then(|t| io::parse_telemetry(&t, &path)).ok()).flatten();
        match rows {
            Some(rows) => rows.into_iter().filter(|r| r.step < upto).collect(),
            None => {
                warn!("no matching telemetry for steps before {upto}; the new file starts at the resume point");
                Vec::new()
            }
        }
    }

    fn write_training(&self, state: &TrainState<f64>, history: &[TrainRecord], cfg: &crate::decomposition::TrainConfig) -> Result<()> {
        let last = history.last();
        let details = serde_json::json!({
            "step": state.step,
            "run_hash": self.hashes.train_run,
            "data_loss": last.map(|r| r.data_loss),
            "orth_loss": last.map(|r| r.orth_loss),
        });
        let meta = self.meta("train", &self.hashes.train, cfg.seed, details);
        self.emit(&self.layout.checkpoint(), &io::encode_checkpoint(state, true), &meta)?;
        self.emit(&self.layout.telemetry(), io::telemetry_csv(history).as_bytes(), &meta)
    }

    /// Sparse symbolic regression on the sub-level set `{V_θ < min V_θ + offset}`.
    pub fn regress(&self) -> Result<Regression> {
        let ds = self.load_dataset()?;
        let state = self.load_checkpoint(&self.layout.checkpoint())?;
        let model = &state.model;
        let r = &self.config.regression;
        let potential = |x: ArrayView2<f64>| model.potential_batch(x).to_vec();
        let v_min = min_potential(potential, &ds)?;
        let subset = threshold_subset(&ds, potential, v_min + r.threshold_offset)?;
        info!("regression subset: {} of {} states with V < {:.6e}", subset.states.nrows(), ds.len(), subset.tau);

        let d = ds.dim();
        let lib = PolynomialLibrary::new(d, self.config.library_degree());
        let x = subset.states.view();
        let theta = lib.eval(x)?;
        let mut targets = Array2::zeros((x.nrows(), 2 * d + 1));
        targets.slice_mut(s![.., ..d]).assign(&model.field_batch(x));
        let shift = if r.shift_potential { v_min } else { 0.0 };
        targets.column_mut(d).assign(&model.potential_batch(x).mapv(|v| v - shift));
        targets.slice_mut(s![.., d + 1..]).assign(&model.circulation_batch(x));

        let mut sr3 = self.config.sr3_config();
        let mask = library_subset_mask(&lib, r.v_degree, r.g_degree);
        let restricted = mask.iter().any(|m| !m);
        if restricted {
            sr3.sparsity_mask = Some(mask.clone());
        }
        let constraints = build_constraints(&lib, restricted.then_some(mask.view()))?;
        let init = match r.init {
            RegressionInit::Decoupled => init_coefficients(&lib, theta.view(), targets.column(d), targets.slice(s![.., d + 1..]), &sr3)?.xi,
            RegressionInit::Zero => Array2::zeros((lib.len(), 2 * d + 1)),
        };
        let result = sr3_solve(theta.view(), targets.view(), &constraints, &sr3, init.view())?;
        if !result.converged {
            warn!("SR3 stopped after {} iterations without meeting tol = {:e}", result.iterations, sr3.tol);
        }
        let (iterations, converged) = (result.iterations, result.converged);
        let block = result.into_block(d)?;
        if block.v().iter().all(|c| *c == 0.0) && block.g().iter().all(|c| *c == 0.0) {
            warn!("every potential and circulation coefficient was thresholded to zero; lambda = {} may be too large", sr3.lambda);
        }
        let names = self.config.system().variable_names();
        let symbolic = SymbolicModel::new(lib, block, names)?;
        let text = io::coefficients_text(symbolic.library(), symbolic.block(), symbolic.variables(), &self.hashes.regress);
        let out = Regression {
            model: symbolic,
            v_min,
            tau: subset.tau,
            subset_size: subset.states.nrows(),
            iterations,
            converged,
        };
        let details = serde_json::json!({
            "v_min": v_min,
            "tau": out.tau,
            "subset_size": out.subset_size,
            "iterations": iterations,
            "converged": converged,
        });
        let meta = self.meta("regress", &self.hashes.regress, self.config.run.seed, details);
        self.emit(&self.layout.coefficients(), text.as_bytes(), &meta)?;
        info!("U = {}", out.model.quasipotential_string());
        Ok(out)
    }

    /// Residuals, holdout prediction, normalization constants, densities,
    /// minima and (for the archetypal system) the exact-landscape comparison.
    pub fn analyze(&self) -> Result<Report> {
        let (model, coef_meta) = self.load_coefficients()?;
        let cfg = &self.config;
        let a = &cfg.analysis;
        let system = cfg.system();
        let omega = cfg.domain();
        let d = omega.dim();
        let dir = self.layout.report();
        let meta = |details: serde_json::Value| self.meta("analyze", &self.hashes.analyze, cfg.run.seed, details);

        let mut rng = crate::rng::stream(cfg.seed_for("residual"), 0);
        let mut pts = Array2::zeros((a.residual_points, d));
        for mut row in pts.rows_mut() {
            row.assign(&Array1::from(omega.sample::<f64, _>(&mut rng)));
        }
        let residuals = if a.residual_points > 0 {
            Some(hj_residual(&model, pts.view(), Some(&system))?.summary)
        } else {
            None
        };

        let plan = cfg.sampling_plan();
        let holdout_seed = cfg.seed_for("holdout");
        let report = match a.holdout_region {
            HoldoutRegion::Domain => evaluate_holdout(&system, &model, &plan, a.holdout_count, holdout_seed, &|_: &[f64]| true, 3)?,
            HoldoutRegion::Sublevel => {
                let net = self.load_checkpoint(&self.layout.checkpoint())?.model;
                let tau = coef_meta.details.get("tau").and_then(|v| v.as_f64()).ok_or_else(|| Error::Format {
                    path: io::meta_path(&self.layout.coefficients()),
                    offset: 0,
                    msg: "missing details.tau".into(),
                })?;
                let inside = move |x: &[f64]| net.potential(x).is_ok_and(|v| v < tau);
                evaluate_holdout(&system, &model, &plan, a.holdout_count, holdout_seed, &inside, 3)?
            }
        };
        if report.failures > 0 {
            warn!("{} identified trajectories blew up and were excluded", report.failures);
        }
        let names = model.variables().to_vec();
        for (k, pair) in report.examples.iter().enumerate() {
            self.emit(&dir.join(format!("holdout_{k}.csv")), pair.to_csv(&names).as_bytes(), &meta(serde_json::Value::Null))?;
        }
        self.emit(&dir.join("holdout_errors.csv"), report.summary.to_csv().as_bytes(), &meta(serde_json::Value::Null))?;

        let u = |x: ArrayView2<f64>| model.quasipotential_batch(x);
        let search = omega.scaled(a.search_factor);
        let form = QuarticQuadraticForm::from_model(&model, 0.0).ok();
        let mut z_rows = Vec::new();
        for &eps in &a.eps {
            let quad = normalization_quadrature(&u, eps, &search, a.quadrature_intervals)?;
            if quad.reached_search_boundary {
                warn!("eps = {eps}: the Boltzmann weight is not negligible at the quadrature box boundary");
            }
            let closed = form.as_ref().map(|f| normalization_closed_form(f, eps)).transpose()?;
            z_rows.push(ZRow {
                eps,
                quadrature: quad.z,
                richardson_rel: quad.richardson_rel,
                closed_form: closed.map(|c| c.z),
            });
            let grid = density_grid(&u, eps, quad.ln_z, &omega, a.grid_resolution, &[0, 1], cfg.projection())?;
            let stem = format!("density_eps_{eps:e}");
            let title = format!("p(x) for eps = {eps:e}");
            let m = meta(serde_json::json!({ "eps": eps, "ln_z": quad.ln_z }));
            self.emit(&dir.join(format!("{stem}.csv")), grid.to_csv()?.as_bytes(), &m)?;
            self.emit(&dir.join(format!("{stem}.svg")), grid.to_svg(&title)?.as_bytes(), &m)?;
        }

        let minima = local_minima(&model, &omega, a.minima_starts)?;
        let landscape = match cfg.system.name {
            crate::config::SystemName::Archetypal => {
                let exact = archetypal_exact();
                let ue = |x: ArrayView2<f64>| exact.quasipotential_batch(x);
                Some(landscape_compare(&u, &ue, &omega, 41, None)?)
            }
            crate::config::SystemName::Resonator => None,
        };

        let out = Report {
            config_hash: self.hashes.config.clone(),
            quasipotential: model.quasipotential_string(),
            residuals,
            holdout: report.summary,
            holdout_failures: report.failures,
            z: z_rows,
            minima,
            landscape,
        };
        self.emit(&dir.join("summary.txt"), out.summary_text(&model).as_bytes(), &meta(serde_json::Value::Null))?;
        self.emit(&dir.join("z_table.csv"), out.z_csv().as_bytes(), &meta(serde_json::Value::Null))?;
        self.emit(&dir.join("minima.csv"), out.minima_csv(&names).as_bytes(), &meta(serde_json::Value::Null))?;
        info!("report written to {}", dir.display());
        Ok(out)
    }

    pub fn run(&self, resume: Option<&Path>) -> Result<Report> {
        self.sample()?;
        self.train(resume)?;
        self.regress()?;
        self.analyze()
    }
}

#[derive(Debug, Clone)]
pub struct Regression {
    pub model: SymbolicModel<f64>,
    pub v_min: f64,
    pub tau: f64,
    pub subset_size: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl Regression {
    pub fn block(&self) -> &CoefficientBlock<f64> {
        self.model.block()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZRow {
    pub eps: f64,
    pub quadrature: f64,
    pub richardson_rel: f64,
    pub closed_form: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config_hash: String,
    pub quasipotential: String,
    pub residuals: Option<ResidualSummary>,
    pub holdout: ErrorSummary,
    pub holdout_failures: usize,
    pub z: Vec<ZRow>,
    pub minima: Vec<LocalMinimum>,
    pub landscape: Option<LandscapeDiscrepancy>,
}

/// `x` with four significant digits.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{x:.*}", (3 - mag).max(0) as usize)
    } else {
        format!("{x:.3e}")
    }
}

impl Report {
    pub fn summary_text(&self, model: &SymbolicModel<f64>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash {}", self.config_hash);
        let _ = writeln!(s, "\nU = {}", self.quasipotential);
        for (i, e) in model.gradient_strings().iter().enumerate() {
            let _ = writeln!(s, "dV/d{} = {e}", model.variables()[i]);
        }
        for (i, e) in model.circulation_strings().iter().enumerate() {
            let _ = writeln!(s, "g{} = {e}", i + 1);
        }
        if let Some(r) = &self.residuals {
            let _ = writeln!(s, "\nresiduals (true field)");
            let _ = writeln!(s, "  mean |r1| {:.3e}  max |r1| {:.3e}", r.mean_abs_r1, r.max_abs_r1);
            let _ = writeln!(s, "  mean |r2| {:.3e}  max |r2| {:.3e}", r.mean_abs_r2, r.max_abs_r2);
            let _ = writeln!(s, "  mean |cos| {:.3e}", r.mean_abs_cosine);
        }
        let _ = writeln!(s, "\nholdout prediction error {}", self.holdout.display());
        if self.holdout_failures > 0 {
            let _ = writeln!(s, "  diverged predictions: {}", self.holdout_failures);
        }
        let _ = writeln!(s, "\nnormalization constants");
        let _ = writeln!(s, "  {:>10}  {:>12}  {:>12}", "eps", "quadrature", "closed form");
        for z in &self.z {
            let closed = z.closed_form.map_or_else(|| "-".to_string(), sig4);
            let _ = writeln!(s, "  {:>10}  {:>12}  {:>12}", format!("{:e}", z.eps), sig4(z.quadrature), closed);
        }
        let _ = writeln!(s, "\nlocal minima of U ({})", self.minima.len());
        for m in &self.minima {
            let p: Vec<String> = m.point.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "  ({})  U = {:.4e}", p.join(", "), m.quasipotential);
        }
        if let Some(l) = &self.landscape {
            let _ = writeln!(s, "\nexact landscape comparison: max |dU| {:.3e}, rms {:.3e} over {} points", l.max_abs, l.rms, l.points);
        }
        s
    }

    pub fn z_csv(&self) -> String {
        let mut s = String::from("eps,z_quadrature,richardson_rel,z_closed_form\n");
        for z in &self.z {
            let closed = z.closed_form.map_or_else(String::new, |c| format!("{c:e}"));
            let _ = writeln!(s, "{:e},{:e},{:e},{closed}", z.eps, z.quadrature, z.richardson_rel);
        }
        s
    }

    pub fn minima_csv(&self, names: &[String]) -> String {
        let mut s = names.join(",");
        s.push_str(",U\n");
        for m in &self.minima {
            let cells: Vec<String> = m.point.iter().chain(std::iter::once(&m.quasipotential)).map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}
