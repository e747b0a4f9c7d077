//! The five subcommands as library functions. Each writes its tables plus a
//! `manifest.json` into an output directory and returns the in-memory results.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use panelkit::diagnostics::{compare_models, csd_battery, permutation_cd, variable_matrix, CsdTestResult, ModelSummary};
use panelkit::factors::{fit_htt, Smoothing};
use panelkit::spatial::{fit_spatial, impacts, SpatialKind, SpatialOptions};
use panelkit::synth::{gen_factor, gen_spatial, gen_twfe, DgpConfig, Truth};
use panelkit::twfe::{fit_twfe, GroupedSlopes, ModelSpec};
use panelkit::typology::{choose_k, county_composite, cut_and_label, hclust_ward, standardize, KSelection, Typology};
use panelkit::{AdjacencyGraph, PanelDataset, SpatialWeights};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Estimator, ModelEntry, RunSpec, Subset};
use crate::error::{CliError, Result};
use crate::io::{self, csv_line, fmt_num, FeatureFile, FEATURE_COLUMNS};
use crate::manifest::{InputFile, RunManifest};
use crate::report::{self, ModelReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
    Text,
}

/// Directory produced by `ingest`.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn panel_path(&self) -> PathBuf {
        self.dir.join("panel.csv")
    }

    pub fn adjacency_path(&self) -> PathBuf {
        self.dir.join("adjacency.csv")
    }

    pub fn features_path(&self) -> PathBuf {
        self.dir.join("features.csv")
    }

    /// Copy of the FIPS remap applied at ingest, if any.
    pub fn remap_path(&self) -> PathBuf {
        self.dir.join("remap.csv")
    }

    pub fn load_remap(&self) -> Result<Option<BTreeMap<String, String>>> {
        let p = self.remap_path();
        if !p.exists() {
            return Ok(None);
        }
        io::read_remap(&p).map(Some)
    }

    pub fn fits_dir(&self) -> PathBuf {
        self.dir.join("fits")
    }

    pub fn load_panel(&self) -> Result<PanelDataset> {
        io::read_panel(&self.panel_path(), None)
    }

    pub fn load_graph(&self) -> Result<Option<AdjacencyGraph>> {
        let p = self.adjacency_path();
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(io::read_adjacency(&p, None)?.graph))
    }

    pub fn load_features(&self) -> Result<FeatureFile> {
        io::read_features(&self.features_path())
    }

    /// Hashes of the workspace files that exist.
    pub fn inputs(&self) -> Result<Vec<InputFile>> {
        [self.panel_path(), self.adjacency_path(), self.features_path(), self.remap_path()]
            .iter()
            .filter(|p| p.exists())
            .map(|p| InputFile::read(p))
            .collect()
    }
}

/// File-system friendly model id.
pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    s.trim_matches('-').to_string()
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<PathBuf> {
    let p = out.join("manifest.json");
    io::write_text(&p, &m.to_json())?;
    Ok(p)
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone)]
pub struct IngestArgs {
    pub panel: PathBuf,
    pub adjacency: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub remap: Option<PathBuf>,
    pub out: PathBuf,
}

/// Summary statistics of one variable over observed cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarSummary {
    pub name: String,
    pub n: usize,
    pub missing: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub p25: f64,
    pub p75: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics (R type 7).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(panel: &PanelDataset) -> Vec<VarSummary> {
    panel
        .column_names()
        .map(|name| {
            let col = panel.column(name).expect("listed column");
            let mut v: Vec<f64> = (0..col.len()).filter_map(|c| col.get(c)).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { f64::NAN };
            VarSummary {
                name: name.to_string(),
                n,
                missing: col.n_missing(),
                mean,
                sd,
                min: v.first().copied().unwrap_or(f64::NAN),
                p25: quantile(&v, 0.25),
                p75: quantile(&v, 0.75),
                max: v.last().copied().unwrap_or(f64::NAN),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub panel: PanelDataset,
    pub summary: Vec<VarSummary>,
    pub warnings: Vec<String>,
    pub manifest: RunManifest,
}

pub fn ingest(args: &IngestArgs) -> Result<IngestReport> {
    let remap = args.remap.as_deref().map(io::read_remap).transpose()?;
    let panel = io::read_panel(&args.panel, remap.as_ref())?;
    let universe: BTreeSet<String> = panel.entities().iter().cloned().collect();
    let mut warnings = Vec::new();
    let mut inputs = vec![InputFile::read(&args.panel)?];
    if let Some(r) = &args.remap {
        inputs.push(InputFile::read(r)?);
    }

    io::write_panel(&args.out.join("panel.csv"), &panel)?;
    if let Some(r) = &remap {
        io::write_remap(&args.out.join("remap.csv"), r)?;
    }

    if let Some(adj) = &args.adjacency {
        inputs.push(InputFile::read(adj)?);
        let parsed = io::read_adjacency(adj, Some(&universe))?;
        if parsed.dropped_pairs > 0 {
            warnings.push(format!("{} adjacency pairs reference FIPS outside the panel", parsed.dropped_pairs));
        }
        let present: BTreeSet<&String> = parsed.graph.nodes().iter().collect();
        let absent: Vec<&String> = universe.iter().filter(|e| !present.contains(e)).collect();
        if !absent.is_empty() {
            let list: Vec<&str> = absent.iter().map(|s| s.as_str()).collect();
            warnings.push(format!("{} panel FIPS absent from adjacency: {}", absent.len(), list.join(" ")));
        }
        io::write_adjacency(&args.out.join("adjacency.csv"), &parsed.graph)?;
    }

    if let Some(feat) = &args.features {
        inputs.push(InputFile::read(feat)?);
        let f = io::read_features(feat)?;
        let incomplete = f.features.iter().filter(|r| r.iter().any(|v| !v.is_finite())).count();
        if incomplete > 0 {
            warnings.push(format!("{incomplete} feature rows have missing indicators"));
        }
        io::write_features(&args.out.join("features.csv"), &f)?;
    }

    let summary = summarize(&panel);
    let mut s = csv_line(&["variable", "n", "missing", "mean", "sd", "min", "p25", "p75", "max"]);
    for v in &summary {
        s += &csv_line(&[
            v.name.clone(),
            v.n.to_string(),
            v.missing.to_string(),
            fmt_num(v.mean),
            fmt_num(v.sd),
            fmt_num(v.min),
            fmt_num(v.p25),
            fmt_num(v.p75),
            fmt_num(v.max),
        ]);
    }
    io::write_text(&args.out.join("validation.csv"), &s)?;
    io::write_text(&args.out.join("warnings.txt"), &warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    let manifest = RunManifest::new("ingest", inputs, None, BTreeMap::new(), BTreeMap::new());
    write_manifest(&args.out, &manifest)?;
    Ok(IngestReport { panel, summary, warnings, manifest })
}

// ---------------------------------------------------------------- estimate

#[derive(Debug, Clone)]
pub struct EstimateArgs {
    pub workspace: Workspace,
    pub spec: RunSpec,
    /// Overrides every model's sample.
    pub subset: Option<Subset>,
    pub seed: Option<u64>,
    pub sims: Option<usize>,
    pub flip_sign: bool,
    pub format: Format,
    /// Overrides every model's `groups` file.
    pub groups: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub reports: Vec<ModelReport>,
    pub manifest: RunManifest,
}

/// Panel after derivations and the year window.
pub fn prepare_panel(ws: &Workspace, spec: &RunSpec) -> Result<PanelDataset> {
    let mut panel = ws.load_panel()?;
    spec.derive(&mut panel)?;
    if let Some([a, b]) = spec.settings.years {
        panel = panel.restrict_years(a, b).map_err(CliError::Validation)?;
    }
    Ok(panel)
}

/// Row-normalized W over the panel entities; entities without neighbours get zero rows.
pub fn weights_for(graph: &AdjacencyGraph, panel: &PanelDataset) -> Result<SpatialWeights> {
    let keep: BTreeSet<&str> = panel.entities().iter().map(String::as_str).collect();
    let pairs: Vec<(&str, &str)> = graph.edges().filter(|(a, b)| keep.contains(a) && keep.contains(b)).collect();
    let nodes: Vec<&str> = panel.entities().iter().map(String::as_str).collect();
    let g = AdjacencyGraph::from_edges(&nodes, &pairs).map_err(CliError::Validation)?;
    g.row_normalize(panel.entities()).map_err(CliError::Validation)
}

struct ModelContext<'a> {
    panel: &'a PanelDataset,
    weights: Option<&'a SpatialWeights>,
    coal: &'a BTreeSet<String>,
    subset: Subset,
    groups: Option<BTreeMap<String, String>>,
    sims: usize,
    seed: u64,
}

fn model_spec(entry: &ModelEntry, ctx: &ModelContext) -> ModelSpec {
    let regs: Vec<&str> = entry.regressors.iter().map(String::as_str).collect();
    let mut spec = ModelSpec::new(entry.name.clone(), entry.dependent.clone(), &regs);
    spec.fe = entry.fe.iter().map(|&d| d.into()).collect();
    spec.cluster = entry.cluster.iter().map(|&d| d.into()).collect();
    let mut sample: Option<BTreeSet<String>> = (ctx.subset == Subset::Coal).then(|| ctx.coal.clone());
    if let Some(g) = &ctx.groups {
        let labelled: BTreeSet<String> = g.keys().cloned().collect();
        let base = sample.unwrap_or_else(|| ctx.panel.entities().iter().cloned().collect());
        sample = Some(base.intersection(&labelled).cloned().collect());
        spec.grouped = Some(GroupedSlopes { groups: g.clone(), vars: entry.grouped.clone() });
    }
    spec.sample = sample;
    spec
}

fn run_model(entry: &ModelEntry, ctx: &ModelContext) -> Result<ModelReport> {
    let spec = model_spec(entry, ctx);
    let subset = match ctx.subset {
        Subset::All => "all",
        Subset::Coal => "coal",
    };
    let est = |source| CliError::Estimation { model: entry.name.clone(), source };
    match entry.estimator {
        Estimator::Twfe => {
            let fit = fit_twfe(&spec, ctx.panel).map_err(est)?;
            Ok(ModelReport::from_twfe(entry, subset, &fit))
        }
        Estimator::Slm | Estimator::Sem | Estimator::Sarar => {
            let w = ctx.weights.ok_or_else(|| CliError::Spec(format!("model `{}` needs an adjacency file", entry.name)))?;
            let kind = match entry.estimator {
                Estimator::Slm => SpatialKind::Slm,
                Estimator::Sem => SpatialKind::Sem,
                _ => SpatialKind::Sarar,
            };
            let fit = fit_spatial(&spec, ctx.panel, w, kind, SpatialOptions::default()).map_err(est)?;
            let imp = if kind == SpatialKind::Sem { None } else { Some(impacts(&fit, ctx.sims, ctx.seed).map_err(est)?) };
            Ok(ModelReport::from_spatial(entry, subset, &fit, imp.as_ref()))
        }
        Estimator::Htt => {
            let d = entry.factors.unwrap_or(1);
            let smoothing = entry.kappa.map(Smoothing::Fixed).unwrap_or(Smoothing::Gcv);
            let fit = fit_htt(&spec, ctx.panel, d, smoothing).map_err(est)?;
            Ok(ModelReport::from_factor(entry, subset, &fit))
        }
    }
}

/// Per-fit summary saved next to its residuals for `diagnose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedFit {
    pub model: String,
    pub estimator: Estimator,
    pub dependent: String,
    pub subset: String,
    pub nobs: usize,
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub manifest: String,
}

impl SavedFit {
    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            name: self.model.clone(),
            dependent: self.dependent.clone(),
            nobs: self.nobs,
            log_likelihood: self.log_likelihood,
            aic: self.aic,
            bic: self.bic,
            n_params: self.n_params,
        }
    }
}

fn save_fit(ws: &Workspace, r: &ModelReport, manifest: &str) -> Result<()> {
    let dir = ws.fits_dir();
    let id = slug(&r.model);
    let mut s = csv_line(&["fips", "year", "residual"]);
    for (f, y, v) in &r.residuals {
        s += &csv_line(&[f.clone(), y.to_string(), fmt_num(*v)]);
    }
    io::write_text(&dir.join(format!("{id}.residuals.csv")), &s)?;
    let saved = SavedFit {
        model: r.model.clone(),
        estimator: r.estimator,
        dependent: r.dependent.clone(),
        subset: r.subset.clone(),
        nobs: r.nobs,
        log_likelihood: r.log_likelihood,
        aic: r.aic,
        bic: r.bic,
        n_params: r.n_params,
        manifest: manifest.into(),
    };
    io::write_text(&dir.join(format!("{id}.json")), &(serde_json::to_string_pretty(&saved).expect("serializes") + "\n"))
}

pub fn estimate(args: &EstimateArgs) -> Result<EstimateOutput> {
    let spec = &args.spec;
    if spec.models.is_empty() {
        return Err(CliError::Spec("no [[model]] entries".into()));
    }
    let panel = prepare_panel(&args.workspace, spec)?;
    let seed = args.seed.unwrap_or(spec.settings.seed);
    let sims = args.sims.unwrap_or(spec.settings.sims);
    let needs_coal = spec.models.iter().any(|m| args.subset.or(m.subset).or(spec.settings.subset) == Some(Subset::Coal));
    let coal = if needs_coal {
        panel.entities_ever_positive(&spec.settings.coal_variable).map_err(CliError::Validation)?
    } else {
        BTreeSet::new()
    };
    if needs_coal && coal.is_empty() {
        return Err(CliError::Validation(panelkit::Error::EmptySubset));
    }
    let needs_w = spec.models.iter().any(|m| matches!(m.estimator, Estimator::Slm | Estimator::Sem | Estimator::Sarar));
    let weights = if needs_w {
        let g = args
            .workspace
            .load_graph()?
            .ok_or_else(|| CliError::Spec("spatial models need an adjacency file in the workspace".into()))?;
        Some(weights_for(&g, &panel)?)
    } else {
        None
    };

    let mut inputs = args.workspace.inputs()?;
    let mut groups_by_model = Vec::new();
    let remap = args.workspace.load_remap()?;
    let mut group_warnings = Vec::new();
    for m in &spec.models {
        let path = m.groups.as_ref().map(|g| args.groups.clone().unwrap_or_else(|| PathBuf::from(g)));
        match path {
            Some(p) => {
                inputs.push(InputFile::read(&p)?);
                let mut labels = io::read_labels(&p)?;
                if let Some(r) = &remap {
                    let conflicts = io::remap_labels(&mut labels, r);
                    if !conflicts.is_empty() {
                        group_warnings.push(format!(
                            "consolidated FIPS with conflicting group labels left unlabelled: {}",
                            conflicts.join(" ")
                        ));
                    }
                }
                groups_by_model.push(Some(labels));
            }
            None => groups_by_model.push(None),
        }
    }
    let mut seeds = BTreeMap::new();
    let model_seed = |i: usize| seed.wrapping_add(i as u64);
    for (i, m) in spec.models.iter().enumerate() {
        if m.estimator == Estimator::Slm || m.estimator == Estimator::Sarar {
            seeds.insert(format!("impacts:{}", m.name), model_seed(i));
        }
    }
    let mut options = BTreeMap::new();
    options.insert("sims".into(), sims.to_string());
    options.insert("flip_sign".into(), args.flip_sign.to_string());
    if let Some(s) = args.subset {
        options.insert("subset".into(), format!("{s:?}").to_lowercase());
    }
    let manifest = RunManifest::new("estimate", inputs, Some(spec.to_toml()), seeds, options);
    let tag = manifest.short_hash().to_string();

    let results: Vec<Result<ModelReport>> = spec
        .models
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let ctx = ModelContext {
                panel: &panel,
                weights: weights.as_ref(),
                coal: &coal,
                subset: args.subset.or(m.subset).or(spec.settings.subset).unwrap_or(Subset::All),
                groups: groups_by_model[i].clone(),
                sims,
                seed: model_seed(i),
            };
            run_model(m, &ctx)
        })
        .collect();
    let mut reports: Vec<ModelReport> = results.into_iter().collect::<Result<_>>()?;
    for (r, g) in reports.iter_mut().zip(&groups_by_model) {
        if g.is_some() {
            r.warnings.extend(group_warnings.iter().cloned());
        }
    }

    let out = &args.out;
    match args.format {
        Format::Csv => {
            io::write_text(&out.join("coefficients.csv"), &report::coefficients_csv(&reports, &tag))?;
            io::write_text(&out.join("fit_stats.csv"), &report::fit_stats_csv(&reports, &tag))?;
            if reports.iter().any(|r| !r.impacts.is_empty()) {
                io::write_text(&out.join("impacts.csv"), &report::impacts_csv(&reports, &tag))?;
            }
        }
        Format::Json => {
            let doc = serde_json::json!({ "manifest": tag, "models": reports });
            io::write_text(&out.join("results.json"), &(serde_json::to_string_pretty(&doc).expect("serializes") + "\n"))?;
        }
        Format::Text => {}
    }
    io::write_text(&out.join("coefplot.csv"), &report::coefplot_csv(&reports, args.flip_sign, &tag))?;
    let mut text = report::regression_table(&reports, &tag);
    let imp = report::impacts_table(&reports, &tag);
    if !imp.is_empty() {
        text.push('\n');
        text.push_str(&imp);
    }
    io::write_text(&out.join("table.txt"), &text)?;
    for r in &reports {
        save_fit(&args.workspace, r, &tag)?;
    }
    write_manifest(out, &manifest)?;
    Ok(EstimateOutput { reports, manifest })
}

// ---------------------------------------------------------------- diagnose

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub workspace: Workspace,
    /// Model names (or their slugs) saved by `estimate`.
    pub fits: Vec<String>,
    /// Panel variables to test directly, after the optional spec's derivations.
    pub variables: Vec<String>,
    pub spec: Option<RunSpec>,
    pub subset: Option<Subset>,
    pub permutations: Option<usize>,
    pub seed: u64,
    /// Exit with the threshold code when any `|CD|` exceeds this.
    pub max_abs_cd: Option<f64>,
    pub format: Format,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DiagnoseOutput {
    pub tests: Vec<(String, CsdTestResult)>,
    pub comparison: Vec<(usize, ModelSummary)>,
    pub warnings: Vec<String>,
    pub manifest: RunManifest,
}

/// Residual grid of a saved fit, entities and years sorted.
pub fn load_residual_grid(path: &Path) -> Result<DMatrix<f64>> {
    let text = io::read_text(path)?;
    let mut cells = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(CliError::parse(path, format!("line {}: expected 3 fields", i + 1)));
        }
        let y: i32 = f[1].parse().map_err(|_| CliError::parse(path, format!("line {}: bad year", i + 1)))?;
        let v: f64 = f[2].parse().map_err(|_| CliError::parse(path, format!("line {}: bad residual", i + 1)))?;
        cells.push((f[0].to_string(), y, v));
    }
    let ids: BTreeSet<&str> = cells.iter().map(|c| c.0.as_str()).collect();
    let years: BTreeSet<i32> = cells.iter().map(|c| c.1).collect();
    let id_ix: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let yr_ix: BTreeMap<i32, usize> = years.iter().enumerate().map(|(i, y)| (*y, i)).collect();
    let mut g = DMatrix::from_element(ids.len(), years.len(), f64::NAN);
    for (f, y, v) in &cells {
        g[(id_ix[f.as_str()], yr_ix[y])] = *v;
    }
    Ok(g)
}

fn find_fit(ws: &Workspace, id: &str) -> Result<(SavedFit, PathBuf)> {
    let s = slug(id);
    let json = ws.fits_dir().join(format!("{s}.json"));
    let text = io::read_text(&json).map_err(|_| CliError::Spec(format!("no saved fit `{id}` in the workspace")))?;
    let saved: SavedFit = serde_json::from_str(&text).map_err(|e| CliError::parse(&json, e))?;
    Ok((saved, ws.fits_dir().join(format!("{s}.residuals.csv"))))
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<DiagnoseOutput> {
    let ws = &args.workspace;
    let mut inputs = ws.inputs()?;
    let mut tests: Vec<(String, CsdTestResult)> = Vec::new();
    let mut warnings = Vec::new();
    let mut run = |label: String, e: &DMatrix<f64>, tests: &mut Vec<(String, CsdTestResult)>| -> Result<()> {
        for t in csd_battery(e).map_err(CliError::Diagnostics)? {
            warnings.extend(t.warnings.iter().map(|w| format!("{label}: {w}")));
            tests.push((label.clone(), t));
        }
        if let Some(b) = args.permutations {
            let t = permutation_cd(e, b, args.seed).map_err(CliError::Diagnostics)?;
            tests.push((label.clone(), t));
        }
        Ok(())
    };

    if !args.variables.is_empty() {
        let spec = args.spec.clone().unwrap_or_default();
        let mut panel = prepare_panel(ws, &spec)?;
        if args.subset.or(spec.settings.subset) == Some(Subset::Coal) {
            panel = panel.coal_subset(&spec.settings.coal_variable).map_err(CliError::Validation)?;
        }
        for v in &args.variables {
            let e = variable_matrix(&panel, v).map_err(CliError::Validation)?;
            run(format!("variable {v}"), &e, &mut tests)?;
        }
    }
    let mut summaries = Vec::new();
    for id in &args.fits {
        let (saved, resid) = find_fit(ws, id)?;
        inputs.push(InputFile::read(&resid)?);
        let e = load_residual_grid(&resid)?;
        run(format!("residuals {}", saved.model), &e, &mut tests)?;
        summaries.push(saved.summary());
    }
    let comparison = if summaries.len() >= 2 {
        match compare_models(&summaries) {
            Ok(rows) => rows.into_iter().map(|r| (r.rank, r.summary)).collect(),
            Err(e) => {
                warnings.push(format!("model comparison skipped: {e}"));
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };

    let mut seeds = BTreeMap::new();
    if args.permutations.is_some() {
        seeds.insert("permutation".into(), args.seed);
    }
    let mut options = BTreeMap::new();
    options.insert("fits".into(), args.fits.join(";"));
    options.insert("variables".into(), args.variables.join(";"));
    let manifest = RunManifest::new("diagnose", inputs, args.spec.as_ref().map(RunSpec::to_toml), seeds, options);
    let tag = manifest.short_hash().to_string();
    let out = &args.out;
    let mut cmp = csv_line(&["rank", "model", "nobs", "log_likelihood", "aic", "bic", "n_params", "manifest"]);
    for (rank, s) in &comparison {
        cmp += &csv_line(&[
            rank.to_string(),
            s.name.clone(),
            s.nobs.to_string(),
            fmt_num(s.log_likelihood),
            fmt_num(s.aic),
            fmt_num(s.bic),
            s.n_params.to_string(),
            tag.clone(),
        ]);
    }
    match args.format {
        Format::Csv => {
            io::write_text(&out.join("csd.csv"), &report::csd_csv(&tests, &tag))?;
            if !comparison.is_empty() {
                io::write_text(&out.join("comparison.csv"), &cmp)?;
            }
        }
        Format::Json => {
            let rows: Vec<_> = tests
                .iter()
                .map(|(input, t)| {
                    serde_json::json!({
                        "input": input, "test": t.method.label(), "statistic": t.statistic,
                        "p_value": t.p_value, "dof": t.dof, "mean_rho": t.mean_rho,
                        "mean_abs_rho": t.mean_abs_rho, "n_pairs": t.n_pairs,
                    })
                })
                .collect();
            let cmp_rows: Vec<_> = comparison
                .iter()
                .map(|(rank, s)| serde_json::json!({"rank": rank, "model": s.name, "aic": s.aic, "bic": s.bic, "log_likelihood": s.log_likelihood}))
                .collect();
            let doc = serde_json::json!({"manifest": tag, "tests": rows, "comparison": cmp_rows, "warnings": warnings});
            io::write_text(&out.join("diagnostics.json"), &(serde_json::to_string_pretty(&doc).expect("serializes") + "\n"))?;
        }
        Format::Text => {}
    }
    io::write_text(&out.join("csd.txt"), &report::csd_table(&tests, &tag))?;
    write_manifest(out, &manifest)?;
    if let Some(limit) = args.max_abs_cd {
        let worst = tests
            .iter()
            .filter(|(_, t)| t.method == panelkit::diagnostics::CsdMethod::PesaranCd)
            .map(|(l, t)| (l, t.statistic.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((label, cd)) = worst {
            if cd > limit {
                return Err(CliError::Threshold(format!("|CD| = {cd:.3} for {label} exceeds {limit}")));
            }
        }
    }
    Ok(DiagnoseOutput { tests, comparison, warnings, manifest })
}

// ---------------------------------------------------------------- cluster

#[derive(Debug, Clone)]
pub struct ClusterArgs {
    pub workspace: Workspace,
    pub subset: Subset,
    pub coal_variable: String,
    /// Years over which the coal rule is evaluated.
    pub years: Option<[i32; 2]>,
    pub k_max: usize,
    pub reference_sets: usize,
    pub seed: u64,
    /// Fixed number of types; otherwise chosen from the criteria.
    pub k: Option<usize>,
    pub format: Format,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ClusterOutput {
    pub selection: KSelection,
    pub k: usize,
    pub rule: String,
    pub typology: Typology,
    pub manifest: RunManifest,
}

/// Unanimous choice, else a two-of-three majority, else the gap statistic.
pub fn resolve_k(sel: &KSelection) -> (usize, String) {
    let (e, s, g) = (sel.elbow_k, sel.silhouette_k, sel.gap_k);
    if sel.agree() {
        (e, "unanimous".into())
    } else if e == s || e == g {
        (e, "majority".into())
    } else if s == g {
        (s, "majority".into())
    } else {
        (g, "gap statistic (no majority)".into())
    }
}

pub fn cluster(args: &ClusterArgs) -> Result<ClusterOutput> {
    let ws = &args.workspace;
    let file = ws.load_features()?;
    let keep: Option<BTreeSet<String>> = match args.subset {
        Subset::All => None,
        Subset::Coal => {
            let mut panel = ws.load_panel()?;
            if let Some([a, b]) = args.years {
                panel = panel.restrict_years(a, b).map_err(CliError::Validation)?;
            }
            let mut coal = panel.entities_ever_positive(&args.coal_variable).map_err(CliError::Validation)?;
            // features keep source FIPS, so consolidated coal codes expand to their parts
            if let Some(r) = ws.load_remap()? {
                coal.extend(r.iter().filter(|(_, to)| coal.contains(*to)).map(|(from, _)| from.clone()).collect::<Vec<_>>());
            }
            Some(coal)
        }
    };
    let rows: Vec<usize> = (0..file.ids.len()).filter(|&i| keep.as_ref().is_none_or(|k| k.contains(&file.ids[i]))).collect();
    let ids: Vec<String> = rows.iter().map(|&i| file.ids[i].clone()).collect();
    let names: Vec<String> = FEATURE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let raw = DMatrix::from_fn(rows.len(), 6, |r, j| file.features[rows[r]][j]);
    let table = standardize(&ids, &names, &raw).map_err(CliError::Validation)?;
    let row_of: BTreeMap<&str, usize> = rows.iter().map(|&i| (file.ids[i].as_str(), i)).collect();
    let descriptors: Vec<(String, Vec<f64>)> = file
        .descriptor_names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), table.ids.iter().map(|id| file.descriptors[row_of[id.as_str()]][j]).collect()))
        .collect();

    let dendro = hclust_ward(&table.z);
    let selection =
        choose_k(&table.z, &dendro, args.k_max, args.reference_sets, args.seed).map_err(CliError::Diagnostics)?;
    let (k, rule) = match args.k {
        Some(k) => (k, "fixed".to_string()),
        None => resolve_k(&selection),
    };
    let typology = cut_and_label(&dendro, k, &table, &county_composite(), &descriptors).map_err(CliError::Diagnostics)?;

    let mut inputs = vec![InputFile::read(&ws.features_path())?];
    if args.subset == Subset::Coal {
        inputs.push(InputFile::read(&ws.panel_path())?);
        if ws.remap_path().exists() {
            inputs.push(InputFile::read(&ws.remap_path())?);
        }
    }
    let mut seeds = BTreeMap::new();
    seeds.insert("gap".into(), args.seed);
    let mut options = BTreeMap::new();
    options.insert("subset".into(), format!("{:?}", args.subset).to_lowercase());
    options.insert("k_max".into(), args.k_max.to_string());
    options.insert("reference_sets".into(), args.reference_sets.to_string());
    options.insert("k".into(), args.k.map(|k| k.to_string()).unwrap_or_default());
    let manifest = RunManifest::new("cluster", inputs, None, seeds, options);
    let tag = manifest.short_hash().to_string();
    let out = &args.out;

    let mut curves = csv_line(&["k", "wss", "silhouette", "gap", "gap_se", "manifest"]);
    for k in 1..=selection.k_max {
        curves += &csv_line(&[
            k.to_string(),
            fmt_num(selection.wss[k - 1]),
            selection.silhouette[k - 1].map(fmt_num).unwrap_or_default(),
            fmt_num(selection.gap[k - 1]),
            fmt_num(selection.gap_se[k - 1]),
            tag.clone(),
        ]);
    }
    let mut labels = csv_line(&["fips", "type"]);
    for (id, l) in typology.ids.iter().zip(&typology.labels) {
        labels += &csv_line(&[id.clone(), format!("Type {l}")]);
    }
    let mut head = vec!["type".to_string(), "size".into(), "composite".into()];
    head.extend(typology.feature_names.iter().cloned());
    head.extend(typology.descriptor_names.iter().cloned());
    head.push("manifest".into());
    let mut profiles = csv_line(&head);
    for p in &typology.profiles {
        let mut row = vec![format!("Type {}", p.label), p.size.to_string(), fmt_num(p.composite)];
        row.extend(p.means.iter().map(|v| fmt_num(*v)));
        row.extend(p.descriptor_means.iter().map(|v| fmt_num(*v)));
        row.push(tag.clone());
        profiles += &csv_line(&row);
    }
    let mut dend = csv_line(&["step", "a", "b", "height", "size"]);
    for (i, m) in dendro.merges.iter().enumerate() {
        dend += &csv_line(&[(i + 1).to_string(), m.a.to_string(), m.b.to_string(), fmt_num(m.height), m.size.to_string()]);
    }
    // labels always go out as CSV: `estimate` consumes them.
    io::write_text(&out.join("labels.csv"), &labels)?;
    match args.format {
        Format::Csv => {
            io::write_text(&out.join("curves.csv"), &curves)?;
            io::write_text(&out.join("profiles.csv"), &profiles)?;
            io::write_text(&out.join("dendrogram.csv"), &dend)?;
        }
        Format::Json => {
            let doc = serde_json::json!({
                "manifest": tag,
                "k": k, "rule": rule,
                "elbow_k": selection.elbow_k, "silhouette_k": selection.silhouette_k, "gap_k": selection.gap_k,
                "wss": selection.wss, "silhouette": selection.silhouette, "gap": selection.gap, "gap_se": selection.gap_se,
                "sizes": typology.sizes(),
            });
            io::write_text(&out.join("cluster.json"), &(serde_json::to_string_pretty(&doc).expect("serializes") + "\n"))?;
        }
        Format::Text => {}
    }
    let mut summary = format!(
        "{} counties, {} excluded for missing indicators\n{}\nchosen k = {k} ({rule})\n",
        table.len(),
        table.excluded.len(),
        selection.note()
    );
    for p in &typology.profiles {
        summary.push_str(&format!("Type {}: {} counties, composite {:.3}\n", p.label, p.size, p.composite));
    }
    summary.push_str(&format!("manifest: {tag}\n"));
    io::write_text(&out.join("summary.txt"), &summary)?;
    write_manifest(out, &manifest)?;
    Ok(ClusterOutput { selection, k, rule, typology, manifest })
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Dgp {
    Twfe,
    Spatial,
    Factor,
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub dgp: Dgp,
    pub config: DgpConfig,
    /// Torus shape for the spatial DGP; `rows * cols` entities.
    pub rows: usize,
    pub cols: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
struct TruthDoc<'a> {
    dgp: String,
    beta: &'a [f64],
    rho: f64,
    delta: f64,
    alpha: &'a [f64],
    gamma: &'a [f64],
    seed: u64,
}

pub fn synth(args: &SynthArgs) -> Result<(PanelDataset, Truth)> {
    let cfg = &args.config;
    let (panel, truth) = match args.dgp {
        Dgp::Twfe => gen_twfe(cfg),
        Dgp::Factor => gen_factor(cfg),
        Dgp::Spatial => {
            let g = AdjacencyGraph::torus(args.rows, args.cols);
            io::write_adjacency(&args.out.join("adjacency.csv"), &g)?;
            let w = g.row_normalize(g.nodes()).map_err(CliError::Validation)?;
            gen_spatial(cfg, &w)
        }
    }
    .map_err(CliError::Validation)?;
    io::write_panel(&args.out.join("panel.csv"), &panel)?;
    let doc = TruthDoc {
        dgp: format!("{:?}", args.dgp).to_lowercase(),
        beta: &truth.beta,
        rho: truth.rho,
        delta: truth.delta,
        alpha: &truth.alpha,
        gamma: &truth.gamma,
        seed: cfg.seed,
    };
    io::write_text(&args.out.join("truth.json"), &(serde_json::to_string_pretty(&doc).expect("serializes") + "\n"))?;
    Ok((panel, truth))
}
